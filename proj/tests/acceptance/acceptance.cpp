// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   acceptance --cli build/nkb --config configs/desk.conf --work /tmp/nkb-acceptance
//
// Criteria 1-4 run in process. Criteria 5-9 drive the command-line tool
// through the desk pipeline twice (the second run checks determinism) and
// read back its checkpoints and reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "nkb/checkpoint.hpp"
#include "nkb/config.hpp"
#include "nkb/model.hpp"
#include "nkb/pipeline.hpp"
#include "nkb/probes.hpp"
#include "nkb/surgery.hpp"
#include "nkb/tokens.hpp"
#include "nkb/training.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace nkb;
using nkb::testing::check_directional;
using nkb::testing::check_gradients;
using nkb::testing::GradCheck;
using nkb::testing::random_off_kink;
using nkb::testing::random_tensor;
using nkb::testing::weighted_sum;

namespace {

using Clock = std::chrono::steady_clock;

double seconds(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

// --- 1. Memory-view equivalence ---------------------------------------------

void memory_view() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = std::vector<std::size_t>{4, 8, 16}[trial % 3];
    const std::size_t h = std::uniform_int_distribution<std::size_t>(1, 8 * d)(rng);
    const Activation act = trial % 2 ? Activation::gelu : Activation::relu;
    FfnParams p{random_tensor({h, d}, rng), random_tensor({h, d}, rng)};
    Tensor x = random_tensor({1, d}, rng, -2, 2);
    const Tensor dense = ffn_forward(x, p, act);
    const MemoryReadout mem = ffn_memory_forward(x.values(), p, act);
    for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(dense.at(0, c) - mem.output[c]));
  }
  const double t = seconds(t0);
  report(1, "memory-view equivalence", worst <= 1e-9 && t < 5.0,
         fmt("max |dense - memory view| = %.3g over 100 trials (<= 1e-9), %.2f s (< 5 s)", worst, t));
}

// --- 2. Mount neutrality ----------------------------------------------------

void mount_neutrality() {
  std::mt19937_64 rng(202);
  int identical = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.num_layers = 1 + trial % 2;
    c.model_dim = std::vector<std::size_t>{8, 16, 32}[trial % 3];
    c.num_heads = 2;
    c.vocab_size = 20 + trial;
    c.max_seq_len = 12;
    c.activation = trial % 2 ? Activation::gelu : Activation::relu;
    c.final_norm = trial % 4 != 3;
    Seq2SeqModel m(c, 1000 + trial);
    std::uniform_int_distribution<int> tok(kNumSpecialTokens, static_cast<int>(c.vocab_size) - 1);
    std::vector<int> src(3 + trial % 6), tgt(1 + trial % 5);
    for (int& x : src) x = tok(rng);
    for (int& x : tgt) x = tok(rng);
    const Tensor before = forward_seq2seq(m, src, tgt).logits;
    m.mount_nkb(NkbSite{}, 4 + trial, NkbInit{0.02, 0.0, static_cast<std::uint64_t>(trial)});
    const Tensor after = forward_seq2seq(m, src, tgt).logits;
    const bool same = before.values().size() == after.values().size() &&
                      std::memcmp(before.values().data(), after.values().data(),
                                  before.values().size() * sizeof(double)) == 0;
    identical += same;
  }
  report(2, "mount neutrality", identical == 20,
         fmt("%d/20 random models give bit-identical logits after a zero-value mount", identical));
}

// --- 3. Gradient suite ------------------------------------------------------

struct GradCase {
  std::string name;
  std::function<GradCheck(std::mt19937_64&)> run;
};

std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  auto push = [&](std::string name, std::function<GradCheck(std::mt19937_64&)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };
  push("matmul", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng);
    return check_gradients([&] { return weighted_sum(matmul(a, b), w); }, {a, b});
  });
  push("matmul_transposed", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng), w = random_tensor({3, 5}, rng);
    return check_gradients([&] { return weighted_sum(matmul_transposed(a, b), w); }, {a, b});
  });
  push("add", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(add(a, b), w); }, {a, b});
  });
  push("mul", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(mul(a, b), w); }, {a, b});
  });
  push("scale", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(scale(a, -1.7), w); }, {a});
  });
  push("sum", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng);
    return check_gradients([&] { return sum(mul(a, a)); }, {a});
  });
  push("row_softmax", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng, -2, 2), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(row_softmax(a), w); }, {a});
  });
  push("relu", [](std::mt19937_64& rng) {
    Tensor a = random_off_kink({3, 4}, rng), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(act_func(a, Activation::relu), w); }, {a});
  });
  push("gelu", [](std::mt19937_64& rng) {
    Tensor a = random_tensor({3, 4}, rng, -3, 3), w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(act_func(a, Activation::gelu), w); }, {a});
  });
  push("layer_norm", [](std::mt19937_64& rng) {
    Tensor x = random_tensor({3, 4}, rng, -3, 3), g = random_tensor({4}, rng, 0.5, 1.5);
    Tensor w = random_tensor({3, 4}, rng);
    return check_gradients([&] { return weighted_sum(layer_norm(x, g), w); }, {x, g});
  });
  push("embedding", [](std::mt19937_64& rng) {
    Tensor table = random_tensor({6, 4}, rng), w = random_tensor({3, 4}, rng);
    std::vector<int> ids{1, 4, 1};
    return check_gradients([&] { return weighted_sum(embedding(table, ids), w); }, {table});
  });
  push("cross_entropy", [](std::mt19937_64& rng) {
    Tensor logits = random_tensor({4, 6}, rng, -2, 2);
    std::vector<int> targets{1, 0, 5, 3};
    return check_gradients([&] { return cross_entropy(logits, targets, 0); }, {logits});
  });
  push("dropout", [](std::mt19937_64& rng) {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({3, 4}, rng);
    const std::uint64_t seed = rng();
    return check_gradients(
        [&] {
          std::mt19937_64 mask(seed);
          return weighted_sum(dropout(x, 0.3, mask), w);
        },
        {x});
  });
  push("attention", [](std::mt19937_64& rng) {
    Tensor q = random_tensor({5, 4}, rng), k = random_tensor({7, 4}, rng), v = random_tensor({7, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    std::vector<AttentionSegment> segs{{0, 3, 0, 3}, {3, 2, 3, 4}};
    return check_gradients([&] { return weighted_sum(attention(q, k, v, segs, 2, false), w); }, {q, k, v});
  });
  push("causal attention", [](std::mt19937_64& rng) {
    Tensor q = random_tensor({5, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    std::vector<AttentionSegment> segs{{0, 3, 0, 3}, {3, 2, 3, 2}};
    return check_gradients([&] { return weighted_sum(attention(q, k, v, segs, 2, true), w); }, {q, k, v});
  });
  push("seq2seq loss", [](std::mt19937_64& rng) {
    static int trial = 0;
    ModelConfig c;
    c.num_layers = 1;
    c.model_dim = 8;
    c.num_heads = 2;
    c.vocab_size = 12;
    c.max_seq_len = 10;
    // Smooth activation: a ReLU kink inside the +-h stencil breaks the
    // finite-difference oracle. ReLU itself is checked element-wise above.
    c.activation = Activation::gelu;
    c.nkb_dim = 3;
    Seq2SeqModel m(c, static_cast<std::uint64_t>(trial++));
    std::uniform_real_distribution<double> val(-0.3, 0.3);
    for (double& x : m.nkb().w2.values()) x = val(rng);
    std::uniform_int_distribution<int> tok(kNumSpecialTokens, 11);
    std::vector<SeqPair> batch{{{tok(rng), tok(rng), tok(rng), tok(rng)}, {kBosId, tok(rng)}},
                               {{tok(rng), tok(rng), tok(rng)}, {kBosId, tok(rng), tok(rng)}}};
    std::vector<int> labels{tok(rng), tok(rng), tok(rng), tok(rng), tok(rng)};
    std::vector<Tensor> params;
    for (auto& p : m.parameters()) params.push_back(p.tensor);
    return check_directional(
        [&] { return cross_entropy(forward_batch(m, batch, {0.0, 0.0, nullptr, false}).logits, labels, kPadId); },
        params, rng);
  });
  return cases;
}

void gradient_suite() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  std::string worst_name, failed;
  std::size_t instances = 0;
  const auto cases = grad_cases();
  for (const auto& c : cases) {
    double case_worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      case_worst = std::max(case_worst, c.run(rng).max_rel_err);
      ++instances;
    }
    if (case_worst > 1e-4) failed += (failed.empty() ? "" : ", ") + c.name;
    if (case_worst >= worst) {
      worst = case_worst;
      worst_name = c.name;
    }
  }
  report(3, "gradient suite", failed.empty(),
         fmt("%zu ops x 10 instances, worst rel. err %.2g (%s), limit 1e-4%s", cases.size(), worst,
             worst_name.c_str(), failed.empty() ? "" : ("; failing: " + failed).c_str()));
}

// --- 4. Freeze integrity ----------------------------------------------------

void freeze_integrity(const RunConfig& cfg) {
  const Dataset ds = generate_dataset(cfg);
  Seq2SeqModel m = new_base_model(cfg, ds);
  ensure_mounted(m, cfg);
  const auto before = parameter_digests(m);
  TrainConfig tc = cfg.inject;
  tc.max_steps = 1000;
  inject_knowledge(m, ssm_examples(ds.ssm_new, ds.vocab), tc);
  const auto after = parameter_digests(m);
  std::size_t frozen_equal = 0, frozen = 0, nkb_changed = 0, nkb = 0;
  for (const auto& [name, digest] : before) {
    if (name.rfind("nkb.", 0) == 0) {
      ++nkb;
      nkb_changed += after.at(name) != digest;
    } else {
      ++frozen;
      frozen_equal += after.at(name) == digest;
    }
  }
  report(4, "freeze integrity", frozen_equal == frozen && nkb_changed == nkb && nkb == 2,
         fmt("after 1000 injection steps %zu/%zu base blocks unchanged, %zu/%zu NKB blocks changed",
             frozen_equal, frozen, nkb_changed, nkb));
}

// --- Pipeline driver ----------------------------------------------------------

struct Driver {
  std::string cli;
  std::string config;
  fs::path run;
  fs::path logs;

  double step(const std::string& args) {
    const std::string name = args.substr(0, args.find(' '));
    const fs::path log = logs / (run.filename().string() + "." + name + ".log");
    const std::string cmd = "\"" + cli + "\" " + args + " --config \"" + config + "\" --out-dir \"" +
                            run.string() + "\" --threads 1 > \"" + log.string() + "\" 2>&1";
    const auto t0 = Clock::now();
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw std::runtime_error("'" + cmd + "' failed; see " + log.string());
    return seconds(t0);
  }
};

struct RunTimes {
  double core = 0.0;  // gen-data, pretrain, inject, finetune, eval
  double sweep = 0.0;
  double total = 0.0;
};

RunTimes run_pipeline(Driver& d) {
  RunTimes t;
  const auto t0 = Clock::now();
  fs::remove_all(d.run);
  t.core += d.step("gen-data");
  t.core += d.step("pretrain");
  d.step("finetune --checkpoint \"" + (d.run / "pretrain.ckpt").string() + "\" --name baseline");
  d.step("eval --checkpoint \"" + (d.run / "baseline.ckpt").string() + "\" --name baseline-eval");
  d.step("eval --checkpoint \"" + (d.run / "pretrain.ckpt").string() + "\" --name pretrain-eval");
  t.core += d.step("inject");
  t.core += d.step("finetune");
  t.core += d.step("eval");
  d.step("probe-values");
  d.step("probe-keys");
  t.sweep = d.step("sweep");
  d.step("proxy");
  t.total = seconds(t0);
  return t;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return nlohmann::json::parse(in);
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

// --- 5. Injection efficacy --------------------------------------------------

void injection_efficacy(const fs::path& run, const RunTimes& t) {
  const auto pre = read_json(run / "pretrain-eval.json");
  const auto baseline = read_json(run / "baseline-eval.json");
  const auto post = read_json(run / "eval.json");
  const double new_before = baseline["new"]["em"];
  const double new_after = post["new"]["em"];
  const double base_before = baseline["base"]["em"];
  const double base_after = post["base"]["em"];
  const double drop = base_before - base_after;
  const bool pass = new_before <= 5.0 && new_after >= 90.0 && drop <= 5.0 && t.core <= 900.0;
  report(5, "injection efficacy", pass,
         fmt("new-fact EM %.1f%% without injection (<= 5), %.1f%% after injection + fine-tuning "
             "(>= 90); base EM %.1f%% -> %.1f%% (drop %.1f <= 5; pretrained %.1f%%); %.0f s (<= 900)",
             new_before, new_after, base_before, base_after, drop,
             static_cast<double>(pre["base"]["em"]), t.core));
}

// --- 6. LM preservation -----------------------------------------------------

void lm_preservation(const fs::path& run) {
  const auto j = read_json(run / "proxy.json");
  const double base = j["base"], zero = j["mounted_zero"], injected = j["injected"];
  const bool pass = base == zero && std::abs(injected - base) <= 1.0;
  report(6, "LM preservation", pass,
         fmt("%s accuracy: base %.1f%%, zero-init mount %.1f%% (identical), injected %.1f%% (within 1 point)",
             j["task"].get<std::string>().c_str(), base, zero, injected));
}

// --- 7. Surgery sweep -------------------------------------------------------

void surgery_sweep(const fs::path& run, const RunConfig& cfg, const RunTimes& t) {
  const auto rows = read_jsonl(run / "sweep.jsonl");
  bool monotone = true, feasible = false;
  std::size_t edits = 0, locality_failures = 0;
  double prev = -1.0;
  std::string best;
  for (const auto& r : rows) {
    const double s = r["success_rate"], dr = r["destruction_rate"];
    edits = r["edits"];
    locality_failures += r["locality_failures"].get<std::size_t>();
    monotone = monotone && s >= prev;
    prev = s;
    if (s >= 80.0 && dr <= 10.0 && !feasible) {
      feasible = true;
      best = fmt("lambda %.2f: success %.1f%%, destruction %.1f%%", static_cast<double>(r["lambda"]), s, dr);
    }
  }
  // Independent locality check: one fresh copy per edit at the middle of
  // the grid, compared block by block against the input model.
  const Dataset ds = read_dataset(run / "data");
  const Seq2SeqModel m = restore_model(load_checkpoint_file((run / "finetune.ckpt").string()));
  const auto cases = build_desk_edits(m, cfg, ds);
  std::size_t single_row = 0;
  for (const auto& e : cases) {
    Seq2SeqModel copy = m.clone();
    apply_surgery(copy, SurgeryOp{e.slot, 0.05, e.original, e.target});
    single_row += locality_check(m, copy).single_row();
  }
  const bool pass = rows.size() == 5 && edits >= 30 && monotone && feasible &&
                    locality_failures == 0 && single_row == cases.size() && t.sweep <= 300.0;
  std::string curve;
  for (const auto& r : rows) curve += fmt("%s%.0f", curve.empty() ? "" : "/", static_cast<double>(r["success_rate"]));
  report(7, "surgery sweep", pass,
         fmt("%zu edits; success %% over the grid %s (%s); %s; one value row changed in %zu/%zu edits; "
             "%.0f s (<= 300)",
             edits, curve.c_str(), monotone ? "non-decreasing" : "decreasing somewhere",
             feasible ? best.c_str() : "no lambda with success >= 80% and destruction <= 10%",
             single_row, cases.size(), t.sweep));
}

// --- 8. Probe validity ------------------------------------------------------

void probe_validity(const fs::path& run, const RunConfig& cfg) {
  const Dataset ds = read_dataset(run / "data");
  const Seq2SeqModel m = restore_model(load_checkpoint_file((run / "finetune.ckpt").string()));

  double worst_mass = 0.0;
  const auto& nkb = m.nkb();
  for (std::size_t s = 0; s < nkb.slots(); ++s) {
    const auto row = nkb.w2.values().subspan(s * nkb.w2.cols(), nkb.w2.cols());
    const auto p = project_value(row, m.embedding());
    worst_mass = std::max(worst_mass, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
  }

  const KeyProbe keys = run_key_probe(m, cfg, ds);
  std::size_t matched = 0;
  for (std::size_t k = 0; k < keys.matrix.cols; ++k) {
    std::vector<std::size_t> order(keys.matrix.rows);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return keys.matrix.at(a, k) > keys.matrix.at(b, k);
    });
    const KeyReport r = top_triggering(keys.matrix, k, cfg.probe_top_m);
    bool same = r.top.size() == std::min(cfg.probe_top_m, order.size());
    for (std::size_t i = 0; same && i < r.top.size(); ++i) {
      same = r.top[i].question == order[i] && r.top[i].weight == keys.matrix.at(order[i], k);
    }
    matched += same;
  }

  const ValueProbe values = run_value_probe(m, cfg, ds);
  const bool pass = worst_mass <= 1e-9 && matched == keys.matrix.cols &&
                    keys.cohesion > keys.shuffled_cohesion && values.entity_fraction >= 0.6;
  report(8, "probe validity",
         pass,
         fmt("max |sum p - 1| = %.2g over %zu slots; top-triggering matches the sort oracle on %zu/%zu "
             "columns; cohesion %.3f vs shuffled %.3f over %zu active keys; entity top-token fraction "
             "%.1f%% over %zu slots (>= 60)",
             worst_mass, nkb.slots(), matched, keys.matrix.cols, keys.cohesion, keys.shuffled_cohesion,
             keys.active.size(), 100.0 * values.entity_fraction, values.reports.size()));
}

// --- 9. Determinism ---------------------------------------------------------

std::string read_bytes(const fs::path& p) { return read_text_file(p); }

// Metric lines carry the wall-clock time of each step; everything else in
// them must repeat.
std::string strip_wall_time(const std::string& text) {
  static const std::regex wall(",\"wall_time\":[0-9.eE+-]+");
  return std::regex_replace(text, wall, "");
}

void determinism(const fs::path& first, const fs::path& second) {
  std::size_t files = 0, identical = 0;
  std::string mismatched;
  for (const auto& entry : fs::recursive_directory_iterator(first)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), first);
    ++files;
    const fs::path other = second / rel;
    bool same = fs::exists(other);
    if (same) {
      std::string a = read_bytes(entry.path()), b = read_bytes(other);
      if (rel.string().ends_with(".metrics.jsonl")) {
        a = strip_wall_time(a);
        b = strip_wall_time(b);
      }
      same = a == b;
    }
    identical += same;
    if (!same) mismatched += (mismatched.empty() ? "" : ", ") + rel.string();
  }
  std::size_t second_files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(second)) second_files += entry.is_regular_file();
  const bool pass = files > 0 && identical == files && second_files == files;
  report(9, "determinism", pass,
         fmt("%zu/%zu checkpoints, data files and reports byte-identical across two runs "
             "(metric wall times excluded)%s",
             identical, files, mismatched.empty() ? "" : ("; differing: " + mismatched).c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the knowledge-bank lab"};
  std::string cli, config, work = "nkb-acceptance";
  bool skip_pipeline = false;
  app.add_option("--cli", cli, "path to the nkb tool")->required();
  app.add_option("--config", config, "desk configuration")->required();
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  app.add_flag("--skip-pipeline", skip_pipeline, "only run criteria 1-4");
  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = RunConfig::from_map(parse_config_file(config), world_keys());
    memory_view();
    mount_neutrality();
    gradient_suite();
    freeze_integrity(cfg);
    if (!skip_pipeline) {
      Driver d{fs::absolute(cli).string(), fs::absolute(config).string(), fs::absolute(work) / "run",
               fs::absolute(work) / "logs"};
      fs::create_directories(d.logs);
      const RunTimes t = run_pipeline(d);
      injection_efficacy(d.run, t);
      lm_preservation(d.run);
      surgery_sweep(d.run, cfg, t);
      probe_validity(d.run, cfg);
      const fs::path first = fs::absolute(work) / "run-first";
      fs::remove_all(first);
      fs::rename(d.run, first);
      run_pipeline(d);
      determinism(first, d.run);
    }
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
