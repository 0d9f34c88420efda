// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// nkb: command-line driver for the knowledge-bank lab.
//
//   nkb gen-data --config configs/desk.conf --out-dir run
//   nkb pretrain --config configs/desk.conf --out-dir run
//   nkb inject   --config configs/desk.conf --out-dir run
//   nkb finetune --config configs/desk.conf --out-dir run
//   nkb eval | probe-values | probe-keys | sweep | proxy ...
//   nkb run      (everything above, in order)
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric divergence.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "nkb/checkpoint.hpp"
#include "nkb/config.hpp"
#include "nkb/errors.hpp"
#include "nkb/pipeline.hpp"

namespace fs = std::filesystem;
using namespace nkb;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string injected;
  std::string out_dir = "run";
  std::string name;
  std::size_t threads = 1;
  std::string edits;
  std::string questions = "withheld";
  double lambda = 0.07;
};

struct Context {
  Options opt;
  RunConfig cfg;
  fs::path out;
};

RunConfig load_config(const Options& opt, const std::vector<std::string>& required) {
  ConfigMap map;
  if (!opt.config.empty()) map = parse_config_file(opt.config);
  if (opt.seed) map["seed"] = std::to_string(*opt.seed);
  return RunConfig::from_map(map, required);
}

fs::path data_dir(const Context& c) { return c.out / "data"; }

std::vector<FileDigest> data_digests(const Context& c) {
  std::vector<FileDigest> out;
  for (const auto& f : dataset_files()) {
    const fs::path p = data_dir(c) / f;
    if (fs::exists(p)) out.push_back({p.string(), file_digest(p)});
  }
  return out;
}

void begin(const Context& c, const std::string& sub, std::vector<FileDigest> inputs,
           const std::vector<std::string>& outputs) {
  RunManifest m;
  m.subcommand = sub;
  m.config_text = c.cfg.to_text();
  m.inputs = std::move(inputs);
  for (const auto& o : outputs) m.outputs.push_back((c.out / o).string());
  m.seed = c.cfg.seed;
  write_manifest(c.out / (sub + ".manifest.json"), m);
}

std::string checkpoint_or(const Context& c, const std::string& fallback) {
  return c.opt.checkpoint.empty() ? (c.out / fallback).string() : c.opt.checkpoint;
}

Seq2SeqModel load_model(const std::string& path) {
  return restore_model(load_checkpoint_file(path));
}

void save_model(const Context& c, const std::string& name, const Seq2SeqModel& m,
                std::size_t steps) {
  save_checkpoint_file((c.out / name).string(), make_checkpoint(m, nullptr, steps));
}

void note(const std::string& s) { std::cerr << s << '\n'; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- Subcommands -----------------------------------------------------------

void gen_data(Context& c) {
  begin(c, "gen-data", {}, {"data"});
  const Dataset ds = generate_dataset(c.cfg);
  write_dataset(data_dir(c), ds);
  note("facts: " + std::to_string(ds.world.fact_count()) + " (base " +
       std::to_string(ds.world.base_facts.size()) + ", new " +
       std::to_string(ds.world.new_facts.size()) + ", withheld " +
       std::to_string(ds.world.withheld_facts.size()) + "), vocabulary " +
       std::to_string(ds.vocab.size()));
}

void pretrain(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  begin(c, "pretrain", data_digests(c), {"pretrain.ckpt", "pretrain.metrics.jsonl"});
  Seq2SeqModel m = new_base_model(c.cfg, ds);
  MetricsFile metrics(c.out / "pretrain.metrics.jsonl");
  const auto r = pretrain_base(m, pretrain_examples(c.cfg, ds), c.cfg.pretrain, metrics.sink());
  save_model(c, "pretrain.ckpt", m, r.steps);
  note("pretrain loss " + std::to_string(r.initial_loss) + " -> " + std::to_string(r.final_loss));
}

void inject(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, "pretrain.ckpt");
  auto inputs = data_digests(c);
  inputs.push_back({in, file_digest(in)});
  begin(c, "inject", inputs, {"inject.ckpt", "inject.metrics.jsonl"});
  Seq2SeqModel m = load_model(in);
  ensure_mounted(m, c.cfg);
  MetricsFile metrics(c.out / "inject.metrics.jsonl");
  const auto r = inject_knowledge(m, inject_examples(c.cfg, ds), c.cfg.inject, metrics.sink());
  save_model(c, "inject.ckpt", m, r.steps);
  note("inject loss " + std::to_string(r.initial_loss) + " -> " + std::to_string(r.final_loss));
}

void run_finetune(Context& c, const std::string& default_in, const std::string& name) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, default_in);
  auto inputs = data_digests(c);
  inputs.push_back({in, file_digest(in)});
  begin(c, name, inputs, {name + ".ckpt", name + ".metrics.jsonl"});
  Seq2SeqModel m = load_model(in);
  MetricsFile metrics(c.out / (name + ".metrics.jsonl"));
  const auto r = finetune(m, finetune_examples(c.cfg, ds), c.cfg.finetune, metrics.sink());
  save_model(c, name + ".ckpt", m, r.steps);
  note(name + " loss " + std::to_string(r.initial_loss) + " -> " + std::to_string(r.final_loss));
}

void eval(Context& c, const std::string& default_in, const std::string& name) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, default_in);
  begin(c, name, {{in, file_digest(in)}}, {name + ".txt", name + ".json"});
  const EvalReport r = run_eval(load_model(in), c.cfg, ds, c.opt.threads);
  write_text_file(c.out / (name + ".txt"), r.to_text());
  write_text_file(c.out / (name + ".json"), r.to_json());
  std::cout << r.to_text();
}

Seq2SeqModel load_mounted(const std::string& path) {
  Seq2SeqModel m = load_model(path);
  if (!m.has_nkb()) throw ContractError("checkpoint '" + path + "' has no mounted NKB");
  return m;
}

void probe_values(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, "finetune.ckpt");
  begin(c, "probe-values", {{in, file_digest(in)}}, {"probe-values.txt", "probe-values.jsonl"});
  const ValueProbe p = run_value_probe(load_mounted(in), c.cfg, ds, c.opt.threads);
  write_text_file(c.out / "probe-values.txt", p.to_text());
  write_text_file(c.out / "probe-values.jsonl", p.to_records());
  std::cout << "entity top-token fraction over " << p.reports.size()
            << " slots: " << 100.0 * p.entity_fraction << "%\n";
}

void probe_keys(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, "finetune.ckpt");
  begin(c, "probe-keys", {{in, file_digest(in)}}, {"probe-keys.txt", "probe-keys.jsonl"});
  const KeyProbe p = run_key_probe(load_mounted(in), c.cfg, ds, c.opt.threads);
  write_text_file(c.out / "probe-keys.txt", p.to_text(ds.world));
  write_text_file(c.out / "probe-keys.jsonl", p.to_records(ds.world));
  std::cout << "active keys " << p.active.size() << ", cohesion " << p.cohesion
            << " (shuffled " << p.shuffled_cohesion << ")\n";
}

const std::vector<QAPair>& question_set(const Dataset& ds, const std::string& which) {
  if (which == "withheld") return ds.qa_withheld;
  if (which == "base") return ds.qa_base;
  if (which == "new") return ds.qa_new;
  throw ConfigError("unknown question set '" + which + "' (expected withheld|base|new)");
}

void edit(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, "finetune.ckpt");
  if (c.opt.edits.empty()) throw ConfigError("edit needs --edits <file>");
  std::ifstream specs_in(c.opt.edits);
  if (!specs_in) throw DataError("cannot open edits file '" + c.opt.edits + "'");
  const auto specs = read_edit_specs(specs_in);
  begin(c, "edit", {{in, file_digest(in)}, {c.opt.edits, file_digest(c.opt.edits)}},
        {"edit.txt", "edit.jsonl"});
  const Seq2SeqModel m = load_mounted(in);
  const auto& questions = question_set(ds, c.opt.questions);
  const auto edits = edits_from_specs(m, specs, questions, ds.qa_base, ds.vocab,
                                      c.cfg.surgery_controls, c.cfg.derived("surgery"));
  const std::vector<double> grid{c.opt.lambda};
  const SweepResult r = sweep_lambda(m, edits, ds.qa_base, ds.vocab, grid, c.opt.threads);
  std::ostringstream table, records;
  table << "question  slot  original  target  prediction  success  destroyed\n";
  for (std::size_t e = 0; e < edits.size(); ++e) {
    const auto& o = r.outcomes[e][0];
    const auto pred = ds.vocab.decode(o.prediction);
    table << edits[e].question_id << "  " << edits[e].slot << "  " << ds.vocab.token(edits[e].original)
          << "  " << ds.vocab.token(edits[e].target) << "  " << join_tokens(pred) << "  "
          << (o.success ? "yes" : "no") << "  " << o.destroyed << "/" << o.control_size << '\n';
    records << "{\"question\":" << edits[e].question_id << ",\"slot\":" << edits[e].slot
            << ",\"lambda\":" << c.opt.lambda << ",\"success\":" << (o.success ? "true" : "false")
            << ",\"destroyed\":" << o.destroyed << ",\"controls\":" << o.control_size << "}\n";
  }
  write_text_file(c.out / "edit.txt", table.str());
  write_text_file(c.out / "edit.jsonl", records.str());
  std::cout << table.str();
}

void sweep(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string in = checkpoint_or(c, "finetune.ckpt");
  begin(c, "sweep", {{in, file_digest(in)}}, {"sweep.txt", "sweep.jsonl"});
  EditSetStats stats;
  const SweepResult r = run_sweep(load_mounted(in), c.cfg, ds, c.opt.threads, &stats);
  std::ostringstream table, records;
  write_sweep_table(table, r);
  table << "\nedits: " << r.rows.front().edits << " (of " << stats.considered
        << " withheld questions; " << stats.correct << " already correct, " << stats.multi_token
        << " not single-token, " << stats.no_active_slot << " without an active slot)\n";
  write_sweep_records(records, r);
  write_text_file(c.out / "sweep.txt", table.str());
  write_text_file(c.out / "sweep.jsonl", records.str());
  std::cout << table.str();
}

void proxy(Context& c) {
  const Dataset ds = read_dataset(data_dir(c));
  const std::string base = checkpoint_or(c, "pretrain.ckpt");
  const std::string inj = c.opt.injected.empty() ? (c.out / "inject.ckpt").string() : c.opt.injected;
  begin(c, "proxy", {{base, file_digest(base)}, {inj, file_digest(inj)}},
        {"proxy.txt", "proxy.json", "proxy.metrics.jsonl"});
  MetricsFile metrics(c.out / "proxy.metrics.jsonl");
  const ProxyReport r =
      run_proxy(load_model(base), load_mounted(inj), c.cfg, ds, c.opt.threads, metrics.sink());
  write_text_file(c.out / "proxy.txt", r.to_text());
  write_text_file(c.out / "proxy.json", r.to_json());
  std::cout << r.to_text();
}

void run_all(Context& c) {
  const auto t0 = std::chrono::steady_clock::now();
  auto step = [&](const char* name, auto&& fn) {
    note(std::string("== ") + name);
    fn();
    char buf[64];
    std::snprintf(buf, sizeof(buf), "   %.1f s elapsed", seconds_since(t0));
    note(buf);
  };
  Context plain = c;
  plain.opt.checkpoint.clear();
  step("gen-data", [&] { gen_data(plain); });
  step("pretrain", [&] { pretrain(plain); });
  step("baseline fine-tune", [&] { run_finetune(plain, "pretrain.ckpt", "baseline"); });
  step("baseline eval", [&] { eval(plain, "baseline.ckpt", "baseline-eval"); });
  step("pretrain eval", [&] { eval(plain, "pretrain.ckpt", "pretrain-eval"); });
  step("inject", [&] { inject(plain); });
  step("finetune", [&] { run_finetune(plain, "inject.ckpt", "finetune"); });
  step("eval", [&] { eval(plain, "finetune.ckpt", "eval"); });
  step("probe-values", [&] { probe_values(plain); });
  step("probe-keys", [&] { probe_keys(plain); });
  step("sweep", [&] { sweep(plain); });
  step("proxy", [&] { proxy(plain); });
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 2;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural knowledge bank lab"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "key = value configuration file");
    sub->add_option("--seed", opt.seed, "master seed (overrides the config)");
    sub->add_option("--out-dir", opt.out_dir, "run directory")->capture_default_str();
    sub->add_option("--threads", opt.threads, "workers for evaluation, probing and sweeps")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
  };
  auto with_checkpoint = [&](CLI::App* sub) {
    common(sub);
    sub->add_option("--checkpoint", opt.checkpoint, "input checkpoint");
  };

  struct Entry {
    CLI::App* app;
    std::vector<std::string> required;
    std::function<void(Context&)> fn;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, bool ckpt, std::function<void(Context&)> fn,
                 std::vector<std::string> required = {}) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (ckpt) with_checkpoint(sub); else common(sub);
    entries.push_back({sub, std::move(required), std::move(fn)});
    return sub;
  };

  add("gen-data", "Generate the synthetic world, corpora and QA files", false, gen_data, world_keys());
  add("pretrain", "Pretrain the base model on the base corpus", false, pretrain);
  add("inject", "Train a mounted NKB on the new-fact corpus with the base frozen", true, inject);
  auto* ft = add("finetune", "Fine-tune every parameter on QA pairs", true, [](Context& c) {
    run_finetune(c, "inject.ckpt", c.opt.name.empty() ? "finetune" : c.opt.name);
  });
  ft->add_option("--name", opt.name, "output base name (default: finetune)");
  auto* ev = add("eval", "Exact-match evaluation on base and new facts", true, [](Context& c) {
    eval(c, "finetune.ckpt", c.opt.name.empty() ? "eval" : c.opt.name);
  });
  ev->add_option("--name", opt.name, "output base name (default: eval)");
  add("probe-values", "Project NKB value vectors onto the vocabulary", true, probe_values);
  add("probe-keys", "Top-triggering questions of the NKB keys", true, probe_keys);
  auto* ed = add("edit", "Apply value-row surgery for listed edits", true, edit);
  ed->add_option("--edits", opt.edits, "file of question-id<TAB>target-token lines")->required();
  ed->add_option("--questions", opt.questions, "question set the ids refer to")
      ->capture_default_str();
  ed->add_option("--lambda", opt.lambda, "edit strength")->capture_default_str();
  add("sweep", "Success and destruction rates over the lambda grid", true, sweep);
  auto* px = add("proxy", "Copy-task check of language-modeling preservation", true, proxy);
  px->add_option("--injected", opt.injected, "injected checkpoint (default: <out-dir>/inject.ckpt)");
  add("run", "Every step above, in order", false, run_all, world_keys());

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const auto& e : entries) {
    if (!e.app->parsed()) continue;
    try {
      Context c;
      c.opt = opt;
      c.cfg = load_config(opt, e.required);
      c.out = opt.out_dir;
      e.fn(c);
      return 0;
    } catch (const std::exception& ex) {
      std::cerr << "nkb " << e.app->get_name() << ": " << ex.what() << '\n';
      return exit_code_for(ex);
    }
  }
  return 1;
}
