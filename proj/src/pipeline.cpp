// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/pipeline.hpp"

#include <json.hpp>

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "nkb/errors.hpp"
#include "nkb/rng.hpp"
#include "nkb/tokens.hpp"

namespace nkb {

namespace fs = std::filesystem;

namespace {

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

}  // namespace

Dataset generate_dataset(const RunConfig& cfg) {
  Dataset ds;
  ds.world = generate_world(cfg.world);
  ds.vocab = build_vocab(ds.world);
  ds.ssm_base = build_ssm_corpus(render_statements(ds.world, Partition::base), cfg.ssm_draws,
                                 cfg.derived("ssm/base"));
  ds.ssm_new = build_ssm_corpus(render_statements(ds.world, Partition::fresh), cfg.ssm_new_draws,
                                cfg.derived("ssm/new"));
  ds.qa_base = render_qa(ds.world, Partition::base);
  ds.qa_new = render_qa(ds.world, Partition::fresh);
  ds.qa_withheld = render_qa(ds.world, Partition::withheld);
  return ds;
}

const std::vector<std::string>& dataset_files() {
  static const std::vector<std::string> files{"world.txt",   "vocab.txt",  "ssm_base.tsv",
                                              "ssm_new.tsv", "qa_base.tsv", "qa_new.tsv",
                                              "qa_withheld.tsv"};
  return files;
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  open_output(dir / "world.txt") << ds.world.to_text();
  {
    auto out = open_output(dir / "vocab.txt");
    for (const auto& t : ds.vocab.tokens()) out << t << '\n';
  }
  {
    auto out = open_output(dir / "ssm_base.tsv");
    write_corpus(out, ds.ssm_base);
  }
  {
    auto out = open_output(dir / "ssm_new.tsv");
    write_corpus(out, ds.ssm_new);
  }
  {
    auto out = open_output(dir / "qa_base.tsv");
    write_qa(out, ds.qa_base);
  }
  {
    auto out = open_output(dir / "qa_new.tsv");
    write_qa(out, ds.qa_new);
  }
  {
    auto out = open_output(dir / "qa_withheld.tsv");
    write_qa(out, ds.qa_withheld);
  }
}

Dataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw DataError("data directory '" + dir.string() + "' does not exist (run gen-data first)");
  }
  Dataset ds;
  ds.world = World::from_text(read_text_file(dir / "world.txt"));
  {
    auto in = open_input(dir / "vocab.txt");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) tokens.push_back(line);
    }
    ds.vocab = build_vocab(ds.world);
    if (tokens != ds.vocab.tokens()) {
      throw DataError("vocab.txt does not match the vocabulary of world.txt");
    }
  }
  {
    auto in = open_input(dir / "ssm_base.tsv");
    ds.ssm_base = read_corpus(in);
  }
  {
    auto in = open_input(dir / "ssm_new.tsv");
    ds.ssm_new = read_corpus(in);
  }
  {
    auto in = open_input(dir / "qa_base.tsv");
    ds.qa_base = read_qa(in);
  }
  {
    auto in = open_input(dir / "qa_new.tsv");
    ds.qa_new = read_qa(in);
  }
  {
    auto in = open_input(dir / "qa_withheld.tsv");
    ds.qa_withheld = read_qa(in);
  }
  return ds;
}

QaSplits split_qa(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.finetune_new_qa >= ds.qa_new.size() && !ds.qa_new.empty()) {
    throw ConfigError("finetune.new_qa must leave at least one new-fact question for evaluation");
  }
  QaSplits s;
  s.finetune = ds.qa_base;
  const auto cut = ds.qa_new.begin() + static_cast<std::ptrdiff_t>(cfg.finetune_new_qa);
  s.finetune.insert(s.finetune.end(), ds.qa_new.begin(), cut);
  s.base_eval = ds.qa_base;
  s.new_eval.assign(cut, ds.qa_new.end());
  return s;
}

std::vector<TrainExample> pretrain_examples(const RunConfig& cfg, const Dataset& ds) {
  auto out = ssm_examples(ds.ssm_base, ds.vocab);
  const auto qa = qa_examples(ds.qa_base, ds.vocab);
  for (std::size_t r = 0; r < cfg.pretrain_qa_repeats; ++r) out.insert(out.end(), qa.begin(), qa.end());
  return out;
}

std::vector<TrainExample> inject_examples(const RunConfig& cfg, const Dataset& ds) {
  auto out = ssm_examples(ds.ssm_new, ds.vocab);
  if (cfg.inject_replay_draws > 0) {
    const auto replay = build_ssm_corpus(render_statements(ds.world, Partition::base),
                                         cfg.inject_replay_draws, cfg.derived("ssm/replay"));
    const auto ex = ssm_examples(replay, ds.vocab);
    out.insert(out.end(), ex.begin(), ex.end());
  }
  return out;
}

std::vector<TrainExample> finetune_examples(const RunConfig& cfg, const Dataset& ds) {
  return qa_examples(split_qa(cfg, ds).finetune, ds.vocab);
}

Seq2SeqModel new_base_model(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = ds.vocab.size();
  mc.nkb_dim = 0;
  return Seq2SeqModel(mc, cfg.derived("model"));
}

void ensure_mounted(Seq2SeqModel& model, const RunConfig& cfg) {
  if (model.has_nkb()) return;
  if (cfg.model.nkb_dim == 0) throw ConfigError("model.nkb_dim must be positive to mount an NKB");
  model.mount_nkb(cfg.model.nkb_site, cfg.model.nkb_dim,
                  NkbInit{cfg.nkb_key_std, 0.0, cfg.derived("nkb")});
}

// ---------------------------------------------------------------------------

std::string file_digest(const fs::path& path) {
  return hex64(fnv1a64(read_text_file(path)));
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["subcommand"] = subcommand;
  j["version"] = version;
  j["seed"] = seed;
  j["config"] = config_text;
  auto& in = j["inputs"] = nlohmann::ordered_json::array();
  for (const auto& f : inputs) in.push_back({{"path", f.path}, {"digest", f.digest}});
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

void write_manifest(const fs::path& path, const RunManifest& manifest) {
  write_text_file(path, manifest.to_json());
}

MetricsFile::MetricsFile(const fs::path& path) : out_(open_output(path)) {}

MetricsSink MetricsFile::sink() {
  return [this](const MetricRecord& r) { out_ << format_metric(r) << '\n'; };
}

void write_text_file(const fs::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string read_text_file(const fs::path& path) {
  auto in = open_input(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "split  correct  total  em\n";
  os << "base   " << std::setw(7) << base.correct << "  " << std::setw(5) << base.total << "  "
     << percent(base.em) << '\n';
  os << "new    " << std::setw(7) << fresh.correct << "  " << std::setw(5) << fresh.total << "  "
     << percent(fresh.em) << '\n';
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& [name, r] : {std::pair{"base", &base}, std::pair{"new", &fresh}}) {
    j[name] = {{"em", r->em}, {"correct", r->correct}, {"total", r->total},
               {"predictions", r->predictions}};
  }
  return j.dump() + "\n";
}

EvalReport run_eval(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                    std::size_t threads) {
  const QaSplits s = split_qa(cfg, ds);
  EvalReport r;
  r.base = evaluate_em(model, s.base_eval, ds.vocab, cfg.eval_max_len, threads);
  r.fresh = evaluate_em(model, s.new_eval, ds.vocab, cfg.eval_max_len, threads);
  return r;
}

std::vector<QAPair> probe_questions(const Dataset& ds) {
  std::vector<QAPair> q = ds.qa_base;
  q.insert(q.end(), ds.qa_new.begin(), ds.qa_new.end());
  return q;
}

std::string ValueProbe::to_text() const {
  std::ostringstream os;
  write_value_table(os, reports);
  os << "\ncategory      slots\n";
  for (const auto& [cat, n] : histogram) {
    os << std::left << std::setw(14) << to_string(cat) << n << '\n';
  }
  os << "\nentity top-token fraction: " << percent(100.0 * entity_fraction) << "%\n";
  return os.str();
}

std::string ValueProbe::to_records() const {
  std::ostringstream os;
  write_value_records(os, reports);
  return os.str();
}

ValueProbe run_value_probe(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                           std::size_t threads) {
  const auto questions = probe_questions(ds);
  const TriggerMatrix tm = build_trigger_matrix(model, questions, ds.vocab, cfg.eval_max_len, threads);
  ValueProbe p;
  p.slots = rank_slots(cfg.probe_ranking, slot_usage(tm), cfg.probe_slots, cfg.derived("probe"));
  p.reports = top_scoring_report(model, p.slots, cfg.probe_top_k, ds.vocab, ds.world, threads);
  p.histogram = category_histogram(p.reports);
  p.entity_fraction = entity_top_fraction(p.reports);
  return p;
}

std::string KeyProbe::to_text(const World& world) const {
  std::ostringstream os;
  write_key_table(os, reports, matrix, questions, world);
  os << "\nactive keys: " << active.size() << " of " << matrix.cols << '\n';
  os << "mean relation cohesion: " << std::fixed << std::setprecision(3) << cohesion << '\n';
  os << "column-shuffled control: " << shuffled_cohesion << '\n';
  return os.str();
}

std::string KeyProbe::to_records(const World& world) const {
  std::ostringstream os;
  write_key_records(os, reports, matrix, questions, world);
  return os.str();
}

KeyProbe run_key_probe(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                       std::size_t threads) {
  KeyProbe p;
  p.questions = probe_questions(ds);
  p.matrix = build_trigger_matrix(model, p.questions, ds.vocab, cfg.eval_max_len, threads);
  p.active = active_keys(p.matrix);
  for (std::size_t k : p.active) p.reports.push_back(top_triggering(p.matrix, k, cfg.probe_top_m));
  p.cohesion = mean_cohesion(p.matrix, p.active, ds.world, cfg.probe_top_m);
  const TriggerMatrix shuffled = shuffle_columns(p.matrix, cfg.derived("probe/shuffle"));
  p.shuffled_cohesion = mean_cohesion(shuffled, p.active, ds.world, cfg.probe_top_m);
  return p;
}

std::vector<EditCase> build_desk_edits(const Seq2SeqModel& model, const RunConfig& cfg,
                                       const Dataset& ds, EditSetStats* stats,
                                       std::size_t threads) {
  return build_edit_set(model, ds.qa_withheld, ds.qa_base, ds.vocab, cfg.surgery_controls,
                        cfg.derived("surgery"), cfg.surgery_max_edits, stats, threads);
}

SweepResult run_sweep(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                      std::size_t threads, EditSetStats* stats) {
  EditSetStats local;
  if (stats == nullptr) stats = &local;
  const auto edits = build_desk_edits(model, cfg, ds, stats, threads);
  if (edits.empty()) {
    throw ContractError("no usable edits among " + std::to_string(stats->considered) +
                        " withheld questions (" + std::to_string(stats->correct) + " answered correctly, " +
                        std::to_string(stats->multi_token) + " not single-token, " +
                        std::to_string(stats->no_active_slot) + " without an active slot)");
  }
  return sweep_lambda(model, edits, ds.qa_base, ds.vocab, cfg.surgery_lambdas, threads);
}

std::string ProxyReport::to_text() const {
  std::ostringstream os;
  os << "model                 accuracy\n";
  os << "base                  " << percent(baseline) << '\n';
  os << "base + zero-init NKB  " << percent(mounted_zero) << '\n';
  os << "injected              " << percent(injected) << '\n';
  return os.str();
}

std::string ProxyReport::to_json() const {
  nlohmann::ordered_json j{{"task", task}, {"base", baseline}, {"mounted_zero", mounted_zero},
                           {"injected", injected}};
  return j.dump() + "\n";
}

ProxyReport run_proxy(const Seq2SeqModel& base, const Seq2SeqModel& injected,
                      const RunConfig& cfg, const Dataset& ds, std::size_t threads,
                      const MetricsSink& sink) {
  const auto train = proxy_examples(cfg.proxy_task, cfg.proxy_train_size, ds.vocab,
                                    cfg.derived("proxy/train"), cfg.proxy_max_len);
  const std::uint64_t eval_seed = cfg.derived("proxy/eval");
  auto tune = [&](Seq2SeqModel& m) {
    auto groups = make_groups(m, false, false);
    Optimizer opt(cfg.proxy.optimizer);
    train_phase(m, train, cfg.proxy, groups, Phase::proxy, opt, sink);
  };
  auto score = [&](const Seq2SeqModel& m) {
    return proxy_lm_eval(m, cfg.proxy_task, cfg.proxy_eval_size, ds.vocab, eval_seed,
                         cfg.proxy_max_len, threads);
  };
  ProxyReport r;
  r.task = to_string(cfg.proxy_task);
  Seq2SeqModel b = base.clone();
  tune(b);
  r.baseline = score(b);
  Seq2SeqModel mounted = b.clone();
  ensure_mounted(mounted, cfg);
  r.mounted_zero = score(mounted);
  Seq2SeqModel inj = injected.clone();
  tune(inj);
  r.injected = score(inj);
  return r;
}

}  // namespace nkb
