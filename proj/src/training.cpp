// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "nkb/rng.hpp"
#include "nkb/tokens.hpp"

namespace nkb {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kAdafactorEps = 1e-30;

bool is_nkb_param(const std::string& name) { return name.rfind("nkb.", 0) == 0; }

struct PackedTargets {
  std::vector<int> labels;
};

std::vector<SeqPair> to_pairs(const std::vector<TrainExample>& data,
                              std::span<const std::size_t> idx, std::vector<int>* labels) {
  std::vector<SeqPair> pairs;
  pairs.reserve(idx.size());
  for (std::size_t i : idx) {
    pairs.push_back(to_seq_pair(data[i]));
    labels->insert(labels->end(), data[i].target.begin(), data[i].target.end());
  }
  return pairs;
}

// Temporarily drops requires_grad on frozen parameters so that the tape does
// not record work nobody will use.
class FreezeScope {
 public:
  explicit FreezeScope(std::vector<ParamGroup>& groups) {
    for (auto& g : groups) {
      if (!g.frozen) continue;
      for (auto& p : g.params) {
        if (p.tensor.requires_grad()) {
          p.tensor.set_requires_grad(false);
          toggled_.push_back(p.tensor);
        }
      }
    }
  }
  ~FreezeScope() {
    for (auto& t : toggled_) t.set_requires_grad(true);
  }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  std::vector<Tensor> toggled_;
};

}  // namespace

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::constant_with_warmup: return "constant_with_warmup";
    case Schedule::linear_with_warmup: return "linear_with_warmup";
  }
  return "?";
}

Schedule schedule_from_string(const std::string& s) {
  for (Schedule v : {Schedule::constant, Schedule::constant_with_warmup, Schedule::linear_with_warmup}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown schedule '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "adafactor"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adafactor") return OptimizerKind::adafactor;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|adafactor)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (schedule == Schedule::linear_with_warmup && warmup_steps >= max_steps && max_steps > 0) {
    throw ConfigError("linear_with_warmup needs warmup_steps < max_steps");
  }
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be non-negative");
  if (dropout < 0.0 || dropout >= 1.0 || nkb_dropout < 0.0 || nkb_dropout >= 1.0) {
    throw ConfigError("dropout rates must be in [0, 1)");
  }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  switch (cfg.schedule) {
    case Schedule::constant:
      return cfg.peak_lr;
    case Schedule::constant_with_warmup:
      if (cfg.warmup_steps == 0) return cfg.peak_lr;
      return cfg.peak_lr * std::min(1.0, s / w);
    case Schedule::linear_with_warmup: {
      if (step < cfg.warmup_steps) return cfg.peak_lr * s / w;
      if (step >= cfg.max_steps) return 0.0;
      const double total = static_cast<double>(cfg.max_steps) - w;
      return cfg.peak_lr * (static_cast<double>(cfg.max_steps) - s) / total;
    }
  }
  return cfg.peak_lr;
}

std::vector<ParamGroup> make_groups(const Seq2SeqModel& model, bool freeze_base,
                                    bool freeze_nkb) {
  ParamGroup base{"base", {}, freeze_base};
  ParamGroup nkb{"nkb", {}, freeze_nkb};
  for (auto& p : model.parameters()) {
    (is_nkb_param(p.name) ? nkb : base).params.push_back(p);
  }
  std::vector<ParamGroup> groups{std::move(base)};
  if (!nkb.params.empty()) groups.push_back(std::move(nkb));
  return groups;
}

double global_grad_norm(const std::vector<ParamGroup>& groups) {
  double sq = 0.0;
  for (const auto& g : groups) {
    if (g.frozen) continue;
    for (const auto& p : g.params) {
      for (double x : p.tensor.grad()) sq += x * x;
    }
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::vector<ParamGroup>& groups, double max_norm) {
  const double norm = global_grad_norm(groups);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : groups) {
      if (g.frozen) continue;
      for (auto& p : g.params) {
        for (double& x : p.tensor.grad()) x *= f;
      }
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Optimizer

double Optimizer::step(std::vector<ParamGroup>& groups, double lr, double clip_norm) {
  for (const auto& g : groups) {
    if (g.frozen) continue;
    for (const auto& p : g.params) {
      for (double x : p.tensor.grad()) {
        if (!std::isfinite(x)) {
          throw DivergenceError("non-finite gradient in parameter '" + p.name + "'");
        }
      }
    }
  }
  const double norm = clip_grad_norm(groups, clip_norm);
  ++t_;
  const double t = static_cast<double>(t_);
  for (auto& g : groups) {
    if (g.frozen) continue;
    for (auto& p : g.params) {
      Slot& s = state_[p.name];
      auto val = p.tensor.values();
      auto grad = p.tensor.grad();
      const std::size_t n = val.size();
      if (kind_ == OptimizerKind::adam) {
        if (s.m.empty()) {
          s.m.assign(n, 0.0);
          s.v.assign(n, 0.0);
        }
        const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
        const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
        for (std::size_t i = 0; i < n; ++i) {
          s.m[i] = kAdamBeta1 * s.m[i] + (1.0 - kAdamBeta1) * grad[i];
          s.v[i] = kAdamBeta2 * s.v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
          const double mh = s.m[i] / bc1;
          const double vh = s.v[i] / bc2;
          val[i] -= lr * mh / (std::sqrt(vh) + kAdamEps);
        }
        continue;
      }
      const double beta2 = 1.0 - std::pow(t, -0.8);
      std::vector<double> update(n);
      if (p.tensor.rank() == 2) {
        const std::size_t r = p.tensor.rows(), c = p.tensor.cols();
        if (s.row.empty()) {
          s.row.assign(r, 0.0);
          s.col.assign(c, 0.0);
        }
        std::vector<double> rmean(r, 0.0), cmean(c, 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double g2 = grad[i * c + j] * grad[i * c + j] + kAdafactorEps;
            rmean[i] += g2 / static_cast<double>(c);
            cmean[j] += g2 / static_cast<double>(r);
          }
        for (std::size_t i = 0; i < r; ++i) s.row[i] = beta2 * s.row[i] + (1.0 - beta2) * rmean[i];
        for (std::size_t j = 0; j < c; ++j) s.col[j] = beta2 * s.col[j] + (1.0 - beta2) * cmean[j];
        const double row_mean =
            std::accumulate(s.row.begin(), s.row.end(), 0.0) / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double vhat = s.row[i] * s.col[j] / row_mean;
            update[i * c + j] = grad[i * c + j] / std::sqrt(vhat);
          }
      } else {
        if (s.v.empty()) s.v.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * (grad[i] * grad[i] + kAdafactorEps);
          update[i] = grad[i] / std::sqrt(s.v[i]);
        }
      }
      double ms = 0.0;
      for (double u : update) ms += u * u;
      const double rms = std::sqrt(ms / static_cast<double>(n));
      const double denom = std::max(1.0, rms);
      for (std::size_t i = 0; i < n; ++i) val[i] -= lr * update[i] / denom;
    }
  }
  return norm;
}

std::vector<Optimizer::StateBlock> Optimizer::state_blocks() const {
  std::vector<StateBlock> out;
  for (const auto& [name, s] : state_) {
    if (!s.m.empty()) out.push_back({name + "/m", s.m});
    if (!s.v.empty()) out.push_back({name + "/v", s.v});
    if (!s.row.empty()) out.push_back({name + "/row", s.row});
    if (!s.col.empty()) out.push_back({name + "/col", s.col});
  }
  return out;
}

void Optimizer::load_state(std::size_t t, const std::vector<StateBlock>& blocks) {
  t_ = t;
  state_.clear();
  for (const auto& b : blocks) {
    const auto slash = b.name.rfind('/');
    if (slash == std::string::npos) throw DataError("optimizer block without slot: " + b.name);
    const std::string param = b.name.substr(0, slash), slot = b.name.substr(slash + 1);
    Slot& s = state_[param];
    if (slot == "m") s.m = b.values;
    else if (slot == "v") s.v = b.values;
    else if (slot == "row") s.row = b.values;
    else if (slot == "col") s.col = b.values;
    else throw DataError("unknown optimizer slot '" + slot + "'");
  }
}

// ---------------------------------------------------------------------------
// Data

std::vector<int> encode_source(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  std::vector<int> ids = vocab.encode(tokens);
  ids.push_back(kEosId);
  return ids;
}

std::vector<TrainExample> ssm_examples(const std::vector<MaskedExample>& corpus,
                                       const Vocabulary& vocab) {
  std::vector<TrainExample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) {
    TrainExample t{encode_source(ex.input, vocab), vocab.encode(ex.target)};
    t.target.push_back(kEosId);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TrainExample> qa_examples(const std::vector<QAPair>& qa, const Vocabulary& vocab) {
  std::vector<TrainExample> out;
  out.reserve(qa.size());
  for (const auto& q : qa) {
    TrainExample t{encode_source(q.question, vocab), {kSentinelId}};
    const auto ans = vocab.encode(q.answer);
    t.target.insert(t.target.end(), ans.begin(), ans.end());
    t.target.push_back(kEosId);
    out.push_back(std::move(t));
  }
  return out;
}

SeqPair to_seq_pair(const TrainExample& ex) {
  SeqPair p;
  p.src = ex.src;
  p.tgt_in.push_back(kBosId);
  p.tgt_in.insert(p.tgt_in.end(), ex.target.begin(), ex.target.end() - 1);
  return p;
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::inject: return "inject";
    case Phase::finetune: return "finetune";
    case Phase::proxy: return "proxy";
  }
  return "?";
}

std::string format_metric(const MetricRecord& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "{\"step\":%zu,\"phase\":\"%s\",\"loss\":%.9g,\"lr\":%.6g,\"wall_time\":%.3f}",
                r.step, r.phase.c_str(), r.loss, r.lr, r.wall_time);
  return buf;
}

// ---------------------------------------------------------------------------
// Training

double mean_loss(const Seq2SeqModel& model, const std::vector<TrainExample>& examples,
                 std::size_t batch_size) {
  if (examples.empty()) return 0.0;
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    std::vector<int> labels;
    auto pairs = to_pairs(examples, std::span(idx).subspan(start, end - start), &labels);
    BatchForward f = forward_batch(model, pairs, ForwardOptions{0.0, 0.0, nullptr, false});
    const double l = cross_entropy(f.logits, labels, kPadId).item();
    total += l * static_cast<double>(labels.size());
    tokens += labels.size();
  }
  return total / static_cast<double>(tokens);
}

TrainResult train_phase(Seq2SeqModel& model, const std::vector<TrainExample>& data,
                        const TrainConfig& cfg, std::vector<ParamGroup>& groups, Phase phase,
                        Optimizer& opt, const MetricsSink& sink) {
  cfg.validate();
  TrainResult result;
  if (cfg.max_steps == 0) return result;
  if (data.empty()) throw ContractError(to_string(phase) + ": empty training set");

  FreezeScope freeze(groups);
  std::mt19937_64 rng(derive_seed(cfg.seed, to_string(phase)));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<std::size_t> idx;
    idx.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<int> labels;
    const auto pairs = to_pairs(data, idx, &labels);
    const double lr = lr_at(step, cfg);

    double loss_value = 0.0;
    {
      Tape tape;
      ForwardOptions fo{cfg.dropout, cfg.nkb_dropout, &rng, false};
      BatchForward f = forward_batch(model, pairs, fo);
      Tensor loss = cross_entropy(f.logits, labels, kPadId);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError(to_string(phase) + ": non-finite loss at step " +
                              std::to_string(step));
      }
      tape.backward(loss);
    }
    opt.step(groups, lr, cfg.clip_norm);
    for (auto& g : groups) {
      if (g.frozen) continue;
      for (auto& p : g.params) p.tensor.zero_grad();
    }
    if (step == 0) result.initial_loss = loss_value;
    result.final_loss = loss_value;
    result.steps = step + 1;
    if (sink) {
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      sink({step, to_string(phase), loss_value, lr, wall});
    }
  }
  return result;
}

TrainResult pretrain_base(Seq2SeqModel& model, const std::vector<TrainExample>& corpus,
                          const TrainConfig& cfg, const MetricsSink& sink) {
  auto groups = make_groups(model, false, true);
  Optimizer opt(cfg.optimizer);
  return train_phase(model, corpus, cfg, groups, Phase::pretrain, opt, sink);
}

void check_injection_groups(const std::vector<ParamGroup>& groups) {
  bool nkb_trainable = false;
  for (const auto& g : groups) {
    for (const auto& p : g.params) {
      const bool nkb = is_nkb_param(p.name);
      if (!nkb && !g.frozen) {
        throw ContractError("inject: base parameter '" + p.name +
                            "' is not frozen; injection trains the NKB only");
      }
      if (nkb && !g.frozen) nkb_trainable = true;
    }
  }
  if (!nkb_trainable) throw ContractError("inject: no trainable NKB parameters");
}

TrainResult inject_knowledge(Seq2SeqModel& model, const std::vector<TrainExample>& corpus,
                             const TrainConfig& cfg, const MetricsSink& sink) {
  if (!model.has_nkb()) throw ContractError("inject: the model has no mounted NKB");
  auto groups = make_groups(model, true, false);
  check_injection_groups(groups);
  TrainConfig c = cfg;
  c.dropout = 0.0;  // the frozen base runs deterministically
  Optimizer opt(cfg.optimizer);
  return train_phase(model, corpus, c, groups, Phase::inject, opt, sink);
}

TrainResult finetune(Seq2SeqModel& model, const std::vector<TrainExample>& data,
                     const TrainConfig& cfg, const MetricsSink& sink) {
  auto groups = make_groups(model, false, false);
  Optimizer opt(cfg.optimizer);
  return train_phase(model, data, cfg, groups, Phase::finetune, opt, sink);
}

// ---------------------------------------------------------------------------
// Evaluation

std::string normalize_answer(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (t == kPadToken || t == kBosToken || t == kEosToken || t == kSentinelToken) continue;
    for (char c : t) {
      const unsigned char u = static_cast<unsigned char>(c);
      if (std::isspace(u)) {
        if (!out.empty() && out.back() != ' ') out += ' ';
      } else {
        out += static_cast<char>(std::tolower(u));
      }
    }
    if (!out.empty() && out.back() != ' ') out += ' ';
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

EmResult score_answers(const std::vector<QAPair>& qa, const AnswerFn& answer,
                       std::size_t threads) {
  if (qa.empty()) throw ContractError("evaluate_em: empty QA set");
  EmResult r;
  r.total = qa.size();
  r.predictions.resize(qa.size());
  std::vector<char> hit(qa.size(), 0);
  parallel_for(qa.size(), threads, [&](std::size_t i) {
    r.predictions[i] = normalize_answer(answer(qa[i]));
    hit[i] = r.predictions[i] == normalize_answer(qa[i].answer);
  });
  r.correct = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
  r.em = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

EmResult evaluate_em(const Seq2SeqModel& model, const std::vector<QAPair>& qa,
                     const Vocabulary& vocab, std::size_t max_len, std::size_t threads) {
  return score_answers(
      qa,
      [&](const QAPair& q) {
        return vocab.decode(greedy_decode(model, encode_source(q.question, vocab), max_len).tokens);
      },
      threads);
}

std::string to_string(ProxyTask t) { return t == ProxyTask::copy ? "copy" : "reverse"; }

ProxyTask proxy_task_from_string(const std::string& s) {
  if (s == "copy") return ProxyTask::copy;
  if (s == "reverse") return ProxyTask::reverse;
  throw ConfigError("unknown proxy task '" + s + "' (expected copy|reverse)");
}

std::vector<TrainExample> proxy_examples(ProxyTask task, std::size_t n, const Vocabulary& vocab,
                                         std::uint64_t seed, std::size_t max_len) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(kNumSpecialTokens, static_cast<int>(vocab.size()) - 1);
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::vector<TrainExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> seq(len(rng));
    for (int& t : seq) t = tok(rng);
    TrainExample ex;
    ex.src = seq;
    ex.src.push_back(kEosId);
    ex.target = seq;
    if (task == ProxyTask::reverse) std::reverse(ex.target.begin(), ex.target.end());
    ex.target.push_back(kEosId);
    out.push_back(std::move(ex));
  }
  return out;
}

double proxy_lm_eval(const Seq2SeqModel& model, ProxyTask task, std::size_t n,
                     const Vocabulary& vocab, std::uint64_t seed, std::size_t max_len,
                     std::size_t threads) {
  const auto data = proxy_examples(task, n, vocab, seed, max_len);
  std::vector<char> hit(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const Decoded d = greedy_decode(model, data[i].src, max_len + 1);
    std::vector<int> want(data[i].target.begin(), data[i].target.end() - 1);
    hit[i] = d.ended && d.tokens == want;
  });
  return 100.0 * static_cast<double>(std::count(hit.begin(), hit.end(), 1)) /
         static_cast<double>(data.size());
}

}  // namespace nkb
