// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Schedules, optimizers, parameter freezing, the three training phases
// (base SSM pretraining, frozen-base knowledge injection, fine-tuning) and
// the exact-match and proxy language-modeling evaluations.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nkb/factworld.hpp"
#include "nkb/model.hpp"

namespace nkb {

enum class Schedule { constant, constant_with_warmup, linear_with_warmup };
enum class OptimizerKind { adam, adafactor };

std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_steps = 1000;
  std::size_t warmup_steps = 100;
  double peak_lr = 3e-3;
  Schedule schedule = Schedule::constant_with_warmup;
  OptimizerKind optimizer = OptimizerKind::adam;
  double clip_norm = 1.0;
  double dropout = 0.0;
  double nkb_dropout = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Learning rate before the update numbered `step` (0-based).
double lr_at(std::size_t step, const TrainConfig& cfg);

struct ParamGroup {
  std::string name;
  std::vector<NamedTensor> params;
  bool frozen = false;
};

/// Two groups: "base" (every non-NKB parameter) and, when mounted, "nkb".
std::vector<ParamGroup> make_groups(const Seq2SeqModel& model, bool freeze_base,
                                    bool freeze_nkb);

/// Scales trainable gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<ParamGroup>& groups, double max_norm);

double global_grad_norm(const std::vector<ParamGroup>& groups);

/// Adam: beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias-corrected moments.
///
/// Adafactor-style: no first moment. Matrices keep factored second moments
/// (row and column means of g² + 1e-30) combined as R Cᵀ / mean(R);
/// vectors keep a full second moment. Decay beta2_t = 1 - t^-0.8. The raw
/// update g / sqrt(v̂) is divided by max(1, rms(update)) before scaling by
/// the learning rate.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adam) : kind_(kind) {}

  /// Clips at clip_norm, then updates every parameter of non-frozen groups.
  /// Throws DivergenceError naming the parameter if a gradient is not
  /// finite; nothing is updated in that case.
  double step(std::vector<ParamGroup>& groups, double lr, double clip_norm);

  OptimizerKind kind() const { return kind_; }
  std::size_t steps() const { return t_; }

  struct StateBlock {
    std::string name;
    std::vector<double> values;
  };
  std::vector<StateBlock> state_blocks() const;
  void load_state(std::size_t t, const std::vector<StateBlock>& blocks);

 private:
  struct Slot {
    std::vector<double> m, v, row, col;
  };
  OptimizerKind kind_;
  std::size_t t_ = 0;
  std::map<std::string, Slot> state_;
};

/// One training instance: decoder input is BOS + target[0..n-2], labels are
/// target (which ends with EOS).
struct TrainExample {
  std::vector<int> src;
  std::vector<int> target;
};

std::vector<TrainExample> ssm_examples(const std::vector<MaskedExample>& corpus,
                                       const Vocabulary& vocab);
/// Answers are emitted in span-infilling form: sentinel, answer, EOS.
std::vector<TrainExample> qa_examples(const std::vector<QAPair>& qa, const Vocabulary& vocab);
std::vector<int> encode_source(const std::vector<std::string>& tokens, const Vocabulary& vocab);

SeqPair to_seq_pair(const TrainExample& ex);

enum class Phase { pretrain, inject, finetune, proxy };
std::string to_string(Phase p);

struct MetricRecord {
  std::size_t step;
  std::string phase;
  double loss;
  double lr;
  double wall_time;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

/// One JSON object per line.
std::string format_metric(const MetricRecord& r);

struct TrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

/// Mean target-side cross-entropy over `examples` (no gradient).
double mean_loss(const Seq2SeqModel& model, const std::vector<TrainExample>& examples,
                 std::size_t batch_size = 64);

/// Generic loop: seeded epoch shuffling, one tape per step, clipping and an
/// optimizer update of the non-frozen groups. Frozen parameters do not
/// record gradients during the loop.
TrainResult train_phase(Seq2SeqModel& model, const std::vector<TrainExample>& data,
                        const TrainConfig& cfg, std::vector<ParamGroup>& groups,
                        Phase phase, Optimizer& opt, const MetricsSink& sink = {});

/// SSM pretraining of the base model; a mounted NKB stays frozen.
TrainResult pretrain_base(Seq2SeqModel& model, const std::vector<TrainExample>& corpus,
                          const TrainConfig& cfg, const MetricsSink& sink = {});

/// Throws ContractError unless every non-NKB group is frozen and an NKB
/// group is trainable.
void check_injection_groups(const std::vector<ParamGroup>& groups);

/// SSM training of the NKB alone. Requires a mounted NKB.
TrainResult inject_knowledge(Seq2SeqModel& model, const std::vector<TrainExample>& corpus,
                             const TrainConfig& cfg, const MetricsSink& sink = {});

/// All parameters trainable, NKB included.
TrainResult finetune(Seq2SeqModel& model, const std::vector<TrainExample>& data,
                     const TrainConfig& cfg, const MetricsSink& sink = {});

/// Lowercased, specials removed, whitespace collapsed.
std::string normalize_answer(const std::vector<std::string>& tokens);

struct EmResult {
  double em = 0.0;  // percentage
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::string> predictions;
};

/// Predicted answer tokens for one question.
using AnswerFn = std::function<std::vector<std::string>(const QAPair&)>;

/// Normalized exact match of `answer` over `qa`. Throws ContractError on an
/// empty set; the result does not depend on the thread count.
EmResult score_answers(const std::vector<QAPair>& qa, const AnswerFn& answer,
                       std::size_t threads = 1);

/// Greedy-decodes every question and compares normalized answers. Throws
/// ContractError on an empty set. Decodes fan out over `threads` workers;
/// the result does not depend on the thread count.
EmResult evaluate_em(const Seq2SeqModel& model, const std::vector<QAPair>& qa,
                     const Vocabulary& vocab, std::size_t max_len = 8,
                     std::size_t threads = 1);

enum class ProxyTask { copy, reverse };
std::string to_string(ProxyTask t);
ProxyTask proxy_task_from_string(const std::string& s);

/// Random non-special token sequences of length 1..max_len with their copy
/// or reversal as target.
std::vector<TrainExample> proxy_examples(ProxyTask task, std::size_t n,
                                         const Vocabulary& vocab, std::uint64_t seed,
                                         std::size_t max_len = 8);

/// Percentage of sequences reproduced exactly.
double proxy_lm_eval(const Seq2SeqModel& model, ProxyTask task, std::size_t n,
                     const Vocabulary& vocab, std::uint64_t seed, std::size_t max_len = 8,
                     std::size_t threads = 1);

/// Runs fn(i) for i in [0, n) across `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace nkb
