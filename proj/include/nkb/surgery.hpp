// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Knowledge surgery on NKB value vectors: v_t += λ (e_tgt - e_ori) on the
// slot that fires hardest at the first answer token, with success and
// destruction measured by greedy decoding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "nkb/factworld.hpp"
#include "nkb/model.hpp"

namespace nkb {

struct SurgeryOp {
  std::size_t slot = 0;
  double lambda = 0.0;
  int original = 0;  // token id currently predicted
  int target = 0;    // token id the edit should produce

  /// Throws ContractError unless slot < d′ and original != target.
  void validate(const Seq2SeqModel& model) const;
};

/// argmax of w′, ties to the lowest index. Throws ContractError
/// ("no active slot") when every weight is zero or below.
std::size_t select_target_slot(std::span<const double> weights);

/// W2′[t,:] += λ (E[target,:] - E[original,:]). Nothing else changes.
void apply_surgery(Seq2SeqModel& model, const SurgeryOp& op);

struct LocalityReport {
  std::size_t changed_values = 0;
  /// Rows of W2′ with at least one changed value.
  std::vector<std::size_t> changed_value_rows;
  /// Parameters other than W2′ that changed.
  std::vector<std::string> other_changes;

  bool single_row() const {
    return changed_value_rows.size() == 1 && other_changes.empty();
  }
};

/// Full bitwise parameter diff of two models of the same configuration.
LocalityReport locality_check(const Seq2SeqModel& before, const Seq2SeqModel& after);

/// Greedy answer with the infilling sentinel stripped.
std::vector<int> predict_answer(const Seq2SeqModel& model, std::span<const int> src,
                                std::size_t max_len = 8);

struct SurgeryOutcome {
  bool success = false;
  std::size_t destroyed = 0;
  std::size_t control_size = 0;
  std::vector<int> prediction;  // post-edit answer to the edited question
};

/// Success: the edited model answers `question` with exactly [target].
/// Destroyed: controls whose answer differs between the two models.
SurgeryOutcome evaluate_update(const Seq2SeqModel& before, const Seq2SeqModel& after,
                               std::span<const int> question, int target,
                               const std::vector<std::vector<int>>& controls,
                               std::size_t max_len = 8);

/// One edit: a question the model answers wrongly, with its gold token as
/// the target and the slot selected from its first-answer-token trace.
struct EditCase {
  std::size_t question_id = 0;  // index into the question set
  std::vector<int> src;
  int original = 0;
  int target = 0;
  std::size_t slot = 0;
  std::vector<std::size_t> controls;  // indices into the control pool
};

struct EditSetStats {
  std::size_t considered = 0;
  std::size_t correct = 0;          // already answered right
  std::size_t multi_token = 0;      // prediction or gold not a single token
  std::size_t no_active_slot = 0;
};

/// Edit requests as line-delimited records "question_id<TAB>target_token".
struct EditSpec {
  std::size_t question_id;
  std::string target;
};
void write_edit_specs(std::ostream& os, const std::vector<EditSpec>& specs);
std::vector<EditSpec> read_edit_specs(std::istream& is);

/// Builds edits for every wrongly answered single-token question, up to
/// `limit` (0 = all). Controls are sampled without replacement from
/// `control_pool`, seeded per edit.
std::vector<EditCase> build_edit_set(const Seq2SeqModel& model, const std::vector<QAPair>& questions,
                                     const std::vector<QAPair>& control_pool,
                                     const Vocabulary& vocab, std::size_t controls_per_edit,
                                     std::uint64_t seed, std::size_t limit = 0,
                                     EditSetStats* stats = nullptr, std::size_t threads = 1);

/// Resolves explicit specs into edits; the original token and slot come from
/// the model's own decode. Throws DataError on unknown ids or tokens.
std::vector<EditCase> edits_from_specs(const Seq2SeqModel& model,
                                       const std::vector<EditSpec>& specs,
                                       const std::vector<QAPair>& questions,
                                       const std::vector<QAPair>& control_pool,
                                       const Vocabulary& vocab, std::size_t controls_per_edit,
                                       std::uint64_t seed);

struct SweepRow {
  double lambda = 0.0;
  double success_rate = 0.0;      // percent
  double destruction_rate = 0.0;  // percent of all control decodes
  std::size_t edits = 0;
  std::size_t successes = 0;
  std::size_t destroyed = 0;
  std::size_t controls = 0;
  std::size_t locality_failures = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  /// outcomes[e][l] for edit e and grid entry l.
  std::vector<std::vector<SurgeryOutcome>> outcomes;
};

/// Every (edit, λ) runs on a fresh copy of `model`; results are merged in
/// (edit, λ) order and do not depend on `threads`. Throws ContractError on
/// an empty edit set.
SweepResult sweep_lambda(const Seq2SeqModel& model, const std::vector<EditCase>& edits,
                         const std::vector<QAPair>& control_pool, const Vocabulary& vocab,
                         std::span<const double> grid, std::size_t threads = 1);

inline constexpr double kDefaultLambdaGrid[] = {0.01, 0.03, 0.05, 0.07, 0.09};

void write_sweep_table(std::ostream& os, const SweepResult& result);
void write_sweep_records(std::ostream& os, const SweepResult& result);

}  // namespace nkb
