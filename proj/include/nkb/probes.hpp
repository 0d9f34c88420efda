// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Interpretability probes over a mounted NKB: value vectors projected into
// the vocabulary through the tied embedding, and keys characterized by the
// questions that trigger them hardest.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nkb/factworld.hpp"
#include "nkb/model.hpp"

namespace nkb {

/// p = Softmax(E v) over the full vocabulary.
std::vector<double> project_value(std::span<const double> value, const Tensor& embedding);

struct TokenProb {
  int token;
  std::string surface;
  double prob;
};

struct ValueReport {
  std::size_t slot = 0;
  std::vector<TokenProb> top;  // descending; ties by token id
  Category category = Category::non_entity;
  /// Flat projection (max - min probability below 1e-12), e.g. a zero value.
  bool degenerate = false;
  double mass = 0.0;  // Σ p over the vocabulary
};

ValueReport value_report(const Seq2SeqModel& model, std::size_t slot, std::size_t k,
                         const Vocabulary& vocab, const World& world);

/// One report per requested slot, in the given order.
std::vector<ValueReport> top_scoring_report(const Seq2SeqModel& model,
                                            std::span<const std::size_t> slots, std::size_t k,
                                            const Vocabulary& vocab, const World& world,
                                            std::size_t threads = 1);

std::map<Category, std::size_t> category_histogram(const std::vector<ValueReport>& reports);
/// Fraction of non-degenerate reports whose top token is an entity.
double entity_top_fraction(const std::vector<ValueReport>& reports);

/// NKB weights recorded while generating the first answer token, one row per
/// question.
struct TriggerMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;         // row-major
  std::vector<std::size_t> fact_ids;  // provenance of each row's question
  /// Decoder position each row was read at.
  std::vector<std::size_t> positions;

  double at(std::size_t q, std::size_t slot) const { return values[q * cols + slot]; }
  std::vector<double> column(std::size_t slot) const;
};

/// Index of the first generated answer token: the sentinel that opens an
/// infilled answer is skipped. Returns the trace length when the decode
/// produced no answer token.
std::size_t first_answer_position(const Decoded& decoded);

/// Throws ContractError on an empty question set or an unmounted model.
TriggerMatrix build_trigger_matrix(const Seq2SeqModel& model, const std::vector<QAPair>& qa,
                                   const Vocabulary& vocab, std::size_t max_len = 8,
                                   std::size_t threads = 1);

struct Trigger {
  std::size_t question;  // row of the trigger matrix
  double weight;
};

struct KeyReport {
  std::size_t key = 0;
  std::vector<Trigger> top;  // descending; ties by question index
  /// Set when fewer questions exist than were requested.
  bool truncated = false;
};

KeyReport top_triggering(const TriggerMatrix& matrix, std::size_t key, std::size_t m = 5);

/// Largest same-relation group among the report's questions divided by the
/// number of questions (0 for an empty report).
double pattern_cohesion(const KeyReport& report, const TriggerMatrix& matrix,
                        const World& world);

/// Keys whose column has at least one positive entry.
std::vector<std::size_t> active_keys(const TriggerMatrix& matrix);

/// Mean cohesion of the top-m reports over `keys`.
double mean_cohesion(const TriggerMatrix& matrix, std::span<const std::size_t> keys,
                     const World& world, std::size_t m = 5);

/// Control: every column independently permuted (seeded).
TriggerMatrix shuffle_columns(const TriggerMatrix& matrix, std::uint64_t seed);

enum class SlotRanking { usage, random };
std::string to_string(SlotRanking r);
SlotRanking slot_ranking_from_string(const std::string& s);

/// Mean w′ per slot over the matrix rows.
std::vector<double> slot_usage(const TriggerMatrix& matrix);

/// The first n slots by descending usage (ties by index), or a seeded
/// random sample of n slots.
std::vector<std::size_t> rank_slots(SlotRanking mode, std::span<const double> usage,
                                    std::size_t n, std::uint64_t seed);

// Report emission: one JSON record per line, plus a plain-text table.
void write_value_records(std::ostream& os, const std::vector<ValueReport>& reports);
void write_value_table(std::ostream& os, const std::vector<ValueReport>& reports);
void write_key_records(std::ostream& os, const std::vector<KeyReport>& reports,
                       const TriggerMatrix& matrix, const std::vector<QAPair>& qa,
                       const World& world);
void write_key_table(std::ostream& os, const std::vector<KeyReport>& reports,
                     const TriggerMatrix& matrix, const std::vector<QAPair>& qa,
                     const World& world);

}  // namespace nkb
