// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/surgery.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include <json.hpp>

#include "nkb/errors.hpp"
#include "nkb/probes.hpp"
#include "nkb/rng.hpp"
#include "nkb/tokens.hpp"
#include "nkb/training.hpp"

namespace nkb {

void SurgeryOp::validate(const Seq2SeqModel& model) const {
  const std::size_t slots = model.nkb().slots();
  if (slot >= slots) {
    throw ContractError("surgery: slot " + std::to_string(slot) + " outside an NKB of " +
                        std::to_string(slots) + " slots");
  }
  const int vocab = static_cast<int>(model.config().vocab_size);
  if (original < 0 || original >= vocab || target < 0 || target >= vocab) {
    throw ContractError("surgery: token id out of range");
  }
  if (original == target) throw ContractError("surgery: original and target tokens coincide");
}

std::size_t select_target_slot(std::span<const double> weights) {
  if (weights.empty()) throw ContractError("no active slot: empty trace");
  const std::size_t t = argmax_lowest(weights);
  if (!(weights[t] > 0.0)) throw ContractError("no active slot: every NKB weight is zero");
  return t;
}

void apply_surgery(Seq2SeqModel& model, const SurgeryOp& op) {
  op.validate(model);
  const std::size_t d = model.config().model_dim;
  const auto e = model.embedding().values();
  auto row = model.nkb().w2.values().subspan(op.slot * d, d);
  const auto et = e.subspan(static_cast<std::size_t>(op.target) * d, d);
  const auto eo = e.subspan(static_cast<std::size_t>(op.original) * d, d);
  for (std::size_t c = 0; c < d; ++c) row[c] += op.lambda * (et[c] - eo[c]);
}

LocalityReport locality_check(const Seq2SeqModel& before, const Seq2SeqModel& after) {
  if (!(before.config() == after.config())) {
    throw ContractError("locality_check: models have different configurations");
  }
  LocalityReport r;
  const auto pa = before.parameters(), pb = after.parameters();
  const std::size_t d = before.config().model_dim;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].tensor.values(), vb = pb[i].tensor.values();
    std::size_t changed = 0;
    for (std::size_t j = 0; j < va.size(); ++j) {
      if (std::memcmp(&va[j], &vb[j], sizeof(double)) == 0) continue;
      ++changed;
      if (pa[i].name == "nkb.w2") {
        const std::size_t row = j / d;
        if (r.changed_value_rows.empty() || r.changed_value_rows.back() != row) {
          r.changed_value_rows.push_back(row);
        }
      }
    }
    r.changed_values += changed;
    if (changed > 0 && pa[i].name != "nkb.w2") r.other_changes.push_back(pa[i].name);
  }
  return r;
}

std::vector<int> predict_answer(const Seq2SeqModel& model, std::span<const int> src,
                                std::size_t max_len) {
  Decoded d = greedy_decode(model, src, max_len);
  std::vector<int> out;
  for (int t : d.tokens) {
    if (t != kSentinelId) out.push_back(t);
  }
  return out;
}

SurgeryOutcome evaluate_update(const Seq2SeqModel& before, const Seq2SeqModel& after,
                               std::span<const int> question, int target,
                               const std::vector<std::vector<int>>& controls,
                               std::size_t max_len) {
  SurgeryOutcome o;
  o.prediction = predict_answer(after, question, max_len);
  o.success = o.prediction.size() == 1 && o.prediction[0] == target;
  o.control_size = controls.size();
  for (const auto& c : controls) {
    if (predict_answer(before, c, max_len) != predict_answer(after, c, max_len)) ++o.destroyed;
  }
  return o;
}

namespace {

std::vector<std::size_t> sample_controls(std::size_t question_id, std::size_t fact_id,
                                         const std::vector<QAPair>& pool, std::size_t n,
                                         std::uint64_t seed) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].fact_id != fact_id) candidates.push_back(i);
  }
  if (candidates.size() < n) {
    throw ContractError("surgery: control pool has " + std::to_string(candidates.size()) +
                        " usable questions, " + std::to_string(n) + " needed");
  }
  std::mt19937_64 rng(derive_seed(seed, "controls/" + std::to_string(question_id)));
  std::vector<std::size_t> out;
  std::sample(candidates.begin(), candidates.end(), std::back_inserter(out),
              static_cast<std::ptrdiff_t>(n), rng);
  return out;
}

struct Probe {
  std::vector<int> answer;
  std::optional<std::size_t> slot;
};

Probe probe_question(const Seq2SeqModel& model, const std::vector<int>& src) {
  const Decoded d = greedy_decode(model, src, 8);
  Probe p;
  for (int t : d.tokens) {
    if (t != kSentinelId) p.answer.push_back(t);
  }
  const std::size_t pos = first_answer_position(d);
  if (pos < d.trace.positions()) {
    const auto& w = d.trace.nkb_weights[pos];
    const std::size_t t = argmax_lowest(w);
    if (w[t] > 0.0) p.slot = t;
  }
  return p;
}

}  // namespace

void write_edit_specs(std::ostream& os, const std::vector<EditSpec>& specs) {
  for (const auto& s : specs) os << s.question_id << '\t' << escape_field(s.target) << '\n';
}

std::vector<EditSpec> read_edit_specs(std::istream& is) {
  std::vector<EditSpec> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("edit specs line " + std::to_string(lineno) + ": expected two fields");
    }
    try {
      std::size_t pos = 0;
      const std::string id = line.substr(0, tab);
      const unsigned long long q = std::stoull(id, &pos);
      if (pos != id.size()) throw std::invalid_argument(id);
      out.push_back({static_cast<std::size_t>(q), unescape_field(line.substr(tab + 1))});
    } catch (const std::logic_error&) {
      throw DataError("edit specs line " + std::to_string(lineno) + ": bad question id");
    }
  }
  return out;
}

std::vector<EditCase> build_edit_set(const Seq2SeqModel& model, const std::vector<QAPair>& questions,
                                     const std::vector<QAPair>& control_pool,
                                     const Vocabulary& vocab, std::size_t controls_per_edit,
                                     std::uint64_t seed, std::size_t limit, EditSetStats* stats,
                                     std::size_t threads) {
  if (!model.has_nkb()) throw ContractError("surgery: the model has no NKB");
  std::vector<std::vector<int>> srcs(questions.size());
  std::vector<Probe> probes(questions.size());
  parallel_for(questions.size(), threads, [&](std::size_t i) {
    srcs[i] = encode_source(questions[i].question, vocab);
    probes[i] = probe_question(model, srcs[i]);
  });
  EditSetStats st;
  std::vector<EditCase> edits;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (limit != 0 && edits.size() == limit) break;
    ++st.considered;
    const auto gold = vocab.encode(questions[i].answer);
    const auto& pred = probes[i].answer;
    if (pred == gold) {
      ++st.correct;
      continue;
    }
    if (gold.size() != 1 || pred.size() != 1) {
      ++st.multi_token;
      continue;
    }
    if (!probes[i].slot) {
      ++st.no_active_slot;
      continue;
    }
    EditCase e;
    e.question_id = i;
    e.src = srcs[i];
    e.original = pred[0];
    e.target = gold[0];
    e.slot = *probes[i].slot;
    e.controls = sample_controls(i, questions[i].fact_id, control_pool, controls_per_edit, seed);
    edits.push_back(std::move(e));
  }
  if (stats != nullptr) *stats = st;
  return edits;
}

std::vector<EditCase> edits_from_specs(const Seq2SeqModel& model,
                                       const std::vector<EditSpec>& specs,
                                       const std::vector<QAPair>& questions,
                                       const std::vector<QAPair>& control_pool,
                                       const Vocabulary& vocab, std::size_t controls_per_edit,
                                       std::uint64_t seed) {
  if (!model.has_nkb()) throw ContractError("surgery: the model has no NKB");
  std::vector<EditCase> edits;
  for (const auto& s : specs) {
    if (s.question_id >= questions.size()) {
      throw DataError("edit spec: question id " + std::to_string(s.question_id) +
                      " out of range");
    }
    if (!vocab.contains(s.target)) throw DataError("edit spec: unknown token '" + s.target + "'");
    EditCase e;
    e.question_id = s.question_id;
    e.src = encode_source(questions[s.question_id].question, vocab);
    const Probe p = probe_question(model, e.src);
    if (p.answer.size() != 1) {
      throw DataError("edit spec: question " + std::to_string(s.question_id) +
                      " is not answered with a single token");
    }
    if (!p.slot) {
      throw ContractError("no active slot for question " + std::to_string(s.question_id));
    }
    e.original = p.answer[0];
    e.target = vocab.id(s.target);
    e.slot = *p.slot;
    e.controls = sample_controls(s.question_id, questions[s.question_id].fact_id, control_pool,
                                 controls_per_edit, seed);
    edits.push_back(std::move(e));
  }
  return edits;
}

SweepResult sweep_lambda(const Seq2SeqModel& model, const std::vector<EditCase>& edits,
                         const std::vector<QAPair>& control_pool, const Vocabulary& vocab,
                         std::span<const double> grid, std::size_t threads) {
  if (edits.empty()) throw ContractError("sweep_lambda: empty edit set");
  if (grid.empty()) throw ContractError("sweep_lambda: empty lambda grid");

  // Pre-edit control answers are shared by every λ.
  std::vector<std::size_t> used;
  for (const auto& e : edits) used.insert(used.end(), e.controls.begin(), e.controls.end());
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  std::vector<std::vector<int>> control_src(control_pool.size()), before(control_pool.size());
  parallel_for(used.size(), threads, [&](std::size_t i) {
    const std::size_t c = used[i];
    control_src[c] = encode_source(control_pool[c].question, vocab);
    before[c] = predict_answer(model, control_src[c]);
  });

  SweepResult r;
  r.outcomes.assign(edits.size(), std::vector<SurgeryOutcome>(grid.size()));
  std::vector<std::vector<char>> local(edits.size(), std::vector<char>(grid.size(), 1));
  parallel_for(edits.size() * grid.size(), threads, [&](std::size_t job) {
    const std::size_t e = job / grid.size(), l = job % grid.size();
    const EditCase& ec = edits[e];
    Seq2SeqModel edited = model.clone();
    apply_surgery(edited, {ec.slot, grid[l], ec.original, ec.target});
    local[e][l] = grid[l] == 0.0 || locality_check(model, edited).single_row();
    SurgeryOutcome o;
    o.prediction = predict_answer(edited, ec.src);
    o.success = o.prediction.size() == 1 && o.prediction[0] == ec.target;
    o.control_size = ec.controls.size();
    for (std::size_t c : ec.controls) {
      if (predict_answer(edited, control_src[c]) != before[c]) ++o.destroyed;
    }
    r.outcomes[e][l] = std::move(o);
  });

  for (std::size_t l = 0; l < grid.size(); ++l) {
    SweepRow row;
    row.lambda = grid[l];
    row.edits = edits.size();
    for (std::size_t e = 0; e < edits.size(); ++e) {
      const auto& o = r.outcomes[e][l];
      row.successes += o.success;
      row.destroyed += o.destroyed;
      row.controls += o.control_size;
      row.locality_failures += !local[e][l];
    }
    row.success_rate = 100.0 * static_cast<double>(row.successes) / static_cast<double>(row.edits);
    row.destruction_rate =
        row.controls == 0 ? 0.0
                          : 100.0 * static_cast<double>(row.destroyed) / static_cast<double>(row.controls);
    r.rows.push_back(row);
  }
  return r;
}

void write_sweep_table(std::ostream& os, const SweepResult& result) {
  char buf[128];
  os << "lambda  success%  destruction%\n";
  for (const auto& row : result.rows) {
    std::snprintf(buf, sizeof(buf), "%-7.2f %8.1f  %12.1f\n", row.lambda, row.success_rate,
                  row.destruction_rate);
    os << buf;
  }
}

void write_sweep_records(std::ostream& os, const SweepResult& result) {
  for (const auto& row : result.rows) {
    nlohmann::ordered_json j;
    j["lambda"] = row.lambda;
    j["success_rate"] = row.success_rate;
    j["destruction_rate"] = row.destruction_rate;
    j["edits"] = row.edits;
    j["successes"] = row.successes;
    j["destroyed"] = row.destroyed;
    j["controls"] = row.controls;
    j["locality_failures"] = row.locality_failures;
    os << j.dump() << '\n';
  }
}

}  // namespace nkb
