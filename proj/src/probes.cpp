// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include <json.hpp>

#include "nkb/errors.hpp"
#include "nkb/tokens.hpp"
#include "nkb/training.hpp"

namespace nkb {

std::vector<double> project_value(std::span<const double> value, const Tensor& embedding) {
  if (embedding.rank() != 2 || embedding.cols() != value.size()) {
    throw ShapeError("project_value: value of size " + std::to_string(value.size()) +
                     " against embedding " + shape_str(embedding.shape()));
  }
  const std::size_t n = embedding.rows(), d = embedding.cols();
  const auto e = embedding.values();
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += e[j * d + c] * value[c];
    logits[j] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  return logits;
}

ValueReport value_report(const Seq2SeqModel& model, std::size_t slot, std::size_t k,
                         const Vocabulary& vocab, const World& world) {
  const auto& nkb = model.nkb();
  if (slot >= nkb.slots()) {
    throw ContractError("value_report: slot " + std::to_string(slot) + " >= " +
                        std::to_string(nkb.slots()));
  }
  const std::size_t d = model.config().model_dim;
  const auto row = nkb.w2.values().subspan(slot * d, d);
  const auto p = project_value(row, model.embedding());
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t kk = std::min(k, p.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(),
                    [&](int a, int b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  ValueReport r;
  r.slot = slot;
  for (std::size_t i = 0; i < kk; ++i) {
    r.top.push_back({order[i], vocab.token(order[i]), p[order[i]]});
  }
  const auto [mn, mx] = std::minmax_element(p.begin(), p.end());
  r.degenerate = *mx - *mn < 1e-12;
  r.mass = std::accumulate(p.begin(), p.end(), 0.0);
  if (!r.top.empty() && !r.degenerate) {
    r.category = world.category_of(r.top.front().surface).value_or(Category::non_entity);
  }
  return r;
}

std::vector<ValueReport> top_scoring_report(const Seq2SeqModel& model,
                                            std::span<const std::size_t> slots, std::size_t k,
                                            const Vocabulary& vocab, const World& world,
                                            std::size_t threads) {
  std::vector<ValueReport> out(slots.size());
  parallel_for(slots.size(), threads,
               [&](std::size_t i) { out[i] = value_report(model, slots[i], k, vocab, world); });
  return out;
}

std::map<Category, std::size_t> category_histogram(const std::vector<ValueReport>& reports) {
  std::map<Category, std::size_t> h;
  for (Category c : {Category::person, Category::place, Category::organization, Category::date,
                     Category::other, Category::non_entity}) {
    h[c] = 0;
  }
  for (const auto& r : reports) ++h[r.category];
  return h;
}

double entity_top_fraction(const std::vector<ValueReport>& reports) {
  std::size_t n = 0, entity = 0;
  for (const auto& r : reports) {
    if (r.degenerate) continue;
    ++n;
    entity += r.category != Category::non_entity;
  }
  return n == 0 ? 0.0 : static_cast<double>(entity) / static_cast<double>(n);
}

std::vector<double> TriggerMatrix::column(std::size_t slot) const {
  std::vector<double> c(rows);
  for (std::size_t q = 0; q < rows; ++q) c[q] = at(q, slot);
  return c;
}

std::size_t first_answer_position(const Decoded& decoded) {
  std::size_t i = 0;
  while (i < decoded.tokens.size() && decoded.tokens[i] == kSentinelId) ++i;
  // An immediate EOS (no answer token) still has a trace row at index i.
  return std::min(i, decoded.trace.positions());
}

TriggerMatrix build_trigger_matrix(const Seq2SeqModel& model, const std::vector<QAPair>& qa,
                                   const Vocabulary& vocab, std::size_t max_len,
                                   std::size_t threads) {
  if (qa.empty()) throw ContractError("build_trigger_matrix: empty question set");
  if (!model.has_nkb()) throw ContractError("build_trigger_matrix: the model has no NKB");
  if (model.config().nkb_site.stack != Stack::decoder) {
    throw ContractError("build_trigger_matrix: answer-token traces need a decoder-side NKB");
  }
  TriggerMatrix m;
  m.rows = qa.size();
  m.cols = model.nkb().slots();
  m.values.assign(m.rows * m.cols, 0.0);
  m.fact_ids.resize(m.rows);
  m.positions.resize(m.rows);
  parallel_for(qa.size(), threads, [&](std::size_t q) {
    const Decoded d = greedy_decode(model, encode_source(qa[q].question, vocab), max_len);
    const std::size_t pos = first_answer_position(d);
    m.fact_ids[q] = qa[q].fact_id;
    m.positions[q] = pos;
    if (pos < d.trace.positions()) {
      std::copy(d.trace.nkb_weights[pos].begin(), d.trace.nkb_weights[pos].end(),
                m.values.begin() + static_cast<std::ptrdiff_t>(q * m.cols));
    }
  });
  return m;
}

KeyReport top_triggering(const TriggerMatrix& matrix, std::size_t key, std::size_t m) {
  if (key >= matrix.cols) {
    throw ContractError("top_triggering: key " + std::to_string(key) + " >= " +
                        std::to_string(matrix.cols));
  }
  KeyReport r;
  r.key = key;
  r.truncated = m > matrix.rows;
  const std::size_t n = std::min(m, matrix.rows);
  std::vector<std::size_t> order(matrix.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double wa = matrix.at(a, key), wb = matrix.at(b, key);
                      return wa > wb || (wa == wb && a < b);
                    });
  for (std::size_t i = 0; i < n; ++i) r.top.push_back({order[i], matrix.at(order[i], key)});
  return r;
}

double pattern_cohesion(const KeyReport& report, const TriggerMatrix& matrix,
                        const World& world) {
  if (report.top.empty()) return 0.0;
  std::map<std::size_t, std::size_t> by_relation;
  std::size_t best = 0;
  for (const auto& t : report.top) {
    const auto rel = world.fact(matrix.fact_ids[t.question]).relation;
    best = std::max(best, ++by_relation[rel]);
  }
  return static_cast<double>(best) / static_cast<double>(report.top.size());
}

std::vector<std::size_t> active_keys(const TriggerMatrix& matrix) {
  std::vector<std::size_t> keys;
  for (std::size_t k = 0; k < matrix.cols; ++k) {
    for (std::size_t q = 0; q < matrix.rows; ++q) {
      if (matrix.at(q, k) > 0.0) {
        keys.push_back(k);
        break;
      }
    }
  }
  return keys;
}

double mean_cohesion(const TriggerMatrix& matrix, std::span<const std::size_t> keys,
                     const World& world, std::size_t m) {
  if (keys.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t k : keys) s += pattern_cohesion(top_triggering(matrix, k, m), matrix, world);
  return s / static_cast<double>(keys.size());
}

TriggerMatrix shuffle_columns(const TriggerMatrix& matrix, std::uint64_t seed) {
  TriggerMatrix out = matrix;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(matrix.rows);
  for (std::size_t k = 0; k < matrix.cols; ++k) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t q = 0; q < matrix.rows; ++q) {
      out.values[q * matrix.cols + k] = matrix.at(perm[q], k);
    }
  }
  return out;
}

std::string to_string(SlotRanking r) { return r == SlotRanking::usage ? "usage" : "random"; }

SlotRanking slot_ranking_from_string(const std::string& s) {
  if (s == "usage") return SlotRanking::usage;
  if (s == "random") return SlotRanking::random;
  throw ConfigError("unknown slot ranking '" + s + "' (expected usage|random)");
}

std::vector<double> slot_usage(const TriggerMatrix& matrix) {
  std::vector<double> u(matrix.cols, 0.0);
  if (matrix.rows == 0) return u;
  for (std::size_t q = 0; q < matrix.rows; ++q)
    for (std::size_t k = 0; k < matrix.cols; ++k) u[k] += matrix.at(q, k);
  for (double& x : u) x /= static_cast<double>(matrix.rows);
  return u;
}

std::vector<std::size_t> rank_slots(SlotRanking mode, std::span<const double> usage,
                                    std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(usage.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  n = std::min(n, order.size());
  if (mode == SlotRanking::usage) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return usage[a] > usage[b]; });
  } else {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  order.resize(n);
  return order;
}

void write_value_records(std::ostream& os, const std::vector<ValueReport>& reports) {
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["slot"] = r.slot;
    j["category"] = to_string(r.category);
    j["degenerate"] = r.degenerate;
    j["mass"] = r.mass;
    auto& top = j["top"] = nlohmann::ordered_json::array();
    for (const auto& t : r.top) top.push_back({{"token", t.surface}, {"prob", t.prob}});
    os << j.dump() << '\n';
  }
}

void write_value_table(std::ostream& os, const std::vector<ValueReport>& reports) {
  char buf[256];
  os << "slot   category       top tokens\n";
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%-6zu %-14s ", r.slot,
                  r.degenerate ? "(degenerate)" : to_string(r.category).c_str());
    os << buf;
    for (std::size_t i = 0; i < r.top.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%s%s %.3f", i ? ", " : "", r.top[i].surface.c_str(),
                    r.top[i].prob);
      os << buf;
    }
    os << '\n';
  }
  const auto h = category_histogram(reports);
  os << "\ncategory histogram:";
  for (const auto& [c, n] : h) os << ' ' << to_string(c) << '=' << n;
  std::snprintf(buf, sizeof(buf), "\nentity top-token fraction: %.3f\n",
                entity_top_fraction(reports));
  os << buf;
}

namespace {

std::string relation_name(const World& world, std::size_t fact_id) {
  return world.relations[world.fact(fact_id).relation].name;
}

}  // namespace

void write_key_records(std::ostream& os, const std::vector<KeyReport>& reports,
                       const TriggerMatrix& matrix, const std::vector<QAPair>& qa,
                       const World& world) {
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["key"] = r.key;
    j["truncated"] = r.truncated;
    j["cohesion"] = pattern_cohesion(r, matrix, world);
    auto& top = j["top"] = nlohmann::ordered_json::array();
    for (const auto& t : r.top) {
      top.push_back({{"question", join_tokens(qa[t.question].question)},
                     {"relation", relation_name(world, matrix.fact_ids[t.question])},
                     {"weight", t.weight}});
    }
    os << j.dump() << '\n';
  }
}

void write_key_table(std::ostream& os, const std::vector<KeyReport>& reports,
                     const TriggerMatrix& matrix, const std::vector<QAPair>& qa,
                     const World& world) {
  char buf[512];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "key %zu  cohesion %.2f%s\n", r.key,
                  pattern_cohesion(r, matrix, world), r.truncated ? "  (truncated)" : "");
    os << buf;
    for (const auto& t : r.top) {
      std::snprintf(buf, sizeof(buf), "  %8.4f  %-14s %s\n", t.weight,
                    relation_name(world, matrix.fact_ids[t.question]).c_str(),
                    join_tokens(qa[t.question].question).c_str());
      os << buf;
    }
  }
}

}  // namespace nkb
