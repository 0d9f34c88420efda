// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "nkb/errors.hpp"
#include "nkb/probes.hpp"
#include "nkb/tokens.hpp"
#include "nkb/training.hpp"

using namespace nkb;

namespace {

struct Fixture {
  World world;
  Vocabulary vocab;
  std::vector<QAPair> qa;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    WorldConfig wc;
    wc.seed = 5;
    wc.entities_per_category = 6;
    wc.relations = 6;
    wc.base_facts = 30;
    wc.new_facts = 10;
    wc.withheld_facts = 0;
    Fixture out;
    out.world = generate_world(wc);
    out.vocab = build_vocab(out.world);
    out.qa = render_qa(out.world, Partition::base);
    return out;
  }();
  return f;
}

Seq2SeqModel probe_model(std::uint64_t seed, double value_scale = 0.3) {
  ModelConfig c;
  c.num_layers = 1;
  c.model_dim = 16;
  c.num_heads = 2;
  c.vocab_size = fixture().vocab.size();
  c.max_seq_len = 20;
  c.nkb_dim = 12;
  Seq2SeqModel m(c, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-value_scale, value_scale);
  for (double& v : m.nkb().w2.values()) v = u(rng);
  std::normal_distribution<double> n(0.0, 0.5);
  for (double& v : m.nkb().w1.values()) v = n(rng);
  return m;
}

}  // namespace

TEST_CASE("value projection") {
  std::mt19937_64 rng(1);
  const std::size_t v = 20, d = 8;
  Tensor e(Shape{v, d});
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : e.values()) x = n(rng);

  const auto flat = project_value(std::vector<double>(d, 0.0), e);
  for (double p : flat) CHECK(p == doctest::Approx(1.0 / v).epsilon(1e-12));

  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> val(d);
    for (double& x : val) x = 3.0 * n(rng);
    const auto p = project_value(val, e);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-9);
    CHECK(*std::min_element(p.begin(), p.end()) >= 0.0);
  }

  // Orthogonal embeddings: v = c·E[j] peaks at j.
  Tensor eye(Shape{6, 6});
  for (std::size_t i = 0; i < 6; ++i) eye.at(i, i) = 1.0;
  for (std::size_t j = 0; j < 6; ++j) {
    std::vector<double> val(6, 0.0);
    val[j] = 25.0;
    const auto p = project_value(val, eye);
    CHECK(argmax_lowest(p) == j);
  }
}

TEST_CASE("value reports") {
  const Fixture& f = fixture();
  Seq2SeqModel zero = probe_model(2);
  for (double& v : zero.nkb().w2.values()) v = 0.0;
  std::vector<std::size_t> slots(12);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  const auto flat = top_scoring_report(zero, slots, 3, f.vocab, f.world);
  for (const auto& r : flat) {
    CHECK(r.degenerate);
    CHECK(r.top[0].token == 0);  // flat distribution: lowest id wins
    CHECK(std::abs(r.mass - 1.0) <= 1e-9);
  }
  CHECK(entity_top_fraction(flat) == 0.0);

  Seq2SeqModel m = probe_model(3, 5.0);
  const auto reps = top_scoring_report(m, slots, 4, f.vocab, f.world, 2);
  const auto hist = category_histogram(reps);
  std::size_t total = 0;
  for (const auto& [cat, count] : hist) total += count;
  CHECK(total == reps.size());
  for (const auto& r : reps) {
    CHECK(std::abs(r.mass - 1.0) <= 1e-9);
    CHECK(r.top.size() == 4);
    for (std::size_t i = 1; i < r.top.size(); ++i) CHECK(r.top[i - 1].prob >= r.top[i].prob);
    const auto cat = f.world.category_of(r.top[0].surface);
    CHECK(r.category == cat.value_or(Category::non_entity));
  }
  std::ostringstream a, b;
  write_value_records(a, reps);
  write_value_records(b, top_scoring_report(m, slots, 4, f.vocab, f.world, 1));
  CHECK(a.str() == b.str());
}

TEST_CASE("trigger matrix") {
  const Fixture& f = fixture();
  Seq2SeqModel m = probe_model(4);
  const TriggerMatrix tm = build_trigger_matrix(m, f.qa, f.vocab, 6, 2);
  CHECK(tm.rows == f.qa.size());
  CHECK(tm.cols == 12);
  for (double v : tm.values) CHECK(v >= 0.0);
  for (std::size_t q = 0; q < tm.rows; ++q) {
    const Decoded d = greedy_decode(m, encode_source(f.qa[q].question, f.vocab), 6);
    const std::size_t pos = first_answer_position(d);
    CHECK(tm.positions[q] == pos);
    REQUIRE(pos < d.trace.positions());
    for (std::size_t k = 0; k < 12; ++k) {
      CHECK(tm.at(q, k) == d.trace.nkb_weights[pos][k]);
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) s += d.trace.nkb_inputs[pos][j] * m.nkb().w1.at(k, j);
      CHECK(std::abs(tm.at(q, k) - std::max(0.0, s)) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(build_trigger_matrix(m, {}, f.vocab), ContractError);
  ModelConfig c = m.config();
  c.nkb_dim = 0;
  CHECK_THROWS_AS(build_trigger_matrix(Seq2SeqModel(c, 1), f.qa, f.vocab), ContractError);

  Decoded d;
  d.tokens = {kSentinelId, 7, 8};
  d.trace.nkb_weights.assign(4, {});
  CHECK(first_answer_position(d) == 1);
}

TEST_CASE("top triggering questions") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    TriggerMatrix tm;
    tm.rows = 25;
    tm.cols = 4;
    tm.values.resize(100);
    std::uniform_int_distribution<int> small(0, 4);
    for (double& v : tm.values) v = small(rng) * 0.5;  // plenty of ties
    for (std::size_t k = 0; k < 4; ++k) {
      const auto rep = top_triggering(tm, k, 7);
      std::vector<std::size_t> oracle(25);
      std::iota(oracle.begin(), oracle.end(), std::size_t{0});
      std::sort(oracle.begin(), oracle.end(), [&](std::size_t a, std::size_t b) {
        if (tm.at(a, k) != tm.at(b, k)) return tm.at(a, k) > tm.at(b, k);
        return a < b;
      });
      REQUIRE(rep.top.size() == 7);
      for (std::size_t i = 0; i < 7; ++i) {
        CHECK(rep.top[i].question == oracle[i]);
        CHECK(rep.top[i].weight == tm.at(oracle[i], k));
      }
    }
  }

  TriggerMatrix one;
  one.rows = 3;
  one.cols = 1;
  one.values = {0.0, 2.5, 0.0};
  const auto rep = top_triggering(one, 0, 5);
  CHECK(rep.truncated);
  CHECK(rep.top.size() == 3);
  CHECK(rep.top[0].question == 1);
  CHECK(rep.top[0].weight > 0.0);
  CHECK_THROWS_AS(top_triggering(one, 1), ContractError);
}

TEST_CASE("pattern cohesion") {
  const Fixture& f = fixture();
  TriggerMatrix tm;
  tm.rows = 5;
  tm.cols = 1;
  tm.values = {5, 4, 3, 2, 1};
  KeyReport rep = top_triggering(tm, 0, 5);

  // Five facts from one relation.
  std::vector<std::size_t> same, distinct;
  std::vector<bool> seen(f.world.relations.size(), false);
  const std::size_t rel0 = f.world.base_facts[0].relation;
  for (const auto& fact : f.world.base_facts) {
    if (fact.relation == rel0 && same.size() < 5) same.push_back(fact.id);
    if (!seen[fact.relation] && distinct.size() < 5) {
      seen[fact.relation] = true;
      distinct.push_back(fact.id);
    }
  }
  REQUIRE(same.size() == 5);
  REQUIRE(distinct.size() == 5);
  tm.fact_ids = same;
  CHECK(pattern_cohesion(rep, tm, f.world) == 1.0);
  tm.fact_ids = distinct;
  CHECK(pattern_cohesion(rep, tm, f.world) == doctest::Approx(0.2));

  TriggerMatrix z;
  z.rows = 2;
  z.cols = 3;
  z.values = {0, 1, 0, 0, 0, 0};
  CHECK(active_keys(z) == std::vector<std::size_t>{1});

  const TriggerMatrix s = shuffle_columns(z, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    auto a = z.column(k), b = s.column(k);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("slot ranking") {
  TriggerMatrix tm;
  tm.rows = 2;
  tm.cols = 3;
  tm.values = {1, 0, 3, 1, 2, 1};
  const auto usage = slot_usage(tm);
  CHECK(usage == std::vector<double>{1.0, 1.0, 2.0});
  CHECK(rank_slots(SlotRanking::usage, usage, 2, 0) == std::vector<std::size_t>{2, 0});
  const auto r = rank_slots(SlotRanking::random, usage, 3, 4);
  CHECK(r == rank_slots(SlotRanking::random, usage, 3, 4));
  CHECK(std::is_permutation(r.begin(), r.end(), std::vector<std::size_t>{0, 1, 2}.begin()));
  CHECK_THROWS_AS(slot_ranking_from_string("best"), ConfigError);
}
