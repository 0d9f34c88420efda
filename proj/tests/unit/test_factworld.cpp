// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "nkb/errors.hpp"
#include "nkb/factworld.hpp"
#include "nkb/tokens.hpp"

using namespace nkb;

namespace {

WorldConfig desk_world(std::uint64_t seed = 7) {
  WorldConfig c;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("world generation") {
  const World a = generate_world(desk_world());
  const World b = generate_world(desk_world());
  CHECK(a.to_text() == b.to_text());
  CHECK(generate_world(desk_world(8)).to_text() != a.to_text());

  CHECK(a.entities.size() == 200);
  CHECK(a.base_facts.size() == 500);
  CHECK(a.new_facts.size() == 100);

  std::set<std::pair<std::size_t, std::size_t>> pairs, base_pairs;
  for (const auto& f : a.base_facts) {
    pairs.insert({f.subject, f.relation});
    base_pairs.insert({f.subject, f.relation});
  }
  for (const auto& f : a.new_facts) {
    pairs.insert({f.subject, f.relation});
    CHECK(base_pairs.count({f.subject, f.relation}) == 0);
  }
  CHECK(pairs.size() == 600);

  for (Partition p : {Partition::base, Partition::fresh, Partition::withheld}) {
    for (const auto& f : a.facts(p)) {
      const auto& rel = a.relations[f.relation];
      CHECK(a.entities[f.object].category == rel.object_category);
      CHECK(std::count(rel.subject_categories.begin(), rel.subject_categories.end(),
                       a.entities[f.subject].category) == 1);
      CHECK(a.fact(f.id).object == f.object);
    }
  }

  const World round = World::from_text(a.to_text());
  CHECK(round.to_text() == a.to_text());

  WorldConfig none = desk_world();
  none.new_facts = 0;
  const World w0 = generate_world(none);
  CHECK(w0.new_facts.empty());
  CHECK(render_statements(w0, Partition::fresh).empty());

  WorldConfig too_many = desk_world();
  too_many.base_facts = 100000;
  CHECK_THROWS_AS(generate_world(too_many), ConfigError);
}

TEST_CASE("statements") {
  const World w = generate_world(desk_world());
  const auto st = render_statements(w, Partition::base);
  std::size_t templates = 0;
  for (const auto& f : w.base_facts) templates += w.relations[f.relation].templates.size();
  CHECK(st.size() == templates);
  for (const auto& s : st) {
    REQUIRE(!s.spans.empty());
    for (const auto& sp : s.spans) {
      CHECK(sp.end > sp.begin);
      CHECK(w.category_of(s.tokens[sp.begin]).value() == sp.category);
    }
  }

  // Hand example: born_in renders through its first template.
  World hand = w;
  hand.base_facts.clear();
  std::size_t person = 0, place = 0;
  while (hand.entities[person].category != Category::person) ++person;
  while (hand.entities[place].category != Category::place) ++place;
  hand.base_facts.push_back({0, person, 0, place});
  REQUIRE(hand.relations[0].name == "born_in");
  const auto one = render_statements(hand, Partition::base);
  const std::string s = hand.entities[person].surface, o = hand.entities[place].surface;
  CHECK(join_tokens(one[0].tokens) == s + " was born in " + o + " .");
  CHECK(one[0].spans.size() == 2);
  CHECK(one[0].spans[0].begin == 0);
  CHECK(one[0].spans[1].begin == 4);
}

TEST_CASE("salient span masking") {
  std::mt19937_64 rng(1);
  Statement single{{"the", "Zorvan", "rests"}, {{1, 2, Category::person}}, 0};
  for (int i = 0; i < 20; ++i) {
    const auto ex = salient_span_mask(single, rng);
    CHECK(ex.input == std::vector<std::string>{"the", kSentinelToken, "rests"});
    CHECK(ex.target == std::vector<std::string>{kSentinelToken, "Zorvan"});
  }

  Statement two{{"A", "was", "born", "in", "B", "."},
                {{0, 1, Category::person}, {4, 5, Category::place}}, 0};
  std::size_t first = 0;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ex = salient_span_mask(two, rng);
    if (ex.target[1] == "A") ++first;
    CHECK(unmask(ex) == two.tokens);
  }
  const double frac = static_cast<double>(first) / n;
  CHECK(frac > 0.48);
  CHECK(frac < 0.52);

  Statement empty{{"nothing", "here"}, {}, 0};
  CHECK_THROWS_AS(salient_span_mask(empty, rng), DataError);

  const World w = generate_world(desk_world());
  const auto st = render_statements(w, Partition::fresh);
  const auto corpus = build_ssm_corpus(st, 3, 5);
  CHECK(corpus.size() == st.size() * 3);
  for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(unmask(corpus[i]) == st[i / 3].tokens);
  const auto again = build_ssm_corpus(st, 3, 5);
  for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(again[i].input == corpus[i].input);
}

TEST_CASE("question answering pairs") {
  const World w = generate_world(desk_world());
  for (Partition p : {Partition::base, Partition::fresh}) {
    const auto qa = render_qa(w, p);
    CHECK(qa.size() == w.facts(p).size());
    for (const auto& q : qa) {
      CHECK(q.answer.size() <= kMaxAnswerTokens);
      CHECK(q.answer == std::vector<std::string>{w.entities[w.fact(q.fact_id).object].surface});
    }
  }
  World hand = w;
  hand.base_facts.clear();
  std::size_t r = 0;
  while (hand.relations[r].name != "capital_of") ++r;
  std::size_t a = 0, b;
  while (hand.entities[a].category != Category::place) ++a;
  b = a + 1;
  hand.base_facts.push_back({0, a, r, b});
  const auto qa = render_qa(hand, Partition::base);
  CHECK(join_tokens(qa[0].question) == "what is " + hand.entities[a].surface + " the capital of ?");
  CHECK(join_tokens(qa[0].answer) == hand.entities[b].surface);
}

TEST_CASE("vocabulary") {
  const World w = generate_world(desk_world());
  const Vocabulary v = build_vocab(w);
  for (const char* s : {kPadToken, kBosToken, kEosToken, kSentinelToken}) {
    CHECK(std::count(v.tokens().begin(), v.tokens().end(), std::string(s)) == 1);
  }
  CHECK(v.id(kPadToken) == kPadId);
  CHECK(v.id(kSentinelToken) == kSentinelId);

  std::set<std::string> words;
  for (const auto& e : w.entities) words.insert(e.surface);
  for (const auto& r : w.relations) {
    for (const auto& t : r.templates)
      for (const auto& tok : split_tokens(t))
        if (tok != "{s}" && tok != "{o}") words.insert(tok);
    for (const auto& tok : split_tokens(r.question))
      if (tok != "{s}") words.insert(tok);
  }
  CHECK(v.size() == words.size() + 4);

  for (Partition p : {Partition::base, Partition::fresh, Partition::withheld}) {
    for (const auto& s : render_statements(w, p)) CHECK(v.decode(v.encode(s.tokens)) == s.tokens);
  }
  CHECK_THROWS_AS(v.id("no-such-word"), DataError);
}

TEST_CASE("corpus and qa files") {
  std::vector<MaskedExample> corpus{
      {{"a\\b", kSentinelToken}, {kSentinelToken, "x\\y"}, Category::date},
      {{"plain"}, {kSentinelToken, "z"}, Category::other}};
  for (const std::string f : {"tab\there", "new\nline", "back\\slash", ""}) {
    CHECK(unescape_field(escape_field(f)) == f);
    CHECK(escape_field(f).find('\t') == std::string::npos);
  }
  std::stringstream ss;
  write_corpus(ss, corpus);
  const auto back = read_corpus(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].input == corpus[0].input);
  CHECK(back[0].target == corpus[0].target);
  CHECK(back[1].input == corpus[1].input);
  CHECK(back[1].category == Category::other);

  const World w = generate_world(desk_world());
  const auto qa = render_qa(w, Partition::fresh);
  std::stringstream qs;
  write_qa(qs, qa);
  const auto qb = read_qa(qs);
  REQUIRE(qb.size() == qa.size());
  for (std::size_t i = 0; i < qa.size(); ++i) {
    CHECK(qb[i].question == qa[i].question);
    CHECK(qb[i].fact_id == qa[i].fact_id);
  }

  std::stringstream bad("only-one-field\n");
  CHECK_THROWS_AS(read_corpus(bad), DataError);
}

TEST_CASE("span recognizer") {
  const auto st = recognize_spans(split_tokens("in 1984 the New York office of Acme opened"));
  REQUIRE(st.spans.size() == 3);
  CHECK(st.spans[0].category == Category::date);
  CHECK(st.spans[1].begin == 3);
  CHECK(st.spans[1].end == 5);
  CHECK(st.spans[2].begin == 7);
}
