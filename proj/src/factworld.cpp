// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/factworld.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "nkb/errors.hpp"
#include "nkb/rng.hpp"
#include "nkb/tokens.hpp"

namespace nkb {

namespace {

using C = Category;

const std::vector<std::string>& syllables() {
  static const std::vector<std::string> s = {
      "ka", "lo", "ve", "ri", "tan", "mor", "sel", "du", "bri", "na",
      "gal", "the", "xo", "pel", "quo", "rin", "sa", "tor", "vi", "zen",
      "mar", "os", "ul", "fen", "dra", "ko", "lis", "ba", "ni", "ter"};
  return s;
}

const std::vector<std::string>& suffixes(Category c) {
  static const std::vector<std::string> person = {""};
  static const std::vector<std::string> place = {"ia", "burg", "stan", "ford", "mere"};
  static const std::vector<std::string> org = {"corp", "tech", "works", "guild"};
  static const std::vector<std::string> other = {"ite", "ium", "ex", "ine"};
  switch (c) {
    case C::person: return person;
    case C::place: return place;
    case C::organization: return org;
    default: return other;
  }
}

std::string make_name(Category c, std::mt19937_64& rng) {
  const auto& syl = syllables();
  const auto& suf = suffixes(c);
  std::uniform_int_distribution<std::size_t> count(2, 3);
  std::uniform_int_distribution<std::size_t> pick(0, syl.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_suf(0, suf.size() - 1);
  std::string name;
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) name += syl[pick(rng)];
  name += suf[pick_suf(rng)];
  name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
  return name;
}

std::vector<std::string> instantiate(const std::string& tmpl, const std::string& s,
                                     const std::string& o, std::size_t* s_pos,
                                     std::size_t* o_pos) {
  std::vector<std::string> out;
  for (const auto& tok : split_tokens(tmpl)) {
    if (tok == "{s}") {
      if (s_pos) *s_pos = out.size();
      out.push_back(s);
    } else if (tok == "{o}") {
      if (o_pos) *o_pos = out.size();
      out.push_back(o);
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

std::string join_categories(const std::vector<Category>& cats) {
  std::string s;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    if (i) s += ',';
    s += to_string(cats[i]);
  }
  return s;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::size_t to_index(const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("expected an index, got '" + s + "'");
  }
}

}  // namespace

std::string to_string(Category c) {
  switch (c) {
    case C::person: return "Person";
    case C::place: return "Place";
    case C::organization: return "Organization";
    case C::date: return "Date";
    case C::other: return "Other";
    case C::non_entity: return "Non-entity";
  }
  return "?";
}

Category category_from_string(const std::string& s) {
  for (Category c : {C::person, C::place, C::organization, C::date, C::other, C::non_entity}) {
    if (to_string(c) == s) return c;
  }
  throw DataError("unknown category '" + s + "'");
}

std::string to_string(Partition p) {
  switch (p) {
    case Partition::base: return "base";
    case Partition::fresh: return "new";
    case Partition::withheld: return "withheld";
  }
  return "?";
}

Partition partition_from_string(const std::string& s) {
  if (s == "base") return Partition::base;
  if (s == "new") return Partition::fresh;
  if (s == "withheld") return Partition::withheld;
  throw DataError("unknown partition '" + s + "' (expected base|new|withheld)");
}

const std::vector<Relation>& relation_catalog() {
  static const std::vector<Relation> catalog = {
      {"born_in", {C::person}, C::place,
       {"{s} was born in {o} .", "the birthplace of {s} is {o} ."},
       "where was {s} born ?"},
      {"birth_year", {C::person}, C::date,
       {"{s} was born in the year {o} .", "the birth year of {s} is {o} ."},
       "in what year was {s} born ?"},
      {"works_for", {C::person}, C::organization,
       {"{s} works for {o} .", "the employer of {s} is {o} ."},
       "who does {s} work for ?"},
      {"married_to", {C::person}, C::person,
       {"{s} is married to {o} .", "the spouse of {s} is {o} ."},
       "who is {s} married to ?"},
      {"located_in", {C::place, C::organization, C::other}, C::place,
       {"{s} is located in {o} .", "the location of {s} is {o} ."},
       "where is {s} located ?"},
      {"founded_in", {C::organization, C::place}, C::date,
       {"{s} was founded in {o} .", "the founding year of {s} is {o} ."},
       "when was {s} founded ?"},
      {"owned_by", {C::other, C::place}, C::organization,
       {"{s} is owned by {o} .", "the owner of {s} is {o} ."},
       "who owns {s} ?"},
      {"named_after", {C::place, C::organization, C::other}, C::person,
       {"{s} is named after {o} .", "the namesake of {s} is {o} ."},
       "who is {s} named after ?"},
      {"capital_of", {C::place}, C::place,
       {"{s} is the capital of {o} .", "the country with capital {s} is {o} ."},
       "what is {s} the capital of ?"},
      {"invented_by", {C::other}, C::person,
       {"{s} was invented by {o} .", "the inventor of {s} is {o} ."},
       "who invented {s} ?"},
      {"partner_of", {C::organization}, C::organization,
       {"{s} is a partner of {o} .", "the main partner of {s} is {o} ."},
       "who is {s} a partner of ?"},
      {"famous_for", {C::person, C::place, C::organization}, C::other,
       {"{s} is famous for {o} .", "the claim to fame of {s} is {o} ."},
       "what is {s} famous for ?"},
  };
  return catalog;
}

// ---------------------------------------------------------------------------
// World

const std::vector<FactTriple>& World::facts(Partition p) const {
  switch (p) {
    case Partition::base: return base_facts;
    case Partition::fresh: return new_facts;
    case Partition::withheld: return withheld_facts;
  }
  return base_facts;
}

std::size_t World::fact_count() const {
  return base_facts.size() + new_facts.size() + withheld_facts.size();
}

const FactTriple& World::fact(std::size_t id) const {
  for (const auto* part : {&base_facts, &new_facts, &withheld_facts}) {
    for (const auto& f : *part) {
      if (f.id == id) return f;
    }
  }
  throw DataError("no fact with id " + std::to_string(id));
}

std::optional<Category> World::category_of(const std::string& surface) const {
  for (const auto& e : entities) {
    if (e.surface == surface) return e.category;
  }
  return std::nullopt;
}

World generate_world(const WorldConfig& cfg) {
  const auto& catalog = relation_catalog();
  if (cfg.entities_per_category < 2) {
    throw ConfigError("entities_per_category must be at least 2");
  }
  if (cfg.relations == 0 || cfg.relations > catalog.size()) {
    throw ConfigError("relations must be in [1, " + std::to_string(catalog.size()) + "]");
  }
  if (cfg.base_facts == 0) throw ConfigError("base_facts must be positive");

  World w;
  w.config = cfg;
  std::mt19937_64 rng(derive_seed(cfg.seed, "world"));

  std::set<std::string> used;
  for (std::size_t ci = 0; ci < kNumEntityCategories; ++ci) {
    const auto cat = static_cast<Category>(ci);
    for (std::size_t i = 0; i < cfg.entities_per_category; ++i) {
      std::string name;
      if (cat == C::date) {
        std::uniform_int_distribution<int> year(1500, 2020);
        do name = std::to_string(year(rng)); while (used.count(name));
      } else {
        do name = make_name(cat, rng); while (used.count(name));
      }
      used.insert(name);
      w.entities.push_back({name, cat});
    }
  }
  w.relations.assign(catalog.begin(), catalog.begin() + static_cast<long>(cfg.relations));

  // Every admissible (subject, relation) pair, then a shuffled prefix of them.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t r = 0; r < w.relations.size(); ++r) {
    for (std::size_t e = 0; e < w.entities.size(); ++e) {
      const auto& cats = w.relations[r].subject_categories;
      if (std::find(cats.begin(), cats.end(), w.entities[e].category) != cats.end()) {
        pairs.emplace_back(e, r);
      }
    }
  }
  const std::size_t wanted = cfg.base_facts + cfg.new_facts + cfg.withheld_facts;
  if (wanted > pairs.size()) {
    throw ConfigError("infeasible world: " + std::to_string(wanted) +
                      " facts requested but only " + std::to_string(pairs.size()) +
                      " distinct (subject, relation) pairs exist");
  }
  std::shuffle(pairs.begin(), pairs.end(), rng);

  auto objects_of = [&](Category c) {
    std::vector<std::size_t> idx;
    for (std::size_t e = 0; e < w.entities.size(); ++e) {
      if (w.entities[e].category == c) idx.push_back(e);
    }
    return idx;
  };
  for (std::size_t i = 0; i < wanted; ++i) {
    const auto [s, r] = pairs[i];
    std::vector<std::size_t> cand = objects_of(w.relations[r].object_category);
    cand.erase(std::remove(cand.begin(), cand.end(), s), cand.end());
    std::uniform_int_distribution<std::size_t> pick(0, cand.size() - 1);
    FactTriple f{i, s, r, cand[pick(rng)]};
    if (i < cfg.base_facts) w.base_facts.push_back(f);
    else if (i < cfg.base_facts + cfg.new_facts) w.new_facts.push_back(f);
    else w.withheld_facts.push_back(f);
  }
  return w;
}

std::string World::to_text() const {
  std::ostringstream os;
  os << "# nkb world v1\n";
  os << "config seed=" << config.seed << " entities_per_category=" << config.entities_per_category
     << " relations=" << config.relations << " base_facts=" << config.base_facts
     << " new_facts=" << config.new_facts << " withheld_facts=" << config.withheld_facts << '\n';
  for (std::size_t i = 0; i < entities.size(); ++i) {
    os << "entity\t" << i << '\t' << entities[i].surface << '\t' << to_string(entities[i].category) << '\n';
  }
  for (std::size_t i = 0; i < relations.size(); ++i) {
    const auto& r = relations[i];
    os << "relation\t" << i << '\t' << r.name << '\t' << join_categories(r.subject_categories)
       << '\t' << to_string(r.object_category) << '\t' << r.question;
    for (const auto& t : r.templates) os << '\t' << t;
    os << '\n';
  }
  for (Partition p : {Partition::base, Partition::fresh, Partition::withheld}) {
    for (const auto& f : facts(p)) {
      os << "fact\t" << to_string(p) << '\t' << f.id << '\t' << entities[f.subject].surface << '\t'
         << relations[f.relation].name << '\t' << entities[f.object].surface << '\n';
    }
  }
  return os.str();
}

World World::from_text(const std::string& text) {
  World w;
  std::istringstream is(text);
  std::string line;
  std::unordered_map<std::string, std::size_t> entity_index, relation_index;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("config ", 0) == 0) {
      std::istringstream fs(line.substr(7));
      std::string kv;
      while (fs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw DataError("world: bad config field '" + kv + "'");
        const std::string k = kv.substr(0, eq);
        const std::size_t v = to_index(kv.substr(eq + 1));
        if (k == "seed") w.config.seed = v;
        else if (k == "entities_per_category") w.config.entities_per_category = v;
        else if (k == "relations") w.config.relations = v;
        else if (k == "base_facts") w.config.base_facts = v;
        else if (k == "new_facts") w.config.new_facts = v;
        else if (k == "withheld_facts") w.config.withheld_facts = v;
        else throw DataError("world: unknown config field '" + k + "'");
      }
      continue;
    }
    const auto f = split_on(line, '\t');
    if (f[0] == "entity" && f.size() == 4) {
      entity_index[f[2]] = w.entities.size();
      w.entities.push_back({f[2], category_from_string(f[3])});
    } else if (f[0] == "relation" && f.size() >= 7) {
      Relation r;
      r.name = f[2];
      for (const auto& c : split_on(f[3], ',')) r.subject_categories.push_back(category_from_string(c));
      r.object_category = category_from_string(f[4]);
      r.question = f[5];
      r.templates.assign(f.begin() + 6, f.end());
      relation_index[r.name] = w.relations.size();
      w.relations.push_back(std::move(r));
    } else if (f[0] == "fact" && f.size() == 6) {
      if (!entity_index.count(f[3]) || !relation_index.count(f[4]) || !entity_index.count(f[5])) {
        throw DataError("world: fact references unknown names: " + line);
      }
      FactTriple t{to_index(f[2]), entity_index[f[3]], relation_index[f[4]], entity_index[f[5]]};
      switch (partition_from_string(f[1])) {
        case Partition::base: w.base_facts.push_back(t); break;
        case Partition::fresh: w.new_facts.push_back(t); break;
        case Partition::withheld: w.withheld_facts.push_back(t); break;
      }
    } else {
      throw DataError("world: malformed line: " + line);
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Rendering

std::vector<Statement> render_statements(const World& world, Partition partition) {
  std::vector<Statement> out;
  for (const auto& f : world.facts(partition)) {
    const auto& rel = world.relations[f.relation];
    const auto& s = world.entities[f.subject];
    const auto& o = world.entities[f.object];
    for (const auto& tmpl : rel.templates) {
      Statement st;
      std::size_t sp = 0, op = 0;
      st.tokens = instantiate(tmpl, s.surface, o.surface, &sp, &op);
      st.spans.push_back({sp, sp + 1, s.category});
      st.spans.push_back({op, op + 1, o.category});
      std::sort(st.spans.begin(), st.spans.end(),
                [](const Span& a, const Span& b) { return a.begin < b.begin; });
      st.fact_id = f.id;
      out.push_back(std::move(st));
    }
  }
  return out;
}

MaskedExample salient_span_mask(const Statement& statement, std::mt19937_64& rng) {
  if (statement.spans.empty()) {
    throw DataError("salient_span_mask: statement has no salient span");
  }
  std::uniform_int_distribution<std::size_t> pick(0, statement.spans.size() - 1);
  const Span& span = statement.spans[pick(rng)];
  MaskedExample ex;
  ex.category = span.category;
  ex.target.push_back(kSentinelToken);
  for (std::size_t i = 0; i < statement.tokens.size(); ++i) {
    if (i == span.begin) ex.input.push_back(kSentinelToken);
    if (i >= span.begin && i < span.end) {
      ex.target.push_back(statement.tokens[i]);
    } else {
      ex.input.push_back(statement.tokens[i]);
    }
  }
  return ex;
}

std::vector<std::string> unmask(const MaskedExample& ex) {
  std::vector<std::string> out;
  for (const auto& tok : ex.input) {
    if (tok == kSentinelToken) {
      out.insert(out.end(), ex.target.begin() + 1, ex.target.end());
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

std::vector<MaskedExample> build_ssm_corpus(const std::vector<Statement>& statements,
                                            std::size_t draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<MaskedExample> out;
  out.reserve(statements.size() * draws);
  for (const auto& st : statements) {
    for (std::size_t k = 0; k < draws; ++k) out.push_back(salient_span_mask(st, rng));
  }
  return out;
}

std::vector<QAPair> render_qa(const World& world, Partition partition) {
  std::vector<QAPair> out;
  for (const auto& f : world.facts(partition)) {
    const auto& rel = world.relations[f.relation];
    QAPair qa;
    qa.question = instantiate(rel.question, world.entities[f.subject].surface, "", nullptr, nullptr);
    qa.answer = split_tokens(world.entities[f.object].surface);
    qa.fact_id = f.id;
    if (qa.answer.size() <= kMaxAnswerTokens) out.push_back(std::move(qa));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words) {
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  tokens_ = {kPadToken, kBosToken, kEosToken, kSentinelToken};
  for (auto& w : words) {
    if (w == kPadToken || w == kBosToken || w == kEosToken || w == kSentinelToken) continue;
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw DataError("token '" + token + "' is not in the vocabulary");
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) > 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

Vocabulary build_vocab(const World& world) {
  std::vector<std::string> words;
  for (const auto& e : world.entities) words.push_back(e.surface);
  for (const auto& r : world.relations) {
    auto add_words = [&](const std::string& text) {
      for (const auto& t : split_tokens(text)) {
        if (t != "{s}" && t != "{o}") words.push_back(t);
      }
    };
    for (const auto& t : r.templates) add_words(t);
    add_words(r.question);
  }
  return Vocabulary(std::move(words));
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

Statement recognize_spans(const std::vector<std::string>& tokens) {
  Statement st;
  st.tokens = tokens;
  auto is_year = [](const std::string& t) {
    return t.size() == 4 && std::all_of(t.begin(), t.end(), [](char c) {
             return std::isdigit(static_cast<unsigned char>(c));
           });
  };
  auto is_cap = [](const std::string& t) {
    return !t.empty() && std::isupper(static_cast<unsigned char>(t[0]));
  };
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (is_year(tokens[i])) {
      st.spans.push_back({i, i + 1, C::date});
      ++i;
    } else if (is_cap(tokens[i])) {
      std::size_t j = i;
      while (j < tokens.size() && is_cap(tokens[j])) ++j;
      st.spans.push_back({i, j, C::other});
      i = j;
    } else {
      ++i;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Files

std::string escape_field(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

std::string unescape_field(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 == s.size()) throw DataError("dangling escape in field '" + s + "'");
    const char n = s[++i];
    if (n == '\\') out += '\\';
    else if (n == 't') out += '\t';
    else if (n == 'n') out += '\n';
    else throw DataError(std::string("unknown escape \\") + n);
  }
  return out;
}

void write_corpus(std::ostream& os, const std::vector<MaskedExample>& corpus) {
  for (const auto& ex : corpus) {
    os << escape_field(join_tokens(ex.input)) << '\t' << escape_field(join_tokens(ex.target))
       << '\t' << to_string(ex.category) << '\n';
  }
}

std::vector<MaskedExample> read_corpus(std::istream& is) {
  std::vector<MaskedExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_on(line, '\t');
    if (f.size() != 3) {
      throw DataError("corpus line " + std::to_string(lineno) + ": expected 3 fields");
    }
    out.push_back({split_tokens(unescape_field(f[0])), split_tokens(unescape_field(f[1])),
                   category_from_string(f[2])});
  }
  return out;
}

void write_qa(std::ostream& os, const std::vector<QAPair>& qa) {
  for (const auto& q : qa) {
    os << escape_field(join_tokens(q.question)) << '\t' << escape_field(join_tokens(q.answer))
       << '\t' << q.fact_id << '\n';
  }
}

std::vector<QAPair> read_qa(std::istream& is) {
  std::vector<QAPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_on(line, '\t');
    if (f.size() != 3) {
      throw DataError("qa line " + std::to_string(lineno) + ": expected 3 fields");
    }
    out.push_back({split_tokens(unescape_field(f[0])), split_tokens(unescape_field(f[1])),
                   to_index(f[2])});
  }
  return out;
}

}  // namespace nkb
