// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic knowledge universe: categorized single-token entities,
// functional relations, templated statements with marked salient spans,
// salient-span-masked training instances and closed-book QA pairs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace nkb {

enum class Category { person, place, organization, date, other, non_entity };

inline constexpr std::size_t kNumEntityCategories = 5;

std::string to_string(Category c);
Category category_from_string(const std::string& s);

struct Entity {
  std::string surface;
  Category category;
};

struct Relation {
  std::string name;
  std::vector<Category> subject_categories;
  Category object_category;
  /// Statement templates with {s} and {o} placeholders, space-tokenized.
  std::vector<std::string> templates;
  /// Question template with an {s} placeholder.
  std::string question;
};

/// The built-in relation catalog; generate_world() takes a prefix of it.
const std::vector<Relation>& relation_catalog();

struct FactTriple {
  std::size_t id;
  std::size_t subject;   // entity index
  std::size_t relation;  // relation index
  std::size_t object;    // entity index
};

enum class Partition { base, fresh, withheld };

std::string to_string(Partition p);
Partition partition_from_string(const std::string& s);

struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t entities_per_category = 40;
  std::size_t relations = 12;
  std::size_t base_facts = 500;
  std::size_t new_facts = 100;
  /// Facts that exist in the world but are rendered into no training corpus;
  /// questions about them are the model's natural wrong-answer cases.
  std::size_t withheld_facts = 40;
};

struct World {
  WorldConfig config;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<FactTriple> base_facts;
  std::vector<FactTriple> new_facts;
  std::vector<FactTriple> withheld_facts;

  const std::vector<FactTriple>& facts(Partition p) const;
  /// Lookup by fact id across all partitions.
  const FactTriple& fact(std::size_t id) const;
  std::size_t fact_count() const;

  std::optional<Category> category_of(const std::string& surface) const;

  /// Reproducibility dump; from_text(to_text()) reproduces the world.
  std::string to_text() const;
  static World from_text(const std::string& text);
};

/// Deterministic in cfg (including seed). Throws ConfigError on infeasible
/// counts.
World generate_world(const WorldConfig& cfg);

struct Span {
  std::size_t begin;
  std::size_t end;  // exclusive
  Category category;
};

struct Statement {
  std::vector<std::string> tokens;
  std::vector<Span> spans;
  std::size_t fact_id = 0;
};

/// Each fact rendered through every template of its relation, subject and
/// object spans marked with their categories.
std::vector<Statement> render_statements(const World& world, Partition partition);

struct MaskedExample {
  std::vector<std::string> input;   // span replaced by the sentinel
  std::vector<std::string> target;  // sentinel, then the span tokens
  Category category;
};

/// Masks one span chosen uniformly at random. Throws DataError when the
/// statement has no spans.
MaskedExample salient_span_mask(const Statement& statement, std::mt19937_64& rng);

/// Inverse of salient_span_mask: puts the target span back at the sentinel.
std::vector<std::string> unmask(const MaskedExample& ex);

/// `draws` independent masks per statement, in statement order.
std::vector<MaskedExample> build_ssm_corpus(const std::vector<Statement>& statements,
                                            std::size_t draws, std::uint64_t seed);

struct QAPair {
  std::vector<std::string> question;
  std::vector<std::string> answer;
  std::size_t fact_id = 0;
};

inline constexpr std::size_t kMaxAnswerTokens = 5;

/// One question per fact; answers longer than kMaxAnswerTokens are dropped.
std::vector<QAPair> render_qa(const World& world, Partition partition);

class Vocabulary {
 public:
  Vocabulary() = default;
  /// Specials first (fixed ids), then `words` sorted lexicographically.
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;  // throws DataError if unknown
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Entities plus every template and question word of the world's relations.
Vocabulary build_vocab(const World& world);

std::vector<std::string> split_tokens(const std::string& text);
std::string join_tokens(const std::vector<std::string>& tokens);

/// Best-effort span recognizer for external text: runs of capitalized
/// tokens (category other) and four-digit years (category date).
Statement recognize_spans(const std::vector<std::string>& tokens);

// Corpus files: one record per line, three tab-separated fields
// (input tokens, target tokens, span category). Backslash, tab and newline
// inside a field are escaped as \\, \t and \n.
std::string escape_field(const std::string& s);
std::string unescape_field(const std::string& s);
void write_corpus(std::ostream& os, const std::vector<MaskedExample>& corpus);
std::vector<MaskedExample> read_corpus(std::istream& is);

// QA files: (question tokens, answer tokens, fact id), same escaping.
void write_qa(std::ostream& os, const std::vector<QAPair>& qa);
std::vector<QAPair> read_qa(std::istream& is);

}  // namespace nkb
