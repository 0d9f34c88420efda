// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Glue between the configuration and the modules: dataset files, the data
// each phase trains on, run manifests, metric files and the report builders
// shared by the command-line tool, the acceptance suite and the Python
// bindings.

#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nkb/config.hpp"
#include "nkb/factworld.hpp"
#include "nkb/model.hpp"
#include "nkb/probes.hpp"
#include "nkb/surgery.hpp"
#include "nkb/training.hpp"

namespace nkb {

inline constexpr const char* kArtifactVersion = "0.1.0";

struct Dataset {
  World world;
  Vocabulary vocab;
  std::vector<MaskedExample> ssm_base;
  std::vector<MaskedExample> ssm_new;
  std::vector<QAPair> qa_base;
  std::vector<QAPair> qa_new;
  std::vector<QAPair> qa_withheld;
};

/// Pure function of the world keys, ssm.draws and the master seed.
Dataset generate_dataset(const RunConfig& cfg);

/// File names inside a data directory, in write order.
const std::vector<std::string>& dataset_files();
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Throws DataError when a file is missing or malformed.
Dataset read_dataset(const std::filesystem::path& dir);

struct QaSplits {
  std::vector<QAPair> finetune;  // base QA plus the first finetune.new_qa new pairs
  std::vector<QAPair> base_eval;
  std::vector<QAPair> new_eval;  // new pairs not used for fine-tuning
};

QaSplits split_qa(const RunConfig& cfg, const Dataset& ds);

/// Base SSM corpus with pretrain.qa_repeats copies of the base QA mixed in.
std::vector<TrainExample> pretrain_examples(const RunConfig& cfg, const Dataset& ds);
/// New-fact SSM corpus plus inject.replay_draws masked draws of the base
/// statements.
std::vector<TrainExample> inject_examples(const RunConfig& cfg, const Dataset& ds);
std::vector<TrainExample> finetune_examples(const RunConfig& cfg, const Dataset& ds);

/// Fresh base model (no NKB) sized for the vocabulary.
Seq2SeqModel new_base_model(const RunConfig& cfg, const Dataset& ds);
/// Mounts model.nkb_dim slots at the configured site unless already mounted.
void ensure_mounted(Seq2SeqModel& model, const RunConfig& cfg);

// --- Manifests and metrics -------------------------------------------------

struct FileDigest {
  std::string path;
  std::string digest;
};

/// FNV-1a 64 of the file bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

struct RunManifest {
  std::string subcommand;
  std::string config_text;
  std::vector<FileDigest> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string version = kArtifactVersion;

  std::string to_json() const;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

/// Appends one JSON record per metric callback.
class MetricsFile {
 public:
  explicit MetricsFile(const std::filesystem::path& path);
  MetricsSink sink();

 private:
  std::ofstream out_;
};

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// --- Reports -----------------------------------------------------------------

struct EvalReport {
  EmResult base;
  EmResult fresh;

  std::string to_text() const;
  std::string to_json() const;
};

EvalReport run_eval(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                    std::size_t threads = 1);

/// Questions the probes read: base QA followed by new QA.
std::vector<QAPair> probe_questions(const Dataset& ds);

struct ValueProbe {
  std::vector<std::size_t> slots;
  std::vector<ValueReport> reports;
  std::map<Category, std::size_t> histogram;
  double entity_fraction = 0.0;

  std::string to_text() const;
  std::string to_records() const;
};

ValueProbe run_value_probe(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                           std::size_t threads = 1);

struct KeyProbe {
  std::vector<QAPair> questions;
  TriggerMatrix matrix;
  std::vector<std::size_t> active;
  std::vector<KeyReport> reports;  // one per active key
  double cohesion = 0.0;
  /// Same statistic on a column-shuffled matrix.
  double shuffled_cohesion = 0.0;

  std::string to_text(const World& world) const;
  std::string to_records(const World& world) const;
};

KeyProbe run_key_probe(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                       std::size_t threads = 1);

/// Wrong-answer edits over the withheld questions, controls from base QA.
std::vector<EditCase> build_desk_edits(const Seq2SeqModel& model, const RunConfig& cfg,
                                       const Dataset& ds, EditSetStats* stats = nullptr,
                                       std::size_t threads = 1);

SweepResult run_sweep(const Seq2SeqModel& model, const RunConfig& cfg, const Dataset& ds,
                      std::size_t threads = 1, EditSetStats* stats = nullptr);

struct ProxyReport {
  std::string task;
  double baseline = 0.0;        // base model after proxy fine-tuning
  double mounted_zero = 0.0;    // same model with a freshly mounted NKB
  double injected = 0.0;        // injected model after proxy fine-tuning

  std::string to_text() const;
  std::string to_json() const;
};

/// LM-preservation check on the copy (or reverse) proxy task.
ProxyReport run_proxy(const Seq2SeqModel& base, const Seq2SeqModel& injected,
                      const RunConfig& cfg, const Dataset& ds, std::size_t threads = 1,
                      const MetricsSink& sink = {});

}  // namespace nkb
