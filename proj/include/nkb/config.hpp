// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration.
//
//   # comment
//   include base.conf      (one level only; paths relative to the file)
//   seed = 17
//   pretrain.max_steps = 3000
//
// Later assignments override earlier ones, including included values.
// Unknown keys are errors.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nkb/factworld.hpp"
#include "nkb/model.hpp"
#include "nkb/probes.hpp"
#include "nkb/training.hpp"

namespace nkb {

/// Raw assignments in file order resolution (last one wins).
using ConfigMap = std::map<std::string, std::string>;

/// Parses text; `include` lines are resolved against base_dir. Throws
/// ConfigError on syntax errors, nested includes or unreadable files.
ConfigMap parse_config_text(const std::string& text, const std::string& base_dir,
                            bool allow_include = true);
ConfigMap parse_config_file(const std::string& path);

struct RunConfig {
  std::uint64_t seed = 0;

  WorldConfig world;
  /// Masked draws per rendered statement, for the base and new corpora.
  std::size_t ssm_draws = 4;
  std::size_t ssm_new_draws = 8;

  ModelConfig model;
  double nkb_key_std = 0.02;

  TrainConfig pretrain;
  /// Copies of the base QA set mixed into the pretraining corpus.
  std::size_t pretrain_qa_repeats = 2;
  TrainConfig inject;
  /// Masked draws of the base statements replayed alongside the new facts.
  std::size_t inject_replay_draws = 2;
  TrainConfig finetune;
  /// New-fact QA pairs moved into the fine-tuning set; the rest are held out.
  std::size_t finetune_new_qa = 0;

  ProxyTask proxy_task = ProxyTask::copy;
  TrainConfig proxy;
  std::size_t proxy_train_size = 2000;
  std::size_t proxy_eval_size = 200;
  std::size_t proxy_max_len = 8;

  std::size_t eval_max_len = 8;

  std::size_t probe_top_k = 5;
  std::size_t probe_top_m = 5;
  std::size_t probe_slots = 50;
  SlotRanking probe_ranking = SlotRanking::usage;

  std::size_t surgery_controls = 5;
  std::vector<double> surgery_lambdas{0.01, 0.03, 0.05, 0.07, 0.09};
  std::size_t surgery_max_edits = 0;

  /// Every key with its resolved value, sorted; parseable by from_map.
  std::string to_text() const;

  /// Applies assignments over the defaults. Throws ConfigError on unknown
  /// keys, bad values or a missing key listed in `required`.
  static RunConfig from_map(const ConfigMap& map, const std::vector<std::string>& required = {});

  /// Phase seeds, each derived from the master seed by label.
  std::uint64_t derived(const char* label) const;
};

/// Keys gen-data refuses to default.
const std::vector<std::string>& world_keys();

/// Every key RunConfig understands.
std::vector<std::string> known_config_keys();

}  // namespace nkb
