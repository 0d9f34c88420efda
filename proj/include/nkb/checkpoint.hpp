// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints. Layout:
//
//   NKBCKPT <version>\n
//   config <n>\n            followed by n lines of ModelConfig key=value
//   step <n>\n
//   rng <state>\n           std::mt19937_64 textual state, or "-"
//   optimizer <kind> <t>\n
//   blocks <n>\n
//   then n blocks, each "<param|optim> <name> <rank> <dims...>\n" followed by
//   the raw little-endian float64 values.
//
// Saving the same state twice gives the same bytes, and load then save is
// byte-identical.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nkb/model.hpp"
#include "nkb/training.hpp"

namespace nkb {

inline constexpr int kCheckpointVersion = 1;

struct TensorBlock {
  std::string name;
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const TensorBlock&, const TensorBlock&) = default;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<TensorBlock> params;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t optimizer_steps = 0;
  std::vector<TensorBlock> optimizer_state;
  std::size_t step = 0;
  /// Textual std::mt19937_64 state; empty when not captured.
  std::string rng_state;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Snapshot of a model, plus optional optimizer and RNG state.
Checkpoint make_checkpoint(const Seq2SeqModel& model, const Optimizer* opt = nullptr,
                           std::size_t step = 0, const std::mt19937_64* rng = nullptr);

/// Rebuilds the model. Throws DataError on missing, extra or misshapen
/// parameter blocks.
Seq2SeqModel restore_model(const Checkpoint& ckpt);
Optimizer restore_optimizer(const Checkpoint& ckpt);

void save_checkpoint(std::ostream& os, const Checkpoint& ckpt);
/// Throws DataError on a malformed file or a format version other than
/// kCheckpointVersion.
Checkpoint load_checkpoint(std::istream& is);

void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint_file(const std::string& path);

/// FNV-1a digest of every parameter block's values, by name.
std::map<std::string, std::uint64_t> parameter_digests(const Seq2SeqModel& model);

/// Names of parameters whose values differ (bitwise) between two models of
/// the same configuration.
std::vector<std::string> changed_parameters(const Seq2SeqModel& a, const Seq2SeqModel& b);

}  // namespace nkb
