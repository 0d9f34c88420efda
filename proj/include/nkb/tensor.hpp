// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors and a tape-based reverse-mode autodiff engine.
//
// A Tensor is a shared handle: copying it aliases the same storage. Ops
// record themselves on the thread's active Tape when at least one input
// requires a gradient; without an active tape they run as plain numerics.

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nkb/errors.hpp"

namespace nkb {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  /// Leading dimension of a rank-2 tensor.
  std::size_t rows() const;
  /// Trailing dimension of a rank-2 tensor.
  std::size_t cols() const;

  std::span<double> values();
  std::span<const double> values() const;
  /// Gradients live in the shared storage, so a const handle may write them.
  std::span<double> grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  void zero_grad() const;

  double item() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  MatrixMap mat();
  ConstMatrixMap mat() const;
  MatrixMap grad_mat() const;

  /// Deep copy of values (and grad flag); never shares storage.
  Tensor clone() const;
  /// Deep copy of values without gradient tracking.
  Tensor detach() const;

  /// Identity of the underlying storage, stable for the storage lifetime.
  const void* id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of differentiable operations for one step.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed. backward() replays entries once, in reverse order, then
/// frees them.
class Tape {
 public:
  struct Entry {
    const char* kind;
    std::vector<const void*> inputs;
    const void* output;
    std::function<void()> backward;
    // Keeps the output (and through the closure, the inputs) alive.
    Tensor output_handle;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const char* kind, const std::vector<const Tensor*>& inputs,
              Tensor output, std::function<void()> backward);

  /// Propagates d(loss)/d(x) into every reachable requires_grad tensor.
  /// Throws ContractError unless loss is a scalar recorded on this tape.
  void backward(Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  /// True when every entry's tracked inputs are leaves or earlier outputs.
  bool topologically_ordered() const;
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

/// Suspends recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

enum class Activation { relu, gelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Scalar activations, shared by the tensor op and by offline oracles.
double activate(double x, Activation kind);
double activate_grad(double x, Activation kind);

// Every op below checks shapes and throws ShapeError on mismatch.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ for a [m×k], b [n×k].
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor row_softmax(const Tensor& x);
Tensor act_func(const Tensor& x, Activation kind);
/// Bias-free layer norm over the last dimension with per-feature gain.
Tensor layer_norm(const Tensor& x, const Tensor& gain, double eps = 1e-5);
/// Rows of `table` selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Inverted dropout; identity (same handle) when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);
/// Mean token-level negative log-likelihood over non-ignored rows.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index);

/// One (query block, key block) pairing inside packed attention inputs.
struct AttentionSegment {
  std::size_t q_offset;
  std::size_t q_len;
  std::size_t k_offset;
  std::size_t k_len;
};

/// Multi-head scaled dot-product attention over packed sequences.
///
/// q is [Nq×d], k and v are [Nk×d]; columns are split into `heads` equal
/// blocks. Each segment attends only within its own blocks. With `causal`,
/// query i of a segment sees keys 0..i (requires q_len == k_len).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads,
                 bool causal);

}  // namespace nkb
