// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace nkb {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Whether an op over these inputs must be recorded.
bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Leading dims collapsed into rows, last dim kept as columns.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  if (t.rank() == 0) return {1, 1};
  std::size_t cols = t.shape().back();
  return {cols == 0 ? 0 : t.size() / cols, cols};
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  s_->values.assign(product(shape), 0.0);
  s_->shape = std::move(shape);
  set_requires_grad(requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  if (product(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(product(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  s_->shape = std::move(shape);
  s_->values = std::move(values);
  set_requires_grad(requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return s_->shape; }
std::size_t Tensor::size() const { return s_->values.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): not a matrix " + shape_str(shape()));
  return s_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): not a matrix " + shape_str(shape()));
  return s_->shape[1];
}

std::span<double> Tensor::values() { return s_->values; }
std::span<const double> Tensor::values() const { return s_->values; }
std::span<double> Tensor::grad() const { return s_->grad; }

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  s_->requires_grad = on;
  if (on) {
    s_->grad.assign(s_->values.size(), 0.0);
  } else {
    s_->grad.clear();
    s_->grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item(): tensor of shape " + shape_str(shape()) +
                     " is not a scalar");
  }
  return s_->values[0];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return s_->values[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return s_->values[r * cols() + c];
}

MatrixMap Tensor::mat() {
  auto [r, c] = as_rows(*this);
  return MatrixMap(s_->values.data(), static_cast<Eigen::Index>(r),
                   static_cast<Eigen::Index>(c));
}

ConstMatrixMap Tensor::mat() const {
  auto [r, c] = as_rows(*this);
  return ConstMatrixMap(s_->values.data(), static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
}

MatrixMap Tensor::grad_mat() const {
  auto [r, c] = as_rows(*this);
  return MatrixMap(s_->grad.data(), static_cast<Eigen::Index>(r),
                   static_cast<Eigen::Index>(c));
}

Tensor Tensor::clone() const {
  Tensor out(s_->shape, s_->values, false);
  if (s_->requires_grad) out.set_requires_grad(true);
  return out;
}

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->values, false); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* kind, const std::vector<const Tensor*>& inputs,
                  Tensor output, std::function<void()> backward) {
  Entry e{kind, {}, output.id(), std::move(backward), std::move(output)};
  e.inputs.reserve(inputs.size());
  for (const Tensor* t : inputs) e.inputs.push_back(t->id());
  entries_.push_back(std::move(e));
}

bool Tape::topologically_ordered() const {
  std::unordered_set<const void*> produced;
  std::unordered_set<const void*> all_outputs;
  for (const Entry& e : entries_) all_outputs.insert(e.output);
  for (const Entry& e : entries_) {
    for (const void* in : e.inputs) {
      if (all_outputs.count(in) && !produced.count(in)) return false;
    }
    produced.insert(e.output);
  }
  return true;
}

void Tape::backward(Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  const bool on_tape =
      std::any_of(entries_.begin(), entries_.end(),
                  [&](const Entry& e) { return e.output == loss.id(); });
  if (!on_tape) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  loss.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Activations

std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "' (expected relu|gelu)");
}

// GELU, tanh approximation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
double activate(double x, Activation kind) {
  if (kind == Activation::relu) return x > 0.0 ? x : 0.0;
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * x * (1.0 + t);
}

double activate_grad(double x, Activation kind) {
  if (kind == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) +
                     " by " + shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  Tensor c(Shape{a.rows(), b.cols()}, track);
  c.mat().noalias() = a.mat() * b.mat();
  if (track) {
    Tape::active()->record("matmul", {&a, &b}, c, [a, b, c]() mutable {
      if (a.requires_grad()) a.grad_mat().noalias() += c.grad_mat() * b.mat().transpose();
      if (b.requires_grad()) b.grad_mat().noalias() += a.mat().transpose() * c.grad_mat();
    });
  }
  return c;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_transposed");
  require_rank2(b, "matmul_transposed");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: cannot multiply " +
                     shape_str(a.shape()) + " by transpose of " +
                     shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  Tensor c(Shape{a.rows(), b.rows()}, track);
  c.mat().noalias() = a.mat() * b.mat().transpose();
  if (track) {
    Tape::active()->record("matmul_transposed", {&a, &b}, c, [a, b, c]() mutable {
      if (a.requires_grad()) a.grad_mat().noalias() += c.grad_mat() * b.mat();
      if (b.requires_grad()) b.grad_mat().noalias() += c.grad_mat().transpose() * a.mat();
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  Tensor c(a.shape(), track);
  auto av = a.values(), bv = b.values();
  auto cv = c.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] + bv[i];
  if (track) {
    Tape::active()->record("add", {&a, &b}, c, [a, b, c]() mutable {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  Tensor c(a.shape(), track);
  auto av = a.values(), bv = b.values();
  auto cv = c.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] * bv[i];
  if (track) {
    Tape::active()->record("mul", {&a, &b}, c, [a, b, c]() mutable {
      auto g = c.grad();
      auto av = a.values(), bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  const bool track = tracking({&a});
  Tensor c(a.shape(), track);
  auto av = a.values();
  auto cv = c.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] * factor;
  if (track) {
    Tape::active()->record("scale", {&a}, c, [a, c, factor]() mutable {
      auto g = c.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return c;
}

Tensor sum(const Tensor& a) {
  const bool track = tracking({&a});
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor c = Tensor::scalar(total, track);
  if (track) {
    Tape::active()->record("sum", {&a}, c, [a, c]() mutable {
      const double g = c.grad()[0];
      for (double& ga : a.grad()) ga += g;
    });
  }
  return c;
}

Tensor row_softmax(const Tensor& x) {
  require_rank2(x, "row_softmax");
  const bool track = tracking({&x});
  Tensor y(x.shape(), track);
  const std::size_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data() + r * n;
    double* out = yv.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = std::exp(in[c] - mx);
      z += out[c];
    }
    for (std::size_t c = 0; c < n; ++c) out[c] /= z;
  }
  if (track) {
    Tape::active()->record("row_softmax", {&x}, y, [x, y, m, n]() mutable {
      auto yv = y.values();
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += gy[r * n + c] * yv[r * n + c];
        for (std::size_t c = 0; c < n; ++c) {
          gx[r * n + c] += yv[r * n + c] * (gy[r * n + c] - dot);
        }
      }
    });
  }
  return y;
}

Tensor act_func(const Tensor& x, Activation kind) {
  const bool track = tracking({&x});
  Tensor y(x.shape(), track);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = activate(xv[i], kind);
  if (track) {
    Tape::active()->record("act_func", {&x}, y, [x, y, kind]() mutable {
      auto xv = x.values();
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        gx[i] += gy[i] * activate_grad(xv[i], kind);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, double eps) {
  auto [m, n] = as_rows(x);
  if (gain.size() != n || x.rank() == 0) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) +
                     " does not match last dimension of " + shape_str(x.shape()));
  }
  const bool track = tracking({&x, &gain});
  Tensor y(x.shape(), track);
  // Normalized input and inverse std per row, kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  auto xv = x.values();
  auto gv = gain.values();
  auto yv = y.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * is;
      (*xhat)[r * n + c] = h;
      yv[r * n + c] = gv[c] * h;
    }
  }
  if (track) {
    Tape::active()->record(
        "layer_norm", {&x, &gain}, y,
        [x, gain, y, xhat, inv_std, m, n]() mutable {
          auto gy = y.grad();
          auto gv = gain.values();
          if (gain.requires_grad()) {
            auto gg = gain.grad();
            for (std::size_t r = 0; r < m; ++r)
              for (std::size_t c = 0; c < n; ++c)
                gg[c] += gy[r * n + c] * (*xhat)[r * n + c];
          }
          if (x.requires_grad()) {
            auto gx = x.grad();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < m; ++r) {
              double mean_d = 0.0, mean_dh = 0.0;
              for (std::size_t c = 0; c < n; ++c) {
                const double d = gy[r * n + c] * gv[c];
                mean_d += d;
                mean_dh += d * (*xhat)[r * n + c];
              }
              mean_d *= inv_n;
              mean_dh *= inv_n;
              for (std::size_t c = 0; c < n; ++c) {
                const double d = gy[r * n + c] * gv[c];
                gx[r * n + c] += (*inv_std)[r] *
                                 (d - mean_d - (*xhat)[r * n + c] * mean_dh);
              }
            }
          }
        });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t rows = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw ShapeError("embedding: id " + std::to_string(id) +
                       " outside table of shape " + shape_str(table.shape()));
    }
  }
  const bool track = tracking({&table});
  Tensor out(Shape{ids.size(), d}, track);
  auto tv = table.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d,
                ov.data() + i * d);
  }
  if (track) {
    std::vector<int> saved(ids.begin(), ids.end());
    Tape::active()->record("embedding", {&table}, out,
                           [table, out, saved = std::move(saved), d]() mutable {
                             auto go = out.grad();
                             auto gt = table.grad();
                             for (std::size_t i = 0; i < saved.size(); ++i) {
                               double* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
                               for (std::size_t c = 0; c < d; ++c) dst[c] += go[i * d + c];
                             }
                           });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const bool track = tracking({&x});
  Tensor y(x.shape(), track);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : 0.0;
    yv[i] = xv[i] * (*mask)[i];
  }
  if (track) {
    Tape::active()->record("dropout", {&x}, y, [x, y, mask]() mutable {
      auto gy = y.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*mask)[i];
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ShapeError("cross_entropy: target " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  const bool track = tracking({&logits});
  auto probs = std::make_shared<std::vector<double>>(m * v, 0.0);
  double total = 0.0;
  auto lv = logits.values();
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] == ignore_index) continue;
    const double* row = lv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * v + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= z;
    total += -(row[targets[r]] - mx - std::log(z));
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  Tensor out = Tensor::scalar(loss, track);
  if (track) {
    std::vector<int> saved(targets.begin(), targets.end());
    Tape::active()->record(
        "cross_entropy", {&logits}, out,
        [logits, out, probs, saved = std::move(saved), ignore_index, count, v]() mutable {
          if (count == 0) return;
          const double g = out.grad()[0] / static_cast<double>(count);
          auto gl = logits.grad();
          for (std::size_t r = 0; r < saved.size(); ++r) {
            if (saved[r] == ignore_index) continue;
            for (std::size_t c = 0; c < v; ++c) gl[r * v + c] += g * (*probs)[r * v + c];
            gl[r * v + static_cast<std::size_t>(saved[r])] -= g;
          }
        });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads,
                 bool causal) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) +
                     ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: " + std::to_string(heads) +
                     " heads do not divide width " + std::to_string(d));
  }
  for (const auto& s : segments) {
    if (s.q_offset + s.q_len > q.rows() || s.k_offset + s.k_len > k.rows() ||
        (causal && s.q_len != s.k_len) || s.k_len == 0) {
      throw ShapeError("attention: segment out of range or inconsistent");
    }
  }
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool track = tracking({&q, &k, &v});
  Tensor out(q.shape(), track);

  auto probs = std::make_shared<std::vector<RowMatrix>>();
  probs->reserve(segments.size() * heads);
  auto qm = q.mat();
  auto km = k.mat();
  auto vm = v.mat();
  auto om = out.mat();
  for (const auto& s : segments) {
    const auto qo = static_cast<Eigen::Index>(s.q_offset);
    const auto ko = static_cast<Eigen::Index>(s.k_offset);
    const auto lq = static_cast<Eigen::Index>(s.q_len);
    const auto lk = static_cast<Eigen::Index>(s.k_len);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      RowMatrix p = (qm.block(qo, c0, lq, w) * km.block(ko, c0, lk, w).transpose()) * scl;
      for (Eigen::Index i = 0; i < lq; ++i) {
        const Eigen::Index visible = causal ? i + 1 : lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < visible; ++j) mx = std::max(mx, p(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < lk; ++j) {
          p(i, j) = j < visible ? std::exp(p(i, j) - mx) : 0.0;
          z += p(i, j);
        }
        p.row(i) /= z;
      }
      om.block(qo, c0, lq, w).noalias() = p * vm.block(ko, c0, lk, w);
      probs->push_back(std::move(p));
    }
  }

  if (track) {
    std::vector<AttentionSegment> segs(segments.begin(), segments.end());
    Tape::active()->record(
        "attention", {&q, &k, &v}, out,
        [q, k, v, out, probs, segs = std::move(segs), heads, dh, scl]() mutable {
          auto qm = q.mat();
          auto km = k.mat();
          auto vm = v.mat();
          auto gout = out.grad_mat();
          std::size_t idx = 0;
          for (const auto& s : segs) {
            const auto qo = static_cast<Eigen::Index>(s.q_offset);
            const auto ko = static_cast<Eigen::Index>(s.k_offset);
            const auto lq = static_cast<Eigen::Index>(s.q_len);
            const auto lk = static_cast<Eigen::Index>(s.k_len);
            for (std::size_t h = 0; h < heads; ++h, ++idx) {
              const auto c0 = static_cast<Eigen::Index>(h * dh);
              const auto w = static_cast<Eigen::Index>(dh);
              const RowMatrix& p = (*probs)[idx];
              auto go = gout.block(qo, c0, lq, w);
              if (v.requires_grad()) {
                v.grad_mat().block(ko, c0, lk, w).noalias() += p.transpose() * go;
              }
              if (!q.requires_grad() && !k.requires_grad()) continue;
              RowMatrix dp = go * vm.block(ko, c0, lk, w).transpose();
              for (Eigen::Index i = 0; i < lq; ++i) {
                const double dot = dp.row(i).dot(p.row(i));
                dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
              }
              dp *= scl;
              if (q.requires_grad()) {
                q.grad_mat().block(qo, c0, lq, w).noalias() += dp * km.block(ko, c0, lk, w);
              }
              if (k.requires_grad()) {
                k.grad_mat().block(ko, c0, lk, w).noalias() += dp.transpose() * qm.block(qo, c0, lq, w);
              }
            }
          }
        });
  }
  return out;
}

}  // namespace nkb
