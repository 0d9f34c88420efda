// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "nkb/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace nkb;
using nkb::testing::check_gradients;
using nkb::testing::random_off_kink;
using nkb::testing::random_tensor;
using nkb::testing::weighted_sum;

namespace {

constexpr double kGradTol = 1e-4;

// Straight transcription of 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
double gelu_reference(double x) {
  const double pi = std::acos(-1.0);
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor c = matmul(a, id);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) ==
        std::vector<double>{1, 2, 3, 4});

  Tensor r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  CHECK(r.item() == 11.0);

  CHECK_THROWS_AS(matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 2})), ShapeError);
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 2}));
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("row_softmax") {
  Tensor s = row_softmax(Tensor::matrix(3, 2, {0, 0, 1000, 1000, 0, std::log(3.0)}));
  CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(s.at(2, 0) - 0.25) < 1e-12);
  CHECK(std::abs(s.at(2, 1) - 0.75) < 1e-12);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, -30, 30);
    Tensor shifted = x.clone();
    for (double& v : shifted.values()) v += 123.25;
    Tensor p = row_softmax(x), q = row_softmax(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        total += p.at(r, c);
        CHECK(std::abs(p.at(r, c) - q.at(r, c)) <= 1e-12);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("activations") {
  Tensor x = Tensor::matrix(1, 2, {-1, 2});
  Tensor r = act_func(x, Activation::relu);
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(0, 1) == 2.0);
  CHECK(activate(0.0, Activation::gelu) == 0.0);
  CHECK(activate(1.0, Activation::gelu) == doctest::Approx(0.8412).epsilon(1e-4));
  for (double v : {-3.0, -0.7, 0.2, 1.0, 2.5}) {
    CHECK(std::abs(activate(v, Activation::gelu) - gelu_reference(v)) < 1e-15);
  }
}

TEST_CASE("layer_norm") {
  Tensor ones = Tensor(Shape{4}, {1, 1, 1, 1});
  Tensor constant = layer_norm(Tensor::matrix(1, 4, {3, 3, 3, 3}), ones);
  for (double v : constant.values()) CHECK(v == 0.0);

  Tensor two = layer_norm(Tensor::matrix(1, 2, {1, -1}), Tensor(Shape{2}, {1, 1}), 0.0);
  CHECK(two.at(0, 0) == doctest::Approx(1.0));
  CHECK(two.at(0, 1) == doctest::Approx(-1.0));

  std::mt19937_64 rng(2);
  Tensor zeros = layer_norm(random_tensor({3, 4}, rng), Tensor(Shape{4}));
  for (double v : zeros.values()) CHECK(v == 0.0);

  Tensor y = layer_norm(random_tensor({5, 6}, rng, -4, 4), Tensor(Shape{6}, std::vector<double>(6, 1.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mean += y.at(r, c) / 6;
    for (std::size_t c = 0; c < 6; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 6;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("cross_entropy") {
  std::vector<int> t{2};
  CHECK(cross_entropy(Tensor::matrix(1, 4, {0, 0, 0, 0}), t, -1).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  std::vector<int> t0{0};
  CHECK(cross_entropy(Tensor::matrix(1, 3, {50, 0, 0}), t0, -1).item() < 1e-9);

  Tensor logits = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> ignored{0, 0};
  Tape tape;
  Tensor loss = cross_entropy(logits, ignored, 0);
  CHECK(loss.item() == 0.0);
  tape.backward(loss);
  for (double g : logits.grad()) CHECK(g == 0.0);

  std::vector<int> bad{7};
  CHECK_THROWS_AS(cross_entropy(Tensor::matrix(1, 3, {0, 0, 0}), bad, -1), ShapeError);
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::matrix(1, 1, {3.0}, true);
  {
    Tape tape;
    Tensor y = sum(mul(x, x));
    tape.backward(y);
  }
  CHECK(x.grad()[0] == 6.0);

  // a used twice: y = a·b + a·c
  Tensor a = Tensor::matrix(1, 1, {2.0}, true);
  Tensor b = Tensor::matrix(1, 1, {5.0});
  Tensor c = Tensor::matrix(1, 1, {7.0});
  {
    Tape tape;
    Tensor y = sum(add(mul(a, b), mul(a, c)));
    tape.backward(y);
  }
  CHECK(a.grad()[0] == 12.0);

  Tape tape;
  Tensor v = matmul(Tensor::matrix(1, 2, {1, 2}, true), Tensor::matrix(2, 2, {1, 0, 0, 1}));
  CHECK_THROWS_AS(tape.backward(v), ContractError);
  CHECK(tape.topologically_ordered());
}

TEST_CASE("without a tape ops do not record") {
  Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  Tensor y = matmul(x, x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  {
    NoGradGuard guard;
    Tensor z = matmul(x, x);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(tape.size() == 0);
  Tensor w = matmul(x, x);
  CHECK(w.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("finite-difference gradients of every op") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    CAPTURE(trial);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    Tensor w35 = random_tensor({3, 5}, rng);
    CHECK(check_gradients([&] { return weighted_sum(matmul(a, b), w35); }, {a, b}).max_rel_err < kGradTol);

    Tensor bt = random_tensor({5, 4}, rng);
    CHECK(check_gradients([&] { return weighted_sum(matmul_transposed(a, bt), w35); }, {a, bt})
              .max_rel_err < kGradTol);

    Tensor c = random_tensor({3, 4}, rng), w34 = random_tensor({3, 4}, rng);
    CHECK(check_gradients([&] { return weighted_sum(add(a, c), w34); }, {a, c}).max_rel_err < kGradTol);
    CHECK(check_gradients([&] { return weighted_sum(mul(a, c), w34); }, {a, c}).max_rel_err < kGradTol);
    CHECK(check_gradients([&] { return weighted_sum(scale(a, -1.7), w34); }, {a}).max_rel_err < kGradTol);
    CHECK(check_gradients([&] { return sum(mul(a, a)); }, {a}).max_rel_err < kGradTol);
    CHECK(check_gradients([&] { return weighted_sum(row_softmax(a), w34); }, {a}).max_rel_err < kGradTol);

    Tensor k = random_off_kink({3, 4}, rng);
    CHECK(check_gradients([&] { return weighted_sum(act_func(k, Activation::relu), w34); }, {k})
              .max_rel_err < kGradTol);
    CHECK(check_gradients([&] { return weighted_sum(act_func(a, Activation::gelu), w34); }, {a})
              .max_rel_err < kGradTol);

    Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
    Tensor spread = random_tensor({3, 4}, rng, -3, 3);
    CHECK(check_gradients([&] { return weighted_sum(layer_norm(spread, gain), w34); }, {spread, gain})
              .max_rel_err < kGradTol);

    Tensor table = random_tensor({6, 4}, rng);
    std::vector<int> ids{1, 4, 1};
    CHECK(check_gradients([&] { return weighted_sum(embedding(table, ids), w34); }, {table})
              .max_rel_err < kGradTol);

    Tensor logits = random_tensor({4, 6}, rng, -2, 2);
    std::vector<int> targets{1, 0, 5, 3};
    CHECK(check_gradients([&] { return cross_entropy(logits, targets, 0); }, {logits}).max_rel_err <
          kGradTol);

    // Dropout with a fixed mask stream: re-seed on every evaluation.
    Tensor dx = random_tensor({3, 4}, rng);
    CHECK(check_gradients(
              [&] {
                std::mt19937_64 mask_rng(99);
                return weighted_sum(dropout(dx, 0.3, mask_rng), w34);
              },
              {dx})
              .max_rel_err < kGradTol);

    Tensor q = random_tensor({5, 4}, rng), kk = random_tensor({7, 4}, rng), v = random_tensor({7, 4}, rng);
    Tensor w54 = random_tensor({5, 4}, rng);
    std::vector<AttentionSegment> segs{{0, 3, 0, 3}, {3, 2, 3, 4}};
    CHECK(check_gradients([&] { return weighted_sum(attention(q, kk, v, segs, 2, false), w54); },
                          {q, kk, v})
              .max_rel_err < kGradTol);
    Tensor qc = random_tensor({5, 4}, rng), kc = random_tensor({5, 4}, rng), vc = random_tensor({5, 4}, rng);
    std::vector<AttentionSegment> causal_segs{{0, 3, 0, 3}, {3, 2, 3, 2}};
    CHECK(check_gradients([&] { return weighted_sum(attention(qc, kc, vc, causal_segs, 2, true), w54); },
                          {qc, kc, vc})
              .max_rel_err < kGradTol);
  }
}

TEST_CASE("random five-op graph") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 4}, rng);
    Tensor g = random_tensor({4}, rng, 0.5, 1.5);
    std::vector<int> targets{0, 3, 2};
    auto loss = [&] {
      Tensor h = matmul(x, w);
      Tensor n = layer_norm(h, g);
      Tensor a = act_func(n, Activation::gelu);
      Tensor s = add(a, scale(x, 0.5));
      return cross_entropy(s, targets, -1);
    };
    CHECK(check_gradients(loss, {x, w, g}).max_rel_err < kGradTol);
  }
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4, 4}, rng), w = random_tensor({4, 4}, rng);
  auto run = [&] {
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    x.zero_grad();
    w.zero_grad();
    Tape tape;
    Tensor l = sum(row_softmax(matmul(x, w)));
    tape.backward(l);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("values stay finite") {
  Tensor x = Tensor::matrix(1, 3, {1e300, -1e300, 0}, true);
  Tape tape;
  Tensor s = row_softmax(x);
  for (double v : s.values()) CHECK(std::isfinite(v));
}
