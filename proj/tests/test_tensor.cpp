// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "mpa/error.hpp"
#include "mpa/rng.hpp"
#include "mpa/tensor.hpp"
#include "test_support.hpp"

using namespace mpa;
using mpa::testing::random_tensor;
using mpa::testing::relative_error;

namespace {

struct TapeReset {
  TapeReset() { Tape::current().clear(); }
  ~TapeReset() { Tape::current().clear(); }
};

// Builds loss = sum(op(inputs) * weights) with fixed random weights so every
// output coordinate contributes, then compares autodiff against central
// differences on every input coordinate.
void check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                     std::vector<Tensor> inputs, Rng& rng) {
  TapeReset reset;
  Tensor probe = op(inputs);
  const Tensor weights = random_tensor(probe.shape(), rng, 1.0, false);
  auto loss_value = [&] {
    NoGradGuard guard;
    return sum(mul(op(inputs), weights)).item();
  };
  Tape::current().clear();
  for (auto& in : inputs) in.clear_grad();
  Tensor loss = sum(mul(op(inputs), weights));
  backward(loss);
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const Tensor numeric = finite_difference_grad(loss_value, in, 1e-5);
    REQUIRE(in.has_grad());
    for (std::size_t i = 0; i < in.numel(); ++i) {
      INFO("coordinate " << i << " analytic " << in.grad()[i] << " numeric "
                         << numeric.data()[i]);
      REQUIRE(relative_error(in.grad()[i], numeric.data()[i]) < 1e-4);
    }
  }
  Tape::current().clear();
}

}  // namespace

TEST_CASE("matmul examples", "[tensor]") {
  TapeReset reset;
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  const Tensor p = matmul(eye, m);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) ==
        std::vector<double>{1, 2, 3, 4});

  const Tensor ones = matmul(Tensor::from_data({1, 2}, {1, 1}),
                             Tensor::from_data({2, 1}, {1, 1}));
  CHECK(ones.shape() == Shape{1, 1});
  CHECK(ones.item() == 2.0);
}

TEST_CASE("matmul agrees with a triple-loop oracle", "[tensor][oracle]") {
  TapeReset reset;
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 3, k = 4, n = 2;
    const Tensor a = random_tensor({m, k}, rng, 1.0, false);
    const Tensor b = random_tensor({k, n}, rng, 1.0, false);
    const Tensor c = matmul(a, b);
    const Tensor ct = matmul_transposed(a, transpose(b));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double expected = 0.0;
        for (std::size_t z = 0; z < k; ++z) expected += a(i, z) * b(z, j);
        CHECK(std::abs(c(i, j) - expected) < 1e-12);
        CHECK(std::abs(ct(i, j) - expected) < 1e-12);
      }
    }
  }
}

TEST_CASE("matmul rejects mismatched shapes naming both", "[tensor][errors]") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
    CHECK(what.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax_rows examples", "[tensor]") {
  TapeReset reset;
  const Tensor half = softmax_rows(Tensor::from_data({1, 2}, {0, 0}));
  CHECK(half(0, 0) == 0.5);
  CHECK(half(0, 1) == 0.5);

  const Tensor a = softmax_rows(Tensor::from_data({1, 2}, {-3.0, -3.0 + 1.7}));
  const Tensor b = softmax_rows(Tensor::from_data({1, 2}, {250.0, 250.0 + 1.7}));
  CHECK(std::abs(a(0, 0) - b(0, 0)) < 1e-12);
  CHECK(std::abs(a(0, 1) - b(0, 1)) < 1e-12);

  // exp/sum oracle
  const Tensor s = softmax_rows(Tensor::from_data({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(s(0, 0) - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(s(0, 1) - std::exp(2.0) / z) < 1e-12);
  CHECK(std::abs(s(0, 2) - std::exp(3.0) / z) < 1e-12);
}

TEST_CASE("softmax_rows properties", "[tensor][property]") {
  TapeReset reset;
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(9);
    const Tensor x = random_tensor({m, n}, rng, 20.0, false);
    const double shift = 100.0 * (2.0 * rng.uniform() - 1.0);
    Tensor shifted = x.clone();
    for (auto& v : shifted.data()) v += shift;
    const Tensor y = softmax_rows(x);
    const Tensor ys = softmax_rows(shifted);
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(y(i, j) >= 0.0);
        CHECK(std::abs(y(i, j) - ys(i, j)) < 1e-9);
        total += y(i, j);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax_rows handles masked entries and rejects NaN", "[tensor][errors]") {
  TapeReset reset;
  const double inf = std::numeric_limits<double>::infinity();
  const Tensor y = softmax_rows(Tensor::from_data({1, 3}, {-inf, 0.3, -inf}));
  CHECK(y(0, 1) == 1.0);
  CHECK(y(0, 0) == 0.0);
  CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 2}, {std::nan(""), 0.0})),
                  NumericError);
  CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 2}, {-inf, -inf})), NumericError);
}

TEST_CASE("layernorm examples and two-pass oracle", "[tensor][oracle]") {
  TapeReset reset;
  const Tensor ones = Tensor::full({2}, 1.0);
  const Tensor zeros = Tensor::zeros({2});
  const Tensor c = layernorm(Tensor::from_data({1, 2}, {4.0, 4.0}), ones, zeros, 1e-5);
  CHECK(c(0, 0) == 0.0);
  CHECK(c(0, 1) == 0.0);

  const Tensor n = layernorm(Tensor::from_data({1, 2}, {1.0, -1.0}), ones, zeros, 1e-14);
  CHECK(std::abs(n(0, 0) - 1.0) < 1e-12);
  CHECK(std::abs(n(0, 1) + 1.0) < 1e-12);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + rng.below(10);
    const Tensor x = random_tensor({1, d}, rng, 5.0, false);
    const Tensor g = random_tensor({d}, rng, 1.0, false);
    const Tensor b = random_tensor({d}, rng, 1.0, false);
    const Tensor y = layernorm(x, g, b, 1e-5);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x(0, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x(0, j) - mu) * (x(0, j) - mu);
    var /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double expected = (x(0, j) - mu) / std::sqrt(var + 1e-5) * g.data()[j] +
                              b.data()[j];
      CHECK(std::abs(y(0, j) - expected) < 1e-10);
    }
  }
}

TEST_CASE("cross_entropy_from_logits examples", "[tensor][oracle]") {
  TapeReset reset;
  const std::size_t target[] = {2};
  Tensor sharp = Tensor::zeros({1, 5});
  sharp.data()[2] = 30.0;
  CHECK(cross_entropy_from_logits(sharp, target).item() < 1e-9);

  const Tensor uniform = Tensor::full({1, 7}, 0.25);
  CHECK(std::abs(cross_entropy_from_logits(uniform, target).item() - std::log(7.0)) <
        1e-12);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(5), v = 2 + rng.below(8);
    const Tensor z = random_tensor({m, v}, rng, 4.0, false);
    std::vector<std::size_t> t(m);
    for (auto& x : t) x = rng.below(v);
    double naive = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < v; ++j) total += std::exp(z(i, j));
      naive += -std::log(std::exp(z(i, t[i])) / total);
    }
    naive /= static_cast<double>(m);
    CHECK(std::abs(cross_entropy_from_logits(z, t).item() - naive) < 1e-9);
  }

  const std::size_t bad[] = {9};
  CHECK_THROWS_AS(cross_entropy_from_logits(Tensor::zeros({1, 3}), bad), IndexError);
}

TEST_CASE("bce_with_logits matches a naive sigmoid oracle", "[tensor][oracle]") {
  TapeReset reset;
  const double half[] = {1.0, 0.0};
  CHECK(std::abs(bce_with_logits(Tensor::zeros({2}), half).item() - std::log(2.0)) <
        1e-15);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    const Tensor z = random_tensor({n}, rng, 6.0, false);
    std::vector<double> y(n);
    double naive = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      const double s = 1.0 / (1.0 + std::exp(-z.data()[i]));
      naive += -(y[i] * std::log(s) + (1.0 - y[i]) * std::log(1.0 - s));
    }
    naive /= static_cast<double>(n);
    CHECK(std::abs(bce_with_logits(z, y).item() - naive) < 1e-12);
  }
}

TEST_CASE("detach blocks gradient flow", "[tensor]") {
  TapeReset reset;
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  const Tensor d = detach(x);
  CHECK(std::memcmp(d.data().data(), x.data().data(), sizeof(double)) == 0);
  CHECK_FALSE(d.requires_grad());
  Tensor loss = sum(mul(d, x));
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("backward basics", "[tensor]") {
  TapeReset reset;
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tape::current().clear();
  Tensor y = Tensor::from_data({1}, {3.0}, true);
  Tensor loss = sum(mul(y, y));
  backward(loss);
  CHECK(y.grad()[0] == 6.0);
  // repeated calls accumulate into leaves
  backward(loss);
  CHECK(y.grad()[0] == 12.0);

  const Tensor pair = Tensor::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(mul(pair, pair)), ContractError);
}

TEST_CASE("backward visits each recorded operation once", "[tensor]") {
  TapeReset reset;
  Tensor x = Tensor::from_data({1}, {1.5}, true);
  Tensor y = x;
  for (int i = 0; i < 5; ++i) y = mul(y, x);
  CHECK(Tape::current().size() == 5);
  backward(sum(y));
  CHECK(std::abs(x.grad()[0] - 6.0 * std::pow(1.5, 5)) < 1e-12);
}

TEST_CASE("autodiff matches finite differences for every operation",
          "[tensor][property][gradcheck]") {
  Rng rng(2024);
  // Each operation gets at least 50 randomized cases.
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    check_gradients([](auto& in) { return matmul(in[0], in[1]); },
                    {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}, rng);
    check_gradients([](auto& in) { return matmul_transposed(in[0], in[1]); },
                    {random_tensor({m, k}, rng), random_tensor({n, k}, rng)}, rng);
    check_gradients([](auto& in) { return transpose(in[0]); },
                    {random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return add(in[0], in[1]); },
                    {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return sub(in[0], in[1]); },
                    {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return mul(in[0], in[1]); },
                    {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return scale(in[0], -1.7); },
                    {random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return add_row_vector(in[0], in[1]); },
                    {random_tensor({m, n}, rng), random_tensor({n}, rng)}, rng);
    check_gradients([](auto& in) { return sum(in[0]); }, {random_tensor({m, n}, rng)},
                    rng);
    check_gradients([](auto& in) { return mean(in[0]); }, {random_tensor({m, n}, rng)},
                    rng);
    check_gradients([](auto& in) { return softmax_rows(in[0]); },
                    {random_tensor({m, n}, rng, 3.0)}, rng);
    const std::size_t d = 2 + rng.below(5);
    check_gradients([](auto& in) { return layernorm(in[0], in[1], in[2], 1e-5); },
                    {random_tensor({m, d}, rng, 2.0), random_tensor({d}, rng),
                     random_tensor({d}, rng)},
                    rng);
    check_gradients([](auto& in) { return gelu(in[0]); }, {random_tensor({m, n}, rng, 3.0)},
                    rng);
    // Keep relu inputs away from the kink.
    Tensor r = random_tensor({m, n}, rng, 3.0);
    for (auto& v : r.data()) v += v >= 0.0 ? 0.1 : -0.1;
    check_gradients([](auto& in) { return relu(in[0]); }, {r}, rng);

    const std::size_t rows = m + 2;
    std::vector<std::size_t> pick{rng.below(rows), rng.below(rows), rng.below(rows)};
    check_gradients([&pick](auto& in) { return gather_rows(in[0], pick); },
                    {random_tensor({rows, n}, rng)}, rng);
    check_gradients([](auto& in) { return block(in[0], 1, 2, 1, 2); },
                    {random_tensor({3, 4}, rng)}, rng);
    check_gradients([](auto& in) { return concat_cols({in[0], in[1]}); },
                    {random_tensor({m, k}, rng), random_tensor({m, n}, rng)}, rng);
    check_gradients([](auto& in) { return concat_rows({in[0], in[1]}); },
                    {random_tensor({k, n}, rng), random_tensor({m, n}, rng)}, rng);

    std::vector<std::size_t> targets(m);
    for (auto& t : targets) t = rng.below(n + 1);
    check_gradients([&targets](auto& in) { return cross_entropy_from_logits(in[0], targets); },
                    {random_tensor({m, n + 1}, rng, 3.0)}, rng);
    std::vector<double> labels(n);
    for (auto& l : labels) l = rng.uniform() < 0.5 ? 0.0 : 1.0;
    check_gradients([&labels](auto& in) { return bce_with_logits(in[0], labels); },
                    {random_tensor({n}, rng, 3.0)}, rng);
  }
}

TEST_CASE("dropout keeps the mask fixed between forward and backward", "[tensor]") {
  TapeReset reset;
  Rng rng(1);
  Tensor x = Tensor::full({4, 8}, 1.0, true);
  Tensor y = dropout(x, 0.5, rng);
  backward(sum(y));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK((y.data()[i] == 0.0 || y.data()[i] == 2.0));
    CHECK(x.grad()[i] == y.data()[i]);
  }
  Rng other(1);
  CHECK(dropout(x, 0.0, other).same_storage(x));
}

TEST_CASE("operations are bitwise deterministic", "[tensor]") {
  TapeReset reset;
  auto run = [] {
    Rng rng(99);
    const Tensor a = random_tensor({5, 7}, rng);
    const Tensor b = random_tensor({7, 3}, rng);
    const Tensor g = random_tensor({3}, rng);
    const Tensor bias = random_tensor({3}, rng);
    return layernorm(softmax_rows(matmul(a, b)), g, bias, 1e-5).clone();
  };
  const Tensor first = run();
  const Tensor second = run();
  CHECK(std::memcmp(first.data().data(), second.data().data(),
                    first.numel() * sizeof(double)) == 0);
}
