// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "apt/tensor.hpp"

using namespace apt;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Central differences computed directly in the test, independent of grad_check.
double fd_relative_error(const std::function<double()>& f, Tensor<double>& p) {
  double worst = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double saved = p[i];
    p[i] = saved + 1e-6;
    const double up = f();
    p[i] = saved - 1e-6;
    const double down = f();
    p[i] = saved;
    const double numeric = (up - down) / 2e-6;
    const double analytic = p.grad()[i];
    worst = std::max(worst, std::abs(numeric - analytic) /
                                std::max({std::abs(numeric), std::abs(analytic), 1e-8}));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul matches hand examples") {
  Tensor<float> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<float> m(Shape{2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  CHECK(std::vector<float>(r.values().begin(), r.values().end()) == std::vector<float>{1, 2, 3, 4});

  Tensor<float> proj(Shape{2, 2}, {1, 0, 0, 0});
  Tensor<float> col(Shape{2, 1}, {5, 7});
  auto p = matmul(proj, col);
  CHECK(p[0] == 5.0f);
  CHECK(p[1] == 0.0f);
}

TEST_CASE("matmul rejects mismatched inner dimensions with both shapes") {
  Tensor<float> a(Shape{2, 3});
  Tensor<float> b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients agree with central differences") {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto w = random_tensor({3, 2}, rng, false);
  auto loss = [&] { return sum(mul(matmul(a, b), w)); };

  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(loss());
  }
  NoGradScope<double> quiet;
  auto value = [&] { return loss().item(); };
  CHECK(fd_relative_error(value, a) < 1e-4);
  CHECK(fd_relative_error(value, b) < 1e-4);
}

TEST_CASE("softmax closed forms") {
  auto u = softmax(Tensor<double>(Shape{3}, {0, 0, 0}), 0);
  for (auto v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  auto one = softmax(Tensor<double>(Shape{1}, std::vector<double>{42.0}), 0);
  CHECK(one[0] == 1.0);

  auto two = softmax(Tensor<double>(Shape{2}, {0.0, -10.0}), 0);
  CHECK(two[0] == doctest::Approx(0.9999546).epsilon(1e-7));
  CHECK(two[1] == doctest::Approx(4.54e-5).epsilon(1e-3));
}

TEST_CASE("softmax rejects NaN") {
  Tensor<float> x(Shape{2}, {1.0f, std::nanf("")});
  CHECK_THROWS_AS(softmax(x, 0), NumericError);
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng() % 5, cols = 1 + rng() % 9;
    auto x = random_tensor({rows, cols}, rng, false);
    for (auto& v : x.values()) v *= 10.0;
    auto y = softmax(x, 1);
    const double c = shift(rng);
    auto xs = x.clone();
    for (auto& v : xs.values()) v += c;
    auto ys = softmax(xs, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        total += y[r * cols + j];
        CHECK(std::abs(y[r * cols + j] - ys[r * cols + j]) < 1e-6);
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax along a leading axis") {
  Tensor<double> x(Shape{2, 3}, {0, 1, 2, 0, 1, 2});
  auto y = softmax(x, 0);
  for (auto v : y.values()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("layernorm hand cases") {
  Tensor<double> ones(Shape{2}, {1, 1});
  Tensor<double> zeros(Shape{2}, {0, 0});
  auto c = layernorm(Tensor<double>(Shape{1, 4}, {3, 3, 3, 3}), Tensor<double>(Shape{4}, {1, 1, 1, 1}),
                     Tensor<double>(Shape{4}), 1e-6);
  for (auto v : c.values()) CHECK(v == 0.0);

  auto pm = layernorm(Tensor<double>(Shape{1, 2}, {1, -1}), ones, zeros, 1e-6);
  const double expected = 1.0 / std::sqrt(1.0 + 1e-6);
  CHECK(pm[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(pm[1] == doctest::Approx(-expected).epsilon(1e-12));
}

TEST_CASE("cross entropy closed forms") {
  auto uniform = cross_entropy(Tensor<double>(Shape{4}, {0, 0, 0, 0}), 1);
  CHECK(uniform.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(uniform.item() == doctest::Approx(1.3863).epsilon(1e-4));

  auto confident = cross_entropy(Tensor<double>(Shape{3}, {0, 1000, 0}), 1);
  CHECK(confident.item() == doctest::Approx(0.0));

  auto direct = cross_entropy(Tensor<double>(Shape{3}, {1, 2, 3}), 2);
  CHECK(direct.item() == doctest::Approx(0.40761).epsilon(1e-5));

  CHECK_THROWS_AS(cross_entropy(Tensor<double>(Shape{3}, {1, 2, 3}), 3), LabelError);
  CHECK_THROWS_AS(cross_entropy(Tensor<double>(Shape{3}, {1, 2, 3}), -1), LabelError);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  Tensor<double> logits(Shape{1, 3}, {1, 2, 3}, true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(cross_entropy(logits, 2));
  }
  auto p = softmax(Tensor<double>(Shape{3}, {1, 2, 3}), 0);
  CHECK(logits.grad()[0] == doctest::Approx(p[0]));
  CHECK(logits.grad()[1] == doctest::Approx(p[1]));
  CHECK(logits.grad()[2] == doctest::Approx(p[2] - 1.0));
}

TEST_CASE("grad_check trivial cases") {
  Tensor<double> x(Shape{1}, {3.0}, true);
  auto square = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
  CHECK(square.max_relative_error < 1e-8);
  CHECK(x.grad()[0] == doctest::Approx(6.0));

  Tensor<double> y(Shape{3}, {1, 2, 3}, true);
  auto c = Tensor<double>::scalar(5.0);
  auto constant = grad_check([&] { return c; }, {{"y", y}});
  CHECK(constant.max_relative_error == 0.0);
  CHECK(constant.max_abs_error == 0.0);
}

TEST_CASE("every differentiable op passes grad_check") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 6}, rng);
  auto w = random_tensor({5, 6}, rng);
  auto b = random_tensor({5}, rng);
  auto g = random_tensor({6}, rng);
  auto be = random_tensor({6}, rng);
  auto probe = random_tensor({4, 5}, rng, false);

  SUBCASE("linear") {
    auto r = grad_check([&] { return sum(mul(linear(x, w, b), probe)); },
                        {{"x", x}, {"w", w}, {"b", b}});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("layernorm") {
    auto p6 = random_tensor({4, 6}, rng, false);
    auto r = grad_check([&] { return sum(mul(layernorm(x, g, be, 1e-6), p6)); },
                        {{"x", x}, {"gamma", g}, {"beta", be}});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("gelu, scale, add") {
    auto p6 = random_tensor({4, 6}, rng, false);
    auto r = grad_check([&] { return sum(mul(add(gelu(x), scale(x, 0.3)), p6)); }, {{"x", x}});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("softmax on both axes") {
    auto p6 = random_tensor({4, 6}, rng, false);
    auto r = grad_check(
        [&] { return add(sum(mul(softmax(x, 1), p6)), sum(mul(softmax(x, 0), p6))); },
        {{"x", x}});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("reshape, concat, select_rows, repeat, groups") {
    auto y = random_tensor({2, 6}, rng);
    auto p = random_tensor({3, 6}, rng, false);
    auto r = grad_check(
        [&] {
          auto cat = concat<double>({x, y}, 0);                    // 6x6
          auto cat1 = concat<double>({x, reshape(x, {4, 6})}, 1);  // 4x12
          const std::size_t pick[] = {5, 0, 2};
          auto sel = select_rows(cat, std::span<const std::size_t>(pick));
          auto grouped = concat_groups(repeat_rows(y, 2), x, 2);  // 8x6
          auto means = mean_groups(grouped, 2);                   // 2x6
          return add(add(sum(mul(sel, p)), sum(mul(cat1, cat1))), sum(mul(means, means)));
        },
        {{"x", x}, {"y", y}});
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("cross entropy over a batch") {
    const int labels[] = {0, 4, 2, 1};
    auto r = grad_check([&] { return cross_entropy(linear(x, w, b), std::span<const int>(labels)); },
                        {{"x", x}, {"w", w}, {"b", b}});
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("attention gradients, masked and with shared keys") {
  std::mt19937_64 rng(5);
  const std::size_t B = 2, Sq = 3, Sk = 3, M = 2, d = 8, H = 2;
  auto q = random_tensor({B * Sq, d}, rng);
  auto k = random_tensor({B * Sk, d}, rng);
  auto v = random_tensor({B * Sk, d}, rng);
  auto ks = random_tensor({M, d}, rng);
  auto vs = random_tensor({M, d}, rng);
  auto probe = random_tensor({B * Sq, d}, rng, false);
  AttentionMask mask(Sq, Sk + M);
  mask.set(0, 0);
  mask.set(0, 3);
  mask.set(1, 1);
  mask.set(1, 0);
  mask.set(2, 2);
  mask.set(2, 4);
  mask.set(2, 1);
  auto r = grad_check(
      [&] {
        AttentionArgs<double> a{q, k, v, ks, vs, B, H, &mask};
        return sum(mul(attention(a), probe));
      },
      {{"q", q}, {"k", k}, {"v", v}, {"k_shared", ks}, {"v_shared", vs}});
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("attention rejects an all-masked query row") {
  Tensor<float> q(Shape{2, 4}), k(Shape{2, 4}), v(Shape{2, 4});
  AttentionMask mask(2, 2);
  mask.set(0, 0);
  AttentionArgs<float> a{q, k, v, {}, {}, 1, 1, &mask};
  CHECK_THROWS_AS(attention(a), MaskError);
}

TEST_CASE("a parameter used twice accumulates both contributions") {
  Tensor<double> x(Shape{1}, {1.5}, true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(add(x, x)));
  }
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("tape replays in exact reverse order") {
  GradTape<float> tape;
  std::vector<int> order;
  for (int i = 0; i < 5; ++i) tape.record([&order, i] { order.push_back(i); });
  tape.backward(Tensor<float>::scalar(0.0f));
  CHECK(order == std::vector<int>{4, 3, 2, 1, 0});
  CHECK(tape.size() == 0);
}

TEST_CASE("operations outside a tape do not record") {
  Tensor<float> x(Shape{2}, {1, 2}, true);
  auto y = add(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("tensor blob serialization") {
  std::mt19937_64 rng(1);
  auto t = random_tensor({3, 2, 2}, rng, false);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 3 * 4 + 1 + 12 * 8);
  CHECK(bytes[0] == 3);
  CHECK(bytes[4] == 3);
  CHECK(bytes[16] == static_cast<char>(DType::f64));

  auto back = read_tensor<double>(ss);
  CHECK(back.shape() == t.shape());
  CHECK(std::equal(back.values().begin(), back.values().end(), t.values().begin()));

  std::stringstream narrow(std::ios::in | std::ios::out | std::ios::binary);
  write_tensor(narrow, t, DType::f32);
  auto as_float = read_tensor<float>(narrow);
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(as_float[i] == static_cast<float>(t[i]));

  std::stringstream cut(bytes.substr(0, 20), std::ios::in | std::ios::binary);
  CHECK_THROWS_AS(read_tensor<double>(cut), FormatError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  Tensor<float> t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  auto c = t.clone();
  c[0] = 1;
  CHECK(t[0] == 0);
}
