// Copyright 2026 The seqr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

using seqr::Tensor;

namespace {

Tensor random_tensor(seqr::Rng& rng, seqr::Shape shape, bool requires_grad = false,
                     double lo = -2.0, double hi = 2.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(v), std::move(shape), requires_grad);
}

// Keeps values away from the kinks of relu / max_pool so central differences
// stay valid.
Tensor random_kink_free(seqr::Rng& rng, seqr::Shape shape) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (auto& x : t.values())
    if (std::fabs(x) < 5e-3) x += x >= 0 ? 5e-3 : -5e-3;
  return t;
}

// Deterministic weights so f captures them by value across perturbed calls.
Tensor aux(seqr::Rng& rng, seqr::Shape shape) { return random_tensor(rng, std::move(shape)); }

double checked(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0) {
  return seqr::grad_check(f, x0, 1e-5);
}

}  // namespace

TEST_CASE("matmul with the identity returns its argument") {
  Tensor eye = Tensor::from({1, 0, 0, 0, 1, 0, 0, 0, 1}, {3, 3});
  Tensor v = Tensor::from({2.5, -1.0, 0.25}, {3});
  Tensor out = matmul(eye, v);
  REQUIRE(out.shape() == seqr::Shape{3});
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(out.at(i) == Catch::Approx(v.at(i)));

  Tensor m = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  Tensor out2 = matmul(m, eye);
  for (std::size_t i = 0; i < 6; ++i) REQUIRE(out2.values()[i] == Catch::Approx(m.values()[i]));
}

TEST_CASE("tanh of zeros is zeros") {
  Tensor z = Tensor::zeros({4});
  Tensor out = seqr::tanh(z);
  for (double v : out.values()) REQUIRE(v == 0.0);
}

TEST_CASE("softmax of a constant vector is uniform") {
  Tensor x = Tensor::from({0.0, 0.0}, {2});
  Tensor y = softmax(x);
  REQUIRE(y.at(0) == Catch::Approx(0.5));
  REQUIRE(y.at(1) == Catch::Approx(0.5));
}

TEST_CASE("backward of sum of squares doubles the input") {
  Tensor w = Tensor::from({1.0, 2.0}, {2}, true);
  Tensor loss = sum(mul(w, w));
  seqr::backward(loss);
  REQUIRE(w.grad()[0] == Catch::Approx(2.0));
  REQUIRE(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("tanh gradient at zero is one") {
  Tensor w = Tensor::from({0.0}, {1}, true);
  Tensor loss = sum(seqr::tanh(w));
  seqr::backward(loss);
  REQUIRE(w.grad()[0] == Catch::Approx(1.0));
}

TEST_CASE("backward accumulates into leaves until reset") {
  Tensor w = Tensor::from({3.0}, {1}, true);
  Tensor l1 = sum(mul(w, w));
  seqr::backward(l1);
  Tensor l2 = sum(mul(w, w));
  seqr::backward(l2);
  REQUIRE(w.grad()[0] == Catch::Approx(12.0));
  w.zero_grad();
  Tensor l3 = sum(mul(w, w));
  seqr::backward(l3);
  REQUIRE(w.grad()[0] == Catch::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar loss and disconnected loss") {
  Tensor w = Tensor::from({1.0, 2.0}, {2}, true);
  Tensor y = mul(w, w);
  REQUIRE_THROWS_AS(seqr::backward(y), std::invalid_argument);
  Tensor c = Tensor::from({1.0}, {1});
  REQUIRE_THROWS_AS(seqr::backward(sum(c)), std::invalid_argument);
}

TEST_CASE("shape mismatches name the primitive") {
  Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
  Tensor b = Tensor::from({1, 2, 3}, {3});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    REQUIRE(std::string(e.what()).find("matmul") != std::string::npos);
    REQUIRE(std::string(e.what()).find("3") != std::string::npos);
  }
  REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(concat(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(slice(b, 2, 5), std::invalid_argument);
}

TEST_CASE("no-grad guard keeps results off the tape") {
  Tensor w = Tensor::from({1.0, 2.0}, {2}, true);
  {
    seqr::NoGradGuard ng;
    Tensor y = mul(w, w);
    REQUIRE_FALSE(y.requires_grad());
  }
  Tensor y = mul(w, w);
  REQUIRE(y.requires_grad());
}

TEST_CASE("grad_check on sum of squares is tight") {
  Tensor x = Tensor::from({1.0, 2.0, 3.0}, {3});
  double err = seqr::grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5);
  REQUIRE(err < 1e-6);
}

TEST_CASE("grad_check on a constant function is zero") {
  Tensor x = Tensor::from({1.0, -1.0}, {2});
  double err = seqr::grad_check([](const Tensor&) { return Tensor::scalar(7.0); }, x, 1e-5);
  REQUIRE(err == 0.0);
}

TEST_CASE("grad_check rejects non-finite values") {
  Tensor x = Tensor::from({1.0}, {1});
  REQUIRE_THROWS_AS(seqr::grad_check(
                        [](const Tensor& t) {
                          return sum(mul(t, Tensor::scalar(std::numeric_limits<double>::infinity())));
                        },
                        x, 1e-5),
                    std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and are nonnegative") {
  seqr::Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t rows = rng.range(1, 4), cols = rng.range(1, 7);
    Tensor x = random_tensor(rng, {rows, cols}, false, -20.0, 20.0);
    Tensor y = softmax(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        REQUIRE(y.at(r, c) >= 0.0);
        s += y.at(r, c);
      }
      REQUIRE(std::fabs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("log_softmax agrees with log of softmax") {
  seqr::Rng rng(18);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t n = rng.range(1, 9);
    Tensor x = random_tensor(rng, {n}, false, -20.0, 20.0);
    Tensor a = log_softmax(x);
    Tensor b = softmax(x);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(std::fabs(a.at(i) - std::log(b.at(i))) < 1e-9);
  }
}

// Every primitive's backward pass against central finite differences on
// randomized shapes. Well over a hundred cases total.
TEST_CASE("primitive gradients match finite differences") {
  seqr::Rng rng(99);
  const double tol = 1e-4;
  int cases = 0;

  for (int rep = 0; rep < 10; ++rep) {
    // matmul, both operand slots, matrix and vector forms
    {
      std::size_t m = rng.range(1, 4), k = rng.range(1, 4), n = rng.range(1, 4);
      Tensor a0 = random_tensor(rng, {m, k});
      Tensor b0 = random_tensor(rng, {k, n});
      REQUIRE(checked([&](const Tensor& a) { return sum(seqr::tanh(matmul(a, b0))); }, a0) < tol);
      REQUIRE(checked([&](const Tensor& b) { return sum(seqr::tanh(matmul(a0, b))); }, b0) < tol);
      Tensor v0 = random_tensor(rng, {k});
      REQUIRE(checked([&](const Tensor& a) { return sum(seqr::tanh(matmul(a, v0))); }, a0) < tol);
      REQUIRE(checked([&](const Tensor& v) { return sum(seqr::tanh(matmul(a0, v))); }, v0) < tol);
      cases += 4;
    }
    // elementwise arithmetic, including scalar broadcast
    {
      std::size_t n = rng.range(1, 6);
      Tensor a0 = random_tensor(rng, {n});
      Tensor b0 = random_tensor(rng, {n});
      Tensor s0 = random_tensor(rng, {});
      REQUIRE(checked([&](const Tensor& a) { return sum(mul(add(a, b0), sub(a, b0))); }, a0) < tol);
      REQUIRE(checked([&](const Tensor& b) { return sum(mul(add(a0, b), b)); }, b0) < tol);
      REQUIRE(checked([&](const Tensor& s) { return sum(mul(a0, add(b0, s))); }, s0) < tol);
      REQUIRE(checked([&](const Tensor& a) { return sum(mul(a, s0)); }, a0) < tol);
      REQUIRE(checked([&](const Tensor& a) { return sum(seqr::scale(a, -1.7)); }, a0) < tol);
      cases += 5;
    }
    // unary nonlinearities
    {
      std::size_t n = rng.range(1, 6);
      Tensor x0 = random_tensor(rng, {n});
      Tensor w0 = aux(rng, {n});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(seqr::tanh(x), w0)); }, x0) < tol);
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(seqr::sigmoid(x), w0)); }, x0) < tol);
      Tensor k0 = random_kink_free(rng, {n});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(seqr::relu(x), w0)); }, k0) < tol);
      cases += 3;
    }
    // softmax / log_softmax, vector and row-wise
    {
      std::size_t r = rng.range(1, 4), c = rng.range(2, 5);
      Tensor x0 = random_tensor(rng, {r, c});
      Tensor w0 = aux(rng, {r, c});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(softmax(x), w0)); }, x0) < tol);
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(log_softmax(x), w0)); }, x0) < tol);
      Tensor v0 = random_tensor(rng, {c});
      Tensor wv = aux(rng, {c});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(softmax(x), wv)); }, v0) < tol);
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(log_softmax(x), wv)); }, v0) < tol);
      cases += 4;
    }
    // structural ops: concat, slice, row, pick, transpose, stack, reshape
    {
      std::size_t n1 = rng.range(1, 4), n2 = rng.range(1, 4);
      Tensor a0 = random_tensor(rng, {n1});
      Tensor b0 = random_tensor(rng, {n2});
      Tensor w0 = aux(rng, {n1 + n2});
      REQUIRE(checked([&](const Tensor& a) { return sum(mul(concat(a, b0), w0)); }, a0) < tol);
      std::size_t start = rng.uniform_int(n1);
      std::size_t len = 1 + rng.uniform_int(n1 - start);
      Tensor ws = aux(rng, {len});
      REQUIRE(checked([&](const Tensor& a) { return sum(mul(slice(a, start, len), ws)); }, a0) < tol);

      std::size_t r = rng.range(1, 3), c = rng.range(1, 4);
      Tensor m0 = random_tensor(rng, {r, c});
      std::size_t ri = rng.uniform_int(r), ci = rng.uniform_int(c);
      Tensor wr = aux(rng, {c});
      REQUIRE(checked([&](const Tensor& m) { return sum(mul(seqr::row(m, ri), wr)); }, m0) < tol);
      REQUIRE(checked([&](const Tensor& m) { return sum(pick(m, ri, ci)); }, m0) < tol);
      Tensor wt = aux(rng, {c, r});
      REQUIRE(checked([&](const Tensor& m) { return sum(mul(transpose(m), wt)); }, m0) < tol);
      Tensor wre = aux(rng, {r * c});
      REQUIRE(checked([&](const Tensor& m) { return sum(mul(reshape(m, {r * c}), wre)); }, m0) < tol);

      Tensor s1 = random_tensor(rng, {c});
      Tensor wst = aux(rng, {2, c});
      REQUIRE(checked(
                  [&](const Tensor& s) { return seqr::sum(mul(seqr::stack_rows({s, s1}), wst)); },
                  s1) < tol);
      Tensor vrow = random_tensor(rng, {c});
      Tensor wrw = aux(rng, {r, c});
      REQUIRE(checked([&](const Tensor& v) { return sum(mul(add_rowwise(m0, v), wrw)); }, vrow) < tol);
      REQUIRE(checked([&](const Tensor& m) { return sum(mul(add_rowwise(m, vrow), wrw)); }, m0) < tol);
      cases += 9;
    }
    // 1-D convolution
    {
      std::size_t t = rng.range(2, 7), f = rng.range(1, 3), w = 2 * rng.range(0, 2) + 1;
      Tensor x0 = random_tensor(rng, {t});
      Tensor k0 = random_tensor(rng, {f, w});
      Tensor wo = aux(rng, {t, f});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(conv1d_same(x, k0), wo)); }, x0) < tol);
      REQUIRE(checked([&](const Tensor& k) { return sum(mul(conv1d_same(x0, k), wo)); }, k0) < tol);
      cases += 2;
    }
    // 2-D convolution and pooling
    {
      std::size_t cin = rng.range(1, 2), h = rng.range(2, 5), w = rng.range(2, 5);
      std::size_t cout = rng.range(1, 2);
      Tensor x0 = random_tensor(rng, {cin, h, w});
      Tensor k0 = random_tensor(rng, {cout, cin, 3, 3});
      Tensor b0 = random_tensor(rng, {cout});
      Tensor wo = aux(rng, {cout, h, w});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(conv2d_same(x, k0, b0), wo)); }, x0) < tol);
      REQUIRE(checked([&](const Tensor& k) { return sum(mul(conv2d_same(x0, k, b0), wo)); }, k0) < tol);
      REQUIRE(checked([&](const Tensor& b) { return sum(mul(conv2d_same(x0, k0, b), wo)); }, b0) < tol);

      Tensor p0 = random_kink_free(rng, {cin, h, w});
      Tensor wp = aux(rng, {cin, (h + 1) / 2, (w + 1) / 2});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(max_pool2d_ceil(x), wp)); }, p0) < tol);
      Tensor wc = aux(rng, {h, cin * w});
      REQUIRE(checked([&](const Tensor& x) { return sum(mul(channels_to_rows(x), wc)); }, x0) < tol);
      cases += 5;
    }
  }
  REQUIRE(cases >= 100);
}

TEST_CASE("pooling uses ceil semantics on odd extents") {
  // 1 channel, 3x3 input: expect 2x2 output, last row/col pooled alone.
  Tensor x = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8, 9}, {1, 3, 3});
  Tensor y = max_pool2d_ceil(x);
  REQUIRE(y.shape() == seqr::Shape{1, 2, 2});
  REQUIRE(y.values() == std::vector<double>{5, 6, 8, 9});
}

TEST_CASE("interior gradients reset between backward calls") {
  // A leaf feeding two losses: interior scratch from the first backward must
  // not leak into the second.
  Tensor w = Tensor::from({2.0}, {1}, true);
  Tensor h = mul(w, w);
  Tensor l1 = sum(h);
  Tensor l2 = sum(mul(h, h));
  seqr::backward(l1);
  REQUIRE(w.grad()[0] == Catch::Approx(4.0));
  w.zero_grad();
  seqr::backward(l2);
  REQUIRE(w.grad()[0] == Catch::Approx(32.0));  // d(w^4)/dw = 4 w^3
}
