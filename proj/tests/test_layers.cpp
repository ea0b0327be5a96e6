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
#include <vector>

#include "seqr/layers.hpp"
#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

using seqr::Tensor;

namespace {

Tensor random_matrix(seqr::Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(v), {r, c});
}

Tensor reverse_rows(const Tensor& m) {
  std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[(r - 1 - i) * c + j] = m.at(i, j);
  return Tensor::from(std::move(v), {r, c});
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("lstm with all-zero parameters emits zero state") {
  seqr::LstmParams p;
  p.hidden = 3;
  p.wx = Tensor::zeros({12, 2});
  p.wh = Tensor::zeros({12, 3});
  p.b = Tensor::zeros({12});
  Tensor x = Tensor::from({0.7, -1.3}, {2});
  auto s = lstm_step(p, x, seqr::lstm_zero_state(p));
  for (double v : s.h.values()) REQUIRE(v == 0.0);
  for (double v : s.c.values()) REQUIRE(v == 0.0);
}

TEST_CASE("one-unit lstm matches a gate-by-gate hand evaluation") {
  // Gate blocks in order: input, forget, candidate, output.
  double wxi = 0.5, wxf = -0.3, wxg = 0.8, wxo = 0.2;
  double whi = 0.1, whf = 0.4, whg = -0.6, who = 0.7;
  double bi = 0.05, bf = -0.1, bg = 0.2, bo = 0.0;
  seqr::LstmParams p;
  p.hidden = 1;
  p.wx = Tensor::from({wxi, wxf, wxg, wxo}, {4, 1});
  p.wh = Tensor::from({whi, whf, whg, who}, {4, 1});
  p.b = Tensor::from({bi, bf, bg, bo}, {4});

  double x = 0.9, h0 = -0.2, c0 = 0.3;
  auto s = lstm_step(p, Tensor::from({x}, {1}), {Tensor::from({h0}, {1}), Tensor::from({c0}, {1})});

  double i = sigmoid_ref(wxi * x + whi * h0 + bi);
  double f = sigmoid_ref(wxf * x + whf * h0 + bf);
  double g = std::tanh(wxg * x + whg * h0 + bg);
  double o = sigmoid_ref(wxo * x + who * h0 + bo);
  double c = f * c0 + i * g;
  double h = o * std::tanh(c);
  REQUIRE(s.c.at(0) == Catch::Approx(c).epsilon(1e-12));
  REQUIRE(s.h.at(0) == Catch::Approx(h).epsilon(1e-12));
}

TEST_CASE("gradients through five chained lstm steps pass finite differences") {
  seqr::Rng rng(21);
  seqr::LstmParams p = seqr::LstmParams::init(2, 3, rng);
  std::vector<Tensor> inputs;
  for (int t = 0; t < 5; ++t) inputs.push_back(random_matrix(rng, 1, 3));

  auto run = [&](const seqr::LstmParams& params) {
    seqr::LstmState s = seqr::lstm_zero_state(params);
    for (const auto& in : inputs) s = lstm_step(params, seqr::row(in, 0), s);
    return sum(concat(s.h, s.c));
  };
  auto against = [&](Tensor seqr::LstmParams::*field) {
    return seqr::grad_check(
        [&](const Tensor& t) {
          seqr::LstmParams q = p;
          q.*field = t;
          return run(q);
        },
        p.*field, 1e-5);
  };
  REQUIRE(against(&seqr::LstmParams::wx) < 1e-4);
  REQUIRE(against(&seqr::LstmParams::wh) < 1e-4);
  REQUIRE(against(&seqr::LstmParams::b) < 1e-4);
}

TEST_CASE("blstmp handles a single frame and preserves length") {
  seqr::Rng rng(22);
  auto stack = seqr::BlstmpStack::init(2, 4, 3, 5, rng);
  Tensor x1 = random_matrix(rng, 1, 4);
  Tensor y1 = blstmp_forward(stack, x1);
  REQUIRE(y1.shape() == seqr::Shape{1, 5});
  Tensor x7 = random_matrix(rng, 7, 4);
  REQUIRE(blstmp_forward(stack, x7).shape() == seqr::Shape{7, 5});
  REQUIRE_THROWS_AS(blstmp_forward(stack, Tensor::zeros({0, 4})), std::invalid_argument);
}

TEST_CASE("reversing input and swapping directions reverses blstmp output") {
  seqr::Rng rng(23);
  std::size_t h = 3;
  auto stack = seqr::BlstmpStack::init(1, 4, h, 4, rng);
  Tensor x = random_matrix(rng, 6, 4);
  Tensor out = blstmp_forward(stack, x);

  seqr::BlstmpStack swapped = stack;
  std::swap(swapped.layers[0].fwd, swapped.layers[0].bwd);
  // The projection consumes [forward, backward]; swapping directions swaps
  // the concat halves, so its weight column halves swap too.
  Tensor w = stack.layers[0].proj.w;
  std::vector<double> sw(w.size());
  std::size_t rows = w.dim(0), cols = w.dim(1);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) sw[i * cols + (j + h) % cols] = w.at(i, j);
  swapped.layers[0].proj.w = Tensor::from(std::move(sw), {rows, cols}, true);

  Tensor out_rev = blstmp_forward(swapped, reverse_rows(x));
  Tensor expect = reverse_rows(out);
  for (std::size_t i = 0; i < out.size(); ++i)
    REQUIRE(out_rev.values()[i] == Catch::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("default-width stack maps 80-dim frames to 320-dim frames") {
  seqr::Rng rng(24);
  auto stack = seqr::BlstmpStack::init(5, 80, 320, 320, rng);
  Tensor x = random_matrix(rng, 2, 80);
  REQUIRE(blstmp_forward(stack, x).shape() == seqr::Shape{2, 320});
}

TEST_CASE("zero recurrence and a closed forget gate make blstmp frame-local") {
  seqr::Rng rng(25);
  auto stack = seqr::BlstmpStack::init(1, 3, 2, 3, rng);
  for (auto dir : {&seqr::BlstmpLayer::fwd, &seqr::BlstmpLayer::bwd}) {
    auto& p = stack.layers[0].*dir;
    for (auto& v : p.wh.values()) v = 0.0;
    // Forget block occupies [H, 2H); a huge negative bias drives the gate to
    // exactly zero so the cell carries nothing across frames.
    for (std::size_t i = p.hidden; i < 2 * p.hidden; ++i) p.b.values()[i] = -1e9;
  }
  Tensor x = random_matrix(rng, 5, 3);
  Tensor y = blstmp_forward(stack, x);

  std::vector<std::size_t> perm = {3, 0, 4, 2, 1};
  std::vector<double> px(x.size());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) px[i * 3 + j] = x.at(perm[i], j);
  Tensor yp = blstmp_forward(stack, Tensor::from(std::move(px), {5, 3}));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(yp.at(i, j) == Catch::Approx(y.at(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("blstmp gradients pass finite differences") {
  seqr::Rng rng(26);
  auto stack = seqr::BlstmpStack::init(1, 2, 2, 2, rng);
  Tensor x0 = random_matrix(rng, 3, 2);
  REQUIRE(seqr::grad_check([&](const Tensor& x) { return sum(blstmp_forward(stack, x)); }, x0, 1e-5) < 1e-4);
  Tensor wx0 = stack.layers[0].fwd.wx;
  REQUIRE(seqr::grad_check(
              [&](const Tensor& t) {
                seqr::BlstmpStack s2 = stack;
                s2.layers[0].fwd.wx = t;
                return sum(blstmp_forward(s2, x0));
              },
              wx0, 1e-5) < 1e-4);
}

TEST_CASE("vgg output shape is ceil(T/4) x (ceil(D/4) * 128)") {
  seqr::Rng rng(27);
  auto block = seqr::VggBlock::init(rng);
  seqr::NoGradGuard ng;
  Tensor x = random_matrix(rng, 100, 80);
  REQUIRE(vgg_forward(block, x).shape() == seqr::Shape{25, 20 * 128});
  Tensor odd = random_matrix(rng, 7, 5);
  REQUIRE(vgg_forward(block, odd).shape() == seqr::Shape{2, 2 * 128});
  REQUIRE_THROWS_AS(vgg_forward(block, random_matrix(rng, 3, 8)), std::invalid_argument);
  REQUIRE_THROWS_AS(vgg_forward(block, random_matrix(rng, 8, 3)), std::invalid_argument);
}

TEST_CASE("vgg on zero input with zero biases stays zero") {
  seqr::Rng rng(28);
  auto block = seqr::VggBlock::init(rng);
  for (auto* b : {&block.b0, &block.b1, &block.b2, &block.b3})
    for (auto& v : b->values()) v = 0.0;
  seqr::NoGradGuard ng;
  Tensor y = vgg_forward(block, Tensor::zeros({8, 8}));
  for (double v : y.values()) REQUIRE(v == 0.0);
}

TEST_CASE("a centered identity kernel reproduces a constant input") {
  std::vector<double> kv(9, 0.0);
  kv[4] = 1.0;  // center tap
  Tensor k = Tensor::from(std::move(kv), {1, 1, 3, 3});
  Tensor b = Tensor::zeros({1});
  Tensor x = Tensor::from(std::vector<double>(25, 0.75), {1, 5, 5});
  Tensor y = conv2d_same(x, k, b);
  for (double v : y.values()) REQUIRE(v == 0.75);
}

TEST_CASE("vgg gradients with respect to input and first bias pass finite differences") {
  seqr::Rng rng(29);
  auto block = seqr::VggBlock::init(rng);
  Tensor x0 = random_matrix(rng, 4, 4);
  REQUIRE(seqr::grad_check([&](const Tensor& x) { return sum(vgg_forward(block, x)); }, x0, 1e-5) < 1e-4);
  REQUIRE(seqr::grad_check(
              [&](const Tensor& t) {
                seqr::VggBlock b2 = block;
                b2.b0 = t;
                return sum(vgg_forward(b2, x0));
              },
              block.b0, 1e-5) < 1e-4);
}

TEST_CASE("parameter collection yields stable names") {
  seqr::Rng rng(30);
  auto stack = seqr::BlstmpStack::init(2, 3, 2, 3, rng);
  seqr::ParamList params;
  stack.collect("enc.blstmp", params);
  REQUIRE(params.size() == 2 * 8);
  REQUIRE(params[0].first == "enc.blstmp.L0.fwd.wx");
  REQUIRE(params[7].first == "enc.blstmp.L0.proj.b");
  REQUIRE(params[8].first == "enc.blstmp.L1.fwd.wx");
}
