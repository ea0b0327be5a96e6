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
//
// Neural building blocks: affine maps, an LSTM cell, bidirectional LSTM
// stacks with tanh projections, and a fixed 6-layer convolutional front-end.
// Parameters are leaf tensors initialized uniformly in [-0.1, 0.1] from a
// seeded stream; every block exposes collect() so optimizers and checkpoints
// see a flat name -> tensor view.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline Tensor init_uniform(Rng& rng, Shape shape, double bound = 0.1) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(v), std::move(shape), /*requires_grad=*/true);
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

struct Linear {
  Tensor w;  // out x in
  Tensor b;  // out; undefined when bias-free

  static Linear init(std::size_t out, std::size_t in, bool bias, Rng& rng) {
    Linear l;
    l.w = init_uniform(rng, {out, in});
    if (bias) l.b = init_uniform(rng, {out});
    return l;
  }

  std::size_t out_dim() const { return w.dim(0); }
  std::size_t in_dim() const { return w.dim(1); }

  Tensor apply(const Tensor& x) const {
    Tensor y = matmul(w, x);
    return b.defined() ? add(y, b) : y;
  }

  // X: rows x in -> rows x out.
  Tensor apply_rows(const Tensor& X) const {
    Tensor y = matmul(X, transpose(w));
    return b.defined() ? add_rowwise(y, b) : y;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".w", w);
    if (b.defined()) out.emplace_back(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

// Gate blocks stacked in the order input, forget, cell candidate, output.
struct LstmParams {
  Tensor wx;  // 4H x in
  Tensor wh;  // 4H x H
  Tensor b;   // 4H
  std::size_t hidden = 0;

  static LstmParams init(std::size_t hidden, std::size_t in, Rng& rng) {
    LstmParams p;
    p.hidden = hidden;
    p.wx = init_uniform(rng, {4 * hidden, in});
    p.wh = init_uniform(rng, {4 * hidden, hidden});
    p.b = init_uniform(rng, {4 * hidden});
    return p;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".wx", wx);
    out.emplace_back(prefix + ".wh", wh);
    out.emplace_back(prefix + ".b", b);
  }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

inline LstmState lstm_zero_state(const LstmParams& p) {
  return {Tensor::zeros({p.hidden}), Tensor::zeros({p.hidden})};
}

inline LstmState lstm_step(const LstmParams& p, const Tensor& x, const LstmState& prev) {
  if (x.ndim() != 1 || x.dim(0) != p.wx.dim(1))
    throw std::invalid_argument("lstm_step: input dim " + std::to_string(x.size()) + " vs expected " +
                                std::to_string(p.wx.dim(1)));
  std::size_t h = p.hidden;
  Tensor gates = add(add(matmul(p.wx, x), matmul(p.wh, prev.h)), p.b);
  Tensor i = sigmoid(slice(gates, 0, h));
  Tensor f = sigmoid(slice(gates, h, h));
  Tensor g = tanh(slice(gates, 2 * h, h));
  Tensor o = sigmoid(slice(gates, 3 * h, h));
  Tensor c = add(mul(f, prev.c), mul(i, g));
  Tensor out = mul(o, tanh(c));
  return {out, c};
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM with projection
// ---------------------------------------------------------------------------

struct BlstmpLayer {
  LstmParams fwd;
  LstmParams bwd;
  Linear proj;  // proj_dim x 2H, with bias
};

struct BlstmpStack {
  std::vector<BlstmpLayer> layers;

  static BlstmpStack init(std::size_t depth, std::size_t input_dim, std::size_t hidden,
                          std::size_t proj_dim, Rng& rng) {
    BlstmpStack s;
    std::size_t in = input_dim;
    for (std::size_t k = 0; k < depth; ++k) {
      BlstmpLayer layer;
      layer.fwd = LstmParams::init(hidden, in, rng);
      layer.bwd = LstmParams::init(hidden, in, rng);
      layer.proj = Linear::init(proj_dim, 2 * hidden, /*bias=*/true, rng);
      s.layers.push_back(std::move(layer));
      in = proj_dim;
    }
    return s;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      std::string base = prefix + ".L" + std::to_string(k);
      layers[k].fwd.collect(base + ".fwd", out);
      layers[k].bwd.collect(base + ".bwd", out);
      layers[k].proj.collect(base + ".proj", out);
    }
  }
};

// X: T x D -> T x proj_dim. Each layer runs one LSTM left-to-right and one
// right-to-left, concatenates per-frame outputs, and projects through tanh.
inline Tensor blstmp_forward(const BlstmpStack& stack, const Tensor& X) {
  if (X.ndim() != 2 || X.dim(0) == 0)
    throw std::invalid_argument("blstmp_forward: need a nonempty T x D input");
  Tensor cur = X;
  for (const auto& layer : stack.layers) {
    std::size_t t_len = cur.dim(0);
    std::vector<Tensor> fwd_h(t_len), bwd_h(t_len);
    LstmState f = lstm_zero_state(layer.fwd);
    for (std::size_t t = 0; t < t_len; ++t) {
      f = lstm_step(layer.fwd, row(cur, t), f);
      fwd_h[t] = f.h;
    }
    LstmState b = lstm_zero_state(layer.bwd);
    for (std::size_t t = t_len; t-- > 0;) {
      b = lstm_step(layer.bwd, row(cur, t), b);
      bwd_h[t] = b.h;
    }
    std::vector<Tensor> rows(t_len);
    for (std::size_t t = 0; t < t_len; ++t) rows[t] = concat(fwd_h[t], bwd_h[t]);
    cur = tanh(layer.proj.apply_rows(stack_rows(rows)));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Convolutional front-end
// ---------------------------------------------------------------------------

// Fixed plan: 3x3 convolutions 1->64->64, 2x2/2 max pool, 3x3 convolutions
// 64->128->128, 2x2/2 max pool; ReLU after every convolution. Time and
// frequency both shrink by a factor of 4 (ceil semantics).
struct VggBlock {
  static constexpr std::size_t kMid = 64;
  static constexpr std::size_t kOut = 128;
  Tensor k0, b0;  // 64 x 1 x 3 x 3
  Tensor k1, b1;  // 64 x 64 x 3 x 3
  Tensor k2, b2;  // 128 x 64 x 3 x 3
  Tensor k3, b3;  // 128 x 128 x 3 x 3

  static VggBlock init(Rng& rng) {
    VggBlock v;
    v.k0 = init_uniform(rng, {kMid, 1, 3, 3});
    v.b0 = init_uniform(rng, {kMid});
    v.k1 = init_uniform(rng, {kMid, kMid, 3, 3});
    v.b1 = init_uniform(rng, {kMid});
    v.k2 = init_uniform(rng, {kOut, kMid, 3, 3});
    v.b2 = init_uniform(rng, {kOut});
    v.k3 = init_uniform(rng, {kOut, kOut, 3, 3});
    v.b3 = init_uniform(rng, {kOut});
    return v;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".conv0.w", k0);
    out.emplace_back(prefix + ".conv0.b", b0);
    out.emplace_back(prefix + ".conv1.w", k1);
    out.emplace_back(prefix + ".conv1.b", b1);
    out.emplace_back(prefix + ".conv2.w", k2);
    out.emplace_back(prefix + ".conv2.b", b2);
    out.emplace_back(prefix + ".conv3.w", k3);
    out.emplace_back(prefix + ".conv3.b", b3);
  }
};

// X: T x D -> ceil(T/4) x (ceil(D/4) * 128).
inline Tensor vgg_forward(const VggBlock& block, const Tensor& X) {
  if (X.ndim() != 2) throw std::invalid_argument("vgg_forward: need a T x D input");
  std::size_t t_len = X.dim(0), d = X.dim(1);
  if (t_len < 4 || d < 4)
    throw std::invalid_argument("vgg_forward: input " + std::to_string(t_len) + "x" + std::to_string(d) +
                                " too small; both axes must be >= 4");
  Tensor h = reshape(X, {1, t_len, d});
  h = relu(conv2d_same(h, block.k0, block.b0));
  h = relu(conv2d_same(h, block.k1, block.b1));
  h = max_pool2d_ceil(h);
  h = relu(conv2d_same(h, block.k2, block.b2));
  h = relu(conv2d_same(h, block.k3, block.b3));
  h = max_pool2d_ceil(h);
  return channels_to_rows(h);
}

}  // namespace seqr
