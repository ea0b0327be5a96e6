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
// Location-aware attention and the single-layer LSTM decoder. Attention
// energies combine the decoder query, each encoder frame, and convolutional
// features of the previous step's attention weights; the decoder consumes the
// previous label's embedding concatenated with the attention context.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqr/layers.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

struct LocationAttentionParams {
  Tensor conv_k;  // n_maps x width, convolved over the previous alignment
  Tensor g;       // energy dim
  Linear lin_q;   // energy x query dim, no bias
  Linear lin_h;   // energy x encoder dim, no bias
  Linear lin_f;   // energy x n_maps, with bias

  static LocationAttentionParams init(std::size_t energy_dim, std::size_t query_dim,
                                      std::size_t enc_dim, std::size_t n_maps, std::size_t width,
                                      Rng& rng) {
    LocationAttentionParams p;
    p.conv_k = init_uniform(rng, {n_maps, width});
    p.g = init_uniform(rng, {energy_dim});
    p.lin_q = Linear::init(energy_dim, query_dim, /*bias=*/false, rng);
    p.lin_h = Linear::init(energy_dim, enc_dim, /*bias=*/false, rng);
    p.lin_f = Linear::init(energy_dim, n_maps, /*bias=*/true, rng);
    return p;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".conv.k", conv_k);
    out.emplace_back(prefix + ".g", g);
    lin_q.collect(prefix + ".q", out);
    lin_h.collect(prefix + ".h", out);
    lin_f.collect(prefix + ".f", out);
  }
};

// One attention call: previous alignment + decoder query + encoder rows in,
// new alignment out (softmax over frames).
inline Tensor attend(const LocationAttentionParams& p, const Tensor& a_prev, const Tensor& q_prev,
                     const Tensor& H) {
  if (H.ndim() != 2 || H.dim(0) == 0) throw std::invalid_argument("attend: encoder output must be T x P");
  if (a_prev.ndim() != 1 || a_prev.dim(0) != H.dim(0))
    throw std::invalid_argument("attend: alignment length " + std::to_string(a_prev.size()) +
                                " vs " + std::to_string(H.dim(0)) + " encoder frames");
  Tensor feats = conv1d_same(a_prev, p.conv_k);           // T x n_maps
  Tensor mix = add(p.lin_h.apply_rows(H), p.lin_f.apply_rows(feats));
  Tensor energies = matmul(tanh(add_rowwise(mix, p.lin_q.apply(q_prev))), p.g);
  return softmax(energies);
}

// Context vector: alignment-weighted sum of encoder rows.
inline Tensor attention_context(const Tensor& a, const Tensor& H) {
  return matmul(transpose(H), a);
}

struct AttentionDecoderParams {
  Tensor embed;  // vocabulary embeddings incl. the eos/blank slot and sos
  LstmParams cell;
  Linear out;  // labels + eos

  static AttentionDecoderParams init(std::size_t n_embeddings, std::size_t embed_dim,
                                     std::size_t hidden, std::size_t enc_dim, std::size_t n_out,
                                     Rng& rng) {
    AttentionDecoderParams p;
    p.embed = init_uniform(rng, {n_embeddings, embed_dim});
    p.cell = LstmParams::init(hidden, embed_dim + enc_dim, rng);
    p.out = Linear::init(n_out, hidden, /*bias=*/true, rng);
    return p;
  }

  void collect(const std::string& prefix, ParamList& out_list) const {
    out_list.emplace_back(prefix + ".embed", embed);
    cell.collect(prefix + ".lstm", out_list);
    out.collect(prefix + ".out", out_list);
  }
};

struct DecoderStepResult {
  Tensor log_dist;  // log-distribution over labels + eos
  LstmState state;
};

inline DecoderStepResult decoder_step(const AttentionDecoderParams& p, const Tensor& context,
                                      const LstmState& prev, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= p.embed.dim(0))
    throw std::invalid_argument("decoder_step: label id " + std::to_string(label) + " out of range");
  Tensor x = concat(row(p.embed, static_cast<std::size_t>(label)), context);
  LstmState next = lstm_step(p.cell, x, prev);
  return {log_softmax(p.out.apply(next.h)), next};
}

inline Tensor uniform_alignment(std::size_t t_len) {
  return Tensor::from(std::vector<double>(t_len, 1.0 / static_cast<double>(t_len)), {t_len});
}

}  // namespace seqr
