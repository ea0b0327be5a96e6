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
// The hybrid recognizer: one encoder feeding an attention decoder and a CTC
// projection, trained on a lambda-weighted interpolation of both losses. Both
// heads always score the same encoder output tensor.

#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqr/attention.hpp"
#include "seqr/ctc.hpp"
#include "seqr/data.hpp"
#include "seqr/layers.hpp"
#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
}

template <typename T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

struct ModelArch {
  std::size_t feat_dim = 80;
  bool use_vgg = true;
  std::size_t enc_layers = 5;
  std::size_t enc_units = 320;
  std::size_t enc_proj = 320;
  std::size_t att_energy = 320;
  std::size_t att_maps = 10;
  std::size_t att_width = 100;
  std::size_t dec_units = 300;
  std::size_t embed_dim = 300;

  std::size_t encoder_input_dim() const {
    return use_vgg ? ((feat_dim + 3) / 4) * VggBlock::kOut : feat_dim;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"type", "hybrid"},         {"feat_dim", feat_dim},
                          {"use_vgg", use_vgg},       {"enc_layers", enc_layers},
                          {"enc_units", enc_units},   {"enc_proj", enc_proj},
                          {"att_energy", att_energy}, {"att_maps", att_maps},
                          {"att_width", att_width},   {"dec_units", dec_units},
                          {"embed_dim", embed_dim}};
  }

  static ModelArch from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"type", "feat_dim", "use_vgg", "enc_layers", "enc_units", "enc_proj",
                                 "att_energy", "att_maps", "att_width", "dec_units", "embed_dim"},
                                "model arch");
    if (j.contains("type") && j.at("type") != "hybrid")
      throw ConfigError("model arch: expected type \"hybrid\"");
    ModelArch a;
    detail::maybe_get(j, "feat_dim", a.feat_dim);
    detail::maybe_get(j, "use_vgg", a.use_vgg);
    detail::maybe_get(j, "enc_layers", a.enc_layers);
    detail::maybe_get(j, "enc_units", a.enc_units);
    detail::maybe_get(j, "enc_proj", a.enc_proj);
    detail::maybe_get(j, "att_energy", a.att_energy);
    detail::maybe_get(j, "att_maps", a.att_maps);
    detail::maybe_get(j, "att_width", a.att_width);
    detail::maybe_get(j, "dec_units", a.dec_units);
    detail::maybe_get(j, "embed_dim", a.embed_dim);
    if (a.feat_dim == 0 || a.enc_layers == 0 || a.enc_units == 0 || a.enc_proj == 0 ||
        a.att_energy == 0 || a.att_maps == 0 || a.att_width == 0 || a.dec_units == 0 ||
        a.embed_dim == 0)
      throw ConfigError("model arch: all dimensions must be positive");
    return a;
  }
};

struct HybridModel {
  ModelArch arch;
  Vocabulary vocab;
  VggBlock vgg;  // present iff arch.use_vgg
  BlstmpStack encoder;
  LocationAttentionParams att;
  AttentionDecoderParams dec;
  Linear ctc_head;  // labels + blank

  static HybridModel init(const ModelArch& arch, const Vocabulary& vocab, std::uint64_t seed) {
    HybridModel m;
    m.arch = arch;
    m.vocab = vocab;
    Rng rng(seed);
    if (arch.use_vgg) m.vgg = VggBlock::init(rng);
    m.encoder = BlstmpStack::init(arch.enc_layers, arch.encoder_input_dim(), arch.enc_units,
                                  arch.enc_proj, rng);
    m.att = LocationAttentionParams::init(arch.att_energy, arch.dec_units, arch.enc_proj,
                                          arch.att_maps, arch.att_width, rng);
    std::size_t n_out = static_cast<std::size_t>(vocab.num_labels()) + 1;  // + eos
    m.dec = AttentionDecoderParams::init(static_cast<std::size_t>(vocab.num_embeddings()),
                                         arch.embed_dim, arch.dec_units, arch.enc_proj, n_out, rng);
    m.ctc_head = Linear::init(static_cast<std::size_t>(vocab.num_labels()) + 1, arch.enc_proj,
                              /*bias=*/true, rng);  // + blank
    return m;
  }

  ParamList params() const {
    ParamList out;
    if (arch.use_vgg) vgg.collect("enc.vgg", out);
    encoder.collect("enc.blstmp", out);
    att.collect("att", out);
    dec.collect("dec", out);
    ctc_head.collect("ctc.out", out);
    return out;
  }

  Tensor encode(const Tensor& X) const {
    if (X.ndim() != 2 || X.dim(1) != arch.feat_dim)
      throw std::invalid_argument("encode: expected T x " + std::to_string(arch.feat_dim) +
                                  " features");
    return arch.use_vgg ? blstmp_forward(encoder, vgg_forward(vgg, X)) : blstmp_forward(encoder, X);
  }
};

inline Tensor utterance_tensor(const Utterance& u) {
  return Tensor::from(u.features, {u.frames, u.dim});
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct AttentionForwardResult {
  Tensor loss;              // teacher-forced -log p including the eos step
  std::size_t correct = 0;  // argmax hits over labels + eos
  std::size_t total = 0;
};

// Teacher forcing over `labels` with eos appended; H is the encoder output.
inline AttentionForwardResult attention_forward_on(const HybridModel& m, const Tensor& H,
                                                   const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("attention_forward: empty label sequence");
  for (int l : labels)
    if (l < 0 || l >= m.vocab.num_labels())
      throw std::invalid_argument("attention_forward: label " + std::to_string(l) +
                                  " not in vocabulary");
  std::vector<int> targets = labels;
  targets.push_back(m.vocab.eos_id());

  AttentionForwardResult res;
  Tensor a = uniform_alignment(H.dim(0));
  LstmState q = lstm_zero_state(m.dec.cell);
  int prev = m.vocab.sos_id();
  Tensor loss;
  for (int target : targets) {
    a = attend(m.att, a, q.h, H);
    Tensor r = attention_context(a, H);
    auto step = decoder_step(m.dec, r, q, prev);
    Tensor nll = scale(slice(step.log_dist, static_cast<std::size_t>(target), 1), -1.0);
    loss = loss.defined() ? add(loss, nll) : nll;
    const auto& dist = step.log_dist.values();
    std::size_t best = 0;
    for (std::size_t k = 1; k < dist.size(); ++k)
      if (dist[k] > dist[best]) best = k;
    res.correct += best == static_cast<std::size_t>(target) ? 1 : 0;
    ++res.total;
    q = step.state;
    prev = target;
  }
  res.loss = reshape(loss, {});
  return res;
}

inline Tensor attention_forward(const HybridModel& m, const Tensor& X, const std::vector<int>& labels) {
  return attention_forward_on(m, m.encode(X), labels).loss;
}

struct MolLossResult {
  Tensor loss;
  Tensor enc_out;     // the one encoder pass both heads scored
  bool skip = false;  // CTC alignment infeasible for this utterance
  double att_value = 0.0;
  double ctc_value = 0.0;
};

// lambda * ctc + (1 - lambda) * attention, one shared encoder pass. The
// endpoint cases return the untouched head losses so they match the
// single-head evaluations exactly.
inline MolLossResult mol_loss(const HybridModel& m, const Tensor& X, const std::vector<int>& labels,
                              double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("mol_loss: lambda must lie in [0, 1]");
  Tensor H = m.encode(X);
  MolLossResult res;
  res.enc_out = H;

  CtcLossResult ctc{Tensor(), true};
  if (lambda > 0.0) {
    Tensor lp = log_softmax(m.ctc_head.apply_rows(H));
    ctc = ctc_loss(lp, labels);
    if (!ctc.feasible) {
      res.skip = true;
      res.loss = Tensor::scalar(std::numeric_limits<double>::infinity());
      return res;
    }
    res.ctc_value = ctc.loss.item();
  }
  Tensor att;
  if (lambda < 1.0) {
    att = attention_forward_on(m, H, labels).loss;
    res.att_value = att.item();
  }

  if (lambda == 0.0)
    res.loss = att;
  else if (lambda == 1.0)
    res.loss = ctc.loss;
  else
    res.loss = add(scale(ctc.loss, lambda), scale(att, 1.0 - lambda));
  return res;
}

}  // namespace seqr
