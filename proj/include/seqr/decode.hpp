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
// Label-synchronous joint beam search: every live hypothesis proposes every
// label plus eos, candidates are ranked by a weighted sum of attention,
// CTC-prefix, and language-model log scores, and the top beam survive.
// Candidates that choose eos move to the finished pool; the search stops when
// no live hypothesis remains or the length cap is hit.

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "seqr/attention.hpp"
#include "seqr/ctc.hpp"
#include "seqr/data.hpp"
#include "seqr/layers.hpp"
#include "seqr/lm.hpp"
#include "seqr/model.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

struct DecodeConfig {
  std::size_t beam = 20;
  double alpha = 0.3;          // CTC weight
  double beta = 0.0;           // LM weight; 0 disables the LM
  double max_len_ratio = 1.0;  // output length cap as a fraction of encoder frames

  void validate() const {
    if (beam < 1) throw ConfigError("decode: beam must be at least 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("decode: alpha must lie in [0, 1]");
    if (beta < 0.0) throw ConfigError("decode: beta must be non-negative");
    if (!(max_len_ratio > 0.0)) throw ConfigError("decode: max_len_ratio must be positive");
  }
};

struct BeamHypothesis {
  std::vector<int> labels;
  double score_att = 0.0;
  double score_ctc = 0.0;  // absolute prefix score; completion score once finished
  double score_lm = 0.0;
  bool finished = false;
  // Search state below; stale on finished hypotheses.
  Tensor alignment;
  LstmState dec_state;
  CtcPrefixState ctc_state;
  LmState lm_state;
  int prev = 0;  // symbol the next expansion feeds (sos at the root)
};

inline double fused_score(const BeamHypothesis& h, const DecodeConfig& cfg) {
  return (1.0 - cfg.alpha) * h.score_att + cfg.alpha * h.score_ctc + cfg.beta * h.score_lm;
}

struct DecodeResult {
  std::vector<BeamHypothesis> hyps;  // best first
  bool fallback = false;             // nothing finished within the length cap
};

inline DecodeResult joint_beam_search(const HybridModel& m, const CharRnnLm* lm, const Tensor& X,
                                      const DecodeConfig& cfg) {
  cfg.validate();
  if (cfg.beta > 0.0 && lm == nullptr) throw ConfigError("decode: beta > 0 requires a language model");
  if (lm != nullptr && lm->vocab.to_json() != m.vocab.to_json())
    throw ConfigError("decode: recognizer and language-model vocabularies differ");
  NoGradGuard ng;
  Tensor H = m.encode(X);
  std::size_t t_len = H.dim(0);
  auto max_len = static_cast<std::size_t>(cfg.max_len_ratio * static_cast<double>(t_len));
  if (max_len < 1) max_len = 1;

  bool use_ctc = cfg.alpha > 0.0;
  bool use_lm = cfg.beta > 0.0;
  std::optional<CtcPrefixScorer> scorer;
  if (use_ctc) scorer.emplace(log_softmax(m.ctc_head.apply_rows(H)));

  int eos = m.vocab.eos_id();
  BeamHypothesis root;
  root.alignment = uniform_alignment(t_len);
  root.dec_state = lstm_zero_state(m.dec.cell);
  if (use_ctc) root.ctc_state = scorer->initial();
  if (use_lm) root.lm_state = lm_zero_state(*lm);
  root.prev = m.vocab.sos_id();

  auto better = [&cfg](const BeamHypothesis& a, const BeamHypothesis& b) {
    double fa = fused_score(a, cfg), fb = fused_score(b, cfg);
    if (fa != fb) return fa > fb;
    return a.labels < b.labels;  // deterministic tie-break
  };

  std::vector<BeamHypothesis> live;
  live.push_back(std::move(root));
  std::vector<BeamHypothesis> finished;
  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<BeamHypothesis> candidates;
    candidates.reserve(live.size() * static_cast<std::size_t>(eos + 1));
    for (const auto& h : live) {
      Tensor a_new = attend(m.att, h.alignment, h.dec_state.h, H);
      Tensor context = attention_context(a_new, H);
      DecoderStepResult dec = decoder_step(m.dec, context, h.dec_state, h.prev);
      LmStepResult lmr;
      if (use_lm) lmr = lm_step(*lm, h.lm_state, h.prev);
      for (int c = 0; c <= eos; ++c) {
        BeamHypothesis child;
        child.labels = h.labels;
        child.score_att = h.score_att + dec.log_dist.values()[static_cast<std::size_t>(c)];
        child.score_ctc = h.score_ctc;
        child.score_lm =
            h.score_lm + (use_lm ? lmr.log_dist.values()[static_cast<std::size_t>(c)] : 0.0);
        if (c == eos) {
          child.finished = true;
          if (use_ctc) child.score_ctc = scorer->complete(h.ctc_state);
        } else {
          child.labels.push_back(c);
          child.alignment = a_new;
          child.dec_state = dec.state;
          child.prev = c;
          if (use_ctc) {
            auto scored = scorer->extend(h.ctc_state, c);
            child.score_ctc = scored.first;
            child.ctc_state = std::move(scored.second);
          }
          if (use_lm) child.lm_state = lmr.state;
        }
        candidates.push_back(std::move(child));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > cfg.beam)
      candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(cfg.beam), candidates.end());
    live.clear();
    for (auto& c : candidates) {
      if (c.finished)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
    std::sort(finished.begin(), finished.end(), better);
    if (finished.size() > cfg.beam)
      finished.erase(finished.begin() + static_cast<std::ptrdiff_t>(cfg.beam), finished.end());
  }

  DecodeResult res;
  res.fallback = finished.empty();
  res.hyps = res.fallback ? std::move(live) : std::move(finished);
  std::sort(res.hyps.begin(), res.hyps.end(), better);
  return res;
}

// Collapse rule shared with diagnostics: drop adjacent repeats, then blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& frames, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int s : frames) {
    if (s == prev) continue;
    prev = s;
    if (s != blank) out.push_back(s);
  }
  return out;
}

// Per-frame argmax over the CTC head, collapsed. Diagnostic decoder.
inline std::vector<int> ctc_greedy(const HybridModel& m, const Tensor& X) {
  NoGradGuard ng;
  Tensor H = m.encode(X);
  Tensor lp = log_softmax(m.ctc_head.apply_rows(H));
  std::size_t cols = lp.dim(1);
  std::vector<int> frames(lp.dim(0));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < cols; ++k)
      if (lp.at(t, k) > lp.at(t, best)) best = k;
    frames[t] = static_cast<int>(best);
  }
  return ctc_collapse(frames, m.vocab.blank_id());
}

}  // namespace seqr
