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
// Character-level recurrent language model: embedding, two stacked LSTM
// layers, and a softmax over labels + eos. The step function is pure so
// beam-search hypotheses can fork state snapshots freely.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqr/checkpoint.hpp"
#include "seqr/data.hpp"
#include "seqr/layers.hpp"
#include "seqr/model.hpp"
#include "seqr/optim.hpp"
#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

struct LmArch {
  std::size_t embed_dim = 256;
  std::size_t hidden = 256;

  nlohmann::json to_json() const {
    return nlohmann::json{{"type", "char_lm"}, {"embed_dim", embed_dim}, {"hidden", hidden}};
  }

  static LmArch from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"type", "embed_dim", "hidden"}, "lm arch");
    if (j.value("type", "char_lm") != "char_lm") throw ConfigError("lm arch: expected type \"char_lm\"");
    LmArch a;
    detail::maybe_get(j, "embed_dim", a.embed_dim);
    detail::maybe_get(j, "hidden", a.hidden);
    if (a.embed_dim == 0 || a.hidden == 0) throw ConfigError("lm arch: all dimensions must be positive");
    return a;
  }
};

// Immutable per-hypothesis snapshot: hidden and cell for both layers.
struct LmState {
  LstmState l0;
  LstmState l1;
};

struct CharRnnLm {
  LmArch arch;
  Vocabulary vocab;
  Tensor embed;  // rows cover labels + eos slot + sos
  LstmParams l0;
  LstmParams l1;
  Linear out;  // labels + eos

  static CharRnnLm init(const LmArch& arch, const Vocabulary& vocab, std::uint64_t seed) {
    Rng rng(seed);
    CharRnnLm lm;
    lm.arch = arch;
    lm.vocab = vocab;
    lm.embed = init_uniform(rng, {static_cast<std::size_t>(vocab.num_embeddings()), arch.embed_dim});
    lm.l0 = LstmParams::init(arch.hidden, arch.embed_dim, rng);
    lm.l1 = LstmParams::init(arch.hidden, arch.hidden, rng);
    lm.out = Linear::init(static_cast<std::size_t>(vocab.num_labels()) + 1, arch.hidden,
                          /*bias=*/true, rng);
    return lm;
  }

  ParamList params() const {
    ParamList list;
    list.emplace_back("lm.embed", embed);
    l0.collect("lm.lstm.L0", list);
    l1.collect("lm.lstm.L1", list);
    out.collect("lm.out", list);
    return list;
  }
};

inline LmState lm_zero_state(const CharRnnLm& lm) {
  return {lstm_zero_state(lm.l0), lstm_zero_state(lm.l1)};
}

struct LmStepResult {
  Tensor log_dist;  // normalized over labels + eos
  LmState state;
};

// Consumes one character id (labels, eos, or sos) and returns the
// distribution over the next one. Pure: equal inputs give equal outputs.
inline LmStepResult lm_step(const CharRnnLm& lm, const LmState& st, int c) {
  if (c < 0 || c >= lm.vocab.num_embeddings())
    throw std::invalid_argument("lm_step: id " + std::to_string(c) + " outside embedding range");
  Tensor x = row(lm.embed, static_cast<std::size_t>(c));
  LstmState s0 = lstm_step(lm.l0, x, st.l0);
  LstmState s1 = lstm_step(lm.l1, s0.h, st.l1);
  return {log_softmax(lm.out.apply(s1.h)), {s0, s1}};
}

// LM text uses strict encoding: out-of-vocabulary graphemes are data errors.
inline std::vector<int> lm_encode_strict(const Vocabulary& vocab, const std::string& text) {
  return encode_strict(vocab, text);
}

// Teacher-forced next-character negative log-likelihoods; entry i scores
// target i where targets are the labels followed by eos.
inline std::vector<Tensor> lm_sequence_nlls(const CharRnnLm& lm, const std::vector<int>& labels) {
  std::vector<Tensor> nlls;
  nlls.reserve(labels.size() + 1);
  LmState st = lm_zero_state(lm);
  int prev = lm.vocab.sos_id();
  for (std::size_t i = 0; i <= labels.size(); ++i) {
    int target = i < labels.size() ? labels[i] : lm.vocab.eos_id();
    if (target < 0 || target >= lm.vocab.num_labels() + 1)
      throw std::invalid_argument("lm: label " + std::to_string(target) + " outside output range");
    LmStepResult r = lm_step(lm, st, prev);
    nlls.push_back(scale(slice(r.log_dist, static_cast<std::size_t>(target), 1), -1.0));
    st = r.state;
    prev = target;
  }
  return nlls;
}

// Exponentiated average negative log-likelihood per character. The eos
// prediction is excluded so the value is comparable across corpora with
// different length mixes; training still optimizes the eos term.
inline double lm_perplexity(const CharRnnLm& lm, const std::vector<std::vector<int>>& seqs) {
  NoGradGuard ng;
  double total = 0.0;
  std::size_t n_chars = 0;
  for (const auto& labels : seqs) {
    LmState st = lm_zero_state(lm);
    int prev = lm.vocab.sos_id();
    for (int target : labels) {
      LmStepResult r = lm_step(lm, st, prev);
      total -= r.log_dist.values()[static_cast<std::size_t>(target)];
      st = r.state;
      prev = target;
    }
    n_chars += labels.size();
  }
  if (n_chars == 0) throw DataError("lm perplexity: no characters to score");
  return std::exp(total / static_cast<double>(n_chars));
}

struct LmTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  OptimizerSpec optimizer;  // adadelta lr 1.0 by default
  std::uint64_t seed = 1;
};

struct LmEpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;      // mean nll per target, eos included
  double val_perplexity = 0.0;  // per character, eos excluded
};

struct LmTrainResult {
  CharRnnLm model;
  std::vector<LmEpochStats> stats;
  std::size_t skipped_batches = 0;
};

inline LmTrainResult lm_train(const LmArch& arch, const Vocabulary& vocab,
                              const std::vector<std::string>& train_texts,
                              const std::vector<std::string>& val_texts, const LmTrainConfig& cfg,
                              std::ostream* log = nullptr) {
  if (train_texts.empty()) throw DataError("lm: empty training corpus");
  if (val_texts.empty()) throw DataError("lm: empty validation corpus");
  std::vector<std::vector<int>> train_seqs, val_seqs;
  train_seqs.reserve(train_texts.size());
  for (const auto& t : train_texts) train_seqs.push_back(lm_encode_strict(vocab, t));
  val_seqs.reserve(val_texts.size());
  for (const auto& t : val_texts) val_seqs.push_back(lm_encode_strict(vocab, t));

  LmTrainResult res;
  res.model = CharRnnLm::init(arch, vocab, cfg.seed);
  Optimizer opt(cfg.optimizer, res.model.params());
  Rng root(cfg.seed);

  std::vector<std::size_t> order(train_seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffler = root.child(epoch + 1);
    shuffler.shuffle(order);
    double epoch_nll = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> nlls;
      for (std::size_t i = start; i < stop; ++i) {
        auto seq_nlls = lm_sequence_nlls(res.model, train_seqs[order[i]]);
        nlls.insert(nlls.end(), seq_nlls.begin(), seq_nlls.end());
      }
      Tensor total = nlls.front();
      for (std::size_t i = 1; i < nlls.size(); ++i) total = add(total, nlls[i]);
      Tensor loss = reshape(scale(total, 1.0 / static_cast<double>(nlls.size())), {});
      opt.zero_grad();
      backward(loss);
      if (!opt.step()) {
        ++res.skipped_batches;
        if (log) *log << "{\"event\":\"skipped_batch\",\"epoch\":" << epoch << "}\n";
        continue;
      }
      epoch_nll += loss.item() * static_cast<double>(nlls.size());
      epoch_targets += nlls.size();
    }
    LmEpochStats s;
    s.epoch = epoch;
    s.train_loss = epoch_targets ? epoch_nll / static_cast<double>(epoch_targets) : 0.0;
    s.val_perplexity = lm_perplexity(res.model, val_seqs);
    res.stats.push_back(s);
    if (log)
      *log << "{\"event\":\"lm_epoch\",\"epoch\":" << epoch << ",\"train_loss\":" << s.train_loss
           << ",\"val_perplexity\":" << s.val_perplexity << "}\n";
  }
  return res;
}

inline void save_lm(const std::string& path, const CharRnnLm& lm) {
  save_checkpoint(path, CheckpointKind::kCharLm, lm.arch.to_json(), lm.vocab, lm.params());
}

inline CharRnnLm load_lm(const std::string& path) {
  CheckpointData data = load_checkpoint(path);
  if (data.kind != CheckpointKind::kCharLm)
    throw DataError("expected a language-model checkpoint: " + path);
  CharRnnLm lm = CharRnnLm::init(LmArch::from_json(data.arch), data.vocab, 0);
  ParamList target = lm.params();
  assign_params(target, data.params, path);
  return lm;
}

}  // namespace seqr
