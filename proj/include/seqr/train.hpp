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
// Recognizer training loop and the three-stage transfer pipeline. Stage 0
// trains from scratch on a (possibly multilingual) pool; stage 1 retrains the
// CTC head and attention decoder of a prior model with the encoder frozen;
// stage 2 fine-tunes everything. Freezing is exact: frozen tensors never
// enter an optimizer and their gradients are never requested.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "seqr/data.hpp"
#include "seqr/model.hpp"
#include "seqr/optim.hpp"
#include "seqr/rng.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

// Training produced non-finite losses or gradients repeatedly.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 30;
  double lambda = 0.5;      // CTC weight in the training objective
  OptimizerSpec optimizer;  // adadelta lr 1.0 by default
  std::uint64_t seed = 1;
  std::size_t max_divergent_batches = 3;  // consecutive non-finite batches before giving up

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train: lambda must lie in [0, 1]");
    if (max_divergent_batches == 0) throw ConfigError("train: max_divergent_batches must be positive");
    optimizer.validate();
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean objective per utterance over feasible examples
  double val_loss = 0.0;    // mean teacher-forced attention nll per target
  double val_accuracy = 0.0;
  double val_greedy_cer = 0.0;  // corpus CER of the greedy CTC diagnostic
  std::map<std::string, double> per_language_cer;
  double lr = 0.0;
  double eps = 0.0;
  std::size_t skipped_batches = 0;
  std::size_t infeasible = 0;  // utterances shorter than their label sequence demands
};

struct TrainStats {
  std::vector<EpochStats> epochs;
  std::size_t skipped_batches = 0;
  std::size_t infeasible = 0;
};

namespace detail {

struct Example {
  const Utterance* utt = nullptr;
  std::vector<int> labels;
};

inline std::vector<Example> make_examples(const Vocabulary& vocab,
                                          const std::vector<const Utterance*>& utts) {
  std::vector<Example> out;
  out.reserve(utts.size());
  for (const Utterance* u : utts) {
    Example e;
    e.utt = u;
    e.labels = encode_strict(vocab, u->transcript);
    if (e.labels.empty()) throw DataError("utterance " + u->id + ": empty transcript");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

// Teacher-forced validation plus the greedy CTC diagnostic, aggregated
// overall and per language.
struct ValidationResult {
  double loss = 0.0;       // mean attention nll per target
  double accuracy = 0.0;   // next-label accuracy, eos included
  double greedy_cer = 0.0; // corpus-level: total edits / total reference length * 100
  std::map<std::string, double> per_language_cer;
};

inline ValidationResult validate_model(const HybridModel& m,
                                       const std::vector<const Utterance*>& utts) {
  if (utts.empty()) throw DataError("validation: empty utterance set");
  NoGradGuard ng;
  ValidationResult res;
  double nll = 0.0;
  std::size_t targets = 0, correct = 0, edits = 0, ref_len = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> lang_counts;  // edits, length
  for (const Utterance* u : utts) {
    std::vector<int> labels = encode_strict(m.vocab, u->transcript);
    Tensor H = m.encode(utterance_tensor(*u));
    AttentionForwardResult att = attention_forward_on(m, H, labels);
    nll += att.loss.item();
    targets += att.total;
    correct += att.correct;

    Tensor lp = log_softmax(m.ctc_head.apply_rows(H));
    std::vector<int> frames(lp.dim(0));
    for (std::size_t t = 0; t < frames.size(); ++t) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < lp.dim(1); ++k)
        if (lp.at(t, k) > lp.at(t, best)) best = k;
      frames[t] = static_cast<int>(best);
    }
    std::vector<int> hyp;
    int prev = -1;
    for (int s : frames) {
      if (s == prev) continue;
      prev = s;
      if (s != m.vocab.blank_id()) hyp.push_back(s);
    }
    std::size_t e = edit_distance(hyp, labels);
    edits += e;
    ref_len += labels.size();
    auto& lc = lang_counts[u->lang];
    lc.first += e;
    lc.second += labels.size();
  }
  res.loss = nll / static_cast<double>(targets);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(targets);
  res.greedy_cer = 100.0 * static_cast<double>(edits) / static_cast<double>(ref_len);
  for (auto& [lang, c] : lang_counts)
    res.per_language_cer[lang] = 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
  return res;
}

// Shared training loop. With freeze_encoder the enc.* tensors neither record
// gradients nor enter the optimizer, so they stay bit-identical.
using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainStats train_model(HybridModel& m, const std::vector<const Utterance*>& train_utts,
                              const std::vector<const Utterance*>& dev_utts, const TrainConfig& cfg,
                              bool freeze_encoder, std::ostream* log = nullptr,
                              const EpochCallback& after_epoch = {}) {
  cfg.validate();
  if (train_utts.empty()) throw DataError("train: empty training set");
  std::vector<detail::Example> train = detail::make_examples(m.vocab, train_utts);

  ParamList all = m.params();
  ParamList trainable;
  for (auto& [name, t] : all) {
    bool frozen = freeze_encoder && name.rfind("enc.", 0) == 0;
    t.set_requires_grad(!frozen);
    if (!frozen) trainable.emplace_back(name, t);
  }
  Optimizer opt(cfg.optimizer, trainable);
  ValidationDecay decay;
  Rng root(cfg.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainStats stats;
  std::size_t divergent_run = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffler = root.child(epoch + 1);
    shuffler.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_examples = 0, epoch_skipped = 0, epoch_infeasible = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> losses;
      losses.reserve(stop - start);
      bool saw_nonfinite = false;
      for (std::size_t i = start; i < stop; ++i) {
        const detail::Example& ex = train[order[i]];
        MolLossResult r = mol_loss(m, utterance_tensor(*ex.utt), ex.labels, cfg.lambda);
        if (r.skip) {
          ++epoch_infeasible;
          continue;
        }
        if (!std::isfinite(r.loss.item())) {
          saw_nonfinite = true;
          continue;
        }
        losses.push_back(r.loss);
      }
      if (saw_nonfinite) {
        ++epoch_skipped;
        if (++divergent_run >= cfg.max_divergent_batches)
          throw DivergenceError("training diverged: " + std::to_string(divergent_run) +
                                " consecutive non-finite batches");
        if (log) *log << "{\"event\":\"skipped_batch\",\"reason\":\"nonfinite_loss\",\"epoch\":" << epoch << "}\n";
        continue;
      }
      if (losses.empty()) continue;  // every utterance in the batch was infeasible
      opt.zero_grad();
      double seed_scale = 1.0 / static_cast<double>(losses.size());
      double batch_loss = 0.0;
      for (Tensor& l : losses) {
        backward(l, seed_scale);
        batch_loss += l.item() * seed_scale;
      }
      if (!opt.step()) {
        ++epoch_skipped;
        if (++divergent_run >= cfg.max_divergent_batches)
          throw DivergenceError("training diverged: " + std::to_string(divergent_run) +
                                " consecutive non-finite batches");
        if (log) *log << "{\"event\":\"skipped_batch\",\"reason\":\"nonfinite_grad\",\"epoch\":" << epoch << "}\n";
        continue;
      }
      divergent_run = 0;
      epoch_loss += batch_loss * static_cast<double>(losses.size());
      epoch_examples += losses.size();
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = epoch_examples ? epoch_loss / static_cast<double>(epoch_examples) : 0.0;
    if (!dev_utts.empty()) {
      ValidationResult val = validate_model(m, dev_utts);
      es.val_loss = val.loss;
      es.val_accuracy = val.accuracy;
      es.val_greedy_cer = val.greedy_cer;
      es.per_language_cer = val.per_language_cer;
      if (decay.observe(val.accuracy)) opt.decay_on_validation_drop();
    }
    es.lr = opt.lr();
    es.eps = opt.eps();
    es.skipped_batches = epoch_skipped;
    es.infeasible = epoch_infeasible;
    stats.epochs.push_back(es);
    stats.skipped_batches += epoch_skipped;
    stats.infeasible += epoch_infeasible;
    if (log) {
      nlohmann::json rec{{"event", "epoch"},
                         {"epoch", es.epoch},
                         {"train_loss", es.train_loss},
                         {"val_loss", es.val_loss},
                         {"val_accuracy", es.val_accuracy},
                         {"val_greedy_cer", es.val_greedy_cer},
                         {"lr", es.lr},
                         {"eps", es.eps},
                         {"skipped", es.skipped_batches},
                         {"infeasible", es.infeasible}};
      if (!es.per_language_cer.empty()) rec["per_language_cer"] = es.per_language_cer;
      *log << rec.dump() << "\n";
    }
    if (after_epoch) after_epoch(es);
  }
  // Leave every parameter trainable for whoever uses the model next.
  for (auto& [name, t] : all) t.set_requires_grad(true);
  return stats;
}

inline OptimizerSpec stage0_optimizer() {
  OptimizerSpec s;
  s.kind = "adadelta";
  s.lr = 1.0;
  return s;
}

inline OptimizerSpec stage1_optimizer() {
  OptimizerSpec s;
  s.kind = "sgd";
  s.lr = 1e-4;
  return s;
}

inline OptimizerSpec stage2_optimizer() {
  OptimizerSpec s;
  s.kind = "sgd";
  s.lr = 1e-2;
  return s;
}

// Stage 0: train from scratch on the pooled corpus (multilingual or not).
inline TrainStats run_stage0(HybridModel& m, const std::vector<const Utterance*>& train,
                             const std::vector<const Utterance*>& dev, const TrainConfig& cfg,
                             std::ostream* log = nullptr, const EpochCallback& after_epoch = {}) {
  return train_model(m, train, dev, cfg, /*freeze_encoder=*/false, log, after_epoch);
}

// Stage 1: retrain the CTC head and attention decoder of a prior model on the
// target language; the encoder stays bit-identical.
inline TrainStats run_stage1(HybridModel& m, const std::vector<const Utterance*>& train,
                             const std::vector<const Utterance*>& dev, const TrainConfig& cfg,
                             std::ostream* log = nullptr, const EpochCallback& after_epoch = {}) {
  return train_model(m, train, dev, cfg, /*freeze_encoder=*/true, log, after_epoch);
}

// Stage 2: fine-tune every parameter group on the target language.
inline TrainStats run_stage2(HybridModel& m, const std::vector<const Utterance*>& train,
                             const std::vector<const Utterance*>& dev, const TrainConfig& cfg,
                             std::ostream* log = nullptr, const EpochCallback& after_epoch = {}) {
  return train_model(m, train, dev, cfg, /*freeze_encoder=*/false, log, after_epoch);
}

inline std::vector<const Utterance*> utterance_pointers(const std::vector<Utterance>& utts,
                                                        std::size_t limit = 0) {
  std::vector<const Utterance*> out;
  std::size_t n = limit == 0 ? utts.size() : std::min(limit, utts.size());
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&utts[i]);
  return out;
}

}  // namespace seqr
