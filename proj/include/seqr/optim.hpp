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
// Gradient-descent optimizers over named parameter lists. Freezing is done
// by construction: the optimizer only ever sees the trainable parameters, so
// anything left out cannot change.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "seqr/data.hpp"
#include "seqr/layers.hpp"
#include "seqr/tensor.hpp"

namespace seqr {

struct OptimizerSpec {
  std::string kind = "adadelta";  // "adadelta" or "sgd"
  double lr = 1.0;
  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-8;
  double adadelta_eps_decay = 1e-2;  // multiplies eps on a validation drop
  double sgd_decay_factor = 0.1;     // multiplies lr on a validation drop
  double clip_norm = 5.0;            // global gradient norm cap; 0 disables

  void validate() const {
    if (kind != "adadelta" && kind != "sgd")
      throw ConfigError("optimizer: unknown kind \"" + kind + "\"");
    if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
    if (!(adadelta_rho > 0.0 && adadelta_rho < 1.0))
      throw ConfigError("optimizer: adadelta_rho must lie in (0, 1)");
    if (!(adadelta_eps > 0.0)) throw ConfigError("optimizer: adadelta_eps must be positive");
    if (!(adadelta_eps_decay > 0.0 && adadelta_eps_decay <= 1.0))
      throw ConfigError("optimizer: adadelta_eps_decay must lie in (0, 1]");
    if (!(sgd_decay_factor > 0.0 && sgd_decay_factor <= 1.0))
      throw ConfigError("optimizer: sgd_decay_factor must lie in (0, 1]");
    if (clip_norm < 0.0) throw ConfigError("optimizer: clip_norm must be non-negative");
  }
};

// Applies updates in place to the tensors it was constructed with. AdaDelta
// keeps per-coordinate squared-gradient and squared-update accumulators.
class Optimizer {
 public:
  Optimizer(OptimizerSpec spec, ParamList params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    eps_ = spec_.adadelta_eps;
    if (spec_.kind == "adadelta") {
      acc_grad_.reserve(params_.size());
      acc_update_.reserve(params_.size());
      for (auto& [name, t] : params_) {
        acc_grad_.emplace_back(t.size(), 0.0);
        acc_update_.emplace_back(t.size(), 0.0);
      }
    }
  }

  // False when any gradient coordinate is non-finite; no parameter moves.
  bool step() {
    double sq_norm = 0.0;
    for (auto& [name, t] : params_) {
      const std::vector<double>& g = t.node()->grad;
      if (g.empty()) continue;
      for (double v : g) {
        if (!std::isfinite(v)) return false;
        sq_norm += v * v;
      }
    }
    double scale = 1.0;
    double norm = std::sqrt(sq_norm);
    if (spec_.clip_norm > 0.0 && norm > spec_.clip_norm) scale = spec_.clip_norm / norm;
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& t = params_[p].second;
      const std::vector<double>& g = t.node()->grad;
      if (g.empty()) continue;
      std::vector<double>& x = t.node()->value;
      if (spec_.kind == "sgd") {
        double rate = lr();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] -= rate * scale * g[i];
      } else {
        std::vector<double>& eg = acc_grad_[p];
        std::vector<double>& eu = acc_update_[p];
        double rho = spec_.adadelta_rho;
        for (std::size_t i = 0; i < x.size(); ++i) {
          double gi = scale * g[i];
          eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
          double dx = -std::sqrt(eu[i] + eps_) / std::sqrt(eg[i] + eps_) * gi;
          eu[i] = rho * eu[i] + (1.0 - rho) * dx * dx;
          x[i] += spec_.lr * dx;
        }
      }
    }
    return true;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void decay_on_validation_drop() {
    if (spec_.kind == "adadelta")
      eps_ *= spec_.adadelta_eps_decay;
    else
      lr_override_ = lr() * spec_.sgd_decay_factor;
  }

  double lr() const { return lr_override_ >= 0.0 ? lr_override_ : spec_.lr; }
  double eps() const { return eps_; }
  const OptimizerSpec& spec() const { return spec_; }

 private:
  OptimizerSpec spec_;
  ParamList params_;
  std::vector<std::vector<double>> acc_grad_;
  std::vector<std::vector<double>> acc_update_;
  double eps_ = 0.0;
  double lr_override_ = -1.0;
};

// Fires exactly when an observation is strictly below the best seen so far.
class ValidationDecay {
 public:
  bool observe(double accuracy) {
    bool drop = accuracy < best_;
    if (accuracy > best_) best_ = accuracy;
    return drop;
  }
  double best() const { return best_; }

 private:
  double best_ = -std::numeric_limits<double>::infinity();
};

}  // namespace seqr
