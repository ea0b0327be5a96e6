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
// Connectionist temporal classification: the forward-backward loss over the
// blank-augmented label sequence, a path-enumeration oracle, and the
// blank/non-blank prefix recursion that scores label extensions during joint
// decoding. All recursions run in log space. The blank symbol is always the
// last column of the log-probability matrix.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqr/tensor.hpp"

namespace seqr {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = a > b ? a : b;
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

namespace detail {

inline void check_ctc_inputs(const Tensor& log_probs, const std::vector<int>& labels) {
  if (log_probs.ndim() != 2 || log_probs.dim(0) == 0 || log_probs.dim(1) < 2)
    throw std::invalid_argument("ctc: log_probs must be T x (V+1) with V >= 1");
  int blank = static_cast<int>(log_probs.dim(1)) - 1;
  for (int l : labels)
    if (l < 0 || l >= blank)
      throw std::invalid_argument("ctc: label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(blank) + ")");
}

// Frames needed to emit the labels: one per label plus a blank between equal
// neighbors.
inline std::size_t ctc_min_frames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

// Forward(-backward) over the blank-augmented sequence ext. alpha/beta are
// inclusive of the emission at their frame. When grad is non-null it receives
// d(-log P)/d lp with the same layout as lp.
inline double ctc_log_prob(const double* lp, std::size_t t_len, std::size_t cols,
                           const std::vector<int>& ext, std::vector<double>* grad) {
  const std::size_t s_len = ext.size();
  auto allow_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != static_cast<int>(cols) - 1 && ext[s] != ext[s - 2];
  };

  std::vector<double> alpha(t_len * s_len, kNegInf);
  alpha[0] = lp[static_cast<std::size_t>(ext[0])];
  if (s_len > 1) alpha[1] = lp[static_cast<std::size_t>(ext[1])];
  for (std::size_t t = 1; t < t_len; ++t)
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = alpha[(t - 1) * s_len + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
      if (allow_skip(s)) acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = acc + lp[t * cols + static_cast<std::size_t>(ext[s])];
    }
  double log_p = alpha[(t_len - 1) * s_len + s_len - 1];
  if (s_len > 1) log_p = log_add(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
  if (!grad) return log_p;

  std::vector<double> beta(t_len * s_len, kNegInf);
  beta[(t_len - 1) * s_len + s_len - 1] = lp[(t_len - 1) * cols + static_cast<std::size_t>(ext[s_len - 1])];
  if (s_len > 1)
    beta[(t_len - 1) * s_len + s_len - 2] = lp[(t_len - 1) * cols + static_cast<std::size_t>(ext[s_len - 2])];
  for (std::size_t t = t_len - 1; t-- > 0;)
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = beta[(t + 1) * s_len + s];
      if (s + 1 < s_len) acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
      if (s + 2 < s_len && allow_skip(s + 2)) acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
      beta[t * s_len + s] = acc + lp[t * cols + static_cast<std::size_t>(ext[s])];
    }

  grad->assign(t_len * cols, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<double> gamma(cols, kNegInf);
    for (std::size_t s = 0; s < s_len; ++s) {
      double occ = alpha[t * s_len + s] + beta[t * s_len + s] -
                   lp[t * cols + static_cast<std::size_t>(ext[s])];
      auto k = static_cast<std::size_t>(ext[s]);
      gamma[k] = log_add(gamma[k], occ);
    }
    for (std::size_t k = 0; k < cols; ++k)
      if (gamma[k] != kNegInf) (*grad)[t * cols + k] = -std::exp(gamma[k] - log_p);
  }
  return log_p;
}

}  // namespace detail

struct CtcLossResult {
  Tensor loss;            // -log p; +inf when infeasible
  bool feasible = false;  // false when T is too short to align the labels
};

// Negative log-likelihood of `labels` under per-frame log-probabilities
// (rows of log_probs should be log-distributions). Differentiable with
// respect to log_probs. Too-short inputs report infeasible instead of
// propagating -inf through training.
inline CtcLossResult ctc_loss(const Tensor& log_probs, const std::vector<int>& labels) {
  detail::check_ctc_inputs(log_probs, labels);
  if (labels.empty()) throw std::invalid_argument("ctc_loss: empty label sequence");
  std::size_t t_len = log_probs.dim(0), cols = log_probs.dim(1);
  if (t_len < detail::ctc_min_frames(labels))
    return {Tensor::scalar(std::numeric_limits<double>::infinity()), false};

  std::vector<int> ext(2 * labels.size() + 1, static_cast<int>(cols) - 1);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];

  double log_p = detail::ctc_log_prob(log_probs.values().data(), t_len, cols, ext, nullptr);
  Tensor loss = detail::make_op(
      {}, {-log_p}, {log_probs.node()}, [t_len, cols, ext](detail::Node& self) {
        auto& p = self.parents[0];
        if (!detail::wants_grad(p)) return;
        p->ensure_grad();
        std::vector<double> g;
        detail::ctc_log_prob(p->value.data(), t_len, cols, ext, &g);
        for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += self.grad[0] * g[i];
      });
  return {loss, true};
}

// Path-enumeration oracle: sums the probability of every frame-level symbol
// sequence whose collapse (merge repeats, then drop blanks) equals `labels`.
// Exponential in T; guarded for test-scale instances only.
inline double ctc_brute_force(const Tensor& log_probs, const std::vector<int>& labels) {
  detail::check_ctc_inputs(log_probs, labels);
  std::size_t t_len = log_probs.dim(0), cols = log_probs.dim(1);
  double paths = std::pow(static_cast<double>(cols), static_cast<double>(t_len));
  if (paths > 1e6) throw std::invalid_argument("ctc_brute_force: instance too large to enumerate");
  int blank = static_cast<int>(cols) - 1;
  const auto& lp = log_probs.values();

  std::vector<int> path(t_len, 0);
  double total = 0.0;
  for (;;) {
    std::vector<int> collapsed;
    int prev = -1;
    double score = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      int s = path[t];
      score += lp[t * cols + static_cast<std::size_t>(s)];
      if (s != prev && s != blank) collapsed.push_back(s);
      prev = s;
    }
    if (collapsed == labels) total += std::exp(score);
    std::size_t d = 0;
    while (d < t_len && ++path[d] == static_cast<int>(cols)) path[d++] = 0;
    if (d == t_len) break;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Prefix scoring for joint decoding
// ---------------------------------------------------------------------------

// Per-prefix scoring state. ends_blank[t] / ends_label[t] hold the log
// probability that frames 0..t emit exactly the prefix, with frame t emitting
// blank respectively the prefix's last label.
struct CtcPrefixState {
  std::vector<double> ends_blank;
  std::vector<double> ends_label;
  double log_prefix = 0.0;  // log mass of complete sequences extending the prefix
  std::vector<int> prefix;
};

class CtcPrefixScorer {
 public:
  explicit CtcPrefixScorer(const Tensor& log_probs) {
    detail::check_ctc_inputs(log_probs, {});
    t_len_ = log_probs.dim(0);
    cols_ = log_probs.dim(1);
    lp_ = log_probs.values();
  }

  std::size_t frames() const { return t_len_; }
  int blank() const { return static_cast<int>(cols_) - 1; }

  CtcPrefixState initial() const {
    CtcPrefixState s;
    s.ends_blank.resize(t_len_);
    s.ends_label.assign(t_len_, kNegInf);
    double run = 0.0;
    for (std::size_t t = 0; t < t_len_; ++t) {
      run += lp(t, blank());
      s.ends_blank[t] = run;
    }
    s.log_prefix = 0.0;  // every complete sequence extends the empty prefix
    return s;
  }

  // Scores prefix + next (next is a non-blank label): returns the log mass of
  // complete sequences beginning with the extended prefix, and the state
  // needed to extend it further.
  std::pair<double, CtcPrefixState> extend(const CtcPrefixState& s, int next) const {
    if (next < 0 || next >= blank())
      throw std::invalid_argument("ctc prefix: extension label " + std::to_string(next) + " out of range");
    bool repeat = !s.prefix.empty() && s.prefix.back() == next;
    CtcPrefixState out;
    out.prefix = s.prefix;
    out.prefix.push_back(next);
    out.ends_blank.assign(t_len_, kNegInf);
    out.ends_label.assign(t_len_, kNegInf);

    // fresh(t): prefix fully emitted by frames <= t and positioned so that a
    // new `next` at frame t+1 extends it (blank-separated when repeating).
    double psi = kNegInf;
    double prev_nb = kNegInf, prev_b = kNegInf;  // out's values at t-1
    for (std::size_t t = 0; t < t_len_; ++t) {
      double fresh_prev;  // fresh(t-1)
      if (t == 0) {
        fresh_prev = s.prefix.empty() ? 0.0 : kNegInf;
      } else {
        fresh_prev = repeat ? s.ends_blank[t - 1]
                            : log_add(s.ends_blank[t - 1], s.ends_label[t - 1]);
      }
      double start_here = fresh_prev + lp(t, next);
      psi = log_add(psi, start_here);
      double nb = log_add(prev_nb + lp(t, next), start_here);
      double b = t == 0 ? kNegInf : log_add(prev_b, prev_nb) + lp(t, blank());
      out.ends_label[t] = nb;
      out.ends_blank[t] = b;
      prev_nb = nb;
      prev_b = b;
    }
    out.log_prefix = psi;
    return {psi, out};
  }

  // Log probability of the state's prefix as a complete label sequence.
  double complete(const CtcPrefixState& s) const {
    return log_add(s.ends_blank[t_len_ - 1], s.ends_label[t_len_ - 1]);
  }

 private:
  double lp(std::size_t t, int k) const { return lp_[t * cols_ + static_cast<std::size_t>(k)]; }

  std::vector<double> lp_;
  std::size_t t_len_ = 0, cols_ = 0;
};

// Checked wrapper: validates that `state` belongs to `prefix` before scoring
// prefix + next. `next == eos_id` asks for the completion probability of the
// prefix itself, in which case the state is returned unchanged.
inline std::pair<double, CtcPrefixState> ctc_prefix_score(const CtcPrefixScorer& scorer,
                                                          const CtcPrefixState& state,
                                                          const std::vector<int>& prefix, int next,
                                                          int eos_id) {
  if (state.prefix != prefix)
    throw std::invalid_argument("ctc prefix: state does not correspond to the given prefix");
  if (next == eos_id) return {scorer.complete(state), state};
  return scorer.extend(state, next);
}

}  // namespace seqr
