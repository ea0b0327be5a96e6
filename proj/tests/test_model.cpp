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
#include <filesystem>
#include <fstream>
#include <vector>

#include "seqr/checkpoint.hpp"
#include "seqr/model.hpp"
#include "seqr/rng.hpp"

using seqr::HybridModel;
using seqr::ModelArch;
using seqr::Tensor;
using seqr::Vocabulary;

namespace {

ModelArch tiny_arch() {
  ModelArch a;
  a.feat_dim = 3;
  a.use_vgg = false;
  a.enc_layers = 1;
  a.enc_units = 8;
  a.enc_proj = 6;
  a.att_energy = 4;
  a.att_maps = 2;
  a.att_width = 3;
  a.dec_units = 4;
  a.embed_dim = 3;
  return a;
}

HybridModel tiny_model(std::uint64_t seed = 5) {
  return HybridModel::init(tiny_arch(), Vocabulary::build({"a", "b"}), seed);
}

Tensor random_features(seqr::Rng& rng, std::size_t t, std::size_t d) {
  std::vector<double> v(t * d);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(v), {t, d});
}

// In-place central-difference check against gradients accumulated by one
// backward pass; works on parameters that live inside a model. Central
// differences carry cancellation noise of about eps * |f| / (2 * step);
// coordinates below noise / tolerance cannot be certified at the 1e-4 target,
// so the denominator floor sits at that threshold.
double check_param_grad(const std::function<Tensor()>& f, Tensor param, double step) {
  Tensor loss = f();
  seqr::backward(loss);
  std::vector<double> analytic = param.grad();
  param.zero_grad();
  double fd_noise = 2.3e-16 * std::max(1.0, std::fabs(loss.item())) / (2.0 * step);
  double floor = std::max(1e-8, 4.0 * fd_noise / 1e-4);
  double worst = 0.0;
  seqr::NoGradGuard ng;
  for (std::size_t i = 0; i < param.size(); ++i) {
    double saved = param.values()[i];
    param.values()[i] = saved + step;
    double up = f().item();
    param.values()[i] = saved - step;
    double down = f().item();
    param.values()[i] = saved;
    double numeric = (up - down) / (2.0 * step);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("interpolation endpoints equal the single-head losses exactly") {
  seqr::Rng rng(70);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 6, 3);
  std::vector<int> labels = {1, 2, 1};

  auto at0 = mol_loss(m, X, labels, 0.0);
  REQUIRE(at0.loss.item() == attention_forward(m, X, labels).item());

  auto at1 = mol_loss(m, X, labels, 1.0);
  Tensor lp = log_softmax(m.ctc_head.apply_rows(m.encode(X)));
  REQUIRE(at1.loss.item() == seqr::ctc_loss(lp, labels).loss.item());

  auto mid = mol_loss(m, X, labels, 0.5);
  REQUIRE(mid.loss.item() == 0.5 * at1.loss.item() + 0.5 * at0.loss.item());
}

TEST_CASE("loss is linear in lambda with slope ctc minus attention") {
  seqr::Rng rng(71);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 5, 3);
  std::vector<int> labels = {2, 1};
  auto a = mol_loss(m, X, labels, 0.25);
  auto b = mol_loss(m, X, labels, 0.75);
  double slope = (b.loss.item() - a.loss.item()) / 0.5;
  REQUIRE(slope == Catch::Approx(a.ctc_value - a.att_value).margin(1e-9));
  REQUIRE_THROWS_AS(mol_loss(m, X, labels, 1.5), std::invalid_argument);
}

TEST_CASE("both heads score the same encoder tensor") {
  seqr::Rng rng(72);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 5, 3);
  std::vector<int> labels = {1, 2};
  auto res = mol_loss(m, X, labels, 0.5);
  REQUIRE(res.enc_out.defined());
  double att_again = attention_forward_on(m, res.enc_out, labels).loss.item();
  double ctc_again = seqr::ctc_loss(log_softmax(m.ctc_head.apply_rows(res.enc_out)), labels).loss.item();
  REQUIRE(res.att_value == att_again);
  REQUIRE(res.ctc_value == ctc_again);
}

TEST_CASE("infeasible ctc alignments surface as a skip signal") {
  seqr::Rng rng(73);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 2, 3);  // 2 frames cannot align "aa"
  auto res = mol_loss(m, X, {1, 1}, 0.5);
  REQUIRE(res.skip);
  auto att_only = mol_loss(m, X, {1, 1}, 0.0);
  REQUIRE_FALSE(att_only.skip);  // attention has no alignment constraint
}

TEST_CASE("encoder preserves frames without the convolutional front-end and pools with it") {
  seqr::Rng rng(74);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 9, 3);
  REQUIRE(m.encode(X).shape() == seqr::Shape{9, 6});

  ModelArch va = tiny_arch();
  va.feat_dim = 8;
  va.use_vgg = true;
  HybridModel vm = HybridModel::init(va, Vocabulary::build({"a", "b"}), 6);
  seqr::NoGradGuard ng;
  REQUIRE(vm.encode(random_features(rng, 10, 8)).shape() == seqr::Shape{3, 6});
  REQUIRE_THROWS_AS(vm.encode(random_features(rng, 10, 3)), std::invalid_argument);
}

TEST_CASE("uniform decoder output makes the teacher-forced loss counting-based") {
  seqr::Rng rng(75);
  HybridModel m = tiny_model();
  for (auto& v : m.dec.out.w.values()) v = 0.0;
  for (auto& v : m.dec.out.b.values()) v = 0.0;
  Tensor X = random_features(rng, 4, 3);
  double n_out = static_cast<double>(m.vocab.num_labels()) + 1.0;
  REQUIRE(attention_forward(m, X, {1}).item() == Catch::Approx(2.0 * std::log(n_out)).margin(1e-12));
}

TEST_CASE("teacher-forced loss equals a manual per-step composition") {
  seqr::Rng rng(76);
  HybridModel m = tiny_model();
  Tensor X = random_features(rng, 5, 3);
  std::vector<int> labels = {2, 1};

  Tensor H = m.encode(X);
  Tensor a = seqr::uniform_alignment(H.dim(0));
  seqr::LstmState q = seqr::lstm_zero_state(m.dec.cell);
  int prev = m.vocab.sos_id();
  double manual = 0.0;
  std::vector<int> targets = labels;
  targets.push_back(m.vocab.eos_id());
  for (int target : targets) {
    a = attend(m.att, a, q.h, H);
    auto step = decoder_step(m.dec, seqr::attention_context(a, H), q, prev);
    manual -= step.log_dist.at(static_cast<std::size_t>(target));
    q = step.state;
    prev = target;
  }
  REQUIRE(attention_forward(m, X, labels).item() == Catch::Approx(manual).epsilon(1e-12));
  REQUIRE_THROWS_AS(attention_forward(m, X, {9}), std::invalid_argument);
  REQUIRE_THROWS_AS(attention_forward(m, X, {}), std::invalid_argument);
}

TEST_CASE("validation statistics count argmax hits including eos") {
  seqr::Rng rng(77);
  HybridModel m = tiny_model();
  Tensor H = m.encode(random_features(rng, 4, 3));
  auto res = attention_forward_on(m, H, {1, 2});
  REQUIRE(res.total == 3);
  REQUIRE(res.correct <= res.total);
}

TEST_CASE("mol gradients pass finite differences for every parameter tensor") {
  seqr::Rng rng(78);
  HybridModel m = tiny_model(9);
  Tensor X = random_features(rng, 5, 3);
  std::vector<int> labels = {1, 2};
  auto f = [&]() { return mol_loss(m, X, labels, 0.4).loss; };
  for (auto& [name, param] : m.params()) {
    param.zero_grad();
    INFO(name);
    REQUIRE(check_param_grad(f, param, 1e-4) < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip byte-exactly") {
  auto dir = std::filesystem::temp_directory_path() / "seqr_model_test";
  std::filesystem::create_directories(dir);
  std::string p1 = (dir / "m1.ckpt").string();
  std::string p2 = (dir / "m2.ckpt").string();

  HybridModel m = tiny_model(11);
  seqr::save_model(p1, m);
  HybridModel back = seqr::load_model(p1);
  seqr::save_model(p2, back);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(!b1.empty());
  REQUIRE(b1 == b2);

  REQUIRE(back.vocab == m.vocab);
  auto pa = m.params(), pb = back.params();
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < pa.size(); ++i)
    all_equal = all_equal && pa[i].first == pb[i].first && pa[i].second.values() == pb[i].second.values();
  REQUIRE(all_equal);

  std::string junk = (dir / "junk.ckpt").string();
  std::ofstream(junk) << "not a checkpoint";
  REQUIRE_THROWS_AS(seqr::load_model(junk), seqr::DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("architecture descriptors reject unknown keys") {
  auto j = tiny_arch().to_json();
  REQUIRE(ModelArch::from_json(j).to_json() == j);
  j["dropout"] = 0.5;
  REQUIRE_THROWS_AS(ModelArch::from_json(j), seqr::ConfigError);
  REQUIRE_THROWS_AS(ModelArch::from_json(nlohmann::json{{"enc_units", 0}}), seqr::ConfigError);
}
