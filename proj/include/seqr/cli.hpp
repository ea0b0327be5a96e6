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
// Command-line surface: corpus generation, staged training, LM training,
// decoding, scoring, and experiment sweeps. One config document drives every
// command; flags override file values; each run writes its fully-resolved
// config next to its outputs. All randomness flows from the single top-level
// seed so paired conditions see identical data orderings.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqr/checkpoint.hpp"
#include "seqr/data.hpp"
#include "seqr/decode.hpp"
#include "seqr/lm.hpp"
#include "seqr/model.hpp"
#include "seqr/optim.hpp"
#include "seqr/train.hpp"

namespace seqr {

// Exit codes; parse failures count as config errors.
enum ExitCode : int { kOk = 0, kInternal = 1, kConfigExit = 2, kDataExit = 3, kDivergedExit = 4 };

namespace cli_detail {

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline nlohmann::json optimizer_to_json(const OptimizerSpec& s) {
  return nlohmann::json{{"kind", s.kind},
                        {"lr", s.lr},
                        {"adadelta_rho", s.adadelta_rho},
                        {"adadelta_eps", s.adadelta_eps},
                        {"adadelta_eps_decay", s.adadelta_eps_decay},
                        {"sgd_decay_factor", s.sgd_decay_factor},
                        {"clip_norm", s.clip_norm}};
}

inline OptimizerSpec optimizer_from_json(const nlohmann::json& j, OptimizerSpec base,
                                         const std::string& where) {
  detail::reject_unknown_keys(j,
                              {"kind", "lr", "adadelta_rho", "adadelta_eps", "adadelta_eps_decay",
                               "sgd_decay_factor", "clip_norm"},
                              where);
  detail::maybe_get(j, "kind", base.kind);
  detail::maybe_get(j, "lr", base.lr);
  detail::maybe_get(j, "adadelta_rho", base.adadelta_rho);
  detail::maybe_get(j, "adadelta_eps", base.adadelta_eps);
  detail::maybe_get(j, "adadelta_eps_decay", base.adadelta_eps_decay);
  detail::maybe_get(j, "sgd_decay_factor", base.sgd_decay_factor);
  detail::maybe_get(j, "clip_norm", base.clip_norm);
  base.validate();
  return base;
}

inline void range_from_json(const nlohmann::json& j, const char* key, std::size_t& lo,
                            std::size_t& hi, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(where + ": " + key + " must be [min, max]");
  lo = v.at(0).get<std::size_t>();
  hi = v.at(1).get<std::size_t>();
  if (lo == 0 || hi < lo) throw ConfigError(where + ": " + key + " needs 1 <= min <= max");
}

inline void check_language_name(const std::string& name) {
  if (name.empty()) throw ConfigError("language name must be non-empty");
  for (char c : name)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-')
      throw ConfigError("language name \"" + name + "\" may use only letters, digits, _ and -");
}

}  // namespace cli_detail

struct LanguageGenConfig {
  LanguageSpec spec;
  std::size_t n_utts = 100;
};

// The whole experiment as one document. Stage entries are fully resolved at
// load time so the written config reproduces the run without the defaults
// table.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  ModelArch model;
  TrainConfig shared;                      // epochs/batch/lambda shared across stages
  std::map<std::string, TrainConfig> stages;  // mono, stage0, stage1, stage2
  DecodeConfig decode;
  LmArch lm;
  LmTrainConfig lm_train;
  std::string data_dir = "corpus";
  std::vector<std::string> train_languages;
  std::string target_language;
  std::vector<LanguageGenConfig> languages;
  std::vector<std::size_t> subset_sizes = {50, 100, 200, 400};
  std::vector<double> lm_betas = {0.1, 0.3, 0.5};

  void apply_seed(std::uint64_t s) {
    seed = s;
    shared.seed = s;
    for (auto& [name, cfg] : stages) cfg.seed = s;
    lm_train.seed = s;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"seed", "model", "train", "stages", "decode", "lm", "lm_train",
                                 "data", "languages", "sweep"},
                                "config");
    ExperimentConfig c;
    detail::maybe_get(j, "seed", c.seed);
    if (j.contains("model")) c.model = ModelArch::from_json(j.at("model"));

    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown_keys(t, {"epochs", "batch_size", "lambda", "max_divergent_batches"},
                                  "train");
      detail::maybe_get(t, "epochs", c.shared.epochs);
      detail::maybe_get(t, "batch_size", c.shared.batch_size);
      detail::maybe_get(t, "lambda", c.shared.lambda);
      detail::maybe_get(t, "max_divergent_batches", c.shared.max_divergent_batches);
    }

    const nlohmann::json empty = nlohmann::json::object();
    const nlohmann::json& stages_j = j.contains("stages") ? j.at("stages") : empty;
    detail::reject_unknown_keys(stages_j, {"mono", "stage0", "stage1", "stage2"}, "stages");
    auto resolve_stage = [&](const std::string& name, const OptimizerSpec& base_opt) {
      TrainConfig cfg = c.shared;
      cfg.optimizer = base_opt;
      cfg.seed = c.seed;
      if (stages_j.contains(name)) {
        const auto& s = stages_j.at(name);
        detail::reject_unknown_keys(s, {"epochs", "batch_size", "optimizer"}, "stages." + name);
        detail::maybe_get(s, "epochs", cfg.epochs);
        detail::maybe_get(s, "batch_size", cfg.batch_size);
        if (s.contains("optimizer"))
          cfg.optimizer = cli_detail::optimizer_from_json(s.at("optimizer"), cfg.optimizer,
                                                          "stages." + name + ".optimizer");
      }
      cfg.validate();
      c.stages[name] = cfg;
    };
    resolve_stage("mono", stage0_optimizer());
    resolve_stage("stage0", stage0_optimizer());
    resolve_stage("stage1", stage1_optimizer());
    resolve_stage("stage2", stage2_optimizer());

    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      detail::reject_unknown_keys(d, {"beam", "ctc_weight", "lm_weight", "max_len_ratio"}, "decode");
      detail::maybe_get(d, "beam", c.decode.beam);
      detail::maybe_get(d, "ctc_weight", c.decode.alpha);
      detail::maybe_get(d, "lm_weight", c.decode.beta);
      detail::maybe_get(d, "max_len_ratio", c.decode.max_len_ratio);
      c.decode.validate();
    }

    if (j.contains("lm")) c.lm = LmArch::from_json(j.at("lm"));
    if (j.contains("lm_train")) {
      const auto& t = j.at("lm_train");
      detail::reject_unknown_keys(t, {"epochs", "batch_size", "optimizer"}, "lm_train");
      detail::maybe_get(t, "epochs", c.lm_train.epochs);
      detail::maybe_get(t, "batch_size", c.lm_train.batch_size);
      if (t.contains("optimizer"))
        c.lm_train.optimizer = cli_detail::optimizer_from_json(t.at("optimizer"),
                                                               c.lm_train.optimizer,
                                                               "lm_train.optimizer");
      if (c.lm_train.epochs == 0 || c.lm_train.batch_size == 0)
        throw ConfigError("lm_train: epochs and batch_size must be positive");
    }
    c.lm_train.seed = c.seed;

    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown_keys(d, {"dir", "languages", "target"}, "data");
      detail::maybe_get(d, "dir", c.data_dir);
      detail::maybe_get(d, "languages", c.train_languages);
      detail::maybe_get(d, "target", c.target_language);
    }

    if (j.contains("languages")) {
      for (const auto& lj : j.at("languages")) {
        detail::reject_unknown_keys(lj,
                                    {"name", "inventory", "n_utts", "lexicon_size", "word_len",
                                     "words", "frames", "noise_sigma", "embed_seed"},
                                    "languages[]");
        LanguageGenConfig lc;
        detail::maybe_get(lj, "name", lc.spec.name);
        cli_detail::check_language_name(lc.spec.name);
        std::string where = "language " + lc.spec.name;
        detail::maybe_get(lj, "inventory", lc.spec.inventory);
        if (lc.spec.inventory.empty()) throw ConfigError(where + ": empty inventory");
        detail::maybe_get(lj, "n_utts", lc.n_utts);
        if (lc.n_utts == 0) throw ConfigError(where + ": n_utts must be positive");
        detail::maybe_get(lj, "lexicon_size", lc.spec.lexicon_size);
        if (lc.spec.lexicon_size == 0) throw ConfigError(where + ": lexicon_size must be positive");
        cli_detail::range_from_json(lj, "word_len", lc.spec.word_len_min, lc.spec.word_len_max, where);
        cli_detail::range_from_json(lj, "words", lc.spec.words_min, lc.spec.words_max, where);
        cli_detail::range_from_json(lj, "frames", lc.spec.frames_min, lc.spec.frames_max, where);
        detail::maybe_get(lj, "noise_sigma", lc.spec.noise_sigma);
        if (lc.spec.noise_sigma < 0.0) throw ConfigError(where + ": noise_sigma must be >= 0");
        detail::maybe_get(lj, "embed_seed", lc.spec.embed_seed);
        lc.spec.feat_dim = c.model.feat_dim;  // one source of truth for feature width
        c.languages.push_back(std::move(lc));
      }
    }

    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      detail::reject_unknown_keys(s, {"subset_sizes", "lm_betas"}, "sweep");
      detail::maybe_get(s, "subset_sizes", c.subset_sizes);
      detail::maybe_get(s, "lm_betas", c.lm_betas);
      if (c.subset_sizes.empty()) throw ConfigError("sweep: subset_sizes must be non-empty");
      for (std::size_t v : c.subset_sizes)
        if (v == 0) throw ConfigError("sweep: subset sizes must be positive");
      for (double b : c.lm_betas)
        if (!(b > 0.0)) throw ConfigError("sweep: lm_betas must be positive");
    }

    c.apply_seed(c.seed);
    return c;
  }

  // Empty path means built-in defaults.
  static ExperimentConfig load(const std::string& path) {
    if (path.empty()) return from_json(nlohmann::json::object());
    try {
      return from_json(cli_detail::load_json_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["model"] = model.to_json();
    j["train"] = {{"epochs", shared.epochs},
                  {"batch_size", shared.batch_size},
                  {"lambda", shared.lambda},
                  {"max_divergent_batches", shared.max_divergent_batches}};
    for (const auto& [name, cfg] : stages)
      j["stages"][name] = {{"epochs", cfg.epochs},
                           {"batch_size", cfg.batch_size},
                           {"optimizer", cli_detail::optimizer_to_json(cfg.optimizer)}};
    j["decode"] = {{"beam", decode.beam},
                   {"ctc_weight", decode.alpha},
                   {"lm_weight", decode.beta},
                   {"max_len_ratio", decode.max_len_ratio}};
    j["lm"] = lm.to_json();
    j["lm_train"] = {{"epochs", lm_train.epochs},
                     {"batch_size", lm_train.batch_size},
                     {"optimizer", cli_detail::optimizer_to_json(lm_train.optimizer)}};
    j["data"] = {{"dir", data_dir}, {"languages", train_languages}, {"target", target_language}};
    j["languages"] = nlohmann::json::array();
    for (const auto& lc : languages)
      j["languages"].push_back({{"name", lc.spec.name},
                                {"inventory", lc.spec.inventory},
                                {"n_utts", lc.n_utts},
                                {"lexicon_size", lc.spec.lexicon_size},
                                {"word_len", {lc.spec.word_len_min, lc.spec.word_len_max}},
                                {"words", {lc.spec.words_min, lc.spec.words_max}},
                                {"frames", {lc.spec.frames_min, lc.spec.frames_max}},
                                {"noise_sigma", lc.spec.noise_sigma},
                                {"embed_seed", lc.spec.embed_seed}});
    j["sweep"] = {{"subset_sizes", subset_sizes}, {"lm_betas", lm_betas}};
    return j;
  }
};

// ---------------------------------------------------------------------------
// Corpus directory layout: manifest.json plus <lang>.<split>.feats/.tsv.
// ---------------------------------------------------------------------------

struct ManifestLanguage {
  std::string name;
  std::vector<std::string> inventory;
  std::size_t n_utts = 0, n_train = 0, n_dev = 0, n_eval = 0;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  std::size_t feat_dim = 0;
  std::vector<ManifestLanguage> languages;

  const ManifestLanguage* find(const std::string& name) const {
    for (const auto& l : languages)
      if (l.name == name) return &l;
    return nullptr;
  }
};

inline void write_manifest(const std::filesystem::path& dir, const CorpusManifest& man) {
  nlohmann::json j;
  j["seed"] = man.seed;
  j["feat_dim"] = man.feat_dim;
  j["languages"] = nlohmann::json::array();
  for (const auto& l : man.languages)
    j["languages"].push_back(
        {{"name", l.name},
         {"inventory", l.inventory},
         {"n_utts", l.n_utts},
         {"splits", {{"train", l.n_train}, {"dev", l.n_dev}, {"eval", l.n_eval}}}});
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write manifest in " + dir.string());
  os << j.dump(2) << "\n";
}

inline CorpusManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("cannot open manifest: " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
  try {
    detail::reject_unknown_keys(j, {"seed", "feat_dim", "languages"}, "manifest");
    CorpusManifest man;
    man.seed = j.at("seed").get<std::uint64_t>();
    man.feat_dim = j.at("feat_dim").get<std::size_t>();
    for (const auto& lj : j.at("languages")) {
      detail::reject_unknown_keys(lj, {"name", "inventory", "n_utts", "splits"}, "manifest language");
      ManifestLanguage l;
      l.name = lj.at("name").get<std::string>();
      l.inventory = lj.at("inventory").get<std::vector<std::string>>();
      l.n_utts = lj.at("n_utts").get<std::size_t>();
      const auto& s = lj.at("splits");
      l.n_train = s.at("train").get<std::size_t>();
      l.n_dev = s.at("dev").get<std::size_t>();
      l.n_eval = s.at("eval").get<std::size_t>();
      man.languages.push_back(std::move(l));
    }
    return man;
  } catch (const ConfigError& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
}

// Union vocabulary over every language in the corpus, targets included.
inline Vocabulary manifest_vocab(const CorpusManifest& man) {
  std::set<std::string> graphemes;
  for (const auto& l : man.languages)
    for (const auto& g : l.inventory) graphemes.insert(g);
  if (graphemes.empty()) throw DataError("manifest lists no graphemes");
  return Vocabulary::build(graphemes);
}

inline std::vector<Utterance> load_split(const std::filesystem::path& dir, const std::string& lang,
                                         const std::string& split) {
  std::string base = lang + "." + split;
  std::vector<Utterance> utts = read_features((dir / (base + ".feats")).string());
  attach_transcripts(utts, read_transcripts((dir / (base + ".tsv")).string()), base);
  return utts;
}

inline void check_feat_dim(const std::vector<Utterance>& utts, std::size_t want,
                           const std::string& what) {
  for (const auto& u : utts)
    if (u.dim != want)
      throw DataError(what + ": utterance " + u.id + " has feature dim " +
                      std::to_string(u.dim) + ", model expects " + std::to_string(want));
}

inline void write_resolved_config(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                                  nlohmann::json run) {
  nlohmann::json j = cfg.to_json();
  j["run"] = std::move(run);
  std::ofstream os(dir / "resolved_config.json");
  if (!os) throw DataError("cannot write resolved config in " + dir.string());
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands. Argument structs keep them callable without a parser.
// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out = "corpus";
};

inline void cmd_gen(const ExperimentConfig& cfg, const GenArgs& args) {
  if (cfg.languages.empty()) throw ConfigError("gen: config defines no languages");
  std::filesystem::path out(args.out);
  std::filesystem::create_directories(out);
  write_resolved_config(out, cfg, {{"command", "gen"}, {"out", args.out}});

  CorpusManifest man;
  man.seed = cfg.seed;
  man.feat_dim = cfg.model.feat_dim;
  for (const auto& lc : cfg.languages) {
    Corpus c = generate_corpus(lc.spec, lc.n_utts, cfg.seed);
    const std::string& name = lc.spec.name;
    write_features((out / (name + ".train.feats")).string(), c.train);
    write_transcripts((out / (name + ".train.tsv")).string(), c.train);
    write_features((out / (name + ".dev.feats")).string(), c.dev);
    write_transcripts((out / (name + ".dev.tsv")).string(), c.dev);
    write_features((out / (name + ".eval.feats")).string(), c.eval);
    write_transcripts((out / (name + ".eval.tsv")).string(), c.eval);
    ManifestLanguage ml;
    ml.name = name;
    ml.inventory = lc.spec.inventory;
    ml.n_utts = lc.n_utts;
    ml.n_train = c.train.size();
    ml.n_dev = c.dev.size();
    ml.n_eval = c.eval.size();
    man.languages.push_back(std::move(ml));
    std::cout << name << ": " << ml.n_train << " train / " << ml.n_dev << " dev / " << ml.n_eval
              << " eval\n";
  }
  write_manifest(out, man);
  std::cout << "corpus written to " << out.string() << "\n";
}

struct TrainArgs {
  std::string out = "train_out";
  int stage = 0;
  std::string init;
  int prior_epoch = -1;  // selects ckpt-epoch-<k>.seqr inside --init when >= 0
  std::size_t subset = 0;
  // Flag overrides; negative/zero sentinel means "not given".
  long long epochs = -1;
  long long batch_size = -1;
  double lambda = -1.0;
  double lr = -1.0;
};

namespace cli_detail {

struct LoadedData {
  std::vector<Utterance> train, dev;
};

inline LoadedData load_training_data(const ExperimentConfig& cfg, const CorpusManifest& man,
                                     const std::vector<std::string>& langs, std::size_t subset) {
  LoadedData d;
  for (const auto& lang : langs) {
    if (!man.find(lang)) throw DataError("language " + lang + " not in corpus manifest");
    std::vector<Utterance> tr = load_split(cfg.data_dir, lang, "train");
    std::vector<Utterance> dv = load_split(cfg.data_dir, lang, "dev");
    check_feat_dim(tr, cfg.model.feat_dim, lang + ".train");
    check_feat_dim(dv, cfg.model.feat_dim, lang + ".dev");
    if (subset > 0 && tr.size() > subset) tr.resize(subset);
    std::move(tr.begin(), tr.end(), std::back_inserter(d.train));
    std::move(dv.begin(), dv.end(), std::back_inserter(d.dev));
  }
  if (d.train.empty()) throw DataError("selected training split is empty");
  return d;
}

}  // namespace cli_detail

inline void cmd_train(const ExperimentConfig& cfg, const TrainArgs& args) {
  if (args.stage < 0 || args.stage > 2) throw ConfigError("train: stage must be 0, 1, or 2");
  CorpusManifest man = read_manifest(cfg.data_dir);
  Vocabulary vocab = manifest_vocab(man);

  std::string stage_key = args.stage == 0 ? "stage0" : args.stage == 1 ? "stage1" : "stage2";
  TrainConfig tc = cfg.stages.at(stage_key);
  if (args.epochs > 0) tc.epochs = static_cast<std::size_t>(args.epochs);
  if (args.batch_size > 0) tc.batch_size = static_cast<std::size_t>(args.batch_size);
  if (args.lambda >= 0.0) tc.lambda = args.lambda;
  if (args.lr > 0.0) tc.optimizer.lr = args.lr;
  tc.validate();

  std::vector<std::string> langs;
  if (args.stage == 0) {
    langs = cfg.train_languages;
    if (langs.empty()) throw ConfigError("train: data.languages is empty");
  } else {
    if (cfg.target_language.empty()) throw ConfigError("train: data.target is empty");
    langs = {cfg.target_language};
  }
  cli_detail::LoadedData data = cli_detail::load_training_data(cfg, man, langs, args.subset);

  HybridModel m;
  std::string init_path = args.init;
  if (args.stage == 0) {
    if (!args.init.empty()) throw ConfigError("train: --init applies only to stages 1 and 2");
    m = HybridModel::init(cfg.model, vocab, cfg.seed);
  } else {
    if (args.init.empty()) throw ConfigError("train: stage " + std::to_string(args.stage) +
                                             " requires --init");
    if (args.prior_epoch >= 0)
      init_path = (std::filesystem::path(args.init) /
                   ("ckpt-epoch-" + std::to_string(args.prior_epoch) + ".seqr"))
                      .string();
    m = load_model(init_path);
    if (m.arch.to_json() != cfg.model.to_json())
      throw ConfigError("train: checkpoint architecture differs from config model");
    if (m.vocab != vocab)
      throw ConfigError("train: checkpoint vocabulary differs from the corpus union vocabulary");
  }

  std::filesystem::path out(args.out);
  std::filesystem::create_directories(out);
  write_resolved_config(out, cfg,
                        {{"command", "train"},
                         {"stage", args.stage},
                         {"init", init_path},
                         {"subset", args.subset},
                         {"languages", langs},
                         {"out", args.out}});
  std::ofstream log(out / "train.log");
  if (!log) throw DataError("cannot write train log in " + args.out);

  auto train_ptrs = utterance_pointers(data.train);
  auto dev_ptrs = utterance_pointers(data.dev);
  TrainStats st;
  // Stage 0 checkpoints every epoch so later stages can start from any prior
  // maturity (--prior-epoch, 1-based).
  if (args.stage == 0) {
    auto save_epoch = [&](const EpochStats& es) {
      save_model((out / ("ckpt-epoch-" + std::to_string(es.epoch + 1) + ".seqr")).string(), m);
    };
    st = run_stage0(m, train_ptrs, dev_ptrs, tc, &log, save_epoch);
  } else if (args.stage == 1) {
    st = run_stage1(m, train_ptrs, dev_ptrs, tc, &log);
  } else {
    st = run_stage2(m, train_ptrs, dev_ptrs, tc, &log);
  }
  save_model((out / "model.seqr").string(), m);

  const EpochStats& last = st.epochs.back();
  std::cout << "stage " << args.stage << " done: train_loss " << last.train_loss;
  if (!dev_ptrs.empty())
    std::cout << ", val_accuracy " << last.val_accuracy << ", val_greedy_cer " << last.val_greedy_cer;
  std::cout << ", model " << (out / "model.seqr").string() << "\n";
}

struct DecodeArgs {
  std::string out = "decode_out";
  std::string model;
  std::string lm;
  std::string eval;
  long long beam = -1;
  double ctc_weight = -1.0;
  double lm_weight = -1.0;
  double max_len_ratio = -1.0;
};

inline void cmd_decode(const ExperimentConfig& cfg, const DecodeArgs& args) {
  if (args.model.empty()) throw ConfigError("decode: --model is required");
  if (args.eval.empty()) throw ConfigError("decode: --eval is required");
  DecodeConfig dc = cfg.decode;
  if (args.beam > 0) dc.beam = static_cast<std::size_t>(args.beam);
  if (args.ctc_weight >= 0.0) dc.alpha = args.ctc_weight;
  if (args.lm_weight >= 0.0) dc.beta = args.lm_weight;
  if (args.max_len_ratio > 0.0) dc.max_len_ratio = args.max_len_ratio;
  dc.validate();
  if (dc.beta > 0.0 && args.lm.empty())
    throw ConfigError("decode: lm_weight " + std::to_string(dc.beta) + " requires --lm");

  HybridModel m = load_model(args.model);
  CharRnnLm lm;
  const CharRnnLm* lm_ptr = nullptr;
  // beta == 0 bypasses the LM entirely so outputs match an LM-less run byte
  // for byte.
  if (dc.beta > 0.0) {
    lm = load_lm(args.lm);
    lm_ptr = &lm;
  }
  std::vector<Utterance> utts = read_features(args.eval);
  check_feat_dim(utts, m.arch.feat_dim, args.eval);

  std::filesystem::path out(args.out);
  std::filesystem::create_directories(out);
  write_resolved_config(out, cfg,
                        {{"command", "decode"},
                         {"model", args.model},
                         {"lm", args.lm},
                         {"eval", args.eval},
                         {"beam", dc.beam},
                         {"ctc_weight", dc.alpha},
                         {"lm_weight", dc.beta},
                         {"max_len_ratio", dc.max_len_ratio},
                         {"out", args.out}});

  std::ofstream os(out / "hyps.tsv");
  if (!os) throw DataError("cannot write hypotheses in " + args.out);
  os << std::setprecision(12);
  os << "id\ttext\tscore\tatt_score\tctc_score\tlm_score\tfallback\n";
  for (const auto& u : utts) {
    DecodeResult r = joint_beam_search(m, lm_ptr, utterance_tensor(u), dc);
    const BeamHypothesis& top = r.hyps.at(0);
    os << u.id << "\t" << m.vocab.decode(top.labels) << "\t" << fused_score(top, dc) << "\t"
       << top.score_att << "\t" << top.score_ctc << "\t" << top.score_lm << "\t"
       << (r.fallback ? 1 : 0) << "\n";
  }
  if (!os) throw DataError("write failed in " + args.out);
  std::cout << "decoded " << utts.size() << " utterances -> " << (out / "hyps.tsv").string()
            << "\n";
}

struct ScoreArgs {
  std::string out;  // empty: report to stdout only
  std::string hyp;
  std::string ref;
  std::string metric = "cer";
};

// Accepts decode output (header line) or plain id<TAB>text files.
inline std::map<std::string, std::string> read_hypotheses(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected id<TAB>text");
    std::string id = line.substr(0, tab);
    if (lineno == 1 && id == "id") continue;
    auto next = line.find('\t', tab + 1);
    std::string text = next == std::string::npos ? line.substr(tab + 1)
                                                 : line.substr(tab + 1, next - tab - 1);
    out[id] = text;
  }
  return out;
}

struct ScoreReport {
  std::string metric;
  std::size_t total_edits = 0, total_len = 0;
  double corpus_rate = 0.0;
  std::vector<std::string> rows;  // formatted per-utterance lines
};

inline ScoreReport score_files(const std::string& hyp_path, const std::string& ref_path,
                               const std::string& metric) {
  if (metric != "cer" && metric != "wer")
    throw ConfigError("score: metric must be cer or wer, got \"" + metric + "\"");
  std::map<std::string, std::string> hyp = read_hypotheses(hyp_path);
  std::map<std::string, std::string> ref = read_transcripts(ref_path);
  for (const auto& [id, text] : ref)
    if (!hyp.count(id)) throw DataError("score: no hypothesis for utterance " + id);
  for (const auto& [id, text] : hyp)
    if (!ref.count(id)) throw DataError("score: no reference for utterance " + id);

  ScoreReport rep;
  rep.metric = metric;
  for (const auto& [id, rtext] : ref) {
    std::vector<std::string> h = metric == "cer" ? split_graphemes(hyp.at(id)) : split_words(hyp.at(id));
    std::vector<std::string> r = metric == "cer" ? split_graphemes(rtext) : split_words(rtext);
    if (r.empty()) throw DataError("score: empty reference for utterance " + id);
    std::size_t e = edit_distance(h, r);
    rep.total_edits += e;
    rep.total_len += r.size();
    std::ostringstream row;
    row << id << "\t" << e << "\t" << r.size() << "\t" << std::fixed << std::setprecision(4)
        << 100.0 * static_cast<double>(e) / static_cast<double>(r.size());
    rep.rows.push_back(row.str());
  }
  rep.corpus_rate = 100.0 * static_cast<double>(rep.total_edits) / static_cast<double>(rep.total_len);
  return rep;
}

inline void cmd_score(const ExperimentConfig& cfg, const ScoreArgs& args) {
  if (args.hyp.empty() || args.ref.empty()) throw ConfigError("score: --hyp and --ref are required");
  ScoreReport rep = score_files(args.hyp, args.ref, args.metric);

  auto emit = [&](std::ostream& os) {
    os << "id\tedits\tref_len\t" << rep.metric << "\n";
    for (const auto& r : rep.rows) os << r << "\n";
    os << "TOTAL\t" << rep.total_edits << "\t" << rep.total_len << "\t" << std::fixed
       << std::setprecision(4) << rep.corpus_rate << "\n";
  };
  if (!args.out.empty()) {
    std::filesystem::path out(args.out);
    std::filesystem::create_directories(out);
    write_resolved_config(out, cfg,
                          {{"command", "score"},
                           {"hyp", args.hyp},
                           {"ref", args.ref},
                           {"metric", args.metric},
                           {"out", args.out}});
    std::ofstream os(out / "score.tsv");
    if (!os) throw DataError("cannot write score report in " + args.out);
    emit(os);
  } else {
    emit(std::cout);
  }
  // Corpus rate is edit-sum over length-sum, not the mean of per-utterance
  // rates.
  std::cout << "corpus " << rep.metric << ": " << std::fixed << std::setprecision(4)
            << rep.corpus_rate << "\n";
}

struct LmTrainArgs {
  std::string out = "lm_out";
  std::string vocab_from;
  std::string train;
  std::string dev;
  long long epochs = -1;
  long long batch_size = -1;
};

inline std::vector<std::string> transcript_texts(const std::string& path) {
  std::vector<std::string> texts;
  for (const auto& [id, text] : read_transcripts(path)) texts.push_back(text);
  return texts;
}

inline void cmd_lm_train(const ExperimentConfig& cfg, const LmTrainArgs& args) {
  if (args.vocab_from.empty()) throw ConfigError("lm-train: --vocab-from is required");
  if (args.train.empty() || args.dev.empty())
    throw ConfigError("lm-train: --train and --dev are required");
  LmTrainConfig ltc = cfg.lm_train;
  if (args.epochs > 0) ltc.epochs = static_cast<std::size_t>(args.epochs);
  if (args.batch_size > 0) ltc.batch_size = static_cast<std::size_t>(args.batch_size);

  Vocabulary vocab = load_checkpoint(args.vocab_from).vocab;
  std::vector<std::string> train_texts = transcript_texts(args.train);
  std::vector<std::string> val_texts = transcript_texts(args.dev);

  std::filesystem::path out(args.out);
  std::filesystem::create_directories(out);
  write_resolved_config(out, cfg,
                        {{"command", "lm-train"},
                         {"vocab_from", args.vocab_from},
                         {"train", args.train},
                         {"dev", args.dev},
                         {"epochs", ltc.epochs},
                         {"batch_size", ltc.batch_size},
                         {"out", args.out}});
  std::ofstream log(out / "lm_train.log");
  if (!log) throw DataError("cannot write lm train log in " + args.out);

  LmTrainResult res = lm_train(cfg.lm, vocab, train_texts, val_texts, ltc, &log);
  save_lm((out / "lm.seqr").string(), res.model);
  std::cout << "lm done: val_perplexity " << res.stats.back().val_perplexity << ", model "
            << (out / "lm.seqr").string() << "\n";
}

struct SweepArgs {
  std::string out = "sweep_out";
  std::vector<std::size_t> subset_sizes;  // empty: config values
  bool with_lm = false;
};

struct SweepRow {
  std::size_t size = 0;
  std::string condition;
  double cer = 0.0;
  double wer = 0.0;
};

namespace cli_detail {

struct EvalScore {
  double cer = 0.0, wer = 0.0;
};

inline EvalScore evaluate_model(const HybridModel& m, const CharRnnLm* lm,
                                const std::vector<Utterance>& eval_utts, const DecodeConfig& dc) {
  std::size_t ge = 0, gl = 0, we = 0, wl = 0;
  for (const auto& u : eval_utts) {
    DecodeResult r = joint_beam_search(m, lm, utterance_tensor(u), dc);
    std::string text = m.vocab.decode(r.hyps.at(0).labels);
    std::vector<std::string> rg = split_graphemes(u.transcript);
    std::vector<std::string> rw = split_words(u.transcript);
    if (rg.empty()) throw DataError("empty reference transcript for utterance " + u.id);
    ge += edit_distance(split_graphemes(text), rg);
    gl += rg.size();
    we += edit_distance(split_words(text), rw);
    wl += rw.size();
  }
  EvalScore s;
  s.cer = 100.0 * static_cast<double>(ge) / static_cast<double>(gl);
  s.wer = 100.0 * static_cast<double>(we) / static_cast<double>(wl);
  return s;
}

}  // namespace cli_detail

inline void cmd_sweep(const ExperimentConfig& cfg, const SweepArgs& args) {
  if (cfg.train_languages.empty()) throw ConfigError("sweep: data.languages is empty");
  if (cfg.target_language.empty()) throw ConfigError("sweep: data.target is empty");
  std::vector<std::size_t> sizes = args.subset_sizes.empty() ? cfg.subset_sizes : args.subset_sizes;
  for (std::size_t s : sizes)
    if (s == 0) throw ConfigError("sweep: subset sizes must be positive");

  CorpusManifest man = read_manifest(cfg.data_dir);
  Vocabulary vocab = manifest_vocab(man);
  if (!man.find(cfg.target_language))
    throw DataError("sweep: target language " + cfg.target_language + " not in corpus manifest");

  std::vector<Utterance> tgt_train = load_split(cfg.data_dir, cfg.target_language, "train");
  std::vector<Utterance> tgt_dev = load_split(cfg.data_dir, cfg.target_language, "dev");
  std::vector<Utterance> tgt_eval = load_split(cfg.data_dir, cfg.target_language, "eval");
  check_feat_dim(tgt_train, cfg.model.feat_dim, "target train");
  check_feat_dim(tgt_dev, cfg.model.feat_dim, "target dev");
  check_feat_dim(tgt_eval, cfg.model.feat_dim, "target eval");
  if (tgt_eval.empty()) throw DataError("sweep: target eval split is empty");
  std::size_t max_size = *std::max_element(sizes.begin(), sizes.end());
  if (tgt_train.size() < max_size)
    throw ConfigError("sweep: target train split has " + std::to_string(tgt_train.size()) +
                      " utterances, need " + std::to_string(max_size));

  std::filesystem::path out(args.out);
  std::filesystem::create_directories(out / "logs");
  nlohmann::json run{{"command", "sweep"},
                     {"subset_sizes", sizes},
                     {"with_lm", args.with_lm},
                     {"out", args.out}};
  write_resolved_config(out, cfg, run);

  DecodeConfig dc = cfg.decode;
  dc.beta = 0.0;  // conditions control fusion explicitly

  // One multilingual prior shared by every stage-1/2 condition.
  cli_detail::LoadedData pool = cli_detail::load_training_data(cfg, man, cfg.train_languages, 0);
  std::string prior_path = (out / "prior.seqr").string();
  {
    HybridModel prior = HybridModel::init(cfg.model, vocab, cfg.seed);
    std::ofstream log(out / "logs" / "prior.log");
    run_stage0(prior, utterance_pointers(pool.train), utterance_pointers(pool.dev),
               cfg.stages.at("stage0"), &log);
    save_model(prior_path, prior);
  }

  std::vector<SweepRow> rows;
  auto dev_ptrs = utterance_pointers(tgt_dev);
  for (std::size_t size : sizes) {
    auto subset_ptrs = utterance_pointers(tgt_train, size);

    HybridModel mono = HybridModel::init(cfg.model, vocab, cfg.seed);
    {
      std::ofstream log(out / "logs" / (std::to_string(size) + "_mono.log"));
      train_model(mono, subset_ptrs, dev_ptrs, cfg.stages.at("mono"), false, &log);
    }
    cli_detail::EvalScore s = cli_detail::evaluate_model(mono, nullptr, tgt_eval, dc);
    rows.push_back({size, "mono", s.cer, s.wer});

    HybridModel transfer = load_model(prior_path);
    {
      std::ofstream log(out / "logs" / (std::to_string(size) + "_stage1.log"));
      run_stage1(transfer, subset_ptrs, dev_ptrs, cfg.stages.at("stage1"), &log);
    }
    s = cli_detail::evaluate_model(transfer, nullptr, tgt_eval, dc);
    rows.push_back({size, "stage1", s.cer, s.wer});

    {
      std::ofstream log(out / "logs" / (std::to_string(size) + "_stage2.log"));
      run_stage2(transfer, subset_ptrs, dev_ptrs, cfg.stages.at("stage2"), &log);
    }
    s = cli_detail::evaluate_model(transfer, nullptr, tgt_eval, dc);
    rows.push_back({size, "stage2", s.cer, s.wer});

    if (args.with_lm) {
      if (tgt_dev.empty()) throw DataError("sweep: lm fusion needs a target dev split");
      std::vector<std::string> train_texts, val_texts;
      for (const Utterance* u : subset_ptrs) train_texts.push_back(u->transcript);
      for (const auto& u : tgt_dev) val_texts.push_back(u.transcript);
      std::ofstream lm_log(out / "logs" / (std::to_string(size) + "_lm.log"));
      LmTrainResult lm_res = lm_train(cfg.lm, vocab, train_texts, val_texts, cfg.lm_train, &lm_log);

      cli_detail::EvalScore best;
      double best_beta = 0.0;
      bool have = false;
      for (double beta : cfg.lm_betas) {
        DecodeConfig fused = dc;
        fused.beta = beta;
        cli_detail::EvalScore cand = cli_detail::evaluate_model(transfer, &lm_res.model, tgt_eval, fused);
        if (!have || cand.wer < best.wer) {
          best = cand;
          best_beta = beta;
          have = true;
        }
      }
      rows.push_back({size, "stage2_lm", best.cer, best.wer});
      std::cout << "size " << size << ": lm fusion beta " << best_beta << "\n";
    }
  }

  std::ofstream os(out / "results.tsv");
  if (!os) throw DataError("cannot write results in " + args.out);
  os << "size\tcondition\tcer\twer\n";
  std::cout << "size\tcondition\tcer\twer\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << r.size << "\t" << r.condition << "\t" << std::fixed << std::setprecision(4) << r.cer
         << "\t" << r.wer;
    os << line.str() << "\n";
    std::cout << line.str() << "\n";
  }
  if (!os) throw DataError("write failed in " + args.out);
}

// ---------------------------------------------------------------------------
// Parser and dispatch
// ---------------------------------------------------------------------------

inline int run_cli(int argc, char** argv) {
  CLI::App app{"hybrid CTC-attention grapheme recognizer"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  auto* config_opt = app.add_option("--config", config_path, "experiment config file (json)");
  auto* seed_opt = app.add_option("--seed", seed, "override the top-level seed");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate the synthetic corpus");
  gen_cmd->add_option("--out", gen.out, "output corpus directory");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a recognizer stage");
  train_cmd->add_option("--stage", train.stage, "training stage: 0, 1, or 2");
  train_cmd->add_option("--init", train.init, "prior checkpoint (stages 1 and 2)");
  train_cmd->add_option("--prior-epoch", train.prior_epoch,
                        "pick ckpt-epoch-<k>.seqr inside --init (1-based)");
  train_cmd->add_option("--subset", train.subset, "limit each language's train split to N utterances");
  train_cmd->add_option("--out", train.out, "output directory");
  train_cmd->add_option("--epochs", train.epochs, "override epochs");
  train_cmd->add_option("--batch-size", train.batch_size, "override batch size");
  train_cmd->add_option("--lambda", train.lambda, "override the CTC loss weight");
  train_cmd->add_option("--lr", train.lr, "override the stage learning rate");

  DecodeArgs dec;
  auto* dec_cmd = app.add_subcommand("decode", "beam-decode a feature archive");
  dec_cmd->add_option("--model", dec.model, "recognizer checkpoint");
  dec_cmd->add_option("--lm", dec.lm, "character lm checkpoint");
  dec_cmd->add_option("--eval", dec.eval, "feature archive to decode");
  dec_cmd->add_option("--beam", dec.beam, "beam size");
  dec_cmd->add_option("--ctc-weight", dec.ctc_weight, "CTC score weight (alpha)");
  dec_cmd->add_option("--lm-weight", dec.lm_weight, "LM score weight (beta)");
  dec_cmd->add_option("--max-len-ratio", dec.max_len_ratio, "output length cap ratio");
  dec_cmd->add_option("--out", dec.out, "output directory");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "score hypotheses against references");
  score_cmd->add_option("--hyp", score.hyp, "hypothesis file (decode output or id<TAB>text)");
  score_cmd->add_option("--ref", score.ref, "reference transcripts (id<TAB>text)");
  score_cmd->add_option("--metric", score.metric, "cer or wer");
  score_cmd->add_option("--out", score.out, "output directory (default: report to stdout)");

  LmTrainArgs lmt;
  auto* lm_cmd = app.add_subcommand("lm-train", "train a character language model");
  lm_cmd->add_option("--vocab-from", lmt.vocab_from, "checkpoint supplying the vocabulary");
  lm_cmd->add_option("--train", lmt.train, "training transcripts (id<TAB>text)");
  lm_cmd->add_option("--dev", lmt.dev, "validation transcripts (id<TAB>text)");
  lm_cmd->add_option("--epochs", lmt.epochs, "override epochs");
  lm_cmd->add_option("--batch-size", lmt.batch_size, "override batch size");
  lm_cmd->add_option("--out", lmt.out, "output directory");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "run the transfer experiment grid");
  sweep_cmd->add_option("--subset-sizes", sweep.subset_sizes, "target subset sizes");
  sweep_cmd->add_flag("--with-lm", sweep.with_lm, "add the lm-fusion condition");
  sweep_cmd->add_option("--out", sweep.out, "output directory");

  for (auto* sub : {gen_cmd, train_cmd, dec_cmd, score_cmd, lm_cmd, sweep_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kConfigExit;
  }

  try {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (seed_opt->count() > 0) cfg.apply_seed(seed);
    (void)config_opt;
    if (gen_cmd->parsed())
      cmd_gen(cfg, gen);
    else if (train_cmd->parsed())
      cmd_train(cfg, train);
    else if (dec_cmd->parsed())
      cmd_decode(cfg, dec);
    else if (score_cmd->parsed())
      cmd_score(cfg, score);
    else if (lm_cmd->parsed())
      cmd_lm_train(cfg, lmt);
    else if (sweep_cmd->parsed())
      cmd_sweep(cfg, sweep);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return kDivergedExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace seqr
