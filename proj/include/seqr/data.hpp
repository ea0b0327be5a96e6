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
// Vocabulary handling, character/word error rates, the synthetic multilingual
// corpus generator and its on-disk formats.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqr/rng.hpp"

namespace seqr {

// Configuration problems (bad flags, inconsistent settings) vs problems with
// input files; the CLI maps them to distinct exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// UTF-8 graphemes
// ---------------------------------------------------------------------------

// Splits a UTF-8 string into codepoint-sized symbols. Invalid bytes surface
// as single-byte symbols rather than being dropped.
inline std::vector<std::string> split_graphemes(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Grapheme ids are dense: sorted graphemes take 0..G-1 and unk takes G, so
// both output heads share labels 0..V-1 with V = G+1. The attention head
// appends eos at index V; the CTC head appends blank at index V. sos exists
// only as decoder embedding row V+1 and is never a label.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(const std::set<std::string>& graphemes) {
    Vocabulary v;
    v.symbols_.assign(graphemes.begin(), graphemes.end());
    std::sort(v.symbols_.begin(), v.symbols_.end());
    if (std::find(v.symbols_.begin(), v.symbols_.end(), " ") == v.symbols_.end())
      v.symbols_.insert(std::lower_bound(v.symbols_.begin(), v.symbols_.end(), std::string(" ")), " ");
    for (std::size_t i = 0; i < v.symbols_.size(); ++i) v.index_[v.symbols_[i]] = static_cast<int>(i);
    return v;
  }

  static Vocabulary from_corpus(const std::vector<std::string>& transcripts) {
    std::set<std::string> g;
    for (const auto& t : transcripts)
      for (auto& s : split_graphemes(t)) g.insert(s);
    return build(g);
  }

  std::size_t num_graphemes() const { return symbols_.size(); }
  // Real labels shared by both heads: graphemes + unk.
  int num_labels() const { return static_cast<int>(symbols_.size()) + 1; }
  int unk_id() const { return static_cast<int>(symbols_.size()); }
  int eos_id() const { return num_labels(); }    // attention head only
  int blank_id() const { return num_labels(); }  // ctc head only
  int sos_id() const { return num_labels() + 1; }
  // Decoder embedding rows: labels + eos/blank slot + sos.
  int num_embeddings() const { return num_labels() + 2; }

  int id(const std::string& sym) const {
    auto it = index_.find(sym);
    return it == index_.end() ? unk_id() : it->second;
  }

  const std::string& symbol(int id) const {
    if (id < 0 || id > unk_id()) throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    static const std::string unk = "<unk>";
    return id == unk_id() ? unk : symbols_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (auto& g : split_graphemes(text)) ids.push_back(id(g));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) out += symbol(i);
    return out;
  }

  bool operator==(const Vocabulary& o) const { return symbols_ == o.symbols_; }
  bool operator!=(const Vocabulary& o) const { return !(*this == o); }

  nlohmann::json to_json() const { return nlohmann::json{{"graphemes", symbols_}}; }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.symbols_ = j.at("graphemes").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < v.symbols_.size(); ++i) v.index_[v.symbols_[i]] = static_cast<int>(i);
    return v;
  }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> index_;
};

// Encoding that treats out-of-vocabulary graphemes as data corruption rather
// than mapping them to unk; training corpora are built against union
// vocabularies so a miss always indicates a configuration bug.
inline std::vector<int> encode_strict(const Vocabulary& vocab, const std::string& text) {
  std::vector<int> ids;
  for (const auto& g : split_graphemes(text)) {
    int id = vocab.id(g);
    if (id == vocab.unk_id()) throw DataError("character \"" + g + "\" outside vocabulary");
    ids.push_back(id);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Edit distance and error rates
// ---------------------------------------------------------------------------

// Two-row Levenshtein with unit costs.
template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (auto& g : split_graphemes(s)) {
    if (g == " ") {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
    } else {
      cur += g;
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

inline std::size_t char_edits(const std::string& hyp, const std::string& ref) {
  return edit_distance(split_graphemes(hyp), split_graphemes(ref));
}

inline std::size_t word_edits(const std::string& hyp, const std::string& ref) {
  return edit_distance(split_words(hyp), split_words(ref));
}

inline double cer(const std::string& hyp, const std::string& ref) {
  auto r = split_graphemes(ref);
  if (r.empty()) throw DataError("cer: empty reference");
  return 100.0 * static_cast<double>(edit_distance(split_graphemes(hyp), r)) / static_cast<double>(r.size());
}

inline double wer(const std::string& hyp, const std::string& ref) {
  auto r = split_words(ref);
  if (r.empty()) throw DataError("wer: reference has no words");
  return 100.0 * static_cast<double>(edit_distance(split_words(hyp), r)) / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct Utterance {
  std::string id;
  std::string lang;
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // frames x dim, row-major
  std::string transcript;
};

struct Corpus {
  std::vector<Utterance> train, dev, eval;
};

// A toy language: a fixed lexicon of words over a grapheme inventory.
// Sentences are word sequences; each grapheme (including space) emits a run
// of noisy copies of its embedding. Embeddings depend only on (embed_seed,
// symbol), so languages sharing graphemes share acoustics, which is the
// property cross-language transfer relies on.
struct LanguageSpec {
  std::string name;
  std::vector<std::string> inventory;
  std::size_t lexicon_size = 40;
  std::size_t word_len_min = 2, word_len_max = 6;
  std::size_t words_min = 2, words_max = 5;
  std::size_t frames_min = 2, frames_max = 5;
  std::size_t feat_dim = 20;
  double noise_sigma = 0.3;
  std::uint64_t embed_seed = 1u;
};

inline std::vector<double> grapheme_embedding(const LanguageSpec& spec, const std::string& sym) {
  Rng r(spec.embed_seed ^ Rng::hash_string(sym));
  std::vector<double> e(spec.feat_dim);
  for (auto& x : e) x = r.uniform(-1.0, 1.0);
  return e;
}

inline std::vector<std::string> build_lexicon(const LanguageSpec& spec, std::uint64_t seed) {
  if (spec.inventory.empty()) throw ConfigError("language " + spec.name + ": empty inventory");
  Rng r(seed ^ Rng::hash_string(spec.name) ^ 0x9e3779b97f4a7c15ull);
  std::set<std::string> seen;
  std::vector<std::string> lex;
  std::size_t guard = 0;
  while (lex.size() < spec.lexicon_size && guard < spec.lexicon_size * 200) {
    ++guard;
    std::size_t len = r.range(spec.word_len_min, spec.word_len_max);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) w += spec.inventory[r.uniform_int(spec.inventory.size())];
    if (seen.insert(w).second) lex.push_back(w);
  }
  if (lex.empty()) throw ConfigError("language " + spec.name + ": could not build lexicon");
  return lex;
}

inline Utterance render_utterance(const LanguageSpec& spec, const std::vector<std::string>& lexicon,
                                  const std::string& id, Rng& r) {
  Utterance u;
  u.id = id;
  u.lang = spec.name;
  u.dim = spec.feat_dim;
  std::size_t n_words = r.range(spec.words_min, spec.words_max);
  for (std::size_t w = 0; w < n_words; ++w) {
    if (w) u.transcript += " ";
    u.transcript += lexicon[r.uniform_int(lexicon.size())];
  }
  for (auto& g : split_graphemes(u.transcript)) {
    auto emb = grapheme_embedding(spec, g);
    std::size_t n = r.range(spec.frames_min, spec.frames_max);
    for (std::size_t f = 0; f < n; ++f) {
      for (std::size_t d = 0; d < spec.feat_dim; ++d)
        u.features.push_back(emb[d] + spec.noise_sigma * r.normal());
      ++u.frames;
    }
  }
  return u;
}

// Deterministic given (spec, n_utts, seed); split 80/10/10 by index.
inline Corpus generate_corpus(const LanguageSpec& spec, std::size_t n_utts, std::uint64_t seed) {
  if (n_utts == 0) throw ConfigError("generate_corpus: n_utts must be >= 1");
  auto lexicon = build_lexicon(spec, seed);
  Rng r(seed ^ Rng::hash_string(spec.name));
  std::vector<Utterance> all;
  all.reserve(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) {
    std::ostringstream id;
    id << spec.name << "-";
    id.width(5);
    id.fill('0');
    id << i;
    all.push_back(render_utterance(spec, lexicon, id.str(), r));
  }
  std::size_t n_train = n_utts * 8 / 10;
  std::size_t n_dev = n_utts / 10;
  if (n_utts >= 3 && n_dev == 0) n_dev = 1;
  if (n_train + 2 * n_dev > n_utts) n_train = n_utts - 2 * n_dev;
  Corpus c;
  c.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  c.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());
  return c;
}

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------
// Feature archive: magic "SEQRFEA1", u32 utterance count, then per utterance
// u32 id length + bytes, u32 lang length + bytes, u64 frames, u64 dim,
// frames*dim little-endian f64. Transcripts: one "id<TAB>transcript" line per
// utterance.

static_assert(std::endian::native == std::endian::little,
              "feature archives are little-endian; big-endian hosts are unsupported");

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(std::string("truncated read: ") + what);
  return v;
}

inline void write_lstring(std::ostream& os, const std::string& s) {
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_lstring(std::istream& is, const char* what) {
  auto n = read_raw<std::uint32_t>(is, what);
  if (n > (1u << 24)) throw DataError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError(std::string("truncated read: ") + what);
  return s;
}

}  // namespace detail

inline void write_features(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write("SEQRFEA1", 8);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(utts.size()));
  for (const auto& u : utts) {
    detail::write_lstring(os, u.id);
    detail::write_lstring(os, u.lang);
    detail::write_raw<std::uint64_t>(os, u.frames);
    detail::write_raw<std::uint64_t>(os, u.dim);
    os.write(reinterpret_cast<const char*>(u.features.data()),
             static_cast<std::streamsize>(u.features.size() * sizeof(double)));
  }
  if (!os) throw DataError("write failed: " + path);
}

inline std::vector<Utterance> read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "SEQRFEA1")
    throw DataError("not a feature archive: " + path);
  auto count = detail::read_raw<std::uint32_t>(is, "utterance count");
  std::vector<Utterance> utts(count);
  for (auto& u : utts) {
    u.id = detail::read_lstring(is, "utterance id");
    u.lang = detail::read_lstring(is, "utterance lang");
    u.frames = detail::read_raw<std::uint64_t>(is, "frame count");
    u.dim = detail::read_raw<std::uint64_t>(is, "feature dim");
    if (u.frames == 0 || u.dim == 0 || u.frames * u.dim > (1ull << 32))
      throw DataError("implausible utterance size in " + path);
    u.features.resize(u.frames * u.dim);
    if (!is.read(reinterpret_cast<char*>(u.features.data()),
                 static_cast<std::streamsize>(u.features.size() * sizeof(double))))
      throw DataError("truncated features in " + path);
  }
  return utts;
}

inline void write_transcripts(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  for (const auto& u : utts) os << u.id << "\t" << u.transcript << "\n";
  if (!os) throw DataError("write failed: " + path);
}

inline std::map<std::string, std::string> read_transcripts(const std::string& path) {
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
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

// Attaches transcripts to utterances read from a feature archive.
inline void attach_transcripts(std::vector<Utterance>& utts, const std::map<std::string, std::string>& txt,
                               const std::string& what) {
  for (auto& u : utts) {
    auto it = txt.find(u.id);
    if (it == txt.end()) throw DataError(what + ": no transcript for utterance " + u.id);
    u.transcript = it->second;
  }
}

}  // namespace seqr
