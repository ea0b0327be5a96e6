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
// Checkpoint container: versioned header, JSON architecture descriptor, JSON
// vocabulary, then named parameter tensors with explicit shapes as raw
// little-endian doubles. Round-trips are byte-exact.

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqr/data.hpp"
#include "seqr/model.hpp"

namespace seqr {

namespace detail {

constexpr char kCheckpointMagic[8] = {'S', 'E', 'Q', 'R', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_json_blob(std::ostream& os, const nlohmann::json& j) {
  std::string s = j.dump();
  write_raw<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline nlohmann::json read_json_blob(std::istream& is, const char* what) {
  auto n = read_raw<std::uint64_t>(is, what);
  if (n > (1ull << 28)) throw DataError(std::string("implausible JSON blob size in ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw DataError(std::string("truncated read: ") + what);
  auto j = nlohmann::json::parse(s, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw DataError(std::string("malformed JSON in checkpoint: ") + what);
  return j;
}

}  // namespace detail

enum class CheckpointKind : std::uint32_t { kHybrid = 0, kCharLm = 1 };

struct CheckpointData {
  CheckpointKind kind = CheckpointKind::kHybrid;
  nlohmann::json arch;
  Vocabulary vocab;
  ParamList params;
};

inline void save_checkpoint(const std::string& path, CheckpointKind kind, const nlohmann::json& arch,
                            const Vocabulary& vocab, const ParamList& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  detail::write_raw<std::uint32_t>(os, detail::kCheckpointVersion);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(kind));
  detail::write_json_blob(os, arch);
  detail::write_json_blob(os, vocab.to_json());
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::write_lstring(os, name);
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.shape().size()));
    for (std::size_t d : tensor.shape()) detail::write_raw<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(tensor.values().data()),
             static_cast<std::streamsize>(tensor.values().size() * sizeof(double)));
  }
  if (!os) throw DataError("write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(detail::kCheckpointMagic, 8))
    throw DataError("not a checkpoint file: " + path);
  auto version = detail::read_raw<std::uint32_t>(is, "version");
  if (version != detail::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  CheckpointData out;
  out.kind = static_cast<CheckpointKind>(detail::read_raw<std::uint32_t>(is, "kind"));
  out.arch = detail::read_json_blob(is, "architecture");
  out.vocab = Vocabulary::from_json(detail::read_json_blob(is, "vocabulary"));
  auto n_params = detail::read_raw<std::uint32_t>(is, "parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = detail::read_lstring(is, "parameter name");
    auto ndim = detail::read_raw<std::uint32_t>(is, "parameter rank");
    if (ndim > 8) throw DataError("implausible parameter rank in " + path);
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = detail::read_raw<std::uint64_t>(is, "parameter extent");
      numel *= d;
    }
    if (numel > (1ull << 30)) throw DataError("implausible parameter size in " + path);
    std::vector<double> data(numel);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(numel * sizeof(double))))
      throw DataError("truncated parameter data in " + path);
    out.params.emplace_back(name, Tensor::from(std::move(data), std::move(shape), true));
  }
  return out;
}

// Copies values from `source` into same-named tensors of `target`; both sides
// must match exactly in names and shapes.
inline void assign_params(ParamList& target, const ParamList& source, const std::string& what) {
  if (target.size() != source.size())
    throw DataError(what + ": parameter count mismatch (" + std::to_string(target.size()) + " vs " +
                    std::to_string(source.size()) + ")");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].first != source[i].first)
      throw DataError(what + ": parameter name mismatch at index " + std::to_string(i) + " (" +
                      target[i].first + " vs " + source[i].first + ")");
    if (target[i].second.shape() != source[i].second.shape())
      throw DataError(what + ": shape mismatch for " + target[i].first);
    target[i].second.values() = source[i].second.values();
  }
}

inline void save_model(const std::string& path, const HybridModel& m) {
  save_checkpoint(path, CheckpointKind::kHybrid, m.arch.to_json(), m.vocab, m.params());
}

inline HybridModel load_model(const std::string& path) {
  CheckpointData data = load_checkpoint(path);
  if (data.kind != CheckpointKind::kHybrid)
    throw DataError("expected a recognizer checkpoint: " + path);
  HybridModel m = HybridModel::init(ModelArch::from_json(data.arch), data.vocab, /*seed=*/0);
  ParamList mine = m.params();
  assign_params(mine, data.params, path);
  return m;
}

}  // namespace seqr
