// JSON checkpoint container shared by the model and the teacher:
// {version, config, params: [{name, shape, data}], adam: {m, v, t}}.
// nlohmann emits shortest round-trip representations for doubles, so a
// reloaded checkpoint is bit-identical and identical runs serialize to
// identical bytes.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvaekd/corpus.hpp"
#include "cvaekd/layers.hpp"
#include "cvaekd/tensor.hpp"

namespace cvaekd {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const std::vector<NamedParam>& params) {
  nlohmann::json arr = nlohmann::json::array();
  for (const NamedParam& p : params) {
    nlohmann::json e;
    e["name"] = p.name;
    e["shape"] = {p.tensor.rows(), p.tensor.cols()};
    e["data"] = p.tensor.data();
    arr.push_back(std::move(e));
  }
  return arr;
}

inline void params_from_json(const nlohmann::json& arr,
                             std::vector<NamedParam>& params) {
  if (!arr.is_array() || arr.size() != params.size())
    throw DataError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const nlohmann::json& e = arr[i];
    if (e.at("name").get<std::string>() != params[i].name)
      throw DataError("checkpoint: parameter name mismatch at index " +
                      std::to_string(i) + " (" +
                      e.at("name").get<std::string>() + " vs " +
                      params[i].name + ")");
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != params[i].tensor.rows() ||
        shape[1] != params[i].tensor.cols())
      throw DataError("checkpoint: shape mismatch for " + params[i].name);
    auto data = e.at("data").get<std::vector<double>>();
    if (data.size() != params[i].tensor.size())
      throw DataError("checkpoint: data size mismatch for " + params[i].name);
    params[i].tensor.data() = std::move(data);
  }
}

inline nlohmann::json adam_to_json(const AdamState& st) {
  nlohmann::json j;
  j["m"] = st.moments1();
  j["v"] = st.moments2();
  j["t"] = st.t();
  return j;
}

inline void adam_from_json(const nlohmann::json& j, AdamState& st) {
  st.restore(j.at("m").get<std::vector<std::vector<double>>>(),
             j.at("v").get<std::vector<std::vector<double>>>(),
             j.at("t").get<std::size_t>());
}

inline void write_json_file(const std::string& path,
                            const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(1) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid JSON in " + path + ": " + e.what());
  }
}

// FNV-1a over the raw bit patterns, stable across runs of the same build.
inline std::uint64_t params_checksum(const std::vector<NamedParam>& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t bits) {
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const NamedParam& p : params) {
    for (double x : p.tensor.data()) {
      std::uint64_t bits;
      static_assert(sizeof bits == sizeof x);
      std::memcpy(&bits, &x, sizeof bits);
      mix(bits);
    }
  }
  return h;
}

}  // namespace cvaekd
