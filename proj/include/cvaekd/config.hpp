// Model and pipeline configuration. Defaults follow the published network
// parameters (GRU hidden 256, latent 16, decoder dropout 0.5, lr 0.001,
// batch 16, encoder length 30, decoder length in {100,150,200}); the rest
// are artifact knobs the source is silent on.
#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cvaekd/corpus.hpp"

namespace cvaekd {

struct CvaeKdConfig {
  std::size_t hidden = 256;
  std::size_t d_z = 16;
  std::size_t d_emb = 128;
  double dropout_decoder = 0.5;
  double lr = 0.001;
  std::size_t batch = 16;
  std::size_t max_enc = 30;
  std::size_t max_dec = 200;
  std::size_t k_neighbors = 5;
  double alpha = 0.5;
  bool alpha_learnable = false;
  std::size_t kl_anneal_steps = 2000;
  bool kd_enabled = true;
  std::uint64_t seed = 0;

  std::size_t head_hidden = 64;
  std::size_t epochs = 10;
  std::size_t min_tf = 5;
  bool tf_strict = false;
  bool share_background_encoder = true;
  double grad_clip = 5.0;
  double temperature = 1.0;
  std::size_t teacher_hidden = 128;
  std::size_t teacher_emb = 64;
  std::size_t teacher_epochs = 20;

  void validate() const {
    if (hidden == 0 || d_z == 0 || d_emb == 0 || head_hidden == 0)
      throw DataError("config: dimensions must be positive");
    if (batch == 0) throw DataError("config: batch must be >= 1");
    if (max_enc < 2 || max_dec < 2)
      throw DataError("config: max_enc and max_dec must be >= 2");
    if (k_neighbors == 0) throw DataError("config: k_neighbors must be >= 1");
    if (alpha < 0.0 || alpha > 1.0)
      throw DataError("config: alpha must lie in [0, 1]");
    if (dropout_decoder < 0.0 || dropout_decoder >= 1.0)
      throw DataError("config: dropout_decoder must lie in [0, 1)");
    if (lr <= 0.0) throw DataError("config: lr must be positive");
    if (min_tf < 1) throw DataError("config: min_tf must be >= 1");
    if (temperature <= 0.0)
      throw DataError("config: temperature must be positive");
  }

  nlohmann::json to_json() const {
    return {{"hidden", hidden},
            {"d_z", d_z},
            {"d_emb", d_emb},
            {"dropout_decoder", dropout_decoder},
            {"lr", lr},
            {"batch", batch},
            {"max_enc", max_enc},
            {"max_dec", max_dec},
            {"k_neighbors", k_neighbors},
            {"alpha", alpha},
            {"alpha_learnable", alpha_learnable},
            {"kl_anneal_steps", kl_anneal_steps},
            {"kd_enabled", kd_enabled},
            {"seed", seed},
            {"head_hidden", head_hidden},
            {"epochs", epochs},
            {"min_tf", min_tf},
            {"tf_strict", tf_strict},
            {"share_background_encoder", share_background_encoder},
            {"grad_clip", grad_clip},
            {"temperature", temperature},
            {"teacher_hidden", teacher_hidden},
            {"teacher_emb", teacher_emb},
            {"teacher_epochs", teacher_epochs}};
  }

  static CvaeKdConfig from_json(const nlohmann::json& j) {
    CvaeKdConfig c;
    c.hidden = j.at("hidden").get<std::size_t>();
    c.d_z = j.at("d_z").get<std::size_t>();
    c.d_emb = j.at("d_emb").get<std::size_t>();
    c.dropout_decoder = j.at("dropout_decoder").get<double>();
    c.lr = j.at("lr").get<double>();
    c.batch = j.at("batch").get<std::size_t>();
    c.max_enc = j.at("max_enc").get<std::size_t>();
    c.max_dec = j.at("max_dec").get<std::size_t>();
    c.k_neighbors = j.at("k_neighbors").get<std::size_t>();
    c.alpha = j.at("alpha").get<double>();
    c.alpha_learnable = j.at("alpha_learnable").get<bool>();
    c.kl_anneal_steps = j.at("kl_anneal_steps").get<std::size_t>();
    c.kd_enabled = j.at("kd_enabled").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.head_hidden = j.at("head_hidden").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.min_tf = j.at("min_tf").get<std::size_t>();
    c.tf_strict = j.at("tf_strict").get<bool>();
    c.share_background_encoder =
        j.at("share_background_encoder").get<bool>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.teacher_hidden = j.at("teacher_hidden").get<std::size_t>();
    c.teacher_emb = j.at("teacher_emb").get<std::size_t>();
    c.teacher_epochs = j.at("teacher_epochs").get<std::size_t>();
    return c;
  }
};

// Flat key=value config files; '#' starts a comment, blank lines ignored.
inline void set_config_key(CvaeKdConfig& c, const std::string& key,
                           const std::string& value) {
  auto to_size = [&](const std::string& v) -> std::size_t {
    return static_cast<std::size_t>(std::stoull(v));
  };
  auto to_bool = [&](const std::string& v) -> bool {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw DataError("config: bad boolean for " + key + ": " + value);
  };
  try {
    if (key == "hidden") c.hidden = to_size(value);
    else if (key == "d_z") c.d_z = to_size(value);
    else if (key == "d_emb") c.d_emb = to_size(value);
    else if (key == "dropout_decoder") c.dropout_decoder = std::stod(value);
    else if (key == "lr") c.lr = std::stod(value);
    else if (key == "batch") c.batch = to_size(value);
    else if (key == "max_enc") c.max_enc = to_size(value);
    else if (key == "max_dec") c.max_dec = to_size(value);
    else if (key == "k_neighbors") c.k_neighbors = to_size(value);
    else if (key == "alpha") c.alpha = std::stod(value);
    else if (key == "alpha_learnable") c.alpha_learnable = to_bool(value);
    else if (key == "kl_anneal_steps") c.kl_anneal_steps = to_size(value);
    else if (key == "kd_enabled") c.kd_enabled = to_bool(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "head_hidden") c.head_hidden = to_size(value);
    else if (key == "epochs") c.epochs = to_size(value);
    else if (key == "min_tf") c.min_tf = to_size(value);
    else if (key == "tf_strict") c.tf_strict = to_bool(value);
    else if (key == "share_background_encoder")
      c.share_background_encoder = to_bool(value);
    else if (key == "grad_clip") c.grad_clip = std::stod(value);
    else if (key == "temperature") c.temperature = std::stod(value);
    else if (key == "teacher_hidden") c.teacher_hidden = to_size(value);
    else if (key == "teacher_emb") c.teacher_emb = to_size(value);
    else if (key == "teacher_epochs") c.teacher_epochs = to_size(value);
    else throw DataError("config: unknown key: " + key);
  } catch (const std::invalid_argument&) {
    throw DataError("config: bad value for " + key + ": " + value);
  } catch (const std::out_of_range&) {
    throw DataError("config: value out of range for " + key + ": " + value);
  }
}

inline CvaeKdConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  CvaeKdConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string trimmed;
    for (char ch : line)
      if (!std::isspace(static_cast<unsigned char>(ch))) trimmed += ch;
    if (trimmed.empty()) continue;
    const std::size_t eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw DataError("config line " + std::to_string(lineno) +
                      ": expected key=value");
    set_config_key(c, trimmed.substr(0, eq), trimmed.substr(eq + 1));
  }
  return c;
}

}  // namespace cvaekd
