#pragma once

// JSON run configuration. Every section is optional; unknown keys anywhere
// are rejected so typos do not silently fall back to defaults.
//
// {
//   "generator":     {"height", "width", "encoder_channels", "decoder_channels", "blocks",
//                     "head_grids", "motion_dim", "gate_hidden", "estimator_input",
//                     "saliency_normalizer", "scaled_attention", "spectral_norm"},
//   "discriminator": {"channels", "slope", "power_iterations"},
//   "loss":          {"hole", "valid", "adv"},
//   "window":        {"neighbors", "stride"},
//   "train":         {"lr", "beta1", "beta2"}
// }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "devit/io.hpp"
#include "devit/model.hpp"

namespace devit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct WindowConfig {
  std::size_t neighbors = 2;
  std::size_t stride = 5;
};

struct RunConfig {
  GeneratorConfig generator{};
  DiscriminatorConfig discriminator{};
  LossWeights loss{};
  WindowConfig window{};
  TrainConfig train{};
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + (where.empty() ? it.key() : where + "." + it.key()) + "'");
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + where + "." + key + "': " + e.what());
  }
}

inline const char* estimator_name(EstimatorInput e) { return e == EstimatorInput::concat ? "concat" : "correlation"; }

inline const char* normalizer_name(SaliencyNormalizer n) {
  switch (n) {
    case SaliencyNormalizer::area: return "area";
    case SaliencyNormalizer::query_valid: return "query_valid";
    case SaliencyNormalizer::key_valid: return "key_valid";
  }
  return "area";
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown(j, "", {"generator", "discriminator", "loss", "window", "train"});
  RunConfig c;
  if (j.contains("generator")) {
    const auto& g = j["generator"];
    detail::reject_unknown(g, "generator",
                           {"height", "width", "encoder_channels", "decoder_channels", "blocks", "head_grids",
                            "motion_dim", "gate_hidden", "estimator_input", "saliency_normalizer", "scaled_attention",
                            "spectral_norm"});
    GeneratorConfig& G = c.generator;
    read_field(g, "height", G.height, "generator");
    read_field(g, "width", G.width, "generator");
    read_field(g, "encoder_channels", G.encoder_channels, "generator");
    read_field(g, "decoder_channels", G.decoder_channels, "generator");
    read_field(g, "blocks", G.blocks, "generator");
    read_field(g, "head_grids", G.heads.grids, "generator");
    read_field(g, "motion_dim", G.motion_dim, "generator");
    read_field(g, "gate_hidden", G.gate_hidden, "generator");
    read_field(g, "scaled_attention", G.attention.scaled, "generator");
    read_field(g, "spectral_norm", G.spectral_norm, "generator");
    std::string s;
    if (g.contains("estimator_input")) {
      read_field(g, "estimator_input", s, "generator");
      if (s == "concat") G.estimator_input = EstimatorInput::concat;
      else if (s == "correlation") G.estimator_input = EstimatorInput::correlation;
      else throw ConfigError("config: generator.estimator_input must be 'concat' or 'correlation'");
    }
    if (g.contains("saliency_normalizer")) {
      read_field(g, "saliency_normalizer", s, "generator");
      if (s == "area") G.attention.normalizer = SaliencyNormalizer::area;
      else if (s == "query_valid") G.attention.normalizer = SaliencyNormalizer::query_valid;
      else if (s == "key_valid") G.attention.normalizer = SaliencyNormalizer::key_valid;
      else throw ConfigError("config: generator.saliency_normalizer must be 'area', 'query_valid' or 'key_valid'");
    }
    try {
      G.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("discriminator")) {
    const auto& d = j["discriminator"];
    detail::reject_unknown(d, "discriminator", {"channels", "slope", "power_iterations"});
    read_field(d, "channels", c.discriminator.channels, "discriminator");
    read_field(d, "slope", c.discriminator.slope, "discriminator");
    read_field(d, "power_iterations", c.discriminator.power_iterations, "discriminator");
    if (c.discriminator.channels.size() != 6) throw ConfigError("config: discriminator.channels needs six entries");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::reject_unknown(l, "loss", {"hole", "valid", "adv"});
    read_field(l, "hole", c.loss.hole, "loss");
    read_field(l, "valid", c.loss.valid, "loss");
    read_field(l, "adv", c.loss.adv, "loss");
    if (c.loss.hole < 0 || c.loss.valid < 0 || c.loss.adv < 0) throw ConfigError("config: loss weights must be >= 0");
  }
  if (j.contains("window")) {
    const auto& w = j["window"];
    detail::reject_unknown(w, "window", {"neighbors", "stride"});
    read_field(w, "neighbors", c.window.neighbors, "window");
    read_field(w, "stride", c.window.stride, "window");
    if (c.window.stride < 1) throw ConfigError("config: window.stride must be >= 1");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, "train", {"lr", "beta1", "beta2"});
    read_field(t, "lr", c.train.lr, "train");
    read_field(t, "beta1", c.train.beta1, "train");
    read_field(t, "beta2", c.train.beta2, "train");
  }
  c.train.loss = c.loss;
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline nlohmann::json to_json(const GeneratorConfig& g) {
  return {{"height", g.height},
          {"width", g.width},
          {"encoder_channels", g.encoder_channels},
          {"decoder_channels", g.decoder_channels},
          {"blocks", g.blocks},
          {"head_grids", g.heads.grids},
          {"motion_dim", g.motion_dim},
          {"gate_hidden", g.gate_hidden},
          {"estimator_input", detail::estimator_name(g.estimator_input)},
          {"saliency_normalizer", detail::normalizer_name(g.attention.normalizer)},
          {"scaled_attention", g.attention.scaled},
          {"spectral_norm", g.spectral_norm}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"generator", to_json(c.generator)},
          {"discriminator",
           {{"channels", c.discriminator.channels},
            {"slope", c.discriminator.slope},
            {"power_iterations", c.discriminator.power_iterations}}},
          {"loss", {{"hole", c.loss.hole}, {"valid", c.loss.valid}, {"adv", c.loss.adv}}},
          {"window", {{"neighbors", c.window.neighbors}, {"stride", c.window.stride}}},
          {"train", {{"lr", c.train.lr}, {"beta1", c.train.beta1}, {"beta2", c.train.beta2}}}};
}

/// FNV-1a over the canonical generator JSON; ties checkpoints to architectures.
inline std::string config_hash(const GeneratorConfig& g) {
  const std::string s = to_json(g).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

inline void save_checkpoint(const std::string& path, GeneratorWeights& w, const GeneratorConfig& cfg) {
  std::map<std::string, Tensor> named;
  for (auto& [name, t] : w.named_parameters()) named.emplace(name, *t);
  io::save_bundle(path, named, config_hash(cfg));
}

/// Loads weights saved for exactly this generator configuration.
inline GeneratorWeights load_checkpoint(const std::string& path, const GeneratorConfig& cfg) {
  std::string hash;
  auto named = io::load_bundle(path, &hash);
  if (hash != config_hash(cfg))
    throw ConfigError("checkpoint " + path + " was saved for config " + hash + ", current config is " +
                      config_hash(cfg));
  std::mt19937_64 rng(0);
  GeneratorWeights w = GeneratorWeights::init(cfg, rng);
  for (auto& [name, t] : w.named_parameters()) {
    auto it = named.find(name);
    if (it == named.end()) throw ConfigError("checkpoint " + path + " lacks tensor '" + name + "'");
    if (it->second.shape() != t->shape())
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(t->shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t->data().begin());
  }
  return w;
}

}  // namespace devit
