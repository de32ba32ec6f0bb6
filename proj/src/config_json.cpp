#include "clkit/config_json.hpp"

#include <nlohmann/json.hpp>

namespace clkit {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& field_prefix) {
  if (!j.is_object()) {
    throw ValidationError(field_prefix + ": expected an object");
  }
  std::vector<std::string> bad;
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      bad.push_back(field_prefix + "." + key + ": unknown key");
    }
  }
  if (!bad.empty()) {
    throw ValidationError("unknown keys under " + field_prefix, std::move(bad));
  }
}

json model_config_to_json(const ModelConfig& config) {
  json j;
  j["seed"] = config.seed;
  if (config.family == ModelFamily::kMlp) {
    j["family"] = "mlp";
    j["layers"] = config.mlp_layers;
    j["layernorm"] = config.mlp_layernorm;
  } else {
    j["family"] = "tiny-transformer";
    j["vocab_size"] = config.vocab_size;
    j["d_model"] = config.d_model;
    j["n_layers"] = config.n_layers;
    j["n_heads"] = config.n_heads;
    j["d_ff"] = config.d_ff;
    j["max_seq_len"] = config.max_seq_len;
  }
  return j;
}

ModelConfig model_config_from_json(const json& j, const std::string& prefix) {
  if (!j.is_object() || !j.contains("family") || !j["family"].is_string()) {
    throw ValidationError(prefix + ".family: required string field");
  }
  ModelConfig config;
  std::string family = j["family"].get<std::string>();
  try {
    if (family == "mlp") {
      reject_unknown_keys(j, {"family", "layers", "layernorm", "seed"}, prefix);
      if (!j.contains("layers")) throw ValidationError(prefix + ".layers: required");
      config.family = ModelFamily::kMlp;
      config.mlp_layers = j["layers"].get<std::vector<std::size_t>>();
      config.mlp_layernorm = j.value("layernorm", false);
    } else if (family == "tiny-transformer") {
      reject_unknown_keys(
          j, {"family", "vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
              "seed"},
          prefix);
      config.family = ModelFamily::kTinyTransformer;
      for (const char* req : {"vocab_size", "d_model", "n_layers", "n_heads"}) {
        if (!j.contains(req)) throw ValidationError(prefix + "." + req + ": required");
      }
      config.vocab_size = j["vocab_size"].get<std::size_t>();
      config.d_model = j["d_model"].get<std::size_t>();
      config.n_layers = j["n_layers"].get<std::size_t>();
      config.n_heads = j["n_heads"].get<std::size_t>();
      config.d_ff = j.value("d_ff", std::size_t{0});
      config.max_seq_len = j.value("max_seq_len", std::size_t{64});
    } else {
      throw ValidationError(prefix + ".family: must be 'mlp' or 'tiny-transformer'");
    }
    config.seed = j.value("seed", std::uint64_t{42});
    config.validate();
  } catch (const json::exception& e) {
    throw ValidationError(prefix + ": malformed field (" + e.what() + ")");
  } catch (const std::invalid_argument& e) {
    throw ValidationError(prefix + ": " + e.what());
  }
  return config;
}

}  // namespace clkit
