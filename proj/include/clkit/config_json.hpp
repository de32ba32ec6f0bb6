#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "clkit/model.hpp"

namespace clkit {

/// Validation failure with field-level messages. Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg, std::vector<std::string> details = {})
      : std::runtime_error(msg), details_(std::move(details)) {}
  const std::vector<std::string>& details() const { return details_; }

 private:
  std::vector<std::string> details_;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& field_prefix);

/// Throws ValidationError when `j` holds keys outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& field_prefix);

}  // namespace clkit
