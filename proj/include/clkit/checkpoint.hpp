#pragma once

#include <string>
#include <utility>

#include "clkit/model.hpp"
#include "clkit/param_store.hpp"

namespace clkit {

/// Self-describing model checkpoint: a JSON header (model config + adapter
/// metadata) followed by the ordered (name, shape, float64 payload) entries.
/// Byte layout in docs/FORMATS.md.
void save_checkpoint(const std::string& path, const Model& model, const ParameterStore& store);

std::pair<Model, ParameterStore> load_checkpoint(const std::string& path);

}  // namespace clkit
