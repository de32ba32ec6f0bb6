#include "clkit/param_store.hpp"

#include <algorithm>
#include <stdexcept>

namespace clkit {

std::size_t ParameterStore::add(const std::string& name, std::vector<std::size_t> shape) {
  if (find(name)) {
    throw std::invalid_argument("ParameterStore: duplicate entry name '" + name + "'");
  }
  ParamEntry e;
  e.name = name;
  e.size = Tensor::shape_size(shape);
  e.shape = std::move(shape);
  e.offset = values_.size();
  values_.resize(values_.size() + e.size, 0.0);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

std::optional<std::size_t> ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

void ParameterStore::restore(std::span<const double> snapshot) {
  if (snapshot.size() != values_.size()) {
    throw std::invalid_argument("ParameterStore::restore: size mismatch");
  }
  std::copy(snapshot.begin(), snapshot.end(), values_.begin());
}

std::size_t ParameterStore::entry_at(std::size_t flat_index) const {
  if (flat_index >= values_.size()) {
    throw std::out_of_range("ParameterStore::entry_at: index out of range");
  }
  auto it = std::upper_bound(entries_.begin(), entries_.end(), flat_index,
                             [](std::size_t v, const ParamEntry& e) { return v < e.offset; });
  return static_cast<std::size_t>(std::distance(entries_.begin(), it)) - 1;
}

}  // namespace clkit
