#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clkit/tensor.hpp"

namespace clkit {

struct ParamEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;  // position of the first element in the flat vector
  std::size_t size = 0;
};

/// Ordered collection of named, shaped parameter tensors backed by one flat
/// float64 vector. The flat index is the universe over which gradients,
/// importance scores, masks and optimizer state are aligned. Entry order is
/// the construction order and is stable across save/load.
class ParameterStore {
 public:
  std::size_t add(const std::string& name, std::vector<std::size_t> shape);

  std::size_t size() const { return values_.size(); }  // |theta|
  std::size_t entry_count() const { return entries_.size(); }
  const ParamEntry& entry(std::size_t id) const { return entries_[id]; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  std::optional<std::size_t> find(const std::string& name) const;

  std::span<double> values(std::size_t id) {
    const ParamEntry& e = entries_[id];
    return {values_.data() + e.offset, e.size};
  }
  std::span<const double> values(std::size_t id) const {
    const ParamEntry& e = entries_[id];
    return {values_.data() + e.offset, e.size};
  }

  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }

  std::vector<double> snapshot() const { return values_; }
  void restore(std::span<const double> snapshot);

  /// Entry owning a flat index (binary search over offsets).
  std::size_t entry_at(std::size_t flat_index) const;
  const std::string& name_at(std::size_t flat_index) const {
    return entries_[entry_at(flat_index)].name;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::vector<double> values_;
};

}  // namespace clkit
