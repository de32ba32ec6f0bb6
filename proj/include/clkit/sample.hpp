#pragma once

#include <variant>
#include <vector>

namespace clkit {

/// Feature-vector classification sample.
struct VectorSample {
  std::vector<double> features;
  int label = 0;
};

/// Next-token prediction sample: the model conditions on the prompt and is
/// supervised on the completion tokens.
struct SequenceSample {
  std::vector<int> prompt;
  std::vector<int> completion;
};

using Sample = std::variant<VectorSample, SequenceSample>;

inline bool is_sequence(const Sample& s) { return std::holds_alternative<SequenceSample>(s); }

}  // namespace clkit
