#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clkit/param_store.hpp"
#include "clkit/sample.hpp"
#include "clkit/tape.hpp"

namespace clkit {

enum class ModelFamily { kMlp, kTinyTransformer };

struct ModelConfig {
  ModelFamily family = ModelFamily::kMlp;

  // MLP: layer widths input..output, tanh hidden activations, optional
  // per-hidden-layer LayerNorm.
  std::vector<std::size_t> mlp_layers;
  bool mlp_layernorm = false;

  // Tiny decoder-style transformer (pre-norm, causal, GELU-gated FFN).
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;  // 0 -> defaults to 2 * d_model
  std::size_t max_seq_len = 64;

  std::uint64_t seed = 42;

  void validate() const;  // throws std::invalid_argument with a description
};

struct LoraAdapterConfig {
  std::size_t rank = 8;
  double alpha = 32.0;
  std::vector<std::string> targets;  // names of 2-D parameter entries
  double dropout = 0.0;
};

struct LoraAdapter {
  std::size_t target_entry = 0;
  std::size_t a_entry = 0;  // [rank, d_in]
  std::size_t b_entry = 0;  // [d_out, rank], zero-initialized
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout = 0.0;
  std::string tag;
  double scaling() const { return alpha / static_cast<double>(rank); }
};

enum class Granularity { kPerSample, kPerBatch };

struct GradientRecord {
  std::vector<double> values;  // length |theta|, aligned with the flat index
  Granularity granularity = Granularity::kPerSample;
};

/// Model structure: entry ids into an aligned ParameterStore plus any LoRA
/// adapters. The store itself is owned by the caller, so snapshots and
/// optimizer updates operate on plain flat vectors.
class Model {
 public:
  /// Builds the structure and a deterministically initialized store.
  static std::pair<Model, ParameterStore> build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Logits for one sample: [1, C] for vector samples, [T, V] for sequences.
  ValueRef logits(Tape& tape, const Sample& sample) const;

  /// Per-sample objective: mean log p(label) over supervised positions
  /// (a single position for classification). Scalar node.
  ValueRef sample_mean_log_prob(Tape& tape, const Sample& sample) const;

  /// As logits(), additionally reporting each linear layer's pre-bias
  /// response node for activation-magnitude scoring.
  struct LinearTap {
    std::size_t weight_entry;
    ValueRef response;  // [rows, d_out]
  };
  ValueRef logits_with_taps(Tape& tape, const Sample& sample,
                            std::vector<LinearTap>* taps) const;

  /// Adds rank-r adapters (A small-random, B zero) behind every target entry.
  /// Forward then computes x W + (alpha/r) x A^T B^T per adapter.
  void attach_lora(ParameterStore& store, const LoraAdapterConfig& config,
                   const std::string& tag, std::uint64_t seed);

  const std::vector<LoraAdapter>& adapters() const { return adapters_; }

  /// Effective weight of a target entry with all adapter deltas merged,
  /// in the stored [d_in, d_out] layout.
  Tensor merged_weight(const ParameterStore& store, std::size_t entry_id) const;

  /// Greedy argmax decode of `steps` tokens following the prompt.
  std::vector<int> greedy_decode(const ParameterStore& store, const std::vector<int>& prompt,
                                 std::size_t steps) const;

  std::size_t output_classes() const;  // classes (MLP) or vocab (transformer)

 private:
  ValueRef forward_impl(Tape& tape, const Sample& sample, std::vector<LinearTap>* taps) const;
  ValueRef forward_tokens(Tape& tape, const std::vector<int>& tokens,
                          std::vector<LinearTap>* taps) const;
  ValueRef linear(Tape& tape, ValueRef x, std::size_t weight_entry,
                  std::vector<LinearTap>* taps) const;
  std::vector<int> full_tokens(const SequenceSample& s) const;

  ModelConfig config_;
  std::vector<LoraAdapter> adapters_;

  // Resolved entry ids (by name at build time).
  struct MlpLayerIds {
    std::size_t weight, bias;
    std::size_t norm_weight = SIZE_MAX, norm_bias = SIZE_MAX;
  };
  std::vector<MlpLayerIds> mlp_ids_;

  struct BlockIds {
    std::size_t in_norm_w, in_norm_b;
    std::size_t q, k, v, o;
    std::size_t post_norm_w, post_norm_b;
    std::size_t gate, up, down;
  };
  std::vector<BlockIds> block_ids_;
  std::size_t embed_tokens_ = SIZE_MAX, embed_positions_ = SIZE_MAX;
  std::size_t final_norm_w_ = SIZE_MAX, final_norm_b_ = SIZE_MAX, lm_head_ = SIZE_MAX;
};

/// Batch mean cross-entropy plus log-likelihood gradients.
/// Per-sample records hold d(mean log p)/d(theta) for each sample; the
/// per-batch record is their elementwise mean in sample order. The descent
/// direction for the batch loss is the negated per-batch record.
struct LossAndGrad {
  double loss = 0.0;                    // mean cross-entropy over the batch
  std::vector<GradientRecord> records;  // one per sample, or one mean record
};
LossAndGrad loss_and_grad(const Model& model, const ParameterStore& store,
                          std::span<const Sample> batch, Granularity granularity);

/// Batch mean cross-entropy without gradients.
double batch_loss(const Model& model, const ParameterStore& store, std::span<const Sample> batch);

/// Descent gradient of the batch loss (negated per-batch record), length |theta|.
std::vector<double> batch_loss_gradient(const Model& model, const ParameterStore& store,
                                        std::span<const Sample> batch);

/// Throws if any value is non-finite, naming the parameter entry.
void ensure_finite(std::span<const double> values, const ParameterStore& store,
                   const std::string& context);

struct FdOptions {
  double eps = 1e-6;
  std::size_t max_params = 2000;   // above this, check a uniform random subset
  std::uint64_t subsample_seed = 0;
};

/// Worst relative deviation between an analytic gradient and central finite
/// differences of `objective` over the store's parameters.
double finite_difference_check(const std::function<double(const ParameterStore&)>& objective,
                               std::span<const double> analytic_grad, ParameterStore& store,
                               const FdOptions& options = {});

/// Same check for a model's batch loss.
double finite_difference_check(const Model& model, ParameterStore& store,
                               std::span<const Sample> batch, const FdOptions& options = {});

}  // namespace clkit
