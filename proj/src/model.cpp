#include "clkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "clkit/rng.hpp"

namespace clkit {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); }

void init_normal(std::span<double> out, RandomSource& rng, double stddev) {
  for (double& v : out) v = rng.normal(0.0, stddev);
}

}  // namespace

void ModelConfig::validate() const {
  if (family == ModelFamily::kMlp) {
    if (mlp_layers.size() < 2) fail("mlp needs at least input and output widths");
    for (std::size_t w : mlp_layers) {
      if (w == 0) fail("mlp layer widths must be positive");
    }
  } else {
    if (vocab_size < 2) fail("transformer vocab_size must be >= 2");
    if (d_model == 0) fail("transformer d_model must be positive");
    if (n_layers == 0) fail("transformer n_layers must be positive");
    if (n_heads == 0) fail("transformer n_heads must be positive");
    if (d_model % n_heads != 0) {
      fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
           std::to_string(n_heads) + ")");
    }
    if (max_seq_len < 2) fail("transformer max_seq_len must be >= 2");
  }
}

std::pair<Model, ParameterStore> Model::build(const ModelConfig& config) {
  config.validate();
  Model model;
  model.config_ = config;
  ParameterStore store;
  RandomSource rng(derive_seed(config.seed, "model-init"));

  if (config.family == ModelFamily::kMlp) {
    const auto& widths = config.mlp_layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      std::string prefix = "layers." + std::to_string(i) + ".";
      MlpLayerIds ids{};
      ids.weight = store.add(prefix + "weight", {widths[i], widths[i + 1]});
      ids.bias = store.add(prefix + "bias", {widths[i + 1]});
      init_normal(store.values(ids.weight), rng, 1.0 / std::sqrt(static_cast<double>(widths[i])));
      bool hidden = i + 2 < widths.size();
      if (hidden && config.mlp_layernorm) {
        ids.norm_weight = store.add(prefix + "norm.weight", {widths[i + 1]});
        ids.norm_bias = store.add(prefix + "norm.bias", {widths[i + 1]});
        auto w = store.values(ids.norm_weight);
        std::fill(w.begin(), w.end(), 1.0);
      }
      model.mlp_ids_.push_back(ids);
    }
    return {std::move(model), std::move(store)};
  }

  std::size_t d = config.d_model;
  std::size_t ff = config.d_ff == 0 ? 2 * d : config.d_ff;
  model.config_.d_ff = ff;
  double proj_std = 1.0 / std::sqrt(static_cast<double>(d));

  model.embed_tokens_ = store.add("embed_tokens.weight", {config.vocab_size, d});
  init_normal(store.values(model.embed_tokens_), rng, 0.5 * proj_std);
  model.embed_positions_ = store.add("embed_positions.weight", {config.max_seq_len, d});
  init_normal(store.values(model.embed_positions_), rng, 0.5 * proj_std);

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    std::string prefix = "layers." + std::to_string(l) + ".";
    BlockIds ids{};
    ids.in_norm_w = store.add(prefix + "input_layernorm.weight", {d});
    ids.in_norm_b = store.add(prefix + "input_layernorm.bias", {d});
    ids.q = store.add(prefix + "attn.q_proj.weight", {d, d});
    ids.k = store.add(prefix + "attn.k_proj.weight", {d, d});
    ids.v = store.add(prefix + "attn.v_proj.weight", {d, d});
    ids.o = store.add(prefix + "attn.o_proj.weight", {d, d});
    ids.post_norm_w = store.add(prefix + "post_attention_layernorm.weight", {d});
    ids.post_norm_b = store.add(prefix + "post_attention_layernorm.bias", {d});
    ids.gate = store.add(prefix + "mlp.gate_proj.weight", {d, ff});
    ids.up = store.add(prefix + "mlp.up_proj.weight", {d, ff});
    ids.down = store.add(prefix + "mlp.down_proj.weight", {ff, d});
    for (std::size_t w : {ids.in_norm_w, ids.post_norm_w}) {
      auto vals = store.values(w);
      std::fill(vals.begin(), vals.end(), 1.0);
    }
    for (std::size_t w : {ids.q, ids.k, ids.v, ids.o, ids.gate, ids.up}) {
      init_normal(store.values(w), rng, proj_std);
    }
    init_normal(store.values(ids.down), rng, 1.0 / std::sqrt(static_cast<double>(ff)));
    model.block_ids_.push_back(ids);
  }
  model.final_norm_w_ = store.add("norm.weight", {d});
  model.final_norm_b_ = store.add("norm.bias", {d});
  {
    auto w = store.values(model.final_norm_w_);
    std::fill(w.begin(), w.end(), 1.0);
  }
  model.lm_head_ = store.add("lm_head.weight", {d, config.vocab_size});
  init_normal(store.values(model.lm_head_), rng, proj_std);
  return {std::move(model), std::move(store)};
}

ValueRef Model::linear(Tape& tape, ValueRef x, std::size_t weight_entry,
                       std::vector<LinearTap>* taps) const {
  ValueRef w = tape.param(weight_entry);
  ValueRef y = tape.matmul(x, w);
  for (const LoraAdapter& ad : adapters_) {
    if (ad.target_entry != weight_entry) continue;
    ValueRef xin = tape.dropout(x, ad.dropout);
    ValueRef a = tape.param(ad.a_entry);
    ValueRef b = tape.param(ad.b_entry);
    ValueRef low = tape.matmul_nt(xin, a);              // [rows, r]
    ValueRef delta = tape.matmul_nt(low, b);            // [rows, d_out]
    y = tape.add(y, tape.scale(delta, ad.scaling()));
  }
  if (taps != nullptr) taps->push_back({weight_entry, y});
  return y;
}

std::vector<int> Model::full_tokens(const SequenceSample& s) const {
  if (s.prompt.empty()) throw std::invalid_argument("sequence sample needs a nonempty prompt");
  if (s.completion.empty()) {
    throw std::invalid_argument("sequence sample needs a nonempty completion");
  }
  std::vector<int> tokens = s.prompt;
  tokens.insert(tokens.end(), s.completion.begin(), s.completion.end());
  if (tokens.size() > config_.max_seq_len) {
    throw std::invalid_argument("sequence longer than max_seq_len");
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw std::invalid_argument("token id out of vocabulary range");
    }
  }
  return tokens;
}

ValueRef Model::forward_impl(Tape& tape, const Sample& sample,
                             std::vector<LinearTap>* taps) const {
  if (config_.family == ModelFamily::kMlp) {
    const auto* vs = std::get_if<VectorSample>(&sample);
    if (vs == nullptr) throw std::invalid_argument("mlp expects vector samples");
    if (vs->features.size() != config_.mlp_layers.front()) {
      throw std::invalid_argument("feature width does not match model input width");
    }
    ValueRef x = tape.constant(Tensor::row_vector(vs->features));
    for (std::size_t i = 0; i < mlp_ids_.size(); ++i) {
      const MlpLayerIds& ids = mlp_ids_[i];
      x = tape.add_bias(linear(tape, x, ids.weight, taps), tape.param(ids.bias));
      bool hidden = i + 1 < mlp_ids_.size();
      if (hidden) {
        x = tape.tanh_act(x);
        if (ids.norm_weight != SIZE_MAX) {
          x = tape.layer_norm(x, tape.param(ids.norm_weight), tape.param(ids.norm_bias), 1e-5);
        }
      }
    }
    return x;
  }

  const auto* ss = std::get_if<SequenceSample>(&sample);
  if (ss == nullptr) throw std::invalid_argument("transformer expects sequence samples");
  return forward_tokens(tape, full_tokens(*ss), taps);
}

ValueRef Model::forward_tokens(Tape& tape, const std::vector<int>& tokens,
                               std::vector<LinearTap>* taps) const {
  std::size_t t = tokens.size();
  std::vector<int> positions(t);
  for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<int>(i);

  ValueRef x = tape.add(tape.embed_rows(tape.param(embed_tokens_), tokens),
                        tape.embed_rows(tape.param(embed_positions_), positions));

  std::size_t heads = config_.n_heads;
  std::size_t head_dim = config_.d_model / heads;
  double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(head_dim));

  for (const BlockIds& ids : block_ids_) {
    ValueRef normed =
        tape.layer_norm(x, tape.param(ids.in_norm_w), tape.param(ids.in_norm_b), 1e-5);
    ValueRef q = linear(tape, normed, ids.q, taps);
    ValueRef k = linear(tape, normed, ids.k, taps);
    ValueRef v = linear(tape, normed, ids.v, taps);
    std::vector<ValueRef> ctx;
    for (std::size_t h = 0; h < heads; ++h) {
      ValueRef qh = tape.slice_cols(q, h * head_dim, head_dim);
      ValueRef kh = tape.slice_cols(k, h * head_dim, head_dim);
      ValueRef vh = tape.slice_cols(v, h * head_dim, head_dim);
      ValueRef scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_hd);
      ValueRef probs = tape.causal_softmax(scores);
      ctx.push_back(tape.matmul(probs, vh));
    }
    ValueRef attn_out = linear(tape, tape.concat_cols(ctx), ids.o, taps);
    x = tape.add(x, attn_out);

    ValueRef post =
        tape.layer_norm(x, tape.param(ids.post_norm_w), tape.param(ids.post_norm_b), 1e-5);
    ValueRef gate = tape.gelu(linear(tape, post, ids.gate, taps));
    ValueRef up = linear(tape, post, ids.up, taps);
    ValueRef ffn = linear(tape, tape.mul(gate, up), ids.down, taps);
    x = tape.add(x, ffn);
  }
  ValueRef final_norm =
      tape.layer_norm(x, tape.param(final_norm_w_), tape.param(final_norm_b_), 1e-5);
  return linear(tape, final_norm, lm_head_, taps);
}

ValueRef Model::logits(Tape& tape, const Sample& sample) const {
  return forward_impl(tape, sample, nullptr);
}

ValueRef Model::logits_with_taps(Tape& tape, const Sample& sample,
                                 std::vector<LinearTap>* taps) const {
  return forward_impl(tape, sample, taps);
}

ValueRef Model::sample_mean_log_prob(Tape& tape, const Sample& sample) const {
  ValueRef out = forward_impl(tape, sample, nullptr);
  if (const auto* vs = std::get_if<VectorSample>(&sample)) {
    std::size_t classes = output_classes();
    if (vs->label < 0 || static_cast<std::size_t>(vs->label) >= classes) {
      throw std::invalid_argument("label out of class range");
    }
    return tape.mean_label_log_prob(out, {vs->label});
  }
  const auto& ss = std::get<SequenceSample>(sample);
  std::size_t t = ss.prompt.size() + ss.completion.size();
  // Row i predicts token i+1; supervise exactly the completion tokens.
  std::vector<int> labels(t, -1);
  std::vector<int> tokens = full_tokens(ss);
  for (std::size_t i = ss.prompt.size(); i < t; ++i) labels[i - 1] = tokens[i];
  return tape.mean_label_log_prob(out, std::move(labels));
}

void Model::attach_lora(ParameterStore& store, const LoraAdapterConfig& config,
                        const std::string& tag, std::uint64_t seed) {
  if (config.rank == 0) throw std::invalid_argument("LoRA rank must be positive");
  if (config.alpha <= 0.0) throw std::invalid_argument("LoRA alpha must be positive");
  if (config.dropout < 0.0 || config.dropout >= 1.0) {
    throw std::invalid_argument("LoRA dropout must lie in [0, 1)");
  }
  if (config.targets.empty()) throw std::invalid_argument("LoRA needs at least one target");
  RandomSource rng(derive_seed(seed, "lora-init:" + tag));
  for (const std::string& target : config.targets) {
    auto id = store.find(target);
    if (!id) throw std::invalid_argument("LoRA target not found: " + target);
    const ParamEntry& e = store.entry(*id);
    if (e.shape.size() != 2) {
      throw std::invalid_argument("LoRA target must be a 2-D entry: " + target);
    }
    std::size_t d_in = e.shape[0], d_out = e.shape[1];
    if (config.rank > std::min(d_in, d_out)) {
      throw std::invalid_argument("LoRA rank " + std::to_string(config.rank) +
                                  " exceeds min dimension of target " + target);
    }
    LoraAdapter ad;
    ad.target_entry = *id;
    ad.rank = config.rank;
    ad.alpha = config.alpha;
    ad.dropout = config.dropout;
    ad.tag = tag;
    ad.a_entry = store.add(target + "." + tag + ".lora_A", {config.rank, d_in});
    ad.b_entry = store.add(target + "." + tag + ".lora_B", {d_out, config.rank});
    init_normal(store.values(ad.a_entry), rng, 0.02);
    adapters_.push_back(std::move(ad));
  }
}

Tensor Model::merged_weight(const ParameterStore& store, std::size_t entry_id) const {
  const ParamEntry& e = store.entry(entry_id);
  if (e.shape.size() != 2) throw std::invalid_argument("merged_weight needs a 2-D entry");
  auto base = store.values(entry_id);
  Tensor w(e.shape, std::vector<double>(base.begin(), base.end()));
  std::size_t d_in = e.shape[0], d_out = e.shape[1];
  for (const LoraAdapter& ad : adapters_) {
    if (ad.target_entry != entry_id) continue;
    auto a = store.values(ad.a_entry);  // [r, d_in]
    auto b = store.values(ad.b_entry);  // [d_out, r]
    double s = ad.scaling();
    for (std::size_t i = 0; i < d_in; ++i) {
      for (std::size_t j = 0; j < d_out; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < ad.rank; ++r) acc += a[r * d_in + i] * b[j * ad.rank + r];
        w[i * d_out + j] += s * acc;
      }
    }
  }
  return w;
}

std::vector<int> Model::greedy_decode(const ParameterStore& store, const std::vector<int>& prompt,
                                      std::size_t steps) const {
  if (config_.family != ModelFamily::kTinyTransformer) {
    throw std::invalid_argument("greedy_decode requires a transformer model");
  }
  if (prompt.empty()) throw std::invalid_argument("greedy_decode needs a nonempty prompt");
  std::vector<int> context = prompt;
  std::vector<int> out;
  Tape tape(store);
  for (std::size_t s = 0; s < steps; ++s) {
    if (context.size() >= config_.max_seq_len) break;
    tape.reset();
    ValueRef out_ref = forward_tokens(tape, context, nullptr);
    const Tensor& logits = tape.value(out_ref);
    std::size_t row = context.size() - 1;
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits.at2(row, c) > logits.at2(row, best)) best = c;
    }
    context.push_back(static_cast<int>(best));
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::size_t Model::output_classes() const {
  return config_.family == ModelFamily::kMlp ? config_.mlp_layers.back() : config_.vocab_size;
}

void ensure_finite(std::span<const double> values, const ParameterStore& store,
                   const std::string& context) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::runtime_error(context + ": non-finite value at parameter entry '" +
                               store.name_at(i) + "' (flat index " + std::to_string(i) + ")");
    }
  }
}

LossAndGrad loss_and_grad(const Model& model, const ParameterStore& store,
                          std::span<const Sample> batch, Granularity granularity) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  LossAndGrad out;
  Tape tape(store);
  std::vector<double> buffer(store.size(), 0.0);
  std::vector<double> mean(granularity == Granularity::kPerBatch ? store.size() : 0, 0.0);

  for (const Sample& s : batch) {
    tape.reset();
    ValueRef ll = model.sample_mean_log_prob(tape, s);
    double sample_ll = tape.value(ll)[0];
    if (!std::isfinite(sample_ll)) {
      throw std::runtime_error("loss_and_grad: non-finite sample loss");
    }
    out.loss -= sample_ll;
    std::fill(buffer.begin(), buffer.end(), 0.0);
    tape.backward(ll, buffer);
    if (granularity == Granularity::kPerSample) {
      GradientRecord rec;
      rec.values = buffer;
      rec.granularity = Granularity::kPerSample;
      ensure_finite(rec.values, store, "loss_and_grad(per-sample)");
      out.records.push_back(std::move(rec));
    } else {
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += buffer[i];
    }
  }
  out.loss /= static_cast<double>(batch.size());

  if (granularity == Granularity::kPerBatch) {
    double inv = 1.0 / static_cast<double>(batch.size());
    for (double& v : mean) v *= inv;
    ensure_finite(mean, store, "loss_and_grad(per-batch)");
    GradientRecord rec;
    rec.values = std::move(mean);
    rec.granularity = Granularity::kPerBatch;
    out.records.push_back(std::move(rec));
  }
  return out;
}

double batch_loss(const Model& model, const ParameterStore& store,
                  std::span<const Sample> batch) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Tape tape(store);
  double loss = 0.0;
  for (const Sample& s : batch) {
    tape.reset();
    loss -= tape.value(model.sample_mean_log_prob(tape, s))[0];
  }
  return loss / static_cast<double>(batch.size());
}

std::vector<double> batch_loss_gradient(const Model& model, const ParameterStore& store,
                                        std::span<const Sample> batch) {
  LossAndGrad lg = loss_and_grad(model, store, batch, Granularity::kPerBatch);
  std::vector<double> grad = std::move(lg.records[0].values);
  for (double& v : grad) v = -v;
  return grad;
}

double finite_difference_check(const std::function<double(const ParameterStore&)>& objective,
                               std::span<const double> analytic_grad, ParameterStore& store,
                               const FdOptions& options) {
  if (options.eps <= 0.0) throw std::invalid_argument("finite_difference_check: eps must be > 0");
  std::vector<std::size_t> indices;
  std::size_t n = store.size();
  if (n <= options.max_params) {
    indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
  } else {
    RandomSource rng(derive_seed(options.subsample_seed, "fd-subsample"));
    indices.resize(options.max_params);
    for (std::size_t& idx : indices) idx = rng.index(n);
  }

  double worst = 0.0;
  auto flat = store.flat();
  for (std::size_t idx : indices) {
    double saved = flat[idx];
    flat[idx] = saved + options.eps;
    double hi = objective(store);
    flat[idx] = saved - options.eps;
    double lo = objective(store);
    flat[idx] = saved;
    double fd = (hi - lo) / (2.0 * options.eps);
    double ad = analytic_grad[idx];
    double denom = std::max({std::abs(fd), std::abs(ad), 1e-4});
    worst = std::max(worst, std::abs(fd - ad) / denom);
  }
  return worst;
}

double finite_difference_check(const Model& model, ParameterStore& store,
                               std::span<const Sample> batch, const FdOptions& options) {
  std::vector<double> grad = batch_loss_gradient(model, store, batch);
  return finite_difference_check(
      [&model, batch](const ParameterStore& s) { return batch_loss(model, s, batch); }, grad,
      store, options);
}

}  // namespace clkit
