#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "amri/attention.hpp"
#include "amri/layers.hpp"

namespace amri {

// Ordered collection of parameter blocks with unique names.
template <class T>
class ParamStore {
 public:
  LayerParams<T>& add(LayerParams<T> p) {
    if (index_.count(p.name)) throw ValidationError("duplicate layer name: " + p.name);
    index_[p.name] = layers_.size();
    layers_.push_back(std::move(p));
    return layers_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  LayerParams<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("no layer named " + name);
    return layers_[it->second];
  }
  const LayerParams<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("no layer named " + name);
    return layers_[it->second];
  }

  const std::vector<LayerParams<T>>& layers() const { return layers_; }

  // (full name, tensor) in layer order then key order.
  std::vector<std::pair<std::string, Parameter<T>*>> parameters(bool trainable_only = false) {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    for (auto& l : layers_) {
      for (auto& [key, p] : l.tensors) {
        if (!trainable_only || p.trainable) out.emplace_back(l.full_name(key), &p);
      }
    }
    return out;
  }
  std::vector<std::pair<std::string, const Parameter<T>*>> parameters(bool trainable_only = false) const {
    std::vector<std::pair<std::string, const Parameter<T>*>> out;
    for (const auto& l : layers_) {
      for (const auto& [key, p] : l.tensors) {
        if (!trainable_only || p.trainable) out.emplace_back(l.full_name(key), &p);
      }
    }
    return out;
  }

  std::size_t scalar_count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& [name, p] : parameters(trainable_only)) n += p->value.size();
    return n;
  }

 private:
  std::vector<LayerParams<T>> layers_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Multi-residual block: parallel 1x1 / 3x3 / 5x5 conv+BN+ReLU branches, summed
// with a skip (identity when channels already match, 1x1 projection otherwise).

template <class T>
void add_multi_residual_params(ParamStore<T>& store, const std::string& prefix, std::size_t in_channels,
                               std::size_t filters, RngState& rng) {
  for (std::size_t k : {1, 3, 5}) {
    const std::string b = prefix + "_b" + std::to_string(k);
    store.add(make_conv2d_params<T>(b + "_conv", k, k, in_channels, filters, rng));
    store.add(make_batch_norm_params<T>(b + "_bn", filters));
  }
  if (in_channels != filters) store.add(make_conv2d_params<T>(prefix + "_skip", 1, 1, in_channels, filters, rng));
}

template <class T>
Var<T> multi_residual_block(Var<T> x, ParamStore<T>& store, const std::string& prefix, Mode mode) {
  std::optional<Var<T>> acc;
  for (std::size_t k : {1, 3, 5}) {
    const std::string b = prefix + "_b" + std::to_string(k);
    auto y = relu(batch_norm(conv2d(x, store.get(b + "_conv"), 1, Padding::same), store.get(b + "_bn"), mode));
    acc = acc ? add(*acc, y) : y;
  }
  Var<T> skip = store.has(prefix + "_skip") ? conv2d(x, store.get(prefix + "_skip"), 1, Padding::same) : x;
  if (skip.shape() != acc->shape()) throw ShapeError("multi_residual_block: skip shape mismatch");
  return relu(add(*acc, skip));
}

// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t image_size = 128;
  std::size_t channels = 3;
  std::size_t num_classes = 4;
  std::vector<std::size_t> stem_filters{32, 64};
  std::size_t residual_filters = 128;
  AttentionConfig attention{128, 4, 2};
  double dropout = 0.3;
  std::size_t dense_units = 128;
  std::size_t spatial_kernel = 7;

  // Desk-scale variant used for CPU training runs.
  static ModelConfig reduced(std::size_t num_classes, std::size_t image_size = 128) {
    ModelConfig c;
    c.image_size = image_size;
    c.num_classes = num_classes;
    c.stem_filters = {8, 16};
    c.residual_filters = 32;
    c.attention = {32, 4, 2};
    c.dense_units = 32;
    return c;
  }

  // Spatial size of the token grid fed to the attention layers.
  std::size_t token_grid() const {
    std::size_t s = image_size;
    for (std::size_t i = 0; i < stem_filters.size() + 1; ++i) s = s >= 2 ? (s - 2) / 2 + 1 : 0;
    return s;
  }

  void validate() const {
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (channels == 0 || image_size == 0) throw ValidationError("input shape must be positive");
    if (stem_filters.empty()) throw ValidationError("at least one stem conv block is required");
    for (auto f : stem_filters) {
      if (f == 0) throw ValidationError("filter counts must be positive");
    }
    if (residual_filters == 0 || dense_units == 0) throw ValidationError("filter counts must be positive");
    attention.validate();
    if (attention.d != residual_filters) throw ValidationError("attention model dim must equal residual_filters");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    if (spatial_kernel % 2 == 0) throw ValidationError("spatial attention kernel must be odd");
    std::size_t s = image_size;
    for (std::size_t i = 0; i < stem_filters.size() + 1; ++i) {
      if (s < 2) throw ValidationError("image_size too small for the pooling stack");
      s = (s - 2) / 2 + 1;
    }
  }
};

template <class T>
struct ForwardResult {
  Var<T> logits;                  // [N,K] pre-softmax class scores
  Var<T> probs;                   // [N,K] softmax
  std::optional<Var<T>> captured;  // requested intermediate
};

template <class T>
class Model {
 public:
  ModelConfig config;
  ParamStore<T> params;

  // Number of images pushed through forward() so far.
  std::size_t forward_samples = 0;

  std::vector<std::string> capture_points() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < config.stem_filters.size(); ++i) names.push_back("stem" + std::to_string(i + 1) + "_out");
    for (const char* n : {"spatial_attention_out", "spatial_attention_gate", "multi_residual_out", "residual_pool_out",
                          "gqa_out", "mha_out", "attention_map_out", "gap_out", "dense_out"}) {
      names.emplace_back(n);
    }
    return names;
  }

  ForwardResult<T> forward(Var<T> x, Mode mode, RngState rng = {}, const std::optional<std::string>& capture = std::nullopt) {
    const Shape expect{x.shape().empty() ? 0 : x.shape()[0], config.image_size, config.image_size, config.channels};
    if (x.shape().size() != 4 || x.shape() != expect) {
      throw ShapeError("model input must be [N," + std::to_string(config.image_size) + "," +
                       std::to_string(config.image_size) + "," + std::to_string(config.channels) + "], got " +
                       shape_str(x.shape()));
    }
    if (capture) {
      auto pts = capture_points();
      if (std::find(pts.begin(), pts.end(), *capture) == pts.end()) {
        throw ValidationError("unknown capture layer: " + *capture);
      }
    }
    forward_samples += x.shape()[0];
    std::optional<Var<T>> captured;
    auto tap = [&](const std::string& name, Var<T> v) {
      if (capture && *capture == name) captured = v;
    };

    Var<T> h = x;
    for (std::size_t i = 0; i < config.stem_filters.size(); ++i) {
      const std::string s = "stem" + std::to_string(i + 1);
      h = relu(batch_norm(conv2d(h, params.get(s + "_conv"), 1, Padding::same), params.get(s + "_bn"), mode));
      h = maxpool2d(h, 2, 2);
      tap(s + "_out", h);
    }
    auto sa = spatial_attention(h, params.get("spatial_attention"));
    tap("spatial_attention_gate", sa.gate);
    tap("spatial_attention_out", sa.output);
    h = multi_residual_block(sa.output, params, "multi_residual", mode);
    tap("multi_residual_out", h);
    h = maxpool2d(h, 2, 2);
    tap("residual_pool_out", h);

    const std::size_t gh = h.shape()[1];
    const std::size_t gw = h.shape()[2];
    auto tokens = tokens_from_feature_map(h);
    tokens = add(tokens, grouped_query_attention(layer_norm(tokens, params.get("gqa_ln")), params.get("gqa"), config.attention).output);
    tap("gqa_out", tokens);
    AttentionConfig mha_cfg{config.attention.d, config.attention.heads, config.attention.heads};
    tokens = add(tokens, multi_head_attention(layer_norm(tokens, params.get("mha_ln")), params.get("mha"), mha_cfg).output);
    tap("mha_out", tokens);
    h = feature_map_from_tokens(tokens, gh, gw);
    tap("attention_map_out", h);

    h = dropout(h, config.dropout, mode, rng);
    auto pooled = global_avg_pool(h);
    tap("gap_out", pooled);
    auto hidden = dense(pooled, params.get("dense1"), Activation::relu);
    tap("dense_out", hidden);
    auto logits = dense(hidden, params.get("classifier"), Activation::none);
    return {logits, softmax(logits, -1), captured};
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode, RngState rng = {},
                           const std::optional<std::string>& capture = std::nullopt) {
    return forward(tape.constant(x), mode, rng, capture);
  }

  // Inference-mode class probabilities, evaluated in chunks of `batch`.
  Tensor<T> predict(const Tensor<T>& x, std::size_t batch = 16) { return evaluate(x, batch, true); }
  Tensor<T> logits(const Tensor<T>& x, std::size_t batch = 16) { return evaluate(x, batch, false); }

 private:
  Tensor<T> evaluate(const Tensor<T>& x, std::size_t batch, bool probs) {
    if (x.rank() != 4) throw ShapeError("predict expects NHWC input");
    const std::size_t n = x.dim(0);
    const std::size_t per = x.size() / n;
    Tensor<T> out({n, config.num_classes});
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t m = std::min(batch, n - start);
      Tensor<T> chunk({m, x.dim(1), x.dim(2), x.dim(3)});
      std::copy_n(x.ptr() + start * per, m * per, chunk.ptr());
      Tape<T> tape(false);
      auto r = forward(tape, chunk, Mode::infer);
      const auto& v = probs ? r.probs.value() : r.logits.value();
      std::copy_n(v.ptr(), v.size(), out.ptr() + start * config.num_classes);
    }
    return out;
  }
};

// Deterministic construction: identical (cfg, rng) yields bit-identical parameters.
template <class T>
Model<T> build_model(const ModelConfig& cfg, RngState rng) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  auto& ps = m.params;
  std::size_t cin = cfg.channels;
  for (std::size_t i = 0; i < cfg.stem_filters.size(); ++i) {
    const std::string s = "stem" + std::to_string(i + 1);
    ps.add(make_conv2d_params<T>(s + "_conv", 3, 3, cin, cfg.stem_filters[i], rng));
    ps.add(make_batch_norm_params<T>(s + "_bn", cfg.stem_filters[i]));
    cin = cfg.stem_filters[i];
  }
  ps.add(make_spatial_attention_params<T>("spatial_attention", cfg.spatial_kernel, rng));
  add_multi_residual_params(ps, "multi_residual", cin, cfg.residual_filters, rng);
  ps.add(make_layer_norm_params<T>("gqa_ln", cfg.attention.d));
  ps.add(make_attention_params<T>("gqa", cfg.attention, rng));
  ps.add(make_layer_norm_params<T>("mha_ln", cfg.attention.d));
  ps.add(make_attention_params<T>("mha", AttentionConfig{cfg.attention.d, cfg.attention.heads, cfg.attention.heads}, rng));
  ps.add(make_dense_params<T>("dense1", cfg.residual_filters, cfg.dense_units, rng));
  // Zero head: He-uniform here leaves untrained logits several units apart.
  ps.add(make_dense_params<T>("classifier", cfg.dense_units, cfg.num_classes, rng)).tensors["kernel"].value.fill(T{0});
  return m;
}

}  // namespace amri
