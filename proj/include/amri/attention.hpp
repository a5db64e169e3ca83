#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "amri/layers.hpp"

namespace amri {

struct AttentionConfig {
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t kv_groups = 2;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (d == 0 || heads == 0 || kv_groups == 0) throw ValidationError("attention sizes must be positive");
    if (d % heads != 0) throw ValidationError("model dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    if (heads % kv_groups != 0 || kv_groups > heads) {
      throw ValidationError("heads " + std::to_string(heads) + " not divisible by kv groups " + std::to_string(kv_groups));
    }
  }

  // Query head h reads key/value group floor(h*G/H): contiguous blocks of H/G heads.
  std::size_t group_of(std::size_t h) const { return h * kv_groups / heads; }
};

// Query/key/value/output projections. Key and value produce kv_groups heads.
template <class T>
LayerParams<T> make_attention_params(std::string name, const AttentionConfig& cfg, RngState& rng) {
  cfg.validate();
  const std::size_t hd = cfg.head_dim();
  LayerParams<T> p{std::move(name), {}};
  p.tensors["wq"] = {he_uniform<T>({cfg.d, cfg.heads * hd}, cfg.d, rng), true};
  p.tensors["bq"] = {Tensor<T>({cfg.heads * hd}), true};
  p.tensors["wk"] = {he_uniform<T>({cfg.d, cfg.kv_groups * hd}, cfg.d, rng), true};
  p.tensors["bk"] = {Tensor<T>({cfg.kv_groups * hd}), true};
  p.tensors["wv"] = {he_uniform<T>({cfg.d, cfg.kv_groups * hd}, cfg.d, rng), true};
  p.tensors["bv"] = {Tensor<T>({cfg.kv_groups * hd}), true};
  p.tensors["wo"] = {he_uniform<T>({cfg.heads * hd, cfg.d}, cfg.heads * hd, rng), true};
  p.tensors["bo"] = {Tensor<T>({cfg.d}), true};
  return p;
}

template <class T>
struct AttentionOutput {
  Var<T> output;   // [N,T,d]
  Var<T> weights;  // [N,H,T,T], rows sum to 1
};

namespace detail {

// [N*T, n*hd] -> [N, n, T, hd]
template <class T>
Var<T> split_heads(Var<T> y, std::size_t batch, std::size_t tokens, std::size_t n, std::size_t hd) {
  return permute(reshape(y, {batch, tokens, n, hd}), {0, 2, 1, 3});
}

template <class T>
void check_tokens(Var<T> x, const AttentionConfig& cfg) {
  cfg.validate();
  if (x.shape().size() != 3 || x.shape()[2] != cfg.d) {
    throw ShapeError("attention expects [N,T," + std::to_string(cfg.d) + "], got " + shape_str(x.shape()));
  }
}

// q, k, v: [N, H, T, hd]; returns attention output and weights.
template <class T>
AttentionOutput<T> attend(Var<T> q, Var<T> k, Var<T> v, const LayerParams<T>& p, std::size_t batch,
                          std::size_t tokens, const AttentionConfig& cfg) {
  const std::size_t h = cfg.heads;
  const std::size_t hd = cfg.head_dim();
  Tape<T>& t = *q.tape;
  auto qb = reshape(q, {batch * h, tokens, hd});
  auto kb = reshape(k, {batch * h, tokens, hd});
  auto vb = reshape(v, {batch * h, tokens, hd});
  auto scores = scale(matmul(qb, kb, false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  auto w = softmax(scores, -1);
  auto ctx = matmul(w, vb);  // [N*H, T, hd]
  auto merged = reshape(permute(reshape(ctx, {batch, h, tokens, hd}), {0, 2, 1, 3}), {batch * tokens, h * hd});
  auto out = add(matmul(merged, p.on(t, "wo")), p.on(t, "bo"));
  return {reshape(out, {batch, tokens, cfg.d}), reshape(w, {batch, h, tokens, tokens})};
}

}  // namespace detail

// Standard multi-head attention; every head has its own key/value projection
// (the parameter block must have been built with kv_groups == heads).
template <class T>
AttentionOutput<T> multi_head_attention(Var<T> x, const LayerParams<T>& p, const AttentionConfig& cfg) {
  detail::check_tokens(x, cfg);
  if (cfg.kv_groups != cfg.heads) throw ValidationError("multi_head_attention requires kv_groups == heads");
  Tape<T>& t = *x.tape;
  const std::size_t n = x.shape()[0];
  const std::size_t tokens = x.shape()[1];
  const std::size_t hd = cfg.head_dim();
  auto x2 = reshape(x, {n * tokens, cfg.d});
  auto q = detail::split_heads(add(matmul(x2, p.on(t, "wq")), p.on(t, "bq")), n, tokens, cfg.heads, hd);
  auto k = detail::split_heads(add(matmul(x2, p.on(t, "wk")), p.on(t, "bk")), n, tokens, cfg.heads, hd);
  auto v = detail::split_heads(add(matmul(x2, p.on(t, "wv")), p.on(t, "bv")), n, tokens, cfg.heads, hd);
  return detail::attend(q, k, v, p, n, tokens, cfg);
}

// Grouped-query attention: H query heads share G key/value heads.
template <class T>
AttentionOutput<T> grouped_query_attention(Var<T> x, const LayerParams<T>& p, const AttentionConfig& cfg) {
  detail::check_tokens(x, cfg);
  Tape<T>& t = *x.tape;
  const std::size_t n = x.shape()[0];
  const std::size_t tokens = x.shape()[1];
  const std::size_t hd = cfg.head_dim();
  auto x2 = reshape(x, {n * tokens, cfg.d});
  auto q = detail::split_heads(add(matmul(x2, p.on(t, "wq")), p.on(t, "bq")), n, tokens, cfg.heads, hd);
  auto k = detail::split_heads(add(matmul(x2, p.on(t, "wk")), p.on(t, "bk")), n, tokens, cfg.kv_groups, hd);
  auto v = detail::split_heads(add(matmul(x2, p.on(t, "wv")), p.on(t, "bv")), n, tokens, cfg.kv_groups, hd);
  std::vector<std::size_t> groups(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) groups[h] = cfg.group_of(h);
  k = index_select(k, 1, groups);
  v = index_select(v, 1, groups);
  return detail::attend(q, k, v, p, n, tokens, cfg);
}

// ---------------------------------------------------------------------------
// Spatial attention

template <class T>
LayerParams<T> make_spatial_attention_params(std::string name, std::size_t kernel_size, RngState& rng) {
  if (kernel_size % 2 == 0) throw ValidationError("spatial attention kernel size must be odd");
  return make_conv2d_params<T>(std::move(name), kernel_size, kernel_size, 2, 1, rng, true);
}

template <class T>
struct SpatialAttentionOutput {
  Var<T> output;  // x * gate
  Var<T> gate;    // [N,H,W,1] in (0,1)
};

// gate = sigmoid(conv([mean_c(x), max_c(x)])), output = x * gate broadcast over channels.
template <class T>
SpatialAttentionOutput<T> spatial_attention(Var<T> x, const LayerParams<T>& p) {
  if (x.shape().size() != 4) throw ShapeError("spatial_attention input must be NHWC");
  auto avg = mean(x, {3}, true);
  auto mx = max(x, {3}, true);
  auto pooled = concat<T>({avg, mx}, 3);
  auto gate = sigmoid(conv2d(pooled, p, 1, Padding::same));
  return {mul(x, gate), gate};
}

// ---------------------------------------------------------------------------
// Token bridge between feature maps and attention layers

template <class T>
Var<T> tokens_from_feature_map(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("tokens_from_feature_map expects NHWC");
  return reshape(x, {s[0], s[1] * s[2], s[3]});
}

template <class T>
Var<T> feature_map_from_tokens(Var<T> tokens, std::size_t height, std::size_t width) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != height * width) {
    throw ShapeError("cannot restore " + shape_str(s) + " to a " + std::to_string(height) + "x" + std::to_string(width) +
                     " feature map");
  }
  return reshape(tokens, {s[0], height, width, s[2]});
}

template <class T>
Tensor<T> tokens_from_feature_map(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("tokens_from_feature_map expects NHWC");
  return x.reshaped({s[0], s[1] * s[2], s[3]});
}

template <class T>
Tensor<T> feature_map_from_tokens(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != height * width) {
    throw ShapeError("cannot restore " + shape_str(s) + " to a " + std::to_string(height) + "x" + std::to_string(width) +
                     " feature map");
  }
  return tokens.reshaped({s[0], height, width, s[2]});
}

}  // namespace amri
