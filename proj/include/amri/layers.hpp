#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "amri/autodiff.hpp"
#include "amri/rng.hpp"

namespace amri {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class Activation { none, relu, softmax };

// Named tensors of one architecture block. Full parameter names are "<layer>/<key>".
template <class T>
struct LayerParams {
  std::string name;
  std::map<std::string, Parameter<T>> tensors;

  Parameter<T>& at(const std::string& key) {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw StateError("layer " + name + " has no tensor '" + key + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& key) const {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw StateError("layer " + name + " has no tensor '" + key + "'");
    return it->second;
  }
  bool has(const std::string& key) const { return tensors.count(key) != 0; }
  std::string full_name(const std::string& key) const { return name + "/" + key; }

  // Puts a tensor on the tape under its full name.
  Var<T> on(Tape<T>& tape, const std::string& key) const { return tape.parameter(full_name(key), at(key)); }
};

// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, RngState& rng) {
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <class T>
LayerParams<T> make_conv2d_params(std::string name, std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                                  RngState& rng, bool bias = true) {
  LayerParams<T> p{std::move(name), {}};
  p.tensors["kernel"] = {he_uniform<T>({kh, kw, cin, cout}, kh * kw * cin, rng), true};
  if (bias) p.tensors["bias"] = {Tensor<T>({cout}), true};
  return p;
}

template <class T>
LayerParams<T> make_dense_params(std::string name, std::size_t in, std::size_t out, RngState& rng) {
  LayerParams<T> p{std::move(name), {}};
  p.tensors["kernel"] = {he_uniform<T>({in, out}, in, rng), true};
  p.tensors["bias"] = {Tensor<T>({out}), true};
  return p;
}

template <class T>
LayerParams<T> make_batch_norm_params(std::string name, std::size_t channels) {
  LayerParams<T> p{std::move(name), {}};
  p.tensors["gamma"] = {Tensor<T>({channels}, T{1}), true};
  p.tensors["beta"] = {Tensor<T>({channels}), true};
  p.tensors["moving_mean"] = {Tensor<T>({channels}), false};
  p.tensors["moving_var"] = {Tensor<T>({channels}, T{1}), false};
  // number of batches folded into the moving statistics
  p.tensors["moving_count"] = {Tensor<T>({1}), false};
  return p;
}

template <class T>
LayerParams<T> make_layer_norm_params(std::string name, std::size_t d) {
  LayerParams<T> p{std::move(name), {}};
  p.tensors["gamma"] = {Tensor<T>({d}, T{1}), true};
  p.tensors["beta"] = {Tensor<T>({d}), true};
  return p;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t n, h, w, cin, kh, kw, cout, stride, out_h, out_w, pad_top, pad_left;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride, Padding padding) {
  if (x.size() != 4) throw ShapeError("conv2d input must be NHWC, got " + shape_str(x));
  if (k.size() != 4) throw ShapeError("conv2d kernel must be [kh,kw,cin,cout], got " + shape_str(k));
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (k[2] != x[3]) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x[3]) + ", kernel expects " +
                     std::to_string(k[2]));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[1], k[3], stride, 0, 0, 0, 0};
  if (padding == Padding::same) {
    g.out_h = (g.h + stride - 1) / stride;
    g.out_w = (g.w + stride - 1) / stride;
    const long ph = static_cast<long>((g.out_h - 1) * stride + g.kh) - static_cast<long>(g.h);
    const long pw = static_cast<long>((g.out_w - 1) * stride + g.kw) - static_cast<long>(g.w);
    g.pad_top = static_cast<std::size_t>(std::max(ph, 0L)) / 2;
    g.pad_left = static_cast<std::size_t>(std::max(pw, 0L)) / 2;
  } else {
    if (g.h < g.kh || g.w < g.kw) throw ShapeError("conv2d valid padding produces a zero-size output");
    g.out_h = (g.h - g.kh) / stride + 1;
    g.out_w = (g.w - g.kw) / stride + 1;
  }
  return g;
}

namespace detail {

// cols[(oy*out_w+ox), (ky*kw+kx)*cin + c] = x[n, iy, ix, c] (zero outside the image)
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t row_len = g.kh * g.kw * g.cin;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* row = cols + (oy * g.out_w + ox) * row_len;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
          T* dst = row + (ky * g.kw + kx) * g.cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
            std::fill_n(dst, g.cin, T{0});
          } else {
            std::copy_n(x + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin, g.cin, dst);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t row_len = g.kh * g.kw * g.cin;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* row = cols + (oy * g.out_w + ox) * row_len;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
          if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
          const T* src = row + (ky * g.kw + kx) * g.cin;
          T* dst = dx + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation over NHWC input with a [kh,kw,cin,cout] kernel.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, std::size_t stride = 1,
              Padding padding = Padding::same) {
  detail::same_tape(x, kernel);
  const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  if (bias) {
    detail::same_tape(x, *bias);
    if (bias->shape() != Shape{g.cout}) throw ShapeError("conv2d bias must have shape [cout]");
  }
  const std::size_t rows = g.out_h * g.out_w;
  const std::size_t row_len = g.kh * g.kw * g.cin;
  Tensor<T> out({g.n, g.out_h, g.out_w, g.cout});
  std::vector<T> cols(rows * row_len);
  const T* xp = x.value().ptr();
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(xp + n * g.h * g.w * g.cin, g, cols.data());
    T* op = out.ptr() + n * rows * g.cout;
    gemm(cols.data(), kernel.value().ptr(), op, rows, g.cout, row_len, false, false, false);
    if (bias) {
      const T* bp = bias->value().ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < g.cout; ++c) op[r * g.cout + c] += bp[c];
      }
    }
  }
  std::vector<std::size_t> inputs{x.id, kernel.id};
  if (bias) inputs.push_back(bias->id);
  const std::optional<std::size_t> bias_id = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return x.tape->record(OpKind::conv2d, std::move(inputs), std::move(out), [x, kernel, bias_id, g](Tape<T>& t, const Tensor<T>& grad) {
    const std::size_t rows = g.out_h * g.out_w;
    const std::size_t row_len = g.kh * g.kw * g.cin;
    const bool need_x = t.requires_grad(x.id);
    const bool need_k = t.requires_grad(kernel.id);
    std::vector<T> cols(rows * row_len);
    Tensor<T> gk(kernel.value().shape());
    Tensor<T> gx;
    if (need_x) gx = Tensor<T>(x.value().shape());
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* gp = grad.ptr() + n * rows * g.cout;
      if (need_k) {
        detail::im2col(x.value().ptr() + n * g.h * g.w * g.cin, g, cols.data());
        gemm(cols.data(), gp, gk.ptr(), row_len, g.cout, rows, true, false, true);
      }
      if (need_x) {
        gemm(gp, kernel.value().ptr(), cols.data(), rows, row_len, g.cout, false, true, false);
        detail::col2im_add(cols.data(), g, gx.ptr() + n * g.h * g.w * g.cin);
      }
    }
    if (need_k) t.accumulate(kernel.id, std::move(gk));
    if (need_x) t.accumulate(x.id, std::move(gx));
    if (bias_id && t.requires_grad(*bias_id)) {
      Tensor<T> gb({g.cout});
      for (std::size_t i = 0; i < g.n * rows; ++i) {
        for (std::size_t c = 0; c < g.cout; ++c) gb[c] += grad[i * g.cout + c];
      }
      t.accumulate(*bias_id, std::move(gb));
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling

template <class T>
Var<T> maxpool2d(Var<T> x, std::size_t window = 2, std::size_t stride = 2) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("maxpool2d input must be NHWC");
  if (window < 1 || stride < 1) throw ShapeError("maxpool2d window and stride must be >= 1");
  if (window > s[1] || window > s[2]) throw ShapeError("maxpool2d window exceeds spatial dimensions");
  const std::size_t n = s[0], h = s[1], w = s[2], c = s[3];
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;
  Tensor<T> out({n, oh, ow, c});
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t o = ((b * oh + oy) * ow + ox) * c + ch;
          std::size_t best = ((b * h + oy * stride) * w + ox * stride) * c + ch;
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
              if (xv[i] > xv[best]) best = i;  // strict: first maximum wins ties
            }
          }
          out[o] = xv[best];
          argmax[o] = best;
        }
      }
    }
  }
  return x.tape->record(OpKind::maxpool2d, {x.id}, std::move(out), [x, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gi(t.value(x.id).shape());
    for (std::size_t o = 0; o < argmax.size(); ++o) gi[argmax[o]] += g[o];
    t.accumulate(x.id, std::move(gi));
  });
}

// [N,H,W,C] -> [N,C], spatial mean per channel.
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  if (x.shape().size() != 4) throw ShapeError("global_avg_pool input must be NHWC");
  return mean(x, {1, 2});
}

// ---------------------------------------------------------------------------
// Dense

template <class T>
Var<T> dense(Var<T> x, Var<T> weights, Var<T> bias, Activation act = Activation::none) {
  if (x.shape().size() != 2 || weights.shape().size() != 2 || x.shape()[1] != weights.shape()[0]) {
    throw ShapeError("dense: cannot apply weights " + shape_str(weights.shape()) + " to input " + shape_str(x.shape()));
  }
  if (bias.shape() != Shape{weights.shape()[1]}) throw ShapeError("dense: bias must have shape [units]");
  auto y = add(matmul(x, weights), bias);
  switch (act) {
    case Activation::relu: return relu(y);
    case Activation::softmax: return softmax(y, -1);
    case Activation::none: break;
  }
  return y;
}

template <class T>
Var<T> dense(Var<T> x, const LayerParams<T>& p, Activation act = Activation::none) {
  Tape<T>& t = *x.tape;
  return dense(x, p.on(t, "kernel"), p.on(t, "bias"), act);
}

// ---------------------------------------------------------------------------
// Normalization

// Mutable views of the moving statistics kept beside a batch-norm layer.
template <class T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  Tensor<T>* count = nullptr;
};

namespace detail {

// Shared backward for "normalize over groups then affine" with per-feature gamma.
// groups x features layout: stats per feature (batch norm) or per group (layer norm).
template <class T>
struct NormSaved {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

}  // namespace detail

// Normalizes over every axis but the last (channel) one.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T> stats, Mode mode, T eps = T(1e-5),
                  T momentum = T(0.9)) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& s = x.shape();
  const std::size_t c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("batch_norm: gamma/beta must be [C]");
  const std::size_t m = x.value().size() / c;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();

  std::vector<T> mu(c, T{0});
  std::vector<T> var(c, T{0});
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < c; ++k) mu[k] += xv[i * c + k];
    }
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        const T d = xv[i * c + k] - mu[k];
        var[k] += d * d;
      }
    }
    for (auto& v : var) v /= static_cast<T>(m);
    if (stats.mean && stats.var && stats.count) {
      for (std::size_t k = 0; k < c; ++k) {
        (*stats.mean)[k] = momentum * (*stats.mean)[k] + (T{1} - momentum) * mu[k];
        (*stats.var)[k] = momentum * (*stats.var)[k] + (T{1} - momentum) * var[k];
      }
      (*stats.count)[0] += T{1};
    }
  } else {
    if (!stats.mean || !stats.var || !stats.count || (*stats.count)[0] <= T{0}) {
      throw StateError("batch_norm: inference requested before any running statistics were recorded");
    }
    for (std::size_t k = 0; k < c; ++k) {
      mu[k] = (*stats.mean)[k];
      var[k] = (*stats.var)[k];
    }
  }
  detail::NormSaved<T> saved;
  saved.xhat.resize(xv.size());
  saved.inv_std.resize(c);
  for (std::size_t k = 0; k < c; ++k) saved.inv_std[k] = T{1} / std::sqrt(var[k] + eps);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t p = i * c + k;
      saved.xhat[p] = (xv[p] - mu[k]) * saved.inv_std[k];
      out[p] = gv[k] * saved.xhat[p] + bv[k];
    }
  }
  return x.tape->record(OpKind::batch_norm, {x.id, gamma.id, beta.id}, std::move(out),
                        [x, gamma, beta, mode, m, c, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                          const auto& gv = t.value(gamma.id);
                          std::vector<T> sum_g(c, T{0});
                          std::vector<T> sum_gx(c, T{0});
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t k = 0; k < c; ++k) {
                              sum_g[k] += g[i * c + k];
                              sum_gx[k] += g[i * c + k] * saved.xhat[i * c + k];
                            }
                          }
                          if (t.requires_grad(gamma.id)) t.accumulate(gamma.id, Tensor<T>({c}, sum_gx));
                          if (t.requires_grad(beta.id)) t.accumulate(beta.id, Tensor<T>({c}, sum_g));
                          if (!t.requires_grad(x.id)) return;
                          Tensor<T> gx(t.value(x.id).shape());
                          const T inv_m = T{1} / static_cast<T>(m);
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t k = 0; k < c; ++k) {
                              const std::size_t p = i * c + k;
                              if (mode == Mode::train) {
                                gx[p] = gv[k] * saved.inv_std[k] * inv_m *
                                        (static_cast<T>(m) * g[p] - sum_g[k] - saved.xhat[p] * sum_gx[k]);
                              } else {
                                gx[p] = g[p] * gv[k] * saved.inv_std[k];
                              }
                            }
                          }
                          t.accumulate(x.id, std::move(gx));
                        });
}

template <class T>
Var<T> batch_norm(Var<T> x, LayerParams<T>& p, Mode mode) {
  Tape<T>& t = *x.tape;
  RunningStats<T> stats{&p.at("moving_mean").value, &p.at("moving_var").value, &p.at("moving_count").value};
  return batch_norm(x, p.on(t, "gamma"), p.on(t, "beta"), stats, mode);
}

// Normalizes over the last axis.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layer_norm: gamma/beta must be [d]");
  const std::size_t rows = x.value().size() / d;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  detail::NormSaved<T> saved;
  saved.xhat.resize(xv.size());
  saved.inv_std.resize(rows);
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.ptr() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    saved.inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mu) * inv;
      saved.xhat[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  return x.tape->record(OpKind::layer_norm, {x.id, gamma.id, beta.id}, std::move(out),
                        [x, gamma, beta, rows, d, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                          const auto& gv = t.value(gamma.id);
                          Tensor<T> gg({d});
                          Tensor<T> gb({d});
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < d; ++j) {
                              gg[j] += g[r * d + j] * saved.xhat[r * d + j];
                              gb[j] += g[r * d + j];
                            }
                          }
                          if (t.requires_grad(gamma.id)) t.accumulate(gamma.id, std::move(gg));
                          if (t.requires_grad(beta.id)) t.accumulate(beta.id, std::move(gb));
                          if (!t.requires_grad(x.id)) return;
                          Tensor<T> gx(t.value(x.id).shape());
                          const T inv_d = T{1} / static_cast<T>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T sum_dxh = 0;
                            T sum_dxh_xh = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              const T dxh = g[r * d + j] * gv[j];
                              sum_dxh += dxh;
                              sum_dxh_xh += dxh * saved.xhat[r * d + j];
                            }
                            for (std::size_t j = 0; j < d; ++j) {
                              const T dxh = g[r * d + j] * gv[j];
                              gx[r * d + j] = saved.inv_std[r] * inv_d *
                                              (static_cast<T>(d) * dxh - sum_dxh - saved.xhat[r * d + j] * sum_dxh_xh);
                            }
                          }
                          t.accumulate(x.id, std::move(gx));
                        });
}

template <class T>
Var<T> layer_norm(Var<T> x, const LayerParams<T>& p) {
  Tape<T>& t = *x.tape;
  return layer_norm(x, p.on(t, "gamma"), p.on(t, "beta"));
}

// ---------------------------------------------------------------------------
// Dropout

// Inverted dropout: survivors are scaled by 1/(1-rate) so the expectation is unchanged.
template <class T>
Var<T> dropout(Var<T> x, double rate, Mode mode, RngState& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must lie in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  Tensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : mask.data()) v = rng.bernoulli(rate) ? T{0} : keep_scale;
  return mul(x, x.tape->constant(std::move(mask)));
}

// Convenience wrapper used by the model: conv + optional bias from a parameter block.
template <class T>
Var<T> conv2d(Var<T> x, const LayerParams<T>& p, std::size_t stride = 1, Padding padding = Padding::same) {
  Tape<T>& t = *x.tape;
  std::optional<Var<T>> b;
  if (p.has("bias")) b = p.on(t, "bias");
  return conv2d(x, p.on(t, "kernel"), b, stride, padding);
}

}  // namespace amri
