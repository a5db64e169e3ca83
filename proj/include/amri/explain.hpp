#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "amri/autodiff.hpp"
#include "amri/data.hpp"
#include "amri/error.hpp"
#include "amri/image_io.hpp"
#include "amri/model.hpp"

namespace amri {

enum class CamMethod { gradcam, scorecam, faster_scorecam, xgradcam };

inline const char* cam_method_name(CamMethod m) {
  switch (m) {
    case CamMethod::gradcam: return "gradcam";
    case CamMethod::scorecam: return "scorecam";
    case CamMethod::faster_scorecam: return "faster-scorecam";
    case CamMethod::xgradcam: return "xgradcam";
  }
  return "?";
}

inline CamMethod parse_cam_method(const std::string& s) {
  for (auto m : {CamMethod::gradcam, CamMethod::scorecam, CamMethod::faster_scorecam, CamMethod::xgradcam}) {
    if (s == cam_method_name(m)) return m;
  }
  if (s == "faster_scorecam") return CamMethod::faster_scorecam;
  throw ValidationError("unknown CAM method: " + s);
}

// Any network that maps a [1,H,W,Cin] input to [1,K] logits while exposing one
// spatial activation [1,h,w,C]. `forwards` counts every pass.
template <class T>
struct CamNetwork {
  std::function<std::pair<Var<T>, Var<T>>(Var<T>)> fn;
  std::string capture_layer;
  std::size_t forwards = 0;

  std::pair<Var<T>, Var<T>> operator()(Var<T> x) {
    ++forwards;
    auto r = fn(x);
    if (r.second.shape().size() != 4 || r.second.shape()[0] != 1) {
      throw ValidationError("capture layer " + capture_layer + " is not a spatial feature map: " +
                            shape_str(r.second.shape()));
    }
    if (r.first.shape().size() != 2 || r.first.shape()[0] != 1) throw ShapeError("CAM network must return [1,K] logits");
    return r;
  }
};

// Default capture point is the multi-residual block output.
template <class T>
CamNetwork<T> cam_network(Model<T>& model, const std::string& capture = "multi_residual_out") {
  auto pts = model.capture_points();
  if (std::find(pts.begin(), pts.end(), capture) == pts.end()) throw ValidationError("unknown capture layer: " + capture);
  CamNetwork<T> net;
  net.capture_layer = capture;
  net.fn = [&model, capture](Var<T> x) {
    auto r = model.forward(x, Mode::infer, RngState{}, capture);
    return std::make_pair(r.logits, *r.captured);
  };
  return net;
}

struct CamOptions {
  CamMethod method = CamMethod::gradcam;
  std::optional<std::size_t> target;  // default: predicted class
  std::size_t top_k = 10;              // faster-scorecam
  double eta = 0.0;                    // xgradcam
  bool canonical = false;              // xgradcam with activation-weighted gradients
};

struct Heatmap {
  CamMethod method = CamMethod::gradcam;
  std::size_t target_class = 0;
  Tensor<float> values;               // [H,W] in [0,1]
  Tensor<double> raw;                 // [h,w] at capture resolution, >= 0
  std::vector<std::size_t> channels;  // channels that received a weight
  std::vector<double> weights;        // alpha or omega per entry of `channels`
  std::vector<double> scores;         // masked class scores (score-based methods)
  std::size_t forward_passes = 0;
  double raw_min = 0, raw_max = 0;
};

namespace detail {

// Channel k of a [1,h,w,C] activation as a float [h,w,1] image.
template <class T>
Tensor<float> channel_image(const Tensor<T>& a, std::size_t k) {
  const std::size_t h = a.dim(1), w = a.dim(2), c = a.dim(3);
  Tensor<float> out({h, w, 1});
  for (std::size_t i = 0; i < h * w; ++i) out[i] = static_cast<float>(a[i * c + k]);
  return out;
}

// Min-max to [0,1]. All-zero stays zero; a positive constant map becomes all ones.
inline Tensor<float> minmax(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  if (t.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const double mn = *lo, mx = *hi;
  if (mx - mn <= 0.0) {
    out.fill(mx > 0.0 ? 1.0f : 0.0f);
    return out;
  }
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>((t[i] - mn) / (mx - mn));
  return out;
}

// Upsample a raw [h,w] map to [H,W] and normalize.
inline Tensor<float> finalize_map(const Tensor<double>& raw, std::size_t H, std::size_t W) {
  Tensor<float> img({raw.dim(0), raw.dim(1), 1});
  for (std::size_t i = 0; i < raw.size(); ++i) img[i] = static_cast<float>(raw[i]);
  return minmax(resize_bilinear(img, H, W)).reshaped({H, W});
}

template <class T>
std::size_t argmax_row(const Tensor<T>& logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

inline std::size_t check_target(std::optional<std::size_t> target, std::size_t predicted, std::size_t k) {
  const std::size_t c = target.value_or(predicted);
  if (c >= k) throw ValidationError("target class " + std::to_string(c) + " out of range [0," + std::to_string(k) + ")");
  return c;
}

template <class T>
void check_input(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("CAM input must be [1,H,W,C], got " + shape_str(x.shape()));
}

// ReLU(sum_k w_k A_k) over the listed channels, summed in list order.
template <class T>
Tensor<double> weighted_sum(const Tensor<T>& a, const std::vector<std::size_t>& channels, const std::vector<double>& w) {
  const std::size_t h = a.dim(1), wd = a.dim(2), c = a.dim(3);
  Tensor<double> raw({h, wd});
  for (std::size_t i = 0; i < h * wd; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < channels.size(); ++j) s += w[j] * static_cast<double>(a[i * c + channels[j]]);
    raw[i] = std::max(s, 0.0);
  }
  return raw;
}

inline void finish(Heatmap& hm, std::size_t H, std::size_t W) {
  hm.raw_min = *std::min_element(hm.raw.data().begin(), hm.raw.data().end());
  hm.raw_max = *std::max_element(hm.raw.data().begin(), hm.raw.data().end());
  hm.values = finalize_map(hm.raw, H, W);
}

struct GradPass {
  std::size_t target;
  std::vector<double> alpha;            // spatial mean of the gradient per channel
  std::vector<double> weighted_alpha;   // sum_ij g*A / sum_ij A per channel
};

template <class T>
std::pair<GradPass, Tensor<T>> gradient_pass(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target) {
  check_input(x);
  Tape<T> tape(true);
  // Watching the input keeps a gradient path even when every parameter is frozen.
  auto [logits, act] = net(tape.watch(x));
  const std::size_t c = check_target(target, argmax_row(logits.value()), logits.shape()[1]);
  tape.backward(sum(slice(logits, 1, c, 1)));
  const Tensor<T>* g = tape.grad(act);
  Tensor<T> a = act.value();
  const std::size_t hw = a.dim(1) * a.dim(2), ch = a.dim(3);
  Tensor<T> grad = g ? *g : Tensor<T>(a.shape());
  if (!g && !tape.requires_grad(act.id)) throw StateError("capture layer " + net.capture_layer + " has no gradient path");
  GradPass p{c, std::vector<double>(ch, 0.0), std::vector<double>(ch, 0.0)};
  for (std::size_t k = 0; k < ch; ++k) {
    double gs = 0, gas = 0, as = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double gi = grad[i * ch + k], ai = a[i * ch + k];
      gs += gi;
      gas += gi * ai;
      as += ai;
    }
    p.alpha[k] = gs / static_cast<double>(hw);
    p.weighted_alpha[k] = as != 0.0 ? gas / as : 0.0;
  }
  return {std::move(p), std::move(a)};
}

template <class T>
Heatmap score_cam_channels(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target,
                           std::optional<std::size_t> top_k, CamMethod method) {
  check_input(x);
  const std::size_t start = net.forwards;
  const std::size_t H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  Tensor<T> a;
  std::size_t c = 0;
  {
    Tape<T> tape(false);
    auto [logits, act] = net(tape.constant(x));
    c = check_target(target, argmax_row(logits.value()), logits.shape()[1]);
    a = act.value();
  }
  const std::size_t hw = a.dim(1) * a.dim(2), ch = a.dim(3);
  std::vector<std::size_t> channels(ch);
  for (std::size_t k = 0; k < ch; ++k) channels[k] = k;
  if (top_k) {
    if (*top_k < 1 || *top_k > ch) {
      throw ValidationError("top-K must be in [1," + std::to_string(ch) + "], got " + std::to_string(*top_k));
    }
    std::vector<double> var(ch);
    for (std::size_t k = 0; k < ch; ++k) {
      double m = 0, m2 = 0;
      for (std::size_t i = 0; i < hw; ++i) m += static_cast<double>(a[i * ch + k]);
      m /= static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) m2 += (static_cast<double>(a[i * ch + k]) - m) * (static_cast<double>(a[i * ch + k]) - m);
      var[k] = m2 / static_cast<double>(hw);
    }
    std::stable_sort(channels.begin(), channels.end(), [&](std::size_t p, std::size_t q) { return var[p] > var[q]; });
    channels.resize(*top_k);
    // Channel order keeps the reduction identical to the full method when K = C.
    std::sort(channels.begin(), channels.end());
  }
  Heatmap hm;
  hm.method = method;
  hm.target_class = c;
  hm.channels = channels;
  for (std::size_t k : channels) {
    auto mask = minmax(resize_bilinear(channel_image(a, k), H, W));
    Tensor<T> masked(x.shape());
    for (std::size_t i = 0; i < H * W; ++i) {
      for (std::size_t j = 0; j < cin; ++j) masked[i * cin + j] = x[i * cin + j] * static_cast<T>(mask[i]);
    }
    Tape<T> tape(false);
    auto logits = net(tape.constant(masked)).first;
    hm.scores.push_back(static_cast<double>(logits.value()[c]));
  }
  const double top = *std::max_element(hm.scores.begin(), hm.scores.end());
  double z = 0;
  for (double f : hm.scores) {
    hm.weights.push_back(std::exp(f - top));
    z += hm.weights.back();
  }
  for (auto& w : hm.weights) w /= z;
  hm.raw = weighted_sum(a, channels, hm.weights);
  hm.forward_passes = net.forwards - start;
  finish(hm, H, W);
  return hm;
}

}  // namespace detail

// Gradient-weighted activation map for the pre-softmax class score.
template <class T>
Heatmap gradcam(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target = std::nullopt) {
  const std::size_t start = net.forwards;
  auto [p, a] = detail::gradient_pass(net, x, target);
  Heatmap hm;
  hm.method = CamMethod::gradcam;
  hm.target_class = p.target;
  for (std::size_t k = 0; k < p.alpha.size(); ++k) hm.channels.push_back(k);
  hm.weights = p.alpha;
  hm.raw = detail::weighted_sum(a, hm.channels, hm.weights);
  hm.forward_passes = net.forwards - start;
  detail::finish(hm, x.dim(1), x.dim(2));
  return hm;
}

// GradCAM with every gradient term shifted by eta. `canonical` switches to the
// activation-weighted gradient average of the original method.
template <class T>
Heatmap xgradcam(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target = std::nullopt,
                 double eta = 0.0, bool canonical = false) {
  const std::size_t start = net.forwards;
  auto [p, a] = detail::gradient_pass(net, x, target);
  Heatmap hm;
  hm.method = CamMethod::xgradcam;
  hm.target_class = p.target;
  for (std::size_t k = 0; k < p.alpha.size(); ++k) {
    hm.channels.push_back(k);
    hm.weights.push_back((canonical ? p.weighted_alpha[k] : p.alpha[k]) + eta);
  }
  hm.raw = detail::weighted_sum(a, hm.channels, hm.weights);
  hm.forward_passes = net.forwards - start;
  detail::finish(hm, x.dim(1), x.dim(2));
  return hm;
}

// Channels weighted by the softmax of class scores of the input masked by each
// normalized activation map.
template <class T>
Heatmap scorecam(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target = std::nullopt) {
  return detail::score_cam_channels(net, x, target, std::nullopt, CamMethod::scorecam);
}

// Score-CAM restricted to the K channels of highest spatial variance.
template <class T>
Heatmap faster_scorecam(CamNetwork<T>& net, const Tensor<T>& x, std::optional<std::size_t> target = std::nullopt,
                        std::size_t top_k = 10) {
  return detail::score_cam_channels(net, x, target, top_k, CamMethod::faster_scorecam);
}

template <class T>
Heatmap explain(CamNetwork<T>& net, const Tensor<T>& x, const CamOptions& opt) {
  switch (opt.method) {
    case CamMethod::gradcam: return gradcam(net, x, opt.target);
    case CamMethod::scorecam: return scorecam(net, x, opt.target);
    case CamMethod::faster_scorecam: return faster_scorecam(net, x, opt.target, opt.top_k);
    case CamMethod::xgradcam: return xgradcam(net, x, opt.target, opt.eta, opt.canonical);
  }
  throw ValidationError("unknown CAM method");
}

// Piecewise-linear colour table: blue, cyan, green, yellow, red.
inline std::array<double, 3> heat_color(double v) {
  struct Anchor {
    double at;
    std::array<double, 3> rgb;
  };
  static constexpr std::array<Anchor, 5> table{{{0.0, {0, 0, 255}},
                                                {0.35, {0, 255, 255}},
                                                {0.5, {0, 255, 0}},
                                                {0.65, {255, 255, 0}},
                                                {1.0, {255, 0, 0}}}};
  v = std::clamp(v, 0.0, 1.0);
  for (std::size_t i = 1; i < table.size(); ++i) {
    if (v <= table[i].at) {
      const double f = (v - table[i - 1].at) / (table[i].at - table[i - 1].at);
      std::array<double, 3> out{};
      for (int c = 0; c < 3; ++c) out[c] = table[i - 1].rgb[c] + (table[i].rgb[c] - table[i - 1].rgb[c]) * f;
      return out;
    }
  }
  return table.back().rgb;
}

// Blended value before rounding: alpha*colour + (1-alpha)*original, in 0..255.
inline double overlay_value(double heat, std::uint8_t original, std::size_t channel, double alpha) {
  return alpha * heat_color(heat)[channel] + (1.0 - alpha) * static_cast<double>(original);
}

// RGB overlay of a normalized heatmap on an 8-bit image (gray or RGB). The
// heatmap is resized to the image when sizes differ.
inline Image8 render_overlay(const Tensor<float>& heat, const Image8& original, double alpha = 0.4) {
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("overlay alpha must be in [0,1]");
  if (heat.rank() != 2) throw ShapeError("heatmap must be [H,W]");
  if (original.channels != 1 && original.channels != 3) throw ValidationError("overlay needs a gray or RGB image");
  const std::size_t H = original.height, W = original.width;
  Tensor<float> h = resize_bilinear(heat.reshaped({heat.dim(0), heat.dim(1), 1}), H, W);
  Image8 out(W, H, 3);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint8_t o = original.at(y, x, original.channels == 1 ? 0 : c);
        const double v = overlay_value(h[y * W + x], o, c, alpha);
        out.pixels[(y * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

inline Image8 render_overlay(const Tensor<float>& heat, const Tensor<float>& original, double alpha = 0.4) {
  return render_overlay(heat, to_image8(original), alpha);
}

inline nlohmann::json cam_sidecar(const Heatmap& hm, const std::string& capture_layer, const CamOptions& opt) {
  nlohmann::json params = nlohmann::json::object();
  if (hm.method == CamMethod::faster_scorecam) params["top_k"] = opt.top_k;
  if (hm.method == CamMethod::xgradcam) {
    params["eta"] = opt.eta;
    params["canonical"] = opt.canonical;
  }
  return {{"method", cam_method_name(hm.method)},
          {"target_class", hm.target_class},
          {"capture_layer", capture_layer},
          {"params", params},
          {"raw_min", hm.raw_min},
          {"raw_max", hm.raw_max},
          {"forward_passes", hm.forward_passes},
          {"channels", hm.channels},
          {"weights", hm.weights}};
}

}  // namespace amri
