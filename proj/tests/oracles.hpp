#pragma once

// Loop-level reference implementations shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "amri/attention.hpp"
#include "amri/layers.hpp"
#include "amri/rng.hpp"

namespace amri::oracle {

// Brute-force cross-correlation, independent of im2col/GEMM.
inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                           std::size_t stride, Padding pad) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  std::size_t oh, ow;
  long pt = 0, pl = 0;
  if (pad == Padding::same) {
    oh = (h + stride - 1) / stride;
    ow = (w + stride - 1) / stride;
    pt = std::max<long>(0, static_cast<long>((oh - 1) * stride + kh) - static_cast<long>(h)) / 2;
    pl = std::max<long>(0, static_cast<long>((ow - 1) * stride + kw) - static_cast<long>(w)) / 2;
  } else {
    oh = (h - kh) / stride + 1;
    ow = (w - kw) / stride + 1;
  }
  Tensor<double> out({n, oh, ow, cout});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          double s = bias ? (*bias)[co] : 0.0;
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - pt;
              const long ix = static_cast<long>(ox * stride + kx) - pl;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                s += x.at({b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), ci}) * k.at({ky, kx, ci, co});
              }
            }
          out.at({b, oy, ox, co}) = s;
        }
  return out;
}

inline Tensor<double> integer_tensor(Shape s, RngState& rng, int range = 8) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<double>(static_cast<long>(rng.below(2 * range + 1)) - range);
  return t;
}

// Plain scalar loops over heads, tokens and features.
inline Tensor<double> attention_oracle(const Tensor<double>& x, const LayerParams<double>& p, const AttentionConfig& cfg) {
  const std::size_t n = x.dim(0), t = x.dim(1), d = cfg.d, h = cfg.heads, hd = cfg.head_dim();
  const auto& wq = p.at("wq").value;
  const auto& wk = p.at("wk").value;
  const auto& wv = p.at("wv").value;
  const auto& wo = p.at("wo").value;
  const auto& bq = p.at("bq").value;
  const auto& bk = p.at("bk").value;
  const auto& bv = p.at("bv").value;
  const auto& bo = p.at("bo").value;
  auto proj = [&](const Tensor<double>& w, const Tensor<double>& b, std::size_t b_i, std::size_t tok, std::size_t col) {
    double s = b[col];
    for (std::size_t i = 0; i < d; ++i) s += x.at({b_i, tok, i}) * w.at({i, col});
    return s;
  };
  Tensor<double> out({n, t, d});
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> concat(t * h * hd, 0.0);
    for (std::size_t head = 0; head < h; ++head) {
      const std::size_t g = head * cfg.kv_groups / h;
      for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> score(t);
        double mx = -1e300;
        for (std::size_t j = 0; j < t; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += proj(wq, bq, b, i, head * hd + e) * proj(wk, bk, b, j, g * hd + e);
          score[j] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (auto& s : score) z += (s = std::exp(s - mx));
        for (std::size_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < t; ++j) acc += score[j] / z * proj(wv, bv, b, j, g * hd + e);
          concat[i * h * hd + head * hd + e] = acc;
        }
      }
    }
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double s = bo[c];
        for (std::size_t e = 0; e < h * hd; ++e) s += concat[i * h * hd + e] * wo.at({e, c});
        out.at({b, i, c}) = s;
      }
  }
  return out;
}

struct Labels {
  std::vector<std::size_t> truth, pred;
  std::size_t k;
};

inline Labels random_labels(RngState& rng) {
  Labels l;
  l.k = 2 + rng.below(5);
  const std::size_t n = 1 + rng.below(60);
  for (std::size_t i = 0; i < n; ++i) {
    l.truth.push_back(rng.below(l.k));
    // Bias toward correct predictions so rates spread over [0,1].
    l.pred.push_back(rng.bernoulli(0.5) ? l.truth.back() : rng.below(l.k));
  }
  return l;
}

// Rates straight from the label lists, without the confusion matrix.
struct Oracle {
  double acc, p_micro, r_micro, f_micro, p_macro, r_macro, f_macro;
  std::vector<bool> flags;
};

inline Oracle brute(const Labels& l) {
  Oracle o{};
  double tp_all = 0, fp_all = 0, fn_all = 0, correct = 0;
  for (std::size_t c = 0; c < l.k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < l.truth.size(); ++i) {
      const bool t = l.truth[i] == c, p = l.pred[i] == c;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    const bool flag = tp + fp == 0 || tp + fn == 0;
    const double prec = tp + fp == 0 ? 0 : tp / (tp + fp);
    const double rec = tp + fn == 0 ? 0 : tp / (tp + fn);
    o.p_macro += prec / l.k;
    o.r_macro += rec / l.k;
    o.f_macro += (prec + rec == 0 ? 0 : 2 * prec * rec / (prec + rec)) / l.k;
    o.flags.push_back(flag);
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  for (std::size_t i = 0; i < l.truth.size(); ++i) correct += l.truth[i] == l.pred[i];
  o.acc = correct / l.truth.size();
  o.p_micro = tp_all / (tp_all + fp_all);
  o.r_micro = tp_all / (tp_all + fn_all);
  o.f_micro = o.p_micro + o.r_micro == 0 ? 0 : 2 * o.p_micro * o.r_micro / (o.p_micro + o.r_micro);
  return o;
}

// Probability that a random positive outscores a random negative, ties count half.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

}  // namespace amri::oracle
