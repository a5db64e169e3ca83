#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "amri/explain.hpp"
#include "amri/gradcheck.hpp"
#include "amri/metrics.hpp"
#include "amri/model.hpp"
#include "amri/training.hpp"
#include "amri/weights.hpp"

namespace amri {

struct CheckOutcome {
  std::string name;
  double measured = 0;
  double tolerance = 0;
  bool pass = false;
  std::string detail;
};

namespace selftest_detail {

template <class T>
Tensor<T> uniform_tensor(Shape shape, RngState& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Distinct values at least `spacing` apart, so max-pool and max-reduce have no ties.
inline Tensor<double> spaced(Shape shape, RngState& rng, double spacing) {
  Tensor<double> t(std::move(shape));
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < idx.size(); ++i) t[i] = (static_cast<double>(idx[i]) - idx.size() / 2.0) * spacing;
  return t;
}

inline std::vector<std::pair<std::string, Parameter<double>*>> params_of(std::initializer_list<LayerParams<double>*> ls) {
  std::vector<std::pair<std::string, Parameter<double>*>> out;
  for (auto* l : ls) {
    for (auto& [k, p] : l->tensors) {
      if (p.trainable) out.emplace_back(l->full_name(k), &p);
    }
  }
  return out;
}

inline void randomize(LayerParams<double>& l, RngState& rng) {
  for (auto& [k, p] : l.tensors) {
    if (p.trainable) p.value = uniform_tensor<double>(p.value.shape(), rng, -0.5, 0.5);
  }
}

inline CheckOutcome outcome(std::string name, const GradCheckResult& r, double tol) {
  return {std::move(name), r.max_rel_error, tol, r.max_rel_error < tol,
          std::to_string(r.coords) + " coords, worst " + r.worst};
}

}  // namespace selftest_detail

// Central-difference checks, f64, step 1e-5: every layer on its input and
// parameters, then the whole reduced model at 16x16 input.
inline std::vector<CheckOutcome> gradient_checks(std::uint64_t seed = 43, double tol = 1e-5,
                                                 std::size_t model_coords_per_tensor = 12) {
  using namespace selftest_detail;
  using F = std::function<Var<double>(Var<double>)>;
  const GradCheckOptions opt{1e-5, 1e-3, 0, seed};
  RngState rng(seed, 0xC4EC);
  std::vector<CheckOutcome> out;

  // sum(op(x) * w) with a fixed random w.
  auto input_check = [&](const std::string& name, const F& op, const Tensor<double>& x) {
    Shape s;
    {
      Tape<double> probe(false);
      s = op(probe.constant(x)).shape();
    }
    auto w = uniform_tensor<double>(s, rng);
    F f = [&](Var<double> v) { return sum(mul(op(v), v.tape->constant(w))); };
    out.push_back(outcome(name + " (input)", finite_difference_check<double>(f, x, opt), tol));
  };
  auto param_check = [&](const std::string& name, const F& op, const Tensor<double>& x,
                         std::vector<std::pair<std::string, Parameter<double>*>> ps) {
    Shape s;
    {
      Tape<double> probe(false);
      s = op(probe.constant(x)).shape();
    }
    auto w = uniform_tensor<double>(s, rng);
    std::function<Var<double>(Tape<double>&)> loss = [&](Tape<double>& t) {
      return sum(mul(op(t.constant(x)), t.constant(w)));
    };
    out.push_back(outcome(name + " (params)", check_parameter_gradients<double>(loss, ps, opt), tol));
  };

  auto x = uniform_tensor<double>({2, 6, 6, 2}, rng);
  auto conv = make_conv2d_params<double>("conv", 3, 3, 2, 3, rng);
  randomize(conv, rng);
  F conv_same = [&](Var<double> v) { return conv2d(v, conv, 1, Padding::same); };
  F conv_s2 = [&](Var<double> v) { return conv2d(v, conv, 2, Padding::valid); };
  input_check("conv2d same", conv_same, x);
  input_check("conv2d stride 2 valid", conv_s2, x);
  param_check("conv2d", conv_same, x, params_of({&conv}));

  input_check("maxpool2d", [](Var<double> v) { return maxpool2d(v, 2, 2); }, spaced({2, 4, 6, 2}, rng, 0.1));
  input_check("global_avg_pool", [](Var<double> v) { return global_avg_pool(v); }, x);

  auto dn = make_dense_params<double>("dense", 2, 3, rng);
  randomize(dn, rng);
  F dense_relu = [&](Var<double> v) { return dense(reshape(v, {72, 2}), dn, Activation::relu); };
  F dense_soft = [&](Var<double> v) { return dense(reshape(v, {72, 2}), dn, Activation::softmax); };
  input_check("dense softmax", dense_soft, x);
  param_check("dense softmax", dense_soft, x, params_of({&dn}));
  input_check("dense relu", dense_relu, x);
  {
    // Shifted grid keeps every input at least 0.05 away from the kink.
    auto xr = spaced({2, 3, 3, 2}, rng, 0.1);
    for (auto& v : xr.data()) v += 0.05;
    input_check("relu", [](Var<double> v) { return relu(v); }, xr);
  }

  auto bn = make_batch_norm_params<double>("bn", 2);
  randomize(bn, rng);
  F bn_train = [&](Var<double> v) { return batch_norm(v, bn, Mode::train); };
  input_check("batch_norm train", bn_train, x);
  param_check("batch_norm train", bn_train, x, params_of({&bn}));
  {
    Tape<double> warm(false);
    batch_norm(warm.constant(uniform_tensor<double>({5, 2}, rng)), bn, Mode::train);
  }
  F bn_infer = [&](Var<double> v) { return batch_norm(v, bn, Mode::infer); };
  input_check("batch_norm infer", bn_infer, x);

  auto ln = make_layer_norm_params<double>("ln", 2);
  randomize(ln, rng);
  F lnf = [&](Var<double> v) { return layer_norm(v, ln); };
  input_check("layer_norm", lnf, x);
  param_check("layer_norm", lnf, x, params_of({&ln}));

  const RngState drop(seed, 3);
  input_check("dropout", [&](Var<double> v) { RngState r = drop; return dropout(v, 0.3, Mode::train, r); }, x);
  input_check("softmax", [](Var<double> v) { return softmax(v, -1); }, x);

  {
    auto y = one_hot<double>({0, 2, 1, 1}, 3);
    auto logits = uniform_tensor<double>({4, 3}, rng);
    F ce = [&](Var<double> v) { return categorical_cross_entropy(softmax(v, -1), v.tape->constant(y)); };
    out.push_back(outcome("softmax cross-entropy (input)", finite_difference_check<double>(ce, logits, opt), tol));
  }

  auto sa = make_spatial_attention_params<double>("sa", 3, rng);
  randomize(sa, rng);
  F saf = [&](Var<double> v) { return spatial_attention(v, sa).output; };
  auto fmap = spaced({1, 5, 5, 3}, rng, 0.05);
  input_check("spatial attention", saf, fmap);
  param_check("spatial attention", saf, fmap, params_of({&sa}));

  AttentionConfig gcfg{8, 4, 2}, mcfg{8, 2, 2};
  auto gp = make_attention_params<double>("gqa", gcfg, rng);
  auto mp = make_attention_params<double>("mha", mcfg, rng);
  randomize(gp, rng);
  randomize(mp, rng);
  auto tokens = uniform_tensor<double>({2, 4, 8}, rng);
  F gq = [&](Var<double> v) { return grouped_query_attention(v, gp, gcfg).output; };
  F mh = [&](Var<double> v) { return multi_head_attention(v, mp, mcfg).output; };
  input_check("grouped-query attention", gq, tokens);
  param_check("grouped-query attention", gq, tokens, params_of({&gp}));
  input_check("multi-head attention", mh, tokens);
  param_check("multi-head attention", mh, tokens, params_of({&mp}));

  {
    ParamStore<double> ps;
    add_multi_residual_params(ps, "mr", 4, 6, rng);
    for (auto& [n, p] : ps.parameters(true)) p->value = uniform_tensor<double>(p->value.shape(), rng, -0.5, 0.5);
    auto xr = uniform_tensor<double>({2, 5, 5, 4}, rng);
    F mr = [&](Var<double> v) { return multi_residual_block(v, ps, "mr", Mode::train); };
    input_check("multi-residual block", mr, xr);
    param_check("multi-residual block", mr, xr, ps.parameters(true));
  }

  {
    auto m = build_model<double>(ModelConfig::reduced(3, 16), RngState(seed));
    // Nonzero head and offsets so every path carries gradient.
    for (auto& [name, p] : m.params.parameters(true)) {
      if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos ||
          name == "classifier/kernel") {
        p->value = uniform_tensor<double>(p->value.shape(), rng, -0.2, 0.2);
      }
    }
    auto xm = uniform_tensor<double>({2, 16, 16, 3}, rng, 0, 1);
    auto y = one_hot<double>({0, 2}, 3);
    std::function<Var<double>(Tape<double>&)> loss = [&](Tape<double>& t) {
      auto r = m.forward(t, xm, Mode::train, RngState(seed, 5));
      return categorical_cross_entropy(r.probs, t.constant(y));
    };
    auto mopt = opt;
    mopt.max_coords = model_coords_per_tensor;
    out.push_back(outcome("reduced model 16x16 (params)", check_parameter_gradients<double>(loss, m.params.parameters(true), mopt), tol));
  }
  return out;
}

// Identities the implementation must satisfy exactly or to tight tolerances.
inline std::vector<CheckOutcome> invariant_checks(std::uint64_t seed = 43) {
  using namespace selftest_detail;
  RngState rng(seed, 0x1A7);
  std::vector<CheckOutcome> out;
  auto add = [&](std::string name, double measured, double tol, bool pass) {
    out.push_back({std::move(name), measured, tol, pass, {}});
  };

  {
    double worst = 0;
    for (int trial = 0; trial < 5; ++trial) {
      AttentionConfig cfg{16, 4, 4};
      auto p = make_attention_params<float>("a", cfg, rng);
      for (auto& [k, t] : p.tensors) t.value = uniform_tensor<float>(t.value.shape(), rng, -0.5, 0.5);
      auto x = uniform_tensor<float>({2, 7, 16}, rng);
      Tape<float> t(false);
      auto a = grouped_query_attention(t.constant(x), p, cfg).output.value();
      auto b = multi_head_attention(t.constant(x), p, cfg).output.value();
      worst = std::max(worst, static_cast<double>(max_abs_diff(a, b)));
    }
    add("GQA with groups = heads equals MHA", worst, 1e-5, worst < 1e-5);
  }

  {
    auto m = build_model<float>(ModelConfig::reduced(3, 16), RngState(seed));
    Tape<float> warm(false);
    m.forward(warm, uniform_tensor<float>({4, 16, 16, 3}, rng, 0, 1), Mode::train, RngState(1));
    auto& cls = m.params.get("classifier");
    cls.tensors["kernel"].value = uniform_tensor<float>(cls.at("kernel").value.shape(), rng);
    auto x = uniform_tensor<float>({1, 16, 16, 3}, rng, 0, 1);
    auto net = cam_network(m);
    auto g = gradcam(net, x), xg = xgradcam(net, x);
    double d = 0;
    for (std::size_t i = 0; i < g.values.size(); ++i) d = std::max(d, std::abs(double(g.values[i]) - xg.values[i]));
    add("xgradcam(eta=0) equals gradcam", d, 1e-6, d < 1e-6);
    auto s = scorecam(net, x);
    auto f = faster_scorecam(net, x, std::nullopt, m.config.residual_filters);
    const bool same = s.values == f.values && s.raw == f.raw && s.weights == f.weights;
    add("faster Score-CAM with K = C equals Score-CAM", same ? 0.0 : 1.0, 0.0, same);
    double ws = 0;
    for (double w : s.weights) ws += w;
    add("Score-CAM weights sum to 1", std::abs(ws - 1), 1e-6, std::abs(ws - 1) < 1e-6);
  }

  {
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = 2 + rng.below(5), n = 1 + rng.below(80);
      std::vector<std::size_t> t(n), p(n);
      for (std::size_t i = 0; i < n; ++i) {
        t[i] = rng.below(k);
        p[i] = rng.below(k);
      }
      auto r = basic_rates(confusion(t, p, k));
      worst = std::max({worst, std::abs(r.precision_micro - r.accuracy), std::abs(r.recall_micro - r.accuracy),
                        std::abs(r.f1_micro - r.accuracy)});
    }
    add("micro precision = recall = F1 = accuracy", worst, 1e-12, worst < 1e-12);
  }

  {
    double worst = 0;
    for (std::size_t k = 2; k <= 5; ++k) {
      Tape<double> t(false);
      auto probs = t.constant(Tensor<double>({3, k}, 1.0 / static_cast<double>(k)));
      auto y = one_hot<double>({0, k - 1, 1}, k);
      const double ce = categorical_cross_entropy(probs, t.constant(y)).value().item();
      worst = std::max(worst, std::abs(ce - std::log(static_cast<double>(k))));
    }
    add("uniform cross-entropy equals ln K", worst, 1e-9, worst < 1e-9);
  }

  {
    auto m = build_model<float>(ModelConfig::reduced(2, 16), RngState(seed));
    auto bytes = encode_weights(model_tensors(m));
    auto back = build_model<float>(ModelConfig::reduced(2, 16), RngState(seed + 1));
    assign_tensors(back, decode_weights(bytes));
    const bool same = encode_weights(model_tensors(back)) == bytes;
    auto bad = bytes;
    bad[bad.size() / 2] ^= 1;
    bool caught = false;
    try {
      decode_weights(bad);
    } catch (const ValidationError&) {
      caught = true;
    }
    add("weight file round trip and CRC", same && caught ? 0.0 : 1.0, 0.0, same && caught);
  }
  return out;
}

inline bool report_checks(const std::vector<CheckOutcome>& checks, std::ostream& os) {
  bool ok = true;
  for (const auto& c : checks) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.3g (tol %.3g)", c.measured, c.tolerance);
    os << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << buf;
    if (!c.detail.empty()) os << " [" << c.detail << "]";
    os << "\n";
    ok = ok && c.pass;
  }
  return ok;
}

// Gradient and invariant suites; true when every check passes.
inline bool run_selftest(std::ostream& os, std::uint64_t seed = 43) {
  const auto start = std::chrono::steady_clock::now();
  bool ok = report_checks(gradient_checks(seed), os);
  ok = report_checks(invariant_checks(seed), os) && ok;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  os << (ok ? "selftest passed" : "selftest FAILED") << " in " << secs << " s\n";
  return ok;
}

}  // namespace amri
