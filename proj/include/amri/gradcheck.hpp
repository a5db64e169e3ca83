#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "amri/autodiff.hpp"
#include "amri/rng.hpp"

namespace amri {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor: gradients smaller than this are compared absolutely.
  double floor = 1e-3;
  // 0 checks every coordinate, otherwise a seeded random subset per tensor.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst;  // "<tensor>[index]" of the worst coordinate
};

inline double gradient_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, RngState& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (max_coords == 0 || max_coords >= n) return idx;
  shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

// Compares backward() of the scalar f(x) with central differences (f(x+h)-f(x-h))/2h.
template <class T>
GradCheckResult finite_difference_check(const std::function<Var<T>(Var<T>)>& f, const Tensor<T>& x,
                                        GradCheckOptions opt = {}) {
  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto xv = tape.watch(x, "x");
    auto y = f(xv);
    tape.backward(y);
    const Tensor<T>* g = tape.grad(xv);
    analytic = g ? *g : Tensor<T>(x.shape());
  }
  auto eval = [&](const Tensor<T>& p) {
    Tape<T> tape(false);
    return static_cast<double>(f(tape.constant(p)).value().item());
  };
  RngState rng(opt.seed, 7);
  GradCheckResult res;
  Tensor<T> probe = x;
  const T h = static_cast<T>(opt.step);
  for (auto i : detail::pick_coords(x.size(), opt.max_coords, rng)) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double err = gradient_rel_error(static_cast<double>(analytic[i]), numeric, opt.floor);
    ++res.coords;
    if (err > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      res.worst = "x[" + std::to_string(i) + "]";
    }
  }
  return res;
}

// Same check over named parameters. `loss` must put each parameter on the tape
// under its name (tape.parameter(name, *param)).
template <class T>
GradCheckResult check_parameter_gradients(const std::function<Var<T>(Tape<T>&)>& loss,
                                          const std::vector<std::pair<std::string, Parameter<T>*>>& params,
                                          GradCheckOptions opt = {}) {
  Gradients<T> grads;
  {
    Tape<T> tape;
    grads = tape.backward(loss(tape));
  }
  auto eval = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(loss(tape).value().item());
  };
  RngState rng(opt.seed, 11);
  GradCheckResult res;
  const T h = static_cast<T>(opt.step);
  for (const auto& [name, p] : params) {
    if (!p->trainable) continue;
    auto it = grads.find(name);
    for (auto i : detail::pick_coords(p->value.size(), opt.max_coords, rng)) {
      const T orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = eval();
      p->value[i] = orig - h;
      const double fm = eval();
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = it == grads.end() ? 0.0 : static_cast<double>(it->second[i]);
      const double err = gradient_rel_error(analytic, numeric, opt.floor);
      ++res.coords;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace amri
