#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "amri/error.hpp"
#include "amri/tensor.hpp"

namespace amri {

enum class OpKind {
  constant,
  leaf,
  parameter,
  add,
  sub,
  mul,
  div,
  relu,
  sigmoid,
  exp,
  log,
  negate,
  scale,
  add_scalar,
  matmul,
  softmax,
  reduce_sum,
  reduce_mean,
  reduce_max,
  reshape,
  permute,
  concat,
  slice,
  index_select,
  conv2d,
  maxpool2d,
  batch_norm,
  layer_norm,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::constant: return "constant";
    case OpKind::leaf: return "leaf";
    case OpKind::parameter: return "parameter";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::negate: return "negate";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::softmax: return "softmax";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::reduce_max: return "reduce_max";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::index_select: return "index_select";
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::layer_norm: return "layer_norm";
  }
  return "?";
}

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
struct Parameter {
  Tensor<T> value;
  bool trainable = true;
};

// Parameter name -> gradient of the loss.
template <class T>
using Gradients = std::map<std::string, Tensor<T>>;

// Define-by-run reverse-mode tape. Nodes are stored in recording order, which
// is a topological order of the computation DAG.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push(OpKind::constant, {}, std::move(v), nullptr, false, {}); }

  // Leaf whose gradient is tracked (inputs under test, watched activations).
  Var<T> watch(Tensor<T> v, std::string name = {}) {
    return push(OpKind::leaf, {}, std::move(v), nullptr, grad_enabled_, std::move(name));
  }

  Var<T> parameter(const std::string& name, const Parameter<T>& p) {
    return push(OpKind::parameter, {}, p.value, nullptr, grad_enabled_ && p.trainable, name);
  }

  Var<T> record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> out, BackwardFn fn) {
    if (!out.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op_name(kind));
    bool rg = false;
    if (grad_enabled_) {
      for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
    }
    return push(kind, std::move(inputs), std::move(out), rg ? std::move(fn) : BackwardFn{}, rg, {});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Adds `g` into the gradient of node `id`; ignored for nodes outside the gradient path.
  void accumulate(std::size_t id, Tensor<T> g) {
    if (!nodes_[id].requires_grad) return;
    if (g.shape() != nodes_[id].value.shape()) {
      throw ShapeError(std::string("gradient shape ") + shape_str(g.shape()) + " does not match value shape " +
                       shape_str(nodes_[id].value.shape()) + " of " + op_name(nodes_[id].kind));
    }
    auto& slot = grads_[id];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }
  }

  Gradients<T> backward(Var<T> loss) {
    if (loss.tape != this) throw StateError("backward: variable belongs to another tape");
    if (consumed_) throw StateError("backward called twice on the same tape");
    if (value(loss.id).size() != 1) {
      throw StateError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor<T>());
    if (!nodes_[loss.id].requires_grad) return {};
    grads_[loss.id] = Tensor<T>(value(loss.id).shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !grads_[i].empty()) n.backward(*this, grads_[i]);
    }
    Gradients<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.kind != OpKind::parameter || !n.requires_grad || grads_[i].empty()) continue;
      auto it = out.find(n.name);
      if (it == out.end()) {
        out.emplace(n.name, grads_[i]);
      } else {
        for (std::size_t j = 0; j < it->second.size(); ++j) it->second[j] += grads_[i][j];
      }
    }
    return out;
  }

  // Gradient of the last backward() w.r.t. any node; null if the node was not reached.
  const Tensor<T>* grad(Var<T> v) const {
    if (v.id >= grads_.size() || grads_[v.id].empty()) return nullptr;
    return &grads_[v.id];
  }

 private:
  Var<T> push(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> v, BackwardFn fn, bool rg, std::string name) {
    if (consumed_) throw StateError("cannot record on a consumed tape");
    nodes_.push_back(Node{kind, std::move(inputs), std::move(v), std::move(fn), rg, std::move(name)});
    return Var<T>{this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  bool consumed_ = false;
  std::deque<Node> nodes_;  // deque: references to node values stay valid while recording
  std::vector<Tensor<T>> grads_;
};

namespace detail {

template <class T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw StateError("operands recorded on different tapes");
}

template <class T, class F>
Tensor<T> map_unary(const Tensor<T>& x, F&& f) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline std::size_t norm_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, axis, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_at(const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, sub, mul, div, relu, sigmoid, exp, log, negate };

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  auto out = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x + y; });
  return a.tape->record(OpKind::add, {a.id, b.id}, std::move(out), [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a.id, sum_to_shape(g, t.value(a.id).shape()));
    t.accumulate(b.id, sum_to_shape(g, t.value(b.id).shape()));
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  auto out = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x - y; });
  return a.tape->record(OpKind::sub, {a.id, b.id}, std::move(out), [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a.id, sum_to_shape(g, t.value(a.id).shape()));
    if (t.requires_grad(b.id)) {
      auto nb = sum_to_shape(g, t.value(b.id).shape());
      for (auto& v : nb.data()) v = -v;
      t.accumulate(b.id, std::move(nb));
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  auto out = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x * y; });
  return a.tape->record(OpKind::mul, {a.id, b.id}, std::move(out), [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (t.requires_grad(a.id)) {
      t.accumulate(a.id, sum_to_shape(broadcast_binary(g, bv, [](T x, T y) { return x * y; }), av.shape()));
    }
    if (t.requires_grad(b.id)) {
      t.accumulate(b.id, sum_to_shape(broadcast_binary(g, av, [](T x, T y) { return x * y; }), bv.shape()));
    }
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  for (auto v : b.value().data()) {
    if (v == T{0}) throw DomainError("div: division by zero");
  }
  auto out = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x / y; });
  return a.tape->record(OpKind::div, {a.id, b.id}, std::move(out), [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (t.requires_grad(a.id)) {
      t.accumulate(a.id, sum_to_shape(broadcast_binary(g, bv, [](T x, T y) { return x / y; }), av.shape()));
    }
    if (t.requires_grad(b.id)) {
      auto ga = broadcast_binary(g, av, [](T x, T y) { return x * y; });
      auto gb = broadcast_binary(ga, bv, [](T x, T y) { return -x / (y * y); });
      t.accumulate(b.id, sum_to_shape(gb, bv.shape()));
    }
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  auto out = detail::map_unary(x.value(), [](T v) { return v > T{0} ? v : T{0}; });
  return x.tape->record(OpKind::relu, {x.id}, std::move(out), [x](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(x.id);
    Tensor<T> gi(xv.shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = xv[i] > T{0} ? g[i] : T{0};
    t.accumulate(x.id, std::move(gi));
  });
}

template <class T>
T sigmoid_scalar(T v) {
  // Split by sign so exp never overflows.
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  auto out = detail::map_unary(x.value(), [](T v) { return sigmoid_scalar(v); });
  const std::size_t self = x.tape->size();
  return x.tape->record(OpKind::sigmoid, {x.id}, std::move(out), [x, self](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(self);
    Tensor<T> gi(y.shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i] * y[i] * (T{1} - y[i]);
    t.accumulate(x.id, std::move(gi));
  });
}

template <class T>
Var<T> exp(Var<T> x) {
  auto out = detail::map_unary(x.value(), [](T v) { return std::exp(v); });
  const std::size_t self = x.tape->size();
  return x.tape->record(OpKind::exp, {x.id}, std::move(out), [x, self](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(self);
    Tensor<T> gi(y.shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i] * y[i];
    t.accumulate(x.id, std::move(gi));
  });
}

template <class T>
Var<T> log(Var<T> x) {
  for (auto v : x.value().data()) {
    if (!(v > T{0})) throw DomainError("log: argument must be positive");
  }
  auto out = detail::map_unary(x.value(), [](T v) { return std::log(v); });
  return x.tape->record(OpKind::log, {x.id}, std::move(out), [x](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(x.id);
    Tensor<T> gi(xv.shape());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = g[i] / xv[i];
    t.accumulate(x.id, std::move(gi));
  });
}

template <class T>
Var<T> negate(Var<T> x) {
  auto out = detail::map_unary(x.value(), [](T v) { return -v; });
  return x.tape->record(OpKind::negate, {x.id}, std::move(out), [x](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x.id, detail::map_unary(g, [](T v) { return -v; }));
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  auto out = detail::map_unary(x.value(), [s](T v) { return v * s; });
  return x.tape->record(OpKind::scale, {x.id}, std::move(out), [x, s](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x.id, detail::map_unary(g, [s](T v) { return v * s; }));
  });
}

template <class T>
Var<T> add_scalar(Var<T> x, T s) {
  auto out = detail::map_unary(x.value(), [s](T v) { return v + s; });
  return x.tape->record(OpKind::add_scalar, {x.id}, std::move(out),
                        [x](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x.id, g); });
}

// Tag-dispatched form.
template <class T>
Var<T> elementwise(Elementwise op, Var<T> a) {
  switch (op) {
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::exp: return exp(a);
    case Elementwise::log: return log(a);
    case Elementwise::negate: return negate(a);
    default: throw ShapeError("binary elementwise op requires a second operand");
  }
}

template <class T>
Var<T> elementwise(Elementwise op, Var<T> a, Var<T> b) {
  switch (op) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::div: return div(a, b);
    default: throw ShapeError("unary elementwise op given two operands");
  }
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return mul(a, b);
}
template <class T>
Var<T> operator/(Var<T> a, Var<T> b) {
  return div(a, b);
}

// ---------------------------------------------------------------------------
// Matrix products

// Rank-2 product, or rank-3 batched product with matching leading dimension.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  detail::same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != bs.size() || (as.size() != 2 && as.size() != 3)) {
    throw ShapeError("matmul expects two rank-2 or two rank-3 tensors, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const bool batched = as.size() == 3;
  const std::size_t batch = batched ? as[0] : 1;
  if (batched && bs[0] != batch) throw ShapeError("matmul batch mismatch " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t o = batched ? 1 : 0;
  const std::size_t m = trans_a ? as[o + 1] : as[o];
  const std::size_t k = trans_a ? as[o] : as[o + 1];
  const std::size_t kb = trans_b ? bs[o + 1] : bs[o];
  const std::size_t n = trans_b ? bs[o] : bs[o + 1];
  if (k != kb) throw ShapeError("matmul inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs));

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(a.value().ptr() + i * m * k, b.value().ptr() + i * k * n, out.ptr() + i * m * n, m, n, k, trans_a, trans_b,
         false);
  }
  return a.tape->record(
      OpKind::matmul, {a.id, b.id}, std::move(out), [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(a.id);
        const auto& bv = t.value(b.id);
        if (t.requires_grad(a.id)) {
          Tensor<T> ga(av.shape());
          for (std::size_t i = 0; i < batch; ++i) {
            const T* gp = g.ptr() + i * m * n;
            const T* bp = bv.ptr() + i * k * n;
            T* out_p = ga.ptr() + i * m * k;
            if (!trans_a) {
              gemm(gp, bp, out_p, m, k, n, false, !trans_b, false);  // g * op(B)^T
            } else {
              gemm(bp, gp, out_p, k, m, n, trans_b, true, false);  // op(B) * g^T
            }
          }
          t.accumulate(a.id, std::move(ga));
        }
        if (t.requires_grad(b.id)) {
          Tensor<T> gb(bv.shape());
          for (std::size_t i = 0; i < batch; ++i) {
            const T* gp = g.ptr() + i * m * n;
            const T* ap = av.ptr() + i * m * k;
            T* out_p = gb.ptr() + i * k * n;
            if (!trans_b) {
              gemm(ap, gp, out_p, k, n, m, !trans_a, false, false);  // op(A)^T * g
            } else {
              gemm(gp, ap, out_p, n, k, m, true, trans_a, false);  // g^T * op(A)
            }
          }
          t.accumulate(b.id, std::move(gb));
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax and reductions

template <class T>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, n, inner] = detail::split_at(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= s;
    }
  }
  return y;
}

template <class T>
Var<T> softmax(Var<T> x, long axis = -1) {
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  auto y = softmax_values(x.value(), ax);
  const std::size_t self = x.tape->size();
  return x.tape->record(OpKind::softmax, {x.id}, std::move(y), [x, self, ax](Tape<T>& t, const Tensor<T>& g) {
    const auto& yv = t.value(self);
    const auto [outer, n, inner] = detail::split_at(yv.shape(), ax);
    Tensor<T> gi(yv.shape());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * yv[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          gi[p] = yv[p] * (g[p] - dot);
        }
      }
    }
    t.accumulate(x.id, std::move(gi));
  });
}

enum class Reduce { sum, mean, max };

template <class T>
Var<T> reduce(Reduce op, Var<T> x, std::vector<long> axes, bool keepdims = false) {
  const Shape& in = x.shape();
  std::vector<bool> reduced(in.size(), false);
  if (axes.empty()) {
    std::fill(reduced.begin(), reduced.end(), true);
  } else {
    for (auto a : axes) reduced[detail::norm_axis(a, in.size())] = true;
  }
  Shape kept = in;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) {
      count *= in[i];
      kept[i] = 1;
    }
  }
  Shape out_shape;
  if (keepdims) {
    out_shape = kept;
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!reduced[i]) out_shape.push_back(in[i]);
    }
    if (out_shape.empty()) out_shape = {1};
  }

  const auto& xv = x.value();
  Tensor<T> out(kept, op == Reduce::max ? -std::numeric_limits<T>::infinity() : T{0});
  std::vector<std::size_t> argmax;
  if (op == Reduce::max) {
    argmax.assign(out.size(), 0);
    detail::for_each_broadcast(in, kept, kept, [&](std::size_t src, std::size_t dst, std::size_t) {
      if (xv[src] > out[dst]) {
        out[dst] = xv[src];
        argmax[dst] = src;
      }
    });
  } else {
    detail::for_each_broadcast(in, kept, kept, [&](std::size_t src, std::size_t dst, std::size_t) { out[dst] += xv[src]; });
    if (op == Reduce::mean) {
      for (auto& v : out.data()) v /= static_cast<T>(count);
    }
  }
  out = out.reshaped(out_shape);
  const OpKind kind = op == Reduce::sum ? OpKind::reduce_sum : op == Reduce::mean ? OpKind::reduce_mean : OpKind::reduce_max;
  return x.tape->record(kind, {x.id}, std::move(out),
                        [x, op, kept, count, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
                          const Shape& in_shape = t.value(x.id).shape();
                          Tensor<T> gi(in_shape);
                          if (op == Reduce::max) {
                            for (std::size_t j = 0; j < argmax.size(); ++j) gi[argmax[j]] += g[j];
                          } else {
                            const T s = op == Reduce::mean ? T{1} / static_cast<T>(count) : T{1};
                            detail::for_each_broadcast(in_shape, kept, kept,
                                                       [&](std::size_t dst, std::size_t src, std::size_t) { gi[dst] = g[src] * s; });
                          }
                          t.accumulate(x.id, std::move(gi));
                        });
}

template <class T>
Var<T> sum(Var<T> x, std::vector<long> axes = {}, bool keepdims = false) {
  return reduce(Reduce::sum, x, std::move(axes), keepdims);
}
template <class T>
Var<T> mean(Var<T> x, std::vector<long> axes = {}, bool keepdims = false) {
  return reduce(Reduce::mean, x, std::move(axes), keepdims);
}
template <class T>
Var<T> max(Var<T> x, std::vector<long> axes = {}, bool keepdims = false) {
  return reduce(Reduce::max, x, std::move(axes), keepdims);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
  auto out = x.value().reshaped(std::move(s));
  return x.tape->record(OpKind::reshape, {x.id}, std::move(out), [x](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x.id, g.reshaped(t.value(x.id).shape()));
  });
}

template <class T>
Var<T> permute(Var<T> x, std::vector<std::size_t> perm) {
  auto out = amri::permute(x.value(), perm);
  return x.tape->record(OpKind::permute, {x.id}, std::move(out), [x, perm](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x.id, amri::permute(g, inverse_permutation(perm)));
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, long axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = detail::norm_axis(axis, xs[0].shape().size());
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& v : xs) {
    detail::same_tape(xs[0], v);
    const auto& s = v.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != xs[0].shape()[i]) throw ShapeError("concat: non-axis dimensions differ");
    }
    out_shape[ax] += s[ax];
  }
  const auto [outer, total, inner] = detail::split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& v : xs) {
    const std::size_t n = v.shape()[ax];
    const auto& src = v.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.ptr() + o * n * inner, n * inner, out.ptr() + (o * total + offset) * inner);
    }
    offsets.push_back(offset);
    offset += n;
  }
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id);
  return xs[0].tape->record(OpKind::concat, ids, std::move(out),
                            [ids, offsets, ax, outer = outer, total = total, inner = inner](Tape<T>& t, const Tensor<T>& g) {
                              for (std::size_t k = 0; k < ids.size(); ++k) {
                                if (!t.requires_grad(ids[k])) continue;
                                const Shape& s = t.value(ids[k]).shape();
                                const std::size_t n = s[ax];
                                Tensor<T> gi(s);
                                for (std::size_t o = 0; o < outer; ++o) {
                                  std::copy_n(g.ptr() + (o * total + offsets[k]) * inner, n * inner, gi.ptr() + o * n * inner);
                                }
                                t.accumulate(ids[k], std::move(gi));
                              }
                            });
}

template <class T>
Var<T> slice(Var<T> x, long axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  if (len == 0 || start + len > x.shape()[ax]) throw ShapeError("slice out of range");
  const auto [outer, n, inner] = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.value().ptr() + (o * n + start) * inner, len * inner, out.ptr() + o * len * inner);
  }
  return x.tape->record(OpKind::slice, {x.id}, std::move(out),
                        [x, start, len, outer = outer, n = n, inner = inner](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> gi(t.value(x.id).shape());
                          for (std::size_t o = 0; o < outer; ++o) {
                            std::copy_n(g.ptr() + o * len * inner, len * inner, gi.ptr() + (o * n + start) * inner);
                          }
                          t.accumulate(x.id, std::move(gi));
                        });
}

// Gathers `indices` along `axis`; repeated indices accumulate gradient.
template <class T>
Var<T> index_select(Var<T> x, long axis, std::vector<std::size_t> indices) {
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  const auto [outer, n, inner] = detail::split_at(x.shape(), ax);
  for (auto i : indices) {
    if (i >= n) throw ShapeError("index_select: index out of range");
  }
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  Shape out_shape = x.shape();
  out_shape[ax] = indices.size();
  const std::size_t m = indices.size();
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(x.value().ptr() + (o * n + indices[j]) * inner, inner, out.ptr() + (o * m + j) * inner);
    }
  }
  return x.tape->record(OpKind::index_select, {x.id}, std::move(out),
                        [x, indices, m, outer = outer, n = n, inner = inner](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T> gi(t.value(x.id).shape());
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < m; ++j) {
                              const T* src = g.ptr() + (o * m + j) * inner;
                              T* dst = gi.ptr() + (o * n + indices[j]) * inner;
                              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                            }
                          }
                          t.accumulate(x.id, std::move(gi));
                        });
}

}  // namespace amri
