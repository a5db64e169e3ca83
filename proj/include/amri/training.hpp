#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <tuple>
#include <type_traits>
#include <string>
#include <vector>

#include "amri/data.hpp"
#include "amri/model.hpp"

namespace amri {

// -(1/N) sum y log(p + 1e-12) over an [N,K] batch.
template <class T>
Var<T> categorical_cross_entropy(Var<T> probs, Var<T> onehot) {
  if (probs.shape().size() != 2 || probs.shape() != onehot.shape()) {
    throw ShapeError("cross entropy expects equal [N,K] shapes, got " + shape_str(probs.shape()) + " and " +
                     shape_str(onehot.shape()));
  }
  const T n = static_cast<T>(probs.shape()[0]);
  return scale(sum(mul(log(add_scalar(probs, T(1e-12))), onehot)), T(-1) / n);
}

template <class T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
  Tensor<T> y({labels.size(), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw ValidationError("label " + std::to_string(labels[i]) + " out of range");
    y[i * k + labels[i]] = T{1};
  }
  return y;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { adam, sgd, rmsprop };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  throw ValidationError("unknown optimizer: " + s);
}

inline const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::rmsprop: return "rmsprop";
  }
  return "?";
}

template <class T>
class Optimizer {
 public:
  using ParamList = std::vector<std::pair<std::string, Parameter<T>*>>;

  explicit Optimizer(double lr) : lr(lr) {}
  virtual ~Optimizer() = default;

  double lr;
  std::size_t t = 0;  // completed steps

  // Updates every trainable parameter; each needs a gradient.
  void step(const ParamList& params, const Gradients<T>& grads) {
    ++t;
    for (const auto& [name, p] : params) {
      if (!p->trainable) continue;
      auto it = grads.find(name);
      if (it == grads.end()) throw StateError("no gradient for trainable parameter " + name);
      if (it->second.shape() != p->value.shape()) throw ShapeError("gradient shape mismatch for " + name);
      update(name, p->value, it->second);
    }
  }

 protected:
  virtual void update(const std::string& name, Tensor<T>& value, const Tensor<T>& grad) = 0;

  Tensor<T>& slot(std::map<std::string, Tensor<T>>& m, const std::string& name, const Shape& s) {
    auto it = m.find(name);
    if (it == m.end()) it = m.emplace(name, Tensor<T>(s)).first;
    return it->second;
  }
};

template <class T>
class Adam : public Optimizer<T> {
 public:
  explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : Optimizer<T>(lr), beta1(beta1), beta2(beta2), eps(eps) {}

  double beta1, beta2, eps;
  std::map<std::string, Tensor<T>> m, v;

 protected:
  void update(const std::string& name, Tensor<T>& value, const Tensor<T>& grad) override {
    auto& mt = this->slot(m, name, value.shape());
    auto& vt = this->slot(v, name, value.shape());
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(this->t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(this->t));
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = beta1 * mt[i] + (1.0 - beta1) * g;
      const double vi = beta2 * vt[i] + (1.0 - beta2) * g * g;
      mt[i] = static_cast<T>(mi);
      vt[i] = static_cast<T>(vi);
      value[i] = static_cast<T>(value[i] - this->lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
};

template <class T>
class Sgd : public Optimizer<T> {
 public:
  explicit Sgd(double lr = 1e-4, double momentum = 0.0) : Optimizer<T>(lr), momentum(momentum) {}
  double momentum;
  std::map<std::string, Tensor<T>> velocity;

 protected:
  void update(const std::string& name, Tensor<T>& value, const Tensor<T>& grad) override {
    auto& vel = this->slot(velocity, name, value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double u = momentum * vel[i] - this->lr * grad[i];
      vel[i] = static_cast<T>(u);
      value[i] = static_cast<T>(value[i] + u);
    }
  }
};

template <class T>
class RmsProp : public Optimizer<T> {
 public:
  explicit RmsProp(double lr = 1e-4, double rho = 0.9, double eps = 1e-7) : Optimizer<T>(lr), rho(rho), eps(eps) {}
  double rho, eps;
  std::map<std::string, Tensor<T>> square;

 protected:
  void update(const std::string& name, Tensor<T>& value, const Tensor<T>& grad) override {
    auto& sq = this->slot(square, name, value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double s = rho * sq[i] + (1.0 - rho) * g * g;
      sq[i] = static_cast<T>(s);
      value[i] = static_cast<T>(value[i] - this->lr * g / (std::sqrt(s) + eps));
    }
  }
};

template <class T>
std::unique_ptr<Optimizer<T>> make_optimizer(OptimizerKind k, double lr) {
  switch (k) {
    case OptimizerKind::adam: return std::make_unique<Adam<T>>(lr);
    case OptimizerKind::sgd: return std::make_unique<Sgd<T>>(lr);
    case OptimizerKind::rmsprop: return std::make_unique<RmsProp<T>>(lr);
  }
  throw ValidationError("unknown optimizer");
}

// ---------------------------------------------------------------------------
// Learning-rate schedules. step() is called once per finished epoch with the
// validation loss and returns the rate for the next epoch.

enum class SchedulerKind { plateau, exponential, cosine };

inline SchedulerKind parse_scheduler(const std::string& s) {
  if (s == "plateau") return SchedulerKind::plateau;
  if (s == "exponential") return SchedulerKind::exponential;
  if (s == "cosine") return SchedulerKind::cosine;
  throw ValidationError("unknown scheduler: " + s);
}

inline const char* scheduler_name(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::plateau: return "plateau";
    case SchedulerKind::exponential: return "exponential";
    case SchedulerKind::cosine: return "cosine";
  }
  return "?";
}

struct PlateauScheduler {
  double factor = 0.7;
  std::size_t patience = 7;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // absolute improvement needed
  double best = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;

  double step(double val_loss, double lr) {
    if (val_loss < best - threshold) {
      best = val_loss;
      wait = 0;
      return lr;
    }
    if (++wait >= patience) {
      wait = 0;
      return std::max(lr * factor, min_lr);
    }
    return lr;
  }
};

struct LrSchedule {
  SchedulerKind kind = SchedulerKind::plateau;
  PlateauScheduler plateau;
  double initial_lr = 1e-4;
  double gamma = 0.9;          // exponential decay per epoch
  std::size_t total_epochs = 50;  // cosine period
  std::size_t epoch = 0;

  double step(double val_loss, double lr) {
    ++epoch;
    switch (kind) {
      case SchedulerKind::plateau: return plateau.step(val_loss, lr);
      case SchedulerKind::exponential: return std::max(initial_lr * std::pow(gamma, static_cast<double>(epoch)), plateau.min_lr);
      case SchedulerKind::cosine: {
        const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(1, total_epochs)));
        return plateau.min_lr + 0.5 * (initial_lr - plateau.min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
      }
    }
    return lr;
  }
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_acc = 0;
  double lr = 0;  // rate used during the epoch
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;

  std::string csv() const {
    std::string out = "epoch,train_loss,val_loss,val_acc,lr,seconds\n";
    char buf[256];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr,
                    r.seconds);
      out += buf;
    }
    return out;
  }
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 8;
  double lr = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  SchedulerKind scheduler = SchedulerKind::plateau;
  double factor = 0.7;
  std::size_t patience = 7;
  double min_lr = 1e-6;
  double plateau_threshold = 1e-4;
  std::uint64_t seed = 43;
  bool keep_best = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Stacked, preprocessed images of one split.
struct LabeledSet {
  Tensor<float> x;  // [N,H,W,C]
  std::vector<std::size_t> labels;
  Split split = Split::none;

  std::size_t size() const { return labels.size(); }
};

inline LabeledSet load_split(const DatasetManifest& m, Split s, const fs::path& root, const PreprocessOptions& opt = {},
                             std::size_t jobs = 1) {
  auto idx = m.indices(s);
  if (idx.empty()) throw ValidationError(std::string("manifest has no ") + split_name(s) + " entries");
  LabeledSet out;
  out.x = load_batch(m, idx, root, opt, jobs);
  for (auto i : idx) out.labels.push_back(m.entries[i].label);
  out.split = s;
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<float>& x, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const float* src = x.ptr() + rows[r] * per;
    T* dst = out.ptr() + r * per;
    for (std::size_t i = 0; i < per; ++i) dst[i] = static_cast<T>(src[i]);
  }
  return out;
}

// Mean cross entropy and accuracy of the model in inference mode.
template <class T>
std::pair<double, double> evaluate_loss_accuracy(Model<T>& model, const LabeledSet& set, std::size_t batch = 16) {
  auto p = model.predict(set.x.template cast<T>(), batch);
  const std::size_t k = model.config.num_classes;
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    loss -= std::log(static_cast<double>(p[i * k + set.labels[i]]) + 1e-12);
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (p[i * k + c] > p[i * k + best]) best = c;
    }
    correct += best == set.labels[i];
  }
  return {loss / static_cast<double>(set.size()), static_cast<double>(correct) / static_cast<double>(set.size())};
}

namespace detail {

template <class T>
std::vector<Tensor<T>> snapshot(ParamStore<T>& ps) {
  std::vector<Tensor<T>> out;
  for (auto& [name, p] : ps.parameters()) out.push_back(p->value);
  return out;
}

template <class T>
void restore(ParamStore<T>& ps, const std::vector<Tensor<T>>& snap) {
  auto params = ps.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second->value = snap[i];
}

}  // namespace detail

// Mini-batch training. Gradients only ever see `train`; `val` drives the
// schedule and best-epoch selection. Returns the per-epoch log.
template <class T>
TrainLog train(Model<T>& model, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg) {
  if (train_set.split != Split::train) throw ValidationError("training data must carry the train split tag");
  if (val_set.split != Split::val) throw ValidationError("validation data must carry the val split tag");
  if (train_set.size() == 0) throw ValidationError("empty train split");
  if (val_set.size() == 0) throw ValidationError("empty validation split");
  if (cfg.batch == 0 || cfg.epochs == 0) throw ValidationError("epochs and batch must be positive");
  if (!(cfg.lr > 0)) throw ValidationError("learning rate must be positive");

  auto opt = make_optimizer<T>(cfg.optimizer, cfg.lr);
  LrSchedule sched;
  sched.kind = cfg.scheduler;
  sched.plateau = PlateauScheduler{cfg.factor, cfg.patience, cfg.min_lr, cfg.plateau_threshold};
  sched.initial_lr = cfg.lr;
  sched.total_epochs = cfg.epochs;

  const std::size_t k = model.config.num_classes;
  auto params = model.params.parameters(true);
  TrainLog log;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor<T>> best_weights;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngState shuffler(cfg.seed, 0x5EED0000ULL + epoch);
    shuffle(order.begin(), order.end(), shuffler);
    const RngState drop(cfg.seed, 0xD0000000ULL + epoch);

    double loss_sum = 0;
    for (std::size_t b = 0; b * cfg.batch < order.size(); ++b) {
      const std::size_t lo = b * cfg.batch;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch);
      std::vector<std::size_t> rows(order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi));
      std::vector<std::size_t> labels;
      for (auto r : rows) labels.push_back(train_set.labels[r]);
      Tape<T> tape;
      auto out = model.forward(tape, gather_rows<T>(train_set.x, rows), Mode::train, drop.split(b));
      auto loss = categorical_cross_entropy(out.probs, tape.constant(one_hot<T>(labels, k)));
      loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(rows.size());
      opt->step(params, tape.backward(loss));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    std::tie(rec.val_loss, rec.val_acc) = evaluate_loss_accuracy(model, val_set);
    rec.lr = opt->lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.records.push_back(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      log.best_epoch = epoch;
      if (cfg.keep_best) best_weights = detail::snapshot(model.params);
    }
    opt->lr = sched.step(rec.val_loss, opt->lr);
    if (cfg.on_epoch) cfg.on_epoch(rec);
  }
  if (cfg.keep_best && !best_weights.empty()) detail::restore(model.params, best_weights);
  return log;
}

// Replays the plateau rule over a log's validation losses; true when every
// logged rate matches what the scheduler would have set.
inline bool lr_trace_follows_plateau(const TrainLog& log, double initial_lr, PlateauScheduler s, double tol = 1e-12) {
  double lr = initial_lr;
  for (const auto& r : log.records) {
    if (std::abs(r.lr - lr) > tol * std::max(1.0, lr)) return false;
    lr = s.step(r.val_loss, lr);
  }
  return true;
}

}  // namespace amri
