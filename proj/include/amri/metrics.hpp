#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "amri/error.hpp"
#include "amri/tensor.hpp"

namespace amri {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;  // k*k row-major

  explicit ConfusionMatrix(std::size_t k = 0) : k(k), counts(k * k, 0) {}

  std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * k + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * k + p]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  // One-vs-rest counts for class c.
  std::uint64_t tp(std::size_t c) const { return at(c, c); }
  std::uint64_t fp(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k; ++t) s += t == c ? 0 : at(t, c);
    return s;
  }
  std::uint64_t fn(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k; ++p) s += p == c ? 0 : at(c, p);
    return s;
  }
  std::uint64_t tn(std::size_t c) const { return total() - tp(c) - fp(c) - fn(c); }

  std::string csv() const {
    std::string out;
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t p = 0; p < k; ++p) out += (p ? "," : "") + std::to_string(at(t, p));
      out += "\n";
    }
    return out;
  }
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred, std::size_t k) {
  if (truth.size() != pred.size()) throw ShapeError("truth and prediction lengths differ");
  if (k == 0) throw ValidationError("confusion needs at least one class");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || pred[i] >= k) throw ValidationError("label out of range at index " + std::to_string(i));
    ++cm.at(truth[i], pred[i]);
  }
  return cm;
}

struct ClassRates {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  bool zero_denominator = false;  // some rate had no support and was set to 0
};

struct MetricReport {
  double accuracy = 0;
  double precision_micro = 0, recall_micro = 0, f1_micro = 0;
  double precision_macro = 0, recall_macro = 0, f1_macro = 0;
  double sensitivity = 0;  // macro recall
  std::optional<double> auc;
  std::optional<double> rmse;
  std::vector<ClassRates> per_class;
  std::vector<std::string> warnings;
};

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den, bool& flag) {
  if (den == 0) {
    flag = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

inline double harmonic(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace detail

// Micro rates pool one-vs-rest counts over classes; macro rates average the
// per-class rates. Zero denominators give 0 and set the class flag.
inline MetricReport basic_rates(const ConfusionMatrix& cm) {
  if (cm.k == 0 || cm.total() == 0) throw ValidationError("empty confusion matrix");
  MetricReport r;
  std::uint64_t tp = 0, fp = 0, fn = 0, trace = 0;
  for (std::size_t c = 0; c < cm.k; ++c) {
    ClassRates cr;
    cr.precision = detail::ratio(cm.tp(c), cm.tp(c) + cm.fp(c), cr.zero_denominator);
    cr.recall = detail::ratio(cm.tp(c), cm.tp(c) + cm.fn(c), cr.zero_denominator);
    cr.f1 = detail::harmonic(cr.precision, cr.recall);
    r.per_class.push_back(cr);
    tp += cm.tp(c);
    fp += cm.fp(c);
    fn += cm.fn(c);
    trace += cm.at(c, c);
    r.precision_macro += cr.precision;
    r.recall_macro += cr.recall;
    r.f1_macro += cr.f1;
  }
  const double k = static_cast<double>(cm.k);
  r.precision_macro /= k;
  r.recall_macro /= k;
  r.f1_macro /= k;
  r.sensitivity = r.recall_macro;
  bool unused = false;
  r.accuracy = detail::ratio(trace, cm.total(), unused);
  r.precision_micro = detail::ratio(tp, tp + fp, unused);
  r.recall_micro = detail::ratio(tp, tp + fn, unused);
  r.f1_micro = detail::harmonic(r.precision_micro, r.recall_micro);
  return r;
}

struct AucResult {
  std::optional<double> macro;
  std::vector<std::optional<double>> per_class;  // empty when the class is absent from truth
  std::vector<std::string> warnings;
};

// Area under TPR(FPR) for one binary problem: sweep thresholds from the highest
// score down, grouping equal scores, trapezoids between successive points.
inline double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (bool p : positive) (p ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw ValidationError("AUC needs both positive and negative samples");
  double area = 0, tpr_prev = 0, fpr_prev = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? tp : fp) += 1;
      ++j;
    }
    const double tpr = tp / pos, fpr = fp / neg;
    area += (fpr - fpr_prev) * (tpr + tpr_prev) / 2;
    tpr_prev = tpr;
    fpr_prev = fpr;
    i = j;
  }
  return area;
}

// Macro one-vs-rest AUC over the classes present in `truth`.
inline AucResult roc_auc(const std::vector<std::size_t>& truth, const Tensor<double>& scores) {
  if (scores.rank() != 2 || scores.dim(0) != truth.size()) throw ShapeError("scores must be [N,K] with N = labels");
  const std::size_t n = truth.size(), k = scores.dim(1);
  AucResult r;
  r.per_class.resize(k);
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[i] >= k) throw ValidationError("label out of range");
      s[i] = scores[i * k + c];
      pos[i] = truth[i] == c;
      npos += pos[i];
    }
    if (npos == 0 || npos == n) {
      r.warnings.push_back("class " + std::to_string(c) + (npos == 0 ? " absent from" : " is all of") +
                           " the truth labels; skipped in AUC");
      continue;
    }
    r.per_class[c] = binary_auc(s, pos);
    sum += *r.per_class[c];
    ++used;
  }
  if (used) r.macro = sum / static_cast<double>(used);
  return r;
}

// Root mean square over all N*K entries.
inline double rmse(const Tensor<double>& truth, const Tensor<double>& probs) {
  if (truth.shape() != probs.shape()) throw ShapeError("rmse operands differ in shape");
  double s = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth[i] - probs[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(truth.size()));
}

// Full report from labels and [N,K] probabilities (argmax predictions).
inline MetricReport evaluate_predictions(const std::vector<std::size_t>& truth, const Tensor<double>& probs) {
  if (probs.rank() != 2 || probs.dim(0) != truth.size()) throw ShapeError("probabilities must be [N,K]");
  const std::size_t k = probs.dim(1);
  std::vector<std::size_t> pred(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (probs[i * k + c] > probs[i * k + best]) best = c;
    }
    pred[i] = best;
  }
  auto r = basic_rates(confusion(truth, pred, k));
  auto auc = roc_auc(truth, probs);
  r.auc = auc.macro;
  r.warnings = auc.warnings;
  Tensor<double> onehot({truth.size(), k});
  for (std::size_t i = 0; i < truth.size(); ++i) onehot[i * k + truth[i]] = 1.0;
  r.rmse = rmse(onehot, probs);
  return r;
}

inline nlohmann::json to_json(const MetricReport& r, const std::vector<std::string>& class_names = {}) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["precision_micro"] = r.precision_micro;
  j["recall_micro"] = r.recall_micro;
  j["f1_micro"] = r.f1_micro;
  j["precision_macro"] = r.precision_macro;
  j["recall_macro"] = r.recall_macro;
  j["f1_macro"] = r.f1_macro;
  j["sensitivity"] = r.sensitivity;
  j["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
  j["rmse"] = r.rmse ? nlohmann::json(*r.rmse) : nlohmann::json(nullptr);
  auto& pc = j["per_class"] = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    nlohmann::json e{{"precision", r.per_class[c].precision},
                     {"recall", r.per_class[c].recall},
                     {"f1", r.per_class[c].f1},
                     {"zero_denominator", r.per_class[c].zero_denominator}};
    if (c < class_names.size()) e["class"] = class_names[c];
    pc.push_back(e);
  }
  j["metadata"] = {{"headline_averaging", "micro"},
                   {"sensitivity", "macro recall"},
                   {"auc", "macro one-vs-rest over classes present in truth"},
                   {"rmse_operands", "one-hot truth vs predicted probabilities"},
                   {"warnings", r.warnings}};
  return j;
}

}  // namespace amri
