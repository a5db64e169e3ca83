#include <gtest/gtest.h>

#include <cmath>

#include "amri/metrics.hpp"
#include "amri/rng.hpp"
#include "oracles.hpp"

using namespace amri;
using oracle::brute;
using oracle::Labels;
using oracle::pairwise_auc;
using oracle::random_labels;

namespace {

Tensor<double> random_probs(std::size_t n, std::size_t k, RngState& rng, bool coarse) {
  Tensor<double> p({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) {
      // Coarse scores force many ties.
      p[i * k + c] = coarse ? 1.0 + rng.below(4) : rng.uniform(0.01, 1.0);
      s += p[i * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) p[i * k + c] /= s;
  }
  return p;
}

}  // namespace

TEST(Metrics, ConfusionOrientation) {
  auto cm = confusion({0, 0, 1, 2}, {0, 1, 1, 0}, 3);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(2, 0), 1u);
  EXPECT_EQ(cm.at(1, 0), 0u);
  EXPECT_EQ(cm.csv(), "1,1,0\n0,1,0\n1,0,0\n");
  EXPECT_THROW(confusion({0, 3}, {0, 0}, 3), ValidationError);
  EXPECT_THROW(confusion({0}, {0, 0}, 3), ShapeError);
}

TEST(Metrics, RatesMatchBruteForce) {
  RngState rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    auto l = random_labels(rng);
    auto r = basic_rates(confusion(l.truth, l.pred, l.k));
    auto o = brute(l);
    EXPECT_NEAR(r.accuracy, o.acc, 1e-12);
    EXPECT_NEAR(r.precision_micro, o.p_micro, 1e-12);
    EXPECT_NEAR(r.recall_micro, o.r_micro, 1e-12);
    EXPECT_NEAR(r.f1_micro, o.f_micro, 1e-12);
    EXPECT_NEAR(r.precision_macro, o.p_macro, 1e-12);
    EXPECT_NEAR(r.recall_macro, o.r_macro, 1e-12);
    EXPECT_NEAR(r.f1_macro, o.f_macro, 1e-12);
    EXPECT_DOUBLE_EQ(r.sensitivity, r.recall_macro);
    for (std::size_t c = 0; c < l.k; ++c) EXPECT_EQ(r.per_class[c].zero_denominator, o.flags[c]);
  }
}

TEST(Metrics, MicroRatesEqualAccuracyForSingleLabel) {
  RngState rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    auto l = random_labels(rng);
    auto r = basic_rates(confusion(l.truth, l.pred, l.k));
    EXPECT_NEAR(r.precision_micro, r.accuracy, 1e-12);
    EXPECT_NEAR(r.recall_micro, r.accuracy, 1e-12);
    EXPECT_NEAR(r.f1_micro, r.accuracy, 1e-12);
  }
}

TEST(Metrics, ZeroDenominatorGivesZeroAndFlag) {
  // Class 2 is never predicted nor present.
  auto r = basic_rates(confusion({0, 1, 1}, {0, 1, 0}, 3));
  EXPECT_EQ(r.per_class[2].precision, 0.0);
  EXPECT_EQ(r.per_class[2].recall, 0.0);
  EXPECT_TRUE(r.per_class[2].zero_denominator);
  EXPECT_FALSE(r.per_class[0].zero_denominator);
  EXPECT_THROW(basic_rates(ConfusionMatrix(3)), ValidationError);
}

TEST(Metrics, AucMatchesPairwiseOracle) {
  RngState rng(55);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 2 + rng.below(4), n = 2 + rng.below(50);
    std::vector<std::size_t> truth(n);
    for (auto& t : truth) t = rng.below(k);
    auto probs = random_probs(n, k, rng, trial % 2 == 0);
    auto r = roc_auc(truth, probs);
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> s(n);
      std::vector<bool> pos(n);
      std::size_t np = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = probs[i * k + c];
        pos[i] = truth[i] == c;
        np += pos[i];
      }
      if (np == 0 || np == n) {
        EXPECT_FALSE(r.per_class[c].has_value());
        continue;
      }
      const double want = pairwise_auc(s, pos);
      ASSERT_TRUE(r.per_class[c].has_value());
      EXPECT_NEAR(*r.per_class[c], want, 1e-12);
      sum += want;
      ++used;
    }
    if (used) {
      ASSERT_TRUE(r.macro.has_value());
      EXPECT_NEAR(*r.macro, sum / used, 1e-12);
    } else {
      EXPECT_FALSE(r.macro.has_value());
    }
  }
}

TEST(Metrics, AucInvariantUnderMonotoneTransform) {
  RngState rng(9);
  const std::size_t n = 40, k = 3;
  std::vector<std::size_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) truth[i] = i % k;
  auto probs = random_probs(n, k, rng, false);
  Tensor<double> warped(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) warped[i] = std::exp(3 * probs[i]) + 2;
  EXPECT_NEAR(*roc_auc(truth, probs).macro, *roc_auc(truth, warped).macro, 1e-12);
}

TEST(Metrics, AucKnownValues) {
  // Perfect ranking and fully reversed ranking.
  Tensor<double> good({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9});
  EXPECT_DOUBLE_EQ(*roc_auc({0, 0, 1, 1}, good).macro, 1.0);
  EXPECT_DOUBLE_EQ(*roc_auc({1, 1, 0, 0}, good).macro, 0.0);
  Tensor<double> flat({4, 2}, 0.5);
  EXPECT_DOUBLE_EQ(*roc_auc({0, 1, 0, 1}, flat).macro, 0.5);
}

TEST(Metrics, AucSkipsAbsentClassWithWarning) {
  Tensor<double> p({4, 3}, {.7, .2, .1, .6, .3, .1, .2, .7, .1, .3, .6, .1});
  auto r = roc_auc({0, 0, 1, 1}, p);
  EXPECT_FALSE(r.per_class[2].has_value());
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_DOUBLE_EQ(*r.macro, 1.0);
}

TEST(Metrics, RmseClosedForms) {
  Tensor<double> y({2, 2}, {1, 0, 0, 1});
  Tensor<double> half({2, 2}, 0.5);
  EXPECT_DOUBLE_EQ(rmse(y, half), 0.5);
  Tensor<double> y3({1, 4}, {0, 1, 0, 0});
  Tensor<double> p3({1, 4}, {0.25, 0.25, 0.25, 0.25});
  // (3 * 0.0625 + 0.5625) / 4 = 0.1875
  EXPECT_NEAR(rmse(y3, p3), std::sqrt(0.1875), 1e-15);
  EXPECT_EQ(rmse(y, y), 0.0);
  EXPECT_THROW(rmse(y, y3), ShapeError);
}

TEST(Metrics, ReportJsonFields) {
  Tensor<double> p({4, 2}, {0.9, 0.1, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8});
  auto r = evaluate_predictions({0, 0, 1, 1}, p);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  auto j = to_json(r, {"A", "B"});
  for (const char* key : {"accuracy", "precision_micro", "recall_micro", "f1_micro", "precision_macro",
                          "recall_macro", "f1_macro", "sensitivity", "auc", "rmse", "per_class", "metadata"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["per_class"][1]["class"], "B");
  EXPECT_EQ(j["metadata"]["headline_averaging"], "micro");
  EXPECT_DOUBLE_EQ(j["auc"].get<double>(), 1.0);
}
