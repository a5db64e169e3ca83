#include <gtest/gtest.h>

#include <cmath>

#include "amri/gradcheck.hpp"
#include "amri/model.hpp"
#include "test_util.hpp"

using namespace amri;
using tu::random_tensor;

namespace {

// Running statistics start empty; one train-mode pass fills them.
template <class T>
void warm_up(Model<T>& m, RngState& rng, std::size_t n = 4) {
  Tape<T> t(false);
  m.forward(t, random_tensor<T>({n, m.config.image_size, m.config.image_size, m.config.channels}, rng, 0, 1),
            Mode::train, RngState(1));
}

ModelConfig tiny(std::size_t k, std::size_t size) {
  auto c = ModelConfig::reduced(k, size);
  c.stem_filters = {3, 4};
  c.residual_filters = 8;
  c.attention = {8, 4, 2};
  c.dense_units = 6;
  c.spatial_kernel = 3;
  return c;
}

}  // namespace

TEST(Model, FullSizeShapesAndSoftmax) {
  RngState rng(1);
  auto m = build_model<float>(ModelConfig{}, RngState(43));
  warm_up(m, rng, 2);
  auto x = random_tensor<float>({2, 128, 128, 3}, rng, 0, 1);
  auto p = m.predict(x);
  EXPECT_EQ(p.shape(), (Shape{2, 4}));
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += p.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Model, FrozenParameterCount) {
  auto m = build_model<float>(ModelConfig{}, RngState(43));
  EXPECT_EQ(m.params.scalar_count(true), 448999u);
  EXPECT_EQ(m.params.scalar_count(false), 448999u + 2 * (32 + 64 + 3 * 128) + 5);
  auto r = build_model<float>(ModelConfig::reduced(3), RngState(43));
  EXPECT_EQ(r.params.scalar_count(true), 28966u);
}

TEST(Model, SameSeedSameParameters) {
  auto a = build_model<float>(ModelConfig::reduced(4), RngState(7));
  auto b = build_model<float>(ModelConfig::reduced(4), RngState(7));
  auto c = build_model<float>(ModelConfig::reduced(4), RngState(8));
  auto pa = a.params.parameters();
  auto pb = b.params.parameters();
  auto pc = c.params.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(pa[i].second->value == pb[i].second->value) << pa[i].first;
    any_diff = any_diff || !(pa[i].second->value == pc[i].second->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, UntrainedIsNearUniform) {
  EXPECT_EQ(build_model<float>(ModelConfig::reduced(4), RngState(43)).params.get("classifier").at("kernel").value,
            Tensor<float>({32, 4}));
  RngState rng(2);
  auto m = build_model<float>(ModelConfig::reduced(4), RngState(43));
  warm_up(m, rng, 8);
  auto p = m.predict(random_tensor<float>({32, 128, 128, 3}, rng, 0, 1));
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 32; ++r) s += p.at({r, c});
    EXPECT_NEAR(s / 32, 0.25, 0.15);
  }
}

TEST(Model, CaptureShapes) {
  RngState rng(3);
  auto m = build_model<float>(ModelConfig{}, RngState(43));
  warm_up(m, rng, 2);
  Tape<float> t(false);
  auto r = m.forward(t, random_tensor<float>({1, 128, 128, 3}, rng, 0, 1), Mode::infer, {}, "multi_residual_out");
  ASSERT_TRUE(r.captured.has_value());
  EXPECT_EQ(r.captured->shape(), (Shape{1, 32, 32, 128}));
  EXPECT_THROW(m.forward(t, Tensor<float>({1, 128, 128, 3}), Mode::infer, {}, "nope"), ValidationError);
  EXPECT_THROW(m.forward(t, Tensor<float>({1, 64, 64, 3}), Mode::infer), ShapeError);
  for (const auto& name : m.capture_points()) {
    auto c = m.forward(t, Tensor<float>({1, 128, 128, 3}), Mode::infer, {}, name);
    EXPECT_TRUE(c.captured.has_value()) << name;
  }
}

TEST(Model, InferIsPureAndRowwise) {
  RngState rng(4);
  auto m = build_model<float>(ModelConfig::reduced(3), RngState(43));
  warm_up(m, rng);
  auto img = random_tensor<float>({1, 128, 128, 3}, rng, 0, 1);
  Tensor<float> batch({3, 128, 128, 3});
  for (std::size_t b = 0; b < 3; ++b) std::copy_n(img.ptr(), img.size(), batch.ptr() + b * img.size());
  auto p1 = m.predict(batch);
  auto p2 = m.predict(batch);
  EXPECT_TRUE(p1 == p2);
  for (std::size_t b = 1; b < 3; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p1.at({b, c}), p1.at({0, c}));
}

TEST(Model, InferBeforeStatsIsAnError) {
  auto m = build_model<float>(ModelConfig::reduced(3, 16), RngState(43));
  EXPECT_THROW(m.predict(Tensor<float>({1, 16, 16, 3})), StateError);
}

TEST(Model, ConfigValidation) {
  auto c = ModelConfig::reduced(1);
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig::reduced(3);
  c.attention.d = 16;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig::reduced(3, 4);
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig::reduced(3);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_EQ(ModelConfig{}.token_grid(), 16u);
  EXPECT_EQ(ModelConfig::reduced(3, 16).token_grid(), 2u);
}

TEST(MultiResidual, ZeroBranchesGiveRelu) {
  RngState rng(5);
  ParamStore<double> ps;
  add_multi_residual_params(ps, "mr", 4, 4, rng);
  EXPECT_FALSE(ps.has("mr_skip"));
  for (auto& [name, p] : ps.parameters()) {
    if (name.find("kernel") != std::string::npos) p->value.fill(0.0);
  }
  // Zero conv output normalizes to zero, so every branch is relu(beta) = 0.
  Tape<double> t(false);
  auto x = random_tensor<double>({2, 5, 5, 4}, rng);
  auto y = multi_residual_block(t.constant(x), ps, "mr", Mode::train).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(0.0, x[i]));
}

TEST(MultiResidual, ProjectionAndShape) {
  RngState rng(6);
  ParamStore<double> ps;
  add_multi_residual_params(ps, "mr", 3, 5, rng);
  EXPECT_TRUE(ps.has("mr_skip"));
  EXPECT_THROW(add_multi_residual_params(ps, "mr", 3, 5, rng), ValidationError);
  Tape<double> t(false);
  auto y = multi_residual_block(t.constant(random_tensor<double>({1, 7, 6, 3}, rng)), ps, "mr", Mode::train);
  EXPECT_EQ(y.shape(), (Shape{1, 7, 6, 5}));
}

TEST(MultiResidual, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngState rng(seed, 50);
    ParamStore<double> ps;
    add_multi_residual_params(ps, "mr", 4, 4, rng);
    for (auto& [name, p] : ps.parameters(true)) {
      if (name.find("beta") != std::string::npos || name.find("bias") != std::string::npos) {
        p->value = random_tensor<double>(p->value.shape(), rng, -0.3, 0.3);
      }
    }
    auto x = random_tensor<double>({1, 8, 8, 4}, rng);
    auto w = random_tensor<double>({1, 8, 8, 4}, rng);
    auto loss = [&](Tape<double>& t) {
      return sum(mul(multi_residual_block(t.constant(x), ps, "mr", Mode::train), t.constant(w)));
    };
    auto r = check_parameter_gradients<double>(loss, ps.parameters(true), tu::f64_check());
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
    auto fx = [&](Var<double> v) { return multi_residual_block(v, ps, "mr", Mode::train); };
    EXPECT_LT(tu::weighted_check<double>(fx, x, seed, tu::f64_check()).max_rel_error, 1e-6);
  }
}

// Loss of a 2-sample batch at 16x16 against every trainable parameter.
TEST(Model, EndToEndGradientCheck) {
  RngState rng(11);
  auto m = build_model<double>(tiny(3, 16), RngState(43));
  for (auto& [name, p] : m.params.parameters(true)) {
    if (name.find("beta") != std::string::npos || name.find("bias") != std::string::npos ||
        name.find("/b") != std::string::npos || name == "classifier/kernel") {
      p->value = random_tensor<double>(p->value.shape(), rng, -0.2, 0.2);
    }
  }
  auto x = random_tensor<double>({2, 16, 16, 3}, rng, 0, 1);
  auto y = Tensor<double>({2, 3}, {1, 0, 0, 0, 0, 1});
  auto loss = [&](Tape<double>& t) {
    auto r = m.forward(t, x, Mode::train, RngState(5));
    return scale(sum(mul(log(r.probs), t.constant(y))), -0.5);
  };
  auto r = check_parameter_gradients<double>(loss, m.params.parameters(true), tu::f64_check());
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  EXPECT_GT(r.coords, 1000u);
}

TEST(Model, ClassifierPermutationPermutesProbs) {
  RngState rng(12);
  auto m = build_model<double>(ModelConfig::reduced(4, 16), RngState(43));
  warm_up(m, rng);
  auto x = random_tensor<double>({3, 16, 16, 3}, rng, 0, 1);
  auto& cls = m.params.get("classifier");
  cls.tensors["bias"].value = random_tensor<double>({4}, rng);
  cls.tensors["kernel"].value = random_tensor<double>(cls.at("kernel").value.shape(), rng);
  auto before = m.predict(x);
  const std::size_t perm[4] = {2, 0, 3, 1};
  auto k = cls.at("kernel").value;
  auto b = cls.at("bias").value;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < k.dim(0); ++i) cls.tensors["kernel"].value.at({i, c}) = k.at({i, perm[c]});
    cls.tensors["bias"].value[c] = b[perm[c]];
  }
  auto after = m.predict(x);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(after.at({r, c}), before.at({r, perm[c]}), 1e-15);
}
