#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "amri/data.hpp"
#include "amri/synth.hpp"

using namespace amri;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("amri_test_" + name);
  fs::remove_all(p);
  return p;
}

// Multinomial logistic regression on raw pixels, full-batch gradient descent.
struct Linear {
  std::size_t d, k;
  std::vector<double> w, b;

  Linear(std::size_t d, std::size_t k) : d(d), k(k), w(d * k, 0.0), b(k, 0.0) {}

  std::vector<double> probs(const std::vector<double>& x) const {
    std::vector<double> z(b);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t c = 0; c < k; ++c) z[c] += x[i] * w[i * k + c];
    }
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (auto& v : z) s += (v = std::exp(v - m));
    for (auto& v : z) v /= s;
    return z;
  }

  void fit(const std::vector<std::vector<double>>& xs, const std::vector<std::size_t>& ys, int epochs, double lr) {
    for (int e = 0; e < epochs; ++e) {
      std::vector<double> gw(d * k, 0.0), gb(k, 0.0);
      for (std::size_t n = 0; n < xs.size(); ++n) {
        auto p = probs(xs[n]);
        p[ys[n]] -= 1;
        for (std::size_t c = 0; c < k; ++c) gb[c] += p[c];
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t c = 0; c < k; ++c) gw[i * k + c] += xs[n][i] * p[c];
        }
      }
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i] / xs.size();
      for (std::size_t c = 0; c < k; ++c) b[c] -= lr * gb[c] / xs.size();
    }
  }

  std::size_t predict(const std::vector<double>& x) const {
    auto p = probs(x);
    return std::max_element(p.begin(), p.end()) - p.begin();
  }
};

}  // namespace

TEST(Synth, SameSeedSameImages) {
  SynthOptions o;
  EXPECT_EQ(synthetic_image(2, 5, o), synthetic_image(2, 5, o));
  auto other = o;
  other.seed = 44;
  EXPECT_NE(synthetic_image(2, 5, o), synthetic_image(2, 5, other));
  EXPECT_NE(synthetic_image(1, 5, o), synthetic_image(1, 6, o));
}

TEST(Synth, TreeLayoutAndHashStable) {
  SynthOptions o;
  o.per_class = 4;
  o.size = 64;
  auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  auto files = generate_synthetic_dataset(a, o);
  generate_synthetic_dataset(b, o);
  EXPECT_EQ(files.size(), 12u);
  for (const auto& name : synthetic_class_names()) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(a / name)) n += e.path().extension() == ".png";
    EXPECT_EQ(n, 4u) << name;
  }
  EXPECT_EQ(image_tree_hash(a), image_tree_hash(b));
  for (const auto& f : files) EXPECT_EQ(read_file_bytes(f), read_file_bytes(b / fs::relative(f, a)));
  auto img = read_image(a / "one_void" / "img_000.png");
  EXPECT_EQ(img.channels, 1u);
  EXPECT_EQ(img.width, 64u);
  auto m = scan_dataset(a);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"one_void", "solid", "two_voids"}));
}

TEST(Synth, HashSeesPixelChanges) {
  SynthOptions o;
  o.per_class = 2;
  o.size = 32;
  o.classes = 2;
  auto a = temp_dir("synth_h");
  auto files = generate_synthetic_dataset(a, o);
  const auto before = image_tree_hash(a);
  auto im = read_image(files[0]);
  im.pixels[7] ^= 1;
  write_png(files[0], im);
  EXPECT_NE(image_tree_hash(a), before);
}

TEST(Synth, Validation) {
  SynthOptions o;
  o.classes = 4;
  EXPECT_THROW(o.validate(), ValidationError);
  o.classes = 3;
  o.per_class = 0;
  EXPECT_THROW(o.validate(), ValidationError);
}

// Classes overlap for a linear model on raw pixels yet stay learnable.
TEST(Synth, LinearBaselineBetweenChanceAndPerfect) {
  SynthOptions o;
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<std::size_t> train_y, test_y;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < o.per_class; ++i) {
      auto im = synthetic_image(c, i, o);
      std::vector<double> x(im.pixels.size());
      for (std::size_t p = 0; p < x.size(); ++p) x[p] = im.pixels[p] / 255.0;
      // Every fifth image is held out.
      (i % 5 == 0 ? test_x : train_x).push_back(std::move(x));
      (i % 5 == 0 ? test_y : train_y).push_back(c);
    }
  }
  Linear model(128 * 128, 3);
  model.fit(train_x, train_y, 150, 0.05);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < test_x.size(); ++n) correct += model.predict(test_x[n]) == test_y[n];
  const double acc = static_cast<double>(correct) / test_x.size();
  std::printf("linear baseline test accuracy %.3f\n", acc);
  EXPECT_GT(acc, 0.40);
  EXPECT_LT(acc, 1.00);
}
