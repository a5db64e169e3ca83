// Trains a small classifier on generated images, evaluates it and writes a
// GradCAM overlay for one test image.
//
//   quickstart [output-dir]

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "amri/amri.hpp"

using namespace amri;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? argv[1] : "quickstart_out";
  fs::create_directories(out);

  // 3 classes x 40 images at 64 px, split 15% test, then 15% of the rest for validation.
  SynthOptions so;
  so.per_class = 40;
  so.size = 64;
  generate_synthetic_dataset(out / "data", so);
  auto manifest = split_dataset(scan_dataset(out / "data"), 43);
  write_manifest(out / "manifest.csv", manifest);

  const PreprocessOptions pre{64, false};
  auto train_set = load_split(manifest, Split::train, out / "data", pre);
  auto val_set = load_split(manifest, Split::val, out / "data", pre);
  auto test_set = load_split(manifest, Split::test, out / "data", pre);

  auto model = build_model<float>(ModelConfig::reduced(manifest.class_names.size(), 64), RngState(43));
  TrainConfig tc;
  tc.epochs = 10;
  tc.lr = 1e-3;
  tc.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %2zu  loss %.4f  val_loss %.4f  val_acc %.3f\n", r.epoch, r.train_loss, r.val_loss, r.val_acc);
  };
  train(model, train_set, val_set, tc);
  save_model(out / "model.amri", model, manifest.class_names);

  const auto probs = model.predict(test_set.x);
  Tensor<double> p(probs.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = probs[i];
  const auto report = evaluate_predictions(test_set.labels, p);
  std::printf("test accuracy %.3f  macro F1 %.3f\n", report.accuracy, report.f1_macro);

  // GradCAM for the first test image.
  auto x = gather_rows<float>(test_set.x, {0});
  auto net = cam_network(model);
  auto hm = gradcam(net, x);
  const auto img = x.reshaped({64, 64, 3});
  write_png(out / "gradcam.png", render_overlay(hm.values, img, 0.4));
  std::cout << "class " << manifest.class_names[hm.target_class] << ", overlay written to " << (out / "gradcam.png")
            << "\n";
}
