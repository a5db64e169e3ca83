#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "amri/amri.hpp"

namespace fs = std::filesystem;
using namespace amri;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 input or validation failure.
constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kInput = 2;

struct InputFailure : ValidationError {
  using ValidationError::ValidationError;
};

// Config file first, then flags. Each flag maps onto a config key so both
// paths share one parser and one set of range checks.
struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;

  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(name, [this, key](const std::string& v) { values[key] = v; }, help);
  }
  void toggle(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    app->add_flag_callback(name, [this, key] { values[key] = "true"; }, help);
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) c = read_run_config(config_path);
    for (const auto& [k, v] : values) set_config_value(c, k, v);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

void write_text(const fs::path& p, const std::string& s) { write_file_bytes(p, std::vector<std::uint8_t>(s.begin(), s.end())); }

PreprocessOptions preprocess_options(const RunConfig& c) { return {c.image_size, c.sharpen}; }

int cmd_prep(const fs::path& in, const fs::path& out, const RunConfig& cfg) {
  if (!fs::is_directory(in)) throw IoError("input directory not found: " + in.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    if (e.is_regular_file() && detail::is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::size_t failed = 0;
  for (const auto& f : files) {
    auto rel = fs::relative(f, in);
    try {
      auto src = read_image(f);
      auto img = to_image8(preprocess_image(src, preprocess_options(cfg)));
      // Gray sources stay single-channel; the three RGB planes are equal.
      if (src.channels == 1) {
        Image8 g(img.width, img.height, 1);
        for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = img.pixels[i * 3];
        img = std::move(g);
      }
      write_png((out / rel).replace_extension(".png"), img);
    } catch (const Error& e) {
      std::cerr << "error: " << rel.generic_string() << ": " << e.what() << "\n";
      ++failed;
    }
  }
  std::cout << "prepared " << files.size() - failed << " of " << files.size() << " images into " << out.string() << "\n";
  if (failed) throw InputFailure(std::to_string(failed) + " file(s) could not be processed");
  return kOk;
}

int cmd_split(const fs::path& data, const fs::path& out, const RunConfig& cfg) {
  std::vector<std::string> warnings;
  auto m = split_dataset(scan_dataset(data, cfg.merge), cfg.seed, cfg.test_fraction, cfg.val_fraction, &warnings);
  if (cfg.augment) m = balance_training_set(m, cfg.seed, cfg.balance_threshold);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  write_manifest(out, m);
  auto tr = m.counts(Split::train), va = m.counts(Split::val), te = m.counts(Split::test);
  for (std::size_t c = 0; c < m.class_names.size(); ++c) {
    std::printf("%-20s train %5zu  val %5zu  test %5zu\n", m.class_names[c].c_str(), tr[c], va[c], te[c]);
  }
  std::cout << "manifest " << out.string() << " hash " << manifest_hash(m) << "\n";
  return kOk;
}

int cmd_train(const fs::path& data, const fs::path& manifest, const fs::path& out, const fs::path& log_path,
              std::size_t jobs, const RunConfig& cfg) {
  auto m = read_manifest(manifest);
  const auto opt = preprocess_options(cfg);
  auto train_set = load_split(m, Split::train, data, opt, jobs);
  auto val_set = load_split(m, Split::val, data, opt, jobs);
  auto model = build_model<float>(cfg.model_config(m.class_names.size()), RngState(cfg.seed));
  std::printf("training on %zu images, validating on %zu, %zu trainable parameters\n", train_set.size(), val_set.size(),
              model.params.scalar_count(true));
  auto tcfg = cfg.train_config();
  tcfg.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %3zu  loss %.4f  val_loss %.4f  val_acc %.4f  lr %.3g  %.1fs\n", r.epoch, r.train_loss, r.val_loss,
                r.val_acc, r.lr, r.seconds);
    std::fflush(stdout);
  };
  auto log = train(model, train_set, val_set, tcfg);
  save_model(out, model, m.class_names);
  write_text(log_path, log.csv());
  const auto [tl, ta] = evaluate_loss_accuracy(model, train_set);
  const auto [vl, vacc] = evaluate_loss_accuracy(model, val_set);
  std::printf("best epoch %zu  train_acc %.4f  val_acc %.4f\n", log.best_epoch, ta, vacc);
  std::cout << "weights " << out.string() << ", log " << log_path.string() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& data, const fs::path& manifest, const fs::path& model_path, const std::string& split,
             const fs::path& out, const fs::path& confusion_path, std::size_t jobs) {
  std::vector<std::string> names;
  auto model = load_model<float>(model_path, &names);
  auto m = read_manifest(manifest);
  if (!names.empty() && names != m.class_names) throw ValidationError("model classes differ from the manifest classes");
  auto set = load_split(m, parse_split(split), data, {model.config.image_size, false}, jobs);
  auto probs = model.predict(set.x).cast<double>();
  auto report = evaluate_predictions(set.labels, probs);
  std::vector<std::size_t> pred(set.size());
  const std::size_t k = m.class_names.size();
  for (std::size_t i = 0; i < set.size(); ++i) {
    pred[i] = static_cast<std::size_t>(std::max_element(probs.ptr() + i * k, probs.ptr() + (i + 1) * k) - (probs.ptr() + i * k));
  }
  auto cm = confusion(set.labels, pred, k);
  auto j = to_json(report, m.class_names);
  j["split"] = split;
  j["samples"] = set.size();
  j["manifest_hash"] = manifest_hash(m);
  write_text(out, j.dump(2) + "\n");
  std::string csv = "true\\pred";
  for (const auto& n : m.class_names) csv += "," + detail::csv_field(n);
  csv += "\n";
  for (std::size_t t = 0; t < k; ++t) {
    csv += detail::csv_field(m.class_names[t]);
    for (std::size_t p = 0; p < k; ++p) csv += "," + std::to_string(cm.at(t, p));
    csv += "\n";
  }
  write_text(confusion_path, csv);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::printf("%s accuracy %.4f  f1_macro %.4f  auc %s\n", split.c_str(), report.accuracy, report.f1_macro,
              report.auc ? std::to_string(*report.auc).c_str() : "n/a");
  return kOk;
}

int cmd_explain(const fs::path& model_path, const fs::path& image, const fs::path& out,
                std::optional<std::size_t> target, const RunConfig& cfg) {
  auto model = load_model<float>(model_path);
  const auto pixels = preprocess_image(read_image(image), {model.config.image_size, cfg.sharpen});
  auto x = pixels.reshaped({1, pixels.dim(0), pixels.dim(1), pixels.dim(2)});
  auto net = cam_network(model, cfg.cam_layer);
  auto opt = cfg.cam_options();
  opt.target = target;
  auto hm = explain(net, x, opt);
  write_png(out, render_overlay(hm.values, pixels, cfg.overlay_alpha));
  auto side = out;
  auto j = cam_sidecar(hm, cfg.cam_layer, opt);
  j["overlay_alpha"] = cfg.overlay_alpha;
  write_text(side.replace_extension(".json"), j.dump(2) + "\n");
  std::cout << cam_method_name(hm.method) << " class " << hm.target_class << " -> " << out.string() << "\n";
  return kOk;
}

int cmd_synth(const fs::path& out, const SynthOptions& opt) {
  auto files = generate_synthetic_dataset(out, opt);
  std::cout << "wrote " << files.size() << " images to " << out.string() << " hash " << image_tree_hash(out) << "\n";
  return kOk;
}

int cmd_slices(const fs::path& volume, const fs::path& out, const std::string& plane, std::size_t count) {
  auto vol = read_volume(volume);
  float top = 0;
  for (float v : vol.voxels.data()) top = std::max(top, v);
  auto slices = select_middle_slices(vol, parse_plane(plane), count);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%03zu.png", i);
    write_png(out / name, slice_to_image(slices[i], top > 0 ? top : 1.0f));
  }
  std::cout << "wrote " << slices.size() << " " << plane << " slices to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Alzheimer's MRI classifier: data preparation, training, evaluation and CAM explanations"};
  app.require_subcommand(1);
  Overrides ov;
  app.add_option("--config", ov.config_path, "key = value run configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", ov.sets, "override one config key (key=value), repeatable");
  std::function<int()> run;
  std::size_t jobs = 1;

  auto* prep = app.add_subcommand("prep", "preprocess an image tree (RGB, resize, optional sharpen)");
  fs::path prep_in, prep_out;
  prep->add_option("--input", prep_in, "source image tree")->required();
  prep->add_option("--output", prep_out, "destination tree")->required();
  ov.flag(prep, "--size", "image_size", "output side length");
  ov.toggle(prep, "--sharpen", "sharpen", "apply the sharpening kernel");
  prep->callback([&] { run = [&] { return cmd_prep(prep_in, prep_out, ov.resolve()); }; });

  auto* split = app.add_subcommand("split", "scan a class-per-directory tree and write a split manifest");
  fs::path split_data, split_out;
  split->add_option("--data", split_data, "dataset root")->required();
  split->add_option("--output", split_out, "manifest CSV path")->required();
  ov.flag(split, "--seed", "seed", "split seed");
  ov.flag(split, "--test", "test_fraction", "test fraction");
  ov.flag(split, "--val", "val_fraction", "validation fraction of the remainder");
  ov.flag(split, "--merge", "merge", "class merges, e.g. A:B,C:B");
  ov.flag(split, "--augment", "augment", "balance minority classes with augmented copies (true/false)");
  ov.flag(split, "--balance-threshold", "balance_threshold", "imbalance ratio threshold");
  split->callback([&] { run = [&] { return cmd_split(split_data, split_out, ov.resolve()); }; });

  auto* trn = app.add_subcommand("train", "train a model on the train split of a manifest");
  fs::path train_data, train_manifest, train_out, train_log = "train_log.csv";
  trn->add_option("--data", train_data, "dataset root")->required();
  trn->add_option("--manifest", train_manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  trn->add_option("--output", train_out, "weight file path")->required();
  trn->add_option("--log", train_log, "per-epoch log CSV");
  trn->add_option("--jobs", jobs, "image loading threads");
  for (auto [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--epochs", "epochs"}, {"--batch", "batch"}, {"--lr", "lr"}, {"--optimizer", "optimizer"},
           {"--scheduler", "scheduler"}, {"--factor", "factor"}, {"--patience", "patience"}, {"--min-lr", "min_lr"},
           {"--seed", "seed"}, {"--size", "image_size"}, {"--model", "model"}}) {
    ov.flag(trn, flag, key, key);
  }
  ov.toggle(trn, "--sharpen", "sharpen", "apply the sharpening kernel");
  trn->callback([&] { run = [&] { return cmd_train(train_data, train_manifest, train_out, train_log, jobs, ov.resolve()); }; });

  auto* ev = app.add_subcommand("eval", "evaluate a model on one split");
  fs::path ev_data, ev_manifest, ev_model, ev_out = "report.json", ev_cm = "confusion.csv";
  std::string ev_split = "test";
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--manifest", ev_manifest, "manifest CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--model", ev_model, "weight file")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", ev_split, "train, val or test");
  ev->add_option("--output", ev_out, "metric report JSON");
  ev->add_option("--confusion", ev_cm, "confusion matrix CSV");
  ev->add_option("--jobs", jobs, "image loading threads");
  ev->callback([&] { run = [&] { return cmd_eval(ev_data, ev_manifest, ev_model, ev_split, ev_out, ev_cm, jobs); }; });

  auto* ex = app.add_subcommand("explain", "render a class activation map overlay for one image");
  fs::path ex_model, ex_image, ex_out = "overlay.png";
  std::optional<std::size_t> ex_class;
  ex->add_option("--model", ex_model, "weight file")->required()->check(CLI::ExistingFile);
  ex->add_option("--image", ex_image, "input image")->required()->check(CLI::ExistingFile);
  ex->add_option("--output", ex_out, "overlay PNG; a JSON sidecar is written next to it");
  ex->add_option("--class", ex_class, "target class (default: predicted)");
  ov.flag(ex, "--method", "cam_method", "gradcam, scorecam, faster-scorecam or xgradcam");
  ov.flag(ex, "--layer", "cam_layer", "capture layer");
  ov.flag(ex, "--top-k", "cam_top_k", "channels kept by faster-scorecam");
  ov.flag(ex, "--eta", "cam_eta", "gradient offset for xgradcam");
  ov.toggle(ex, "--canonical", "cam_canonical", "activation-weighted xgradcam weights");
  ov.flag(ex, "--alpha", "overlay_alpha", "heatmap opacity");
  ex->callback([&] { run = [&] { return cmd_explain(ex_model, ex_image, ex_out, ex_class, ov.resolve()); }; });

  auto* syn = app.add_subcommand("synth", "generate the synthetic ellipse dataset");
  fs::path syn_out;
  SynthOptions syn_opt;
  syn->add_option("--output", syn_out, "destination root")->required();
  syn->add_option("--classes", syn_opt.classes, "number of classes (1-3)");
  syn->add_option("--per-class", syn_opt.per_class, "images per class");
  syn->add_option("--size", syn_opt.size, "image side length");
  syn->add_option("--seed", syn_opt.seed, "generator seed");
  syn->callback([&] { run = [&] { return cmd_synth(syn_out, syn_opt); }; });

  auto* st = app.add_subcommand("selftest", "run the gradient-check and invariant suites");
  std::uint64_t st_seed = 43;
  st->add_option("--seed", st_seed, "suite seed");
  st->callback([&] { run = [&] { return run_selftest(std::cout, st_seed) ? kOk : kRuntime; }; });

  auto* sl = app.add_subcommand("slices", "export the middle slices of a volume as PNGs");
  fs::path sl_vol, sl_out;
  std::string sl_plane = "axial";
  std::size_t sl_count = 1;
  sl->add_option("--volume", sl_vol, "volume file")->required()->check(CLI::ExistingFile);
  sl->add_option("--output", sl_out, "destination directory")->required();
  sl->add_option("--plane", sl_plane, "axial, coronal or sagittal");
  sl->add_option("--count", sl_count, "number of middle slices");
  sl->callback([&] { run = [&] { return cmd_slices(sl_vol, sl_out, sl_plane, sl_count); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }
  try {
    return run();
  } catch (const InputFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
