#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "amri/error.hpp"
#include "amri/explain.hpp"
#include "amri/image_io.hpp"
#include "amri/training.hpp"

namespace amri {

// Every knob of a run. Defaults follow the reference training setup.
struct RunConfig {
  std::size_t epochs = 50;
  std::size_t batch = 8;
  double lr = 1e-4;
  double factor = 0.7;
  std::size_t patience = 7;
  double min_lr = 1e-6;
  std::size_t image_size = 128;
  OptimizerKind optimizer = OptimizerKind::adam;
  SchedulerKind scheduler = SchedulerKind::plateau;
  std::uint64_t seed = 43;
  bool reduced_model = false;

  double test_fraction = 0.15;
  double val_fraction = 0.15;
  std::map<std::string, std::string> merge;  // source class -> target class

  bool augment = true;  // balance minority classes with augmented copies
  double balance_threshold = 10.0;
  bool sharpen = false;

  CamMethod cam_method = CamMethod::gradcam;
  std::string cam_layer = "multi_residual_out";
  std::size_t cam_top_k = 10;
  double cam_eta = 0.0;
  bool cam_canonical = false;
  double overlay_alpha = 0.4;

  void validate() const {
    if (epochs == 0) throw ValidationError("epochs must be positive");
    if (batch == 0) throw ValidationError("batch must be positive");
    if (!(lr > 0 && std::isfinite(lr))) throw ValidationError("lr must be positive");
    if (!(factor > 0 && factor < 1)) throw ValidationError("factor must lie in (0,1)");
    if (!(min_lr >= 0 && min_lr <= lr)) throw ValidationError("min_lr must lie in [0, lr]");
    if (image_size < 8) throw ValidationError("image_size must be at least 8");
    if (!(test_fraction > 0 && test_fraction < 1)) throw ValidationError("test_fraction must lie in (0,1)");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ValidationError("val_fraction must lie in (0,1)");
    if (!(balance_threshold >= 1)) throw ValidationError("balance_threshold must be >= 1");
    if (cam_top_k == 0) throw ValidationError("cam_top_k must be positive");
    if (!(overlay_alpha >= 0 && overlay_alpha <= 1)) throw ValidationError("overlay_alpha must lie in [0,1]");
  }

  ModelConfig model_config(std::size_t num_classes) const {
    ModelConfig c = reduced_model ? ModelConfig::reduced(num_classes, image_size) : ModelConfig{};
    c.image_size = image_size;
    c.num_classes = num_classes;
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch = batch;
    t.lr = lr;
    t.optimizer = optimizer;
    t.scheduler = scheduler;
    t.factor = factor;
    t.patience = patience;
    t.min_lr = min_lr;
    t.seed = seed;
    return t;
  }

  CamOptions cam_options() const {
    CamOptions o;
    o.method = cam_method;
    o.top_k = cam_top_k;
    o.eta = cam_eta;
    o.canonical = cam_canonical;
    return o;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) throw ValidationError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("bad boolean for " + key + ": '" + v + "'");
}

// "A:B, C:B" -> {A->B, C->B}
inline std::map<std::string, std::string> parse_merge(const std::string& v) {
  std::map<std::string, std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("merge entries must be source:target, got '" + item + "'");
    const auto from = trim(item.substr(0, colon)), to = trim(item.substr(colon + 1));
    if (from.empty() || to.empty()) throw ValidationError("empty class name in merge entry '" + item + "'");
    out[from] = to;
  }
  return out;
}

}  // namespace detail

// Sets one key; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  static const std::map<std::string, std::function<void(RunConfig&, const std::string&)>> setters{
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_number<std::size_t>("epochs", v); }},
      {"batch", [](RunConfig& c, const std::string& v) { c.batch = parse_number<std::size_t>("batch", v); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.lr = parse_number<double>("lr", v); }},
      {"factor", [](RunConfig& c, const std::string& v) { c.factor = parse_number<double>("factor", v); }},
      {"patience", [](RunConfig& c, const std::string& v) { c.patience = parse_number<std::size_t>("patience", v); }},
      {"min_lr", [](RunConfig& c, const std::string& v) { c.min_lr = parse_number<double>("min_lr", v); }},
      {"image_size", [](RunConfig& c, const std::string& v) { c.image_size = parse_number<std::size_t>("image_size", v); }},
      {"optimizer", [](RunConfig& c, const std::string& v) { c.optimizer = parse_optimizer(v); }},
      {"scheduler", [](RunConfig& c, const std::string& v) { c.scheduler = parse_scheduler(v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      {"model", [](RunConfig& c, const std::string& v) {
         if (v != "full" && v != "reduced") throw ValidationError("model must be full or reduced, got '" + v + "'");
         c.reduced_model = v == "reduced";
       }},
      {"test_fraction", [](RunConfig& c, const std::string& v) { c.test_fraction = parse_number<double>("test_fraction", v); }},
      {"val_fraction", [](RunConfig& c, const std::string& v) { c.val_fraction = parse_number<double>("val_fraction", v); }},
      {"merge", [](RunConfig& c, const std::string& v) { c.merge = detail::parse_merge(v); }},
      {"augment", [](RunConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }},
      {"balance_threshold",
       [](RunConfig& c, const std::string& v) { c.balance_threshold = parse_number<double>("balance_threshold", v); }},
      {"sharpen", [](RunConfig& c, const std::string& v) { c.sharpen = parse_bool("sharpen", v); }},
      {"cam_method", [](RunConfig& c, const std::string& v) { c.cam_method = parse_cam_method(v); }},
      {"cam_layer", [](RunConfig& c, const std::string& v) { c.cam_layer = v; }},
      {"cam_top_k", [](RunConfig& c, const std::string& v) { c.cam_top_k = parse_number<std::size_t>("cam_top_k", v); }},
      {"cam_eta", [](RunConfig& c, const std::string& v) { c.cam_eta = parse_number<double>("cam_eta", v); }},
      {"cam_canonical", [](RunConfig& c, const std::string& v) { c.cam_canonical = parse_bool("cam_canonical", v); }},
      {"overlay_alpha", [](RunConfig& c, const std::string& v) { c.overlay_alpha = parse_number<double>("overlay_alpha", v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError("unknown config key: " + key);
  it->second(c, value);
}

// Flat "key = value" text; '#' starts a comment.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig read_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  const auto bytes = read_file_bytes(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()), base);
}

}  // namespace amri
