#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "amri/checksum.hpp"
#include "amri/error.hpp"
#include "amri/image_io.hpp"
#include "amri/rng.hpp"
#include "amri/tensor.hpp"

namespace amri {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Image tensors: float [H,W,C]

inline Tensor<float> to_tensor(const Image8& im) {
  Tensor<float> t({im.height, im.width, im.channels});
  for (std::size_t i = 0; i < im.pixels.size(); ++i) t[i] = static_cast<float>(im.pixels[i]);
  return t;
}

// Values in [0,1] to 8 bits, rounding to nearest.
inline Image8 to_image8(const Tensor<float>& t) {
  if (t.rank() != 3) throw ShapeError("to_image8 expects [H,W,C]");
  Image8 im(t.dim(1), t.dim(0), t.dim(2));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = std::clamp(t[i], 0.0f, 1.0f);
    im.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return im;
}

inline Tensor<float> gray_to_rgb(const Tensor<float>& t) {
  if (t.rank() != 3) throw ShapeError("gray_to_rgb expects [H,W,C]");
  if (t.dim(2) == 3) return t;
  if (t.dim(2) != 1) throw ShapeError("expected 1 or 3 channels, got " + std::to_string(t.dim(2)));
  Tensor<float> out({t.dim(0), t.dim(1), 3});
  for (std::size_t i = 0; i < t.size(); ++i) out[3 * i] = out[3 * i + 1] = out[3 * i + 2] = t[i];
  return out;
}

namespace detail {

// Bilinear sample with coordinates clamped to the image (nearest-edge fill).
inline float sample_bilinear(const Tensor<float>& img, double y, double x, std::size_t c) {
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y);
  const auto x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const float* p = img.ptr();
  const double a = p[(y0 * w + x0) * ch + c], b = p[(y0 * w + x1) * ch + c];
  const double d = p[(y1 * w + x0) * ch + c], e = p[(y1 * w + x1) * ch + c];
  // a + (b-a)*f form keeps constants and integer positions exact.
  const double top = a + (b - a) * fx;
  const double bot = d + (e - d) * fx;
  return static_cast<float>(top + (bot - top) * fy);
}

}  // namespace detail

// Half-pixel-centre bilinear resize; same-size resize is the identity.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw ShapeError("resize expects [H,W,C]");
  if (out_h == 0 || out_w == 0) throw ValidationError("resize target must be positive");
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  if (h == out_h && w == out_w) return img;
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  Tensor<float> out({out_h, out_w, ch});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      for (std::size_t c = 0; c < ch; ++c) out[(y * out_w + x) * ch + c] = detail::sample_bilinear(img, src_y, src_x, c);
    }
  }
  return out;
}

// Cross-shaped 3x3 sharpening kernel (centre 5, 4-neighbours -1), replicate
// padding, clamped to [0,1].
inline Tensor<float> sharpen(const Tensor<float>& img) {
  if (img.rank() != 3) throw ShapeError("sharpen expects [H,W,C]");
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  Tensor<float> out(img.shape());
  auto px = [&](std::size_t y, std::size_t x, std::size_t c) { return img[(y * w + x) * ch + c]; };
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t up = y == 0 ? 0 : y - 1, down = std::min(y + 1, h - 1);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t left = x == 0 ? 0 : x - 1, right = std::min(x + 1, w - 1);
      for (std::size_t c = 0; c < ch; ++c) {
        const float v = 5.0f * px(y, x, c) - px(up, x, c) - px(down, x, c) - px(y, left, c) - px(y, right, c);
        out[(y * w + x) * ch + c] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

struct PreprocessOptions {
  std::size_t size = 128;
  bool sharpen = false;
};

// Decoded 8-bit image to [size,size,3] in [0,1].
inline Tensor<float> preprocess_image(const Image8& im, const PreprocessOptions& opt = {}) {
  auto t = resize_bilinear(gray_to_rgb(to_tensor(im)), opt.size, opt.size);
  for (auto& v : t.data()) v /= 255.0f;
  if (opt.sharpen) t = sharpen(t);
  return t;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double rotation_deg = 0.0;
  double width_shift = 0.0;   // fraction of width
  double height_shift = 0.0;  // fraction of height
  double shear = 0.0;         // x += shear * y
  double zoom = 1.0;          // > 1 magnifies
  bool hflip = false;

  void validate() const {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (!in(rotation_deg, -15, 15)) throw ValidationError("rotation must lie in [-15, 15] degrees");
    if (!in(width_shift, -0.1, 0.1) || !in(height_shift, -0.1, 0.1)) throw ValidationError("shifts must lie in [-0.1, 0.1]");
    if (!in(shear, -0.2, 0.2)) throw ValidationError("shear must lie in [-0.2, 0.2]");
    if (!in(zoom, 0.8, 1.2)) throw ValidationError("zoom must lie in [0.8, 1.2]");
  }

  static AugmentParams random(RngState& rng) {
    AugmentParams p;
    p.rotation_deg = rng.uniform(-15.0, 15.0);
    p.width_shift = rng.uniform(-0.1, 0.1);
    p.height_shift = rng.uniform(-0.1, 0.1);
    p.shear = rng.uniform(-0.2, 0.2);
    p.zoom = rng.uniform(0.8, 1.2);
    p.hflip = rng.bernoulli(0.5);
    return p;
  }

  // Shortest round-trip text, e.g. "3.25,0.01,-0.05,0.1,1.1,1".
  std::string encode() const {
    std::string s;
    char buf[32];
    for (double v : {rotation_deg, width_shift, height_shift, shear, zoom}) {
      auto r = std::to_chars(buf, buf + sizeof buf, v);
      s.append(buf, r.ptr);
      s += ',';
    }
    s += hflip ? '1' : '0';
    return s;
  }

  static AugmentParams decode(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
    if (parts.size() != 6) throw ValidationError("bad augmentation spec: " + s);
    double v[5];
    for (int i = 0; i < 5; ++i) {
      auto r = std::from_chars(parts[i].data(), parts[i].data() + parts[i].size(), v[i]);
      if (r.ec != std::errc{} || r.ptr != parts[i].data() + parts[i].size()) throw ValidationError("bad augmentation value: " + parts[i]);
    }
    if (parts[5] != "0" && parts[5] != "1") throw ValidationError("bad flip flag: " + parts[5]);
    AugmentParams p{v[0], v[1], v[2], v[3], v[4], parts[5] == "1"};
    p.validate();
    return p;
  }

  bool operator==(const AugmentParams&) const = default;
};

inline Tensor<float> hflip(const Tensor<float>& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) out[(y * w + x) * ch + c] = img[(y * w + (w - 1 - x)) * ch + c];
  return out;
}

// Affine warp (rotation, shear, zoom, shift about the centre) by inverse mapping
// with bilinear resampling and nearest-edge fill, then the optional flip.
inline Tensor<float> augment(const Tensor<float>& img, const AugmentParams& p) {
  if (img.rank() != 3) throw ShapeError("augment expects [H,W,C]");
  p.validate();
  const std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double th = p.rotation_deg * std::numbers::pi / 180.0;
  const double cs = p.rotation_deg == 0.0 ? 1.0 : std::cos(th);
  const double sn = p.rotation_deg == 0.0 ? 0.0 : std::sin(th);
  const double tx = p.width_shift * static_cast<double>(w);
  const double ty = p.height_shift * static_cast<double>(h);
  Tensor<float> out(img.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx - tx;
      const double dy = static_cast<double>(y) - cy - ty;
      // undo rotation
      const double rx = cs * dx + sn * dy;
      const double ry = -sn * dx + cs * dy;
      // undo shear, then zoom
      const double sx = (rx - p.shear * ry) / p.zoom + cx;
      const double sy = ry / p.zoom + cy;
      for (std::size_t c = 0; c < ch; ++c) out[(y * w + x) * ch + c] = detail::sample_bilinear(img, sy, sx, c);
    }
  }
  return p.hflip ? hflip(out) : out;
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, val, test, none };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: return "none";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "none" || s.empty()) return Split::none;
  throw ValidationError("unknown split tag: " + s);
}

struct ManifestEntry {
  std::string path;  // relative to the dataset root; for augmented copies, the source image
  std::size_t label = 0;
  Split split = Split::none;
  std::optional<AugmentParams> augment;
  std::size_t copy = 0;  // distinguishes augmented copies of one source

  // Path column text: augmented copies read "<source>#aug<copy>:<params>".
  std::string key() const {
    if (!augment) return path;
    return path + "#aug" + std::to_string(copy) + ":" + augment->encode();
  }

  static ManifestEntry from_key(const std::string& key) {
    ManifestEntry e;
    const auto pos = key.rfind("#aug");
    if (pos == std::string::npos) {
      e.path = key;
      return e;
    }
    const auto colon = key.find(':', pos);
    if (colon == std::string::npos) throw ValidationError("bad augmented path: " + key);
    e.path = key.substr(0, pos);
    const std::string n = key.substr(pos + 4, colon - pos - 4);
    auto r = std::from_chars(n.data(), n.data() + n.size(), e.copy);
    if (r.ec != std::errc{} || r.ptr != n.data() + n.size()) throw ValidationError("bad augmented path: " + key);
    e.augment = AugmentParams::decode(key.substr(colon + 1));
    return e;
  }
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return class_names.size(); }

  std::vector<std::size_t> counts(Split s) const {
    std::vector<std::size_t> c(class_names.size(), 0);
    for (const auto& e : entries) {
      if (e.split == s) ++c[e.label];
    }
    return c;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].split == s) idx.push_back(i);
    }
    return idx;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (e.label >= class_names.size()) throw ValidationError("label out of range for " + e.path);
      if (!seen.insert(e.key()).second) throw ValidationError("duplicate manifest path: " + e.key());
      if (e.augment && e.split != Split::train) throw ValidationError("augmented copy outside the train split: " + e.key());
    }
  }
};

namespace detail {

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::vector<std::string> csv_split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ValidationError("unterminated quote in CSV line");
  out.push_back(cur);
  return out;
}

// Splits n into integer parts proportional to `fractions` (which sum to 1):
// floors first, then leftover units to the largest remainders, earlier bucket on ties.
inline std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> out(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = static_cast<double>(n) * fractions[i];
    out[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    used += out[i];
    rem.emplace_back(exact - static_cast<double>(out[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t k = 0; used < n && k < rem.size(); ++k, ++used) ++out[rem[k].second];
  return out;
}

}  // namespace detail

// Indexes root/<class>/<images>. `merge` maps a directory name to the class
// it is folded into (which may be a new name). Entries are ordered by path.
inline DatasetManifest scan_dataset(const fs::path& root, const std::map<std::string, std::string>& merge = {}) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  std::vector<std::string> dirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) dirs.push_back(d.path().filename().string());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw ValidationError("no class directories under " + root.string());
  for (const auto& [from, to] : merge) {
    if (!std::binary_search(dirs.begin(), dirs.end(), from)) throw ValidationError("unknown merge source class: " + from);
    if (to.empty()) throw ValidationError("empty merge target for " + from);
  }
  auto class_of = [&](const std::string& d) {
    auto it = merge.find(d);
    return it == merge.end() ? d : it->second;
  };
  std::set<std::string> names;
  for (const auto& d : dirs) names.insert(class_of(d));
  DatasetManifest m;
  m.class_names.assign(names.begin(), names.end());
  for (const auto& d : dirs) {
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(root / d)) {
      if (f.is_regular_file() && detail::is_image_file(f.path())) files.push_back(f.path().filename().string());
    }
    if (files.empty()) throw ValidationError("empty class directory: " + d);
    const auto label = static_cast<std::size_t>(
        std::lower_bound(m.class_names.begin(), m.class_names.end(), class_of(d)) - m.class_names.begin());
    for (const auto& f : files) m.entries.push_back({d + "/" + f, label, Split::none, std::nullopt, 0});
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return m;
}

// Stratified split: per class, shuffle and carve the test share, then shuffle
// the remainder and carve the validation share. Counts use largest remainder.
inline DatasetManifest split_dataset(DatasetManifest m, std::uint64_t seed = 43, double test_frac = 0.15,
                                     double val_frac = 0.15, std::vector<std::string>* warnings = nullptr) {
  if (!(test_frac > 0 && test_frac < 1) || !(val_frac > 0 && val_frac < 1)) {
    throw ValidationError("split fractions must lie in (0, 1)");
  }
  m.seed = seed;
  std::vector<std::vector<std::size_t>> by_class(m.class_names.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (m.entries[i].augment) throw ValidationError("split must run before augmentation");
    by_class[m.entries[i].label].push_back(i);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 3 && warnings) {
      warnings->push_back("class " + m.class_names[c] + " has " + std::to_string(idx.size()) +
                          " samples and cannot populate every split");
    }
    RngState first(seed, 2 * c);
    shuffle(idx.begin(), idx.end(), first);
    const std::size_t n_test = detail::largest_remainder(idx.size(), {test_frac, 1.0 - test_frac})[0];
    for (std::size_t k = 0; k < n_test; ++k) m.entries[idx[k]].split = Split::test;
    std::vector<std::size_t> rest(idx.begin() + static_cast<long>(n_test), idx.end());
    RngState second(seed, 2 * c + 1);
    shuffle(rest.begin(), rest.end(), second);
    const std::size_t n_val =
        detail::largest_remainder(idx.size(), {test_frac, (1.0 - test_frac) * val_frac, (1.0 - test_frac) * (1.0 - val_frac)})[1];
    for (std::size_t k = 0; k < rest.size(); ++k) m.entries[rest[k]].split = k < n_val ? Split::val : Split::train;
  }
  return m;
}

// Per-class train targets: classes below the second-largest count S2 grow to S2,
// or to ceil(S2/3) when S2/count exceeds `threshold`.
inline std::vector<std::size_t> balance_targets(const std::vector<std::size_t>& counts, double threshold = 10.0) {
  if (counts.size() < 2) throw ValidationError("balancing needs at least two classes");
  auto sorted = counts;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t s2 = sorted[1];
  std::vector<std::size_t> out(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] >= s2 || counts[c] == 0) {
      out[c] = counts[c];
    } else if (static_cast<double>(s2) / static_cast<double>(counts[c]) <= threshold) {
      out[c] = s2;
    } else {
      out[c] = std::max(counts[c], (s2 + 2) / 3);
    }
  }
  return out;
}

// Appends augmented train copies up to balance_targets. Copy j of class c draws
// its parameters from a generator keyed by (seed, c, j).
inline DatasetManifest balance_training_set(DatasetManifest m, std::uint64_t seed, double threshold = 10.0) {
  const auto counts = m.counts(Split::train);
  const auto targets = balance_targets(counts, threshold);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (targets[c] <= counts[c]) continue;
    std::vector<std::string> sources;
    for (const auto& e : m.entries) {
      if (e.split == Split::train && e.label == c && !e.augment) sources.push_back(e.path);
    }
    if (sources.empty()) continue;
    const RngState base(seed, 0xBA1A0000ULL + c);
    for (std::size_t j = 0; j < targets[c] - counts[c]; ++j) {
      RngState r = base.split(j);
      m.entries.push_back({sources[j % sources.size()], c, Split::train, AugmentParams::random(r), j});
    }
  }
  return m;
}

inline std::string manifest_csv(const DatasetManifest& m) {
  std::string out = "path,label,split\n";
  for (const auto& e : m.entries) {
    out += detail::csv_field(e.key()) + "," + detail::csv_field(m.class_names.at(e.label)) + "," + split_name(e.split) + "\n";
  }
  return out;
}

inline std::string manifest_hash(const DatasetManifest& m) { return hex32(crc32_of(manifest_csv(m))); }

// Class names are recovered as the sorted set of labels, matching scan_dataset.
inline DatasetManifest parse_manifest_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || (line != "path,label,split" && line != "path,label,split\r")) {
    throw ValidationError("manifest must start with the header path,label,split");
  }
  std::vector<std::pair<ManifestEntry, std::string>> rows;
  std::set<std::string> names;
  std::size_t lineno = 1;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = detail::csv_split_line(line);
    if (f.size() != 3) throw ValidationError("manifest line " + std::to_string(lineno) + ": expected 3 fields");
    auto e = ManifestEntry::from_key(f[0]);
    e.split = parse_split(f[2]);
    names.insert(f[1]);
    rows.emplace_back(std::move(e), f[1]);
  }
  DatasetManifest m;
  m.class_names.assign(names.begin(), names.end());
  for (auto& [e, label] : rows) {
    e.label = static_cast<std::size_t>(std::lower_bound(m.class_names.begin(), m.class_names.end(), label) -
                                       m.class_names.begin());
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  const auto text = manifest_csv(m);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline DatasetManifest read_manifest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_manifest_csv(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------
// Sample loading

struct ImageSample {
  Tensor<float> pixels;  // [size,size,3] in [0,1]
  std::size_t label = 0;
  std::string provenance;  // manifest key
};

inline ImageSample load_sample(const ManifestEntry& e, const fs::path& root, const PreprocessOptions& opt = {}) {
  ImageSample s{preprocess_image(read_image(root / e.path), opt), e.label, e.key()};
  if (e.augment) s.pixels = augment(s.pixels, *e.augment);
  return s;
}

// Stacks the listed entries into [N,size,size,3]. Each sample depends only on
// its own entry, so splitting the work across threads never changes the result.
inline Tensor<float> load_batch(const DatasetManifest& m, const std::vector<std::size_t>& idx, const fs::path& root,
                                const PreprocessOptions& opt = {}, std::size_t jobs = 1) {
  if (idx.empty()) throw ValidationError("load_batch: no samples");
  const std::size_t per = opt.size * opt.size * 3;
  Tensor<float> out({idx.size(), opt.size, opt.size, 3});
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < idx.size(); i += step) {
      auto s = load_sample(m.entries.at(idx[i]), root, opt);
      std::copy_n(s.pixels.ptr(), per, out.ptr() + i * per);
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, idx.size()));
  if (jobs == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&, j] {
      try {
        work(j, jobs);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw volumes: "AVOL", u32 D, H, W (little endian), then D*H*W u16 voxels.

struct Volume {
  Tensor<float> voxels;  // [D,H,W]
};

enum class Plane { axial, coronal, sagittal };

inline Plane parse_plane(const std::string& s) {
  if (s == "axial") return Plane::axial;
  if (s == "coronal") return Plane::coronal;
  if (s == "sagittal") return Plane::sagittal;
  throw ValidationError("unknown plane: " + s);
}

namespace detail {

inline std::uint32_t read_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_le32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace detail

inline Volume decode_volume(const std::vector<std::uint8_t>& b) {
  if (b.size() < 16 || std::string(b.begin(), b.begin() + 4) != "AVOL") throw ValidationError("not an AVOL volume");
  const std::size_t d = detail::read_le32(&b[4]), h = detail::read_le32(&b[8]), w = detail::read_le32(&b[12]);
  if (d == 0 || h == 0 || w == 0) throw ValidationError("volume dimensions must be positive");
  if (b.size() != 16 + 2 * d * h * w) throw ValidationError("volume payload size does not match its header");
  Volume v{Tensor<float>({d, h, w})};
  for (std::size_t i = 0; i < d * h * w; ++i) {
    v.voxels[i] = static_cast<float>(static_cast<std::uint16_t>(b[16 + 2 * i] | (b[17 + 2 * i] << 8)));
  }
  return v;
}

inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
  if (v.voxels.rank() != 3) throw ShapeError("volume must be [D,H,W]");
  std::vector<std::uint8_t> b{'A', 'V', 'O', 'L'};
  for (std::size_t k = 0; k < 3; ++k) detail::put_le32(b, static_cast<std::uint32_t>(v.voxels.dim(k)));
  for (float f : v.voxels.data()) {
    const auto u = static_cast<std::uint16_t>(std::clamp(std::lround(f), 0L, 65535L));
    b.push_back(static_cast<std::uint8_t>(u & 0xFF));
    b.push_back(static_cast<std::uint8_t>(u >> 8));
  }
  return b;
}

inline Volume read_volume(const fs::path& p) { return decode_volume(read_file_bytes(p)); }
inline void write_volume(const fs::path& p, const Volume& v) { write_file_bytes(p, encode_volume(v)); }

// First index of the k centred slices out of `depth`.
inline std::size_t middle_slice_start(std::size_t depth, std::size_t k) {
  if (k == 0 || k > depth) throw ValidationError("cannot take " + std::to_string(k) + " slices from depth " + std::to_string(depth));
  return (depth - k) / 2;
}

// Axial slices index axis 0, coronal axis 1, sagittal axis 2.
inline std::vector<Tensor<float>> select_middle_slices(const Volume& vol, Plane plane, std::size_t k) {
  const auto& v = vol.voxels;
  const std::size_t d = v.dim(0), h = v.dim(1), w = v.dim(2);
  const std::size_t axis = plane == Plane::axial ? 0 : plane == Plane::coronal ? 1 : 2;
  const std::size_t start = middle_slice_start(v.dim(axis), k);
  std::vector<Tensor<float>> out;
  for (std::size_t s = start; s < start + k; ++s) {
    if (axis == 0) {
      Tensor<float> t({h, w});
      std::copy_n(v.ptr() + s * h * w, h * w, t.ptr());
      out.push_back(std::move(t));
    } else if (axis == 1) {
      Tensor<float> t({d, w});
      for (std::size_t z = 0; z < d; ++z) std::copy_n(v.ptr() + (z * h + s) * w, w, t.ptr() + z * w);
      out.push_back(std::move(t));
    } else {
      Tensor<float> t({d, h});
      for (std::size_t z = 0; z < d; ++z)
        for (std::size_t y = 0; y < h; ++y) t[z * h + y] = v[(z * h + y) * w + s];
      out.push_back(std::move(t));
    }
  }
  return out;
}

// Slice to an 8-bit grayscale image, scaling [0, max] to [0, 255].
inline Image8 slice_to_image(const Tensor<float>& slice, float max_value) {
  Image8 im(slice.dim(1), slice.dim(0), 1);
  const float scale = max_value > 0 ? 255.0f / max_value : 0.0f;
  for (std::size_t i = 0; i < slice.size(); ++i) {
    im.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(slice[i] * scale), 0L, 255L));
  }
  return im;
}

}  // namespace amri
