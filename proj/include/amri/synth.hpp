#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amri/checksum.hpp"
#include "amri/error.hpp"
#include "amri/image_io.hpp"
#include "amri/rng.hpp"

namespace amri {

// Class k of the synthetic set is a bright ellipse with k dark circular voids
// placed off-centre. Only + - * / and comparisons touch the pixel values, so
// output bits do not depend on the platform's libm.
inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"solid", "one_void", "two_voids"};
  return names;
}

struct SynthOptions {
  std::size_t classes = 3;
  std::size_t per_class = 80;
  std::size_t size = 128;
  std::uint64_t seed = 43;
  double noise = 0.12;  // amplitude of the zero-mean noise

  void validate() const {
    if (classes < 1 || classes > synthetic_class_names().size()) throw ValidationError("synthetic classes must be 1..3");
    if (per_class == 0) throw ValidationError("per_class must be positive");
    if (size < 32) throw ValidationError("synthetic image size must be at least 32");
    if (!(noise >= 0 && noise <= 1)) throw ValidationError("noise must lie in [0,1]");
  }
};

inline Image8 synthetic_image(std::size_t cls, std::size_t index, const SynthOptions& opt) {
  RngState rng = RngState(opt.seed, 0x5E000000ULL + cls).split(index);
  const double s = static_cast<double>(opt.size) / 128.0;
  const double cx = 64 * s + rng.uniform(-10, 10) * s;
  const double cy = 64 * s + rng.uniform(-10, 10) * s;
  const double a = rng.uniform(30, 44) * s;
  const double b = rng.uniform(30, 44) * s;
  const double fg = rng.uniform(0.5, 0.8);
  const double bg = rng.uniform(0.04, 0.12);

  struct Void {
    double x, y, r;
  };
  std::vector<Void> voids;
  for (std::size_t attempt = 0; voids.size() < cls && attempt < 1000; ++attempt) {
    const double r = rng.uniform(10, 13) * s;
    const double u = rng.uniform(-0.55, 0.55), v = rng.uniform(-0.55, 0.55);
    const double d2 = u * u + v * v;
    // Off-centre, and far enough inside the ellipse to stay enclosed.
    if (d2 < 0.06 || d2 > 0.3) continue;
    const Void c{cx + u * a, cy + v * b, r};
    bool clear = true;
    for (const auto& o : voids) {
      const double dx = c.x - o.x, dy = c.y - o.y;
      if (dx * dx + dy * dy < (c.r + o.r + 4 * s) * (c.r + o.r + 4 * s)) clear = false;
    }
    if (clear) voids.push_back(c);
  }
  if (voids.size() != cls) throw StateError("could not place synthetic voids");

  Image8 im(opt.size, opt.size, 1);
  for (std::size_t y = 0; y < opt.size; ++y) {
    for (std::size_t x = 0; x < opt.size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double ex = (px - cx) / a, ey = (py - cy) / b;
      double v = ex * ex + ey * ey <= 1.0 ? fg : bg;
      for (const auto& o : voids) {
        const double dx = px - o.x, dy = py - o.y;
        if (dx * dx + dy * dy <= o.r * o.r) v = bg;
      }
      // Sum of three uniforms: bell-shaped, zero mean.
      v += (rng.uniform() + rng.uniform() + rng.uniform() - 1.5) * opt.noise;
      v = std::clamp(v, 0.0, 1.0);
      im.pixels[y * opt.size + x] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
    }
  }
  return im;
}

// Writes <out>/<class>/img_NNN.png for every class and index.
inline std::vector<std::filesystem::path> generate_synthetic_dataset(const std::filesystem::path& out,
                                                                     const SynthOptions& opt = {}) {
  opt.validate();
  std::vector<std::filesystem::path> written;
  for (std::size_t c = 0; c < opt.classes; ++c) {
    for (std::size_t i = 0; i < opt.per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img_%03zu.png", i);
      auto path = out / synthetic_class_names()[c] / name;
      write_png(path, synthetic_image(c, i, opt));
      written.push_back(path);
    }
  }
  return written;
}

// Content hash of an image tree: CRC32 over sorted relative paths, image
// dimensions and decoded pixels. Independent of the PNG compressor's byte choices.
inline std::string image_tree_hash(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::uint32_t crc = 0;
  for (const auto& rel : files) {
    const std::string key = rel.generic_string() + "\n";
    crc = crc32_of(reinterpret_cast<const std::uint8_t*>(key.data()), key.size(), crc);
    const auto bytes = read_file_bytes(root / rel);
    try {
      const auto im = decode_image(bytes, rel.string());
      const std::string dims = std::to_string(im.width) + "x" + std::to_string(im.height) + "x" + std::to_string(im.channels);
      crc = crc32_of(reinterpret_cast<const std::uint8_t*>(dims.data()), dims.size(), crc);
      crc = crc32_of(im.pixels.data(), im.pixels.size(), crc);
    } catch (const ValidationError&) {
      crc = crc32_of(bytes.data(), bytes.size(), crc);
    }
  }
  return hex32(crc);
}

}  // namespace amri
