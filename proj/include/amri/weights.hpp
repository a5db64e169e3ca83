#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "amri/checksum.hpp"
#include "amri/error.hpp"
#include "amri/image_io.hpp"
#include "amri/model.hpp"

namespace amri {

// Binary layout, all integers little-endian:
//   "AMRI" | u32 version | u32 count |
//   count x (u16 name length, name bytes, u8 dtype, u8 rank, u64 dims[rank], payload) |
//   u32 CRC32 of everything before it.
inline constexpr std::uint32_t kWeightFormatVersion = 1;


inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened; narrowed again on write for f32
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& b, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) {
    if (n > end_ - pos_) throw ValidationError("weight file truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> b{'A', 'M', 'R', 'I'};
  detail::put_le(b, kWeightFormatVersion, 4);
  detail::put_le(b, tensors.size(), 4);
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw ValidationError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xFF) throw ValidationError("tensor rank too large: " + t.name);
    if (shape_size(t.shape) != t.values.size()) throw ShapeError("tensor " + t.name + " size does not match its shape");
    detail::put_le(b, t.name.size(), 2);
    b.insert(b.end(), t.name.begin(), t.name.end());
    b.push_back(static_cast<std::uint8_t>(t.dtype));
    b.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le(b, d, 8);
    for (double v : t.values) {
      if (t.dtype == DType::f32) {
        detail::put_le(b, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      } else {
        detail::put_le(b, std::bit_cast<std::uint64_t>(v), 8);
      }
    }
  }
  detail::put_le(b, crc32_of(b.data(), b.size()), 4);
  return b;
}

inline std::vector<NamedTensor> decode_weights(const std::vector<std::uint8_t>& b) {
  if (b.size() < 16 || std::memcmp(b.data(), "AMRI", 4) != 0) throw ValidationError("not an AMRI weight file");
  const std::size_t body = b.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(b[body + i]) << (8 * i);
  const std::uint32_t actual = crc32_of(b.data(), body);
  if (stored != actual) {
    throw ValidationError("weight file CRC mismatch: stored " + hex32(stored) + ", computed " + hex32(actual));
  }
  detail::Reader r(b, body);
  r.str(4);
  const auto version = r.le(4);
  if (version != kWeightFormatVersion) throw ValidationError("unsupported weight format version " + std::to_string(version));
  const auto count = r.le(4);
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.le(2));
    const auto dt = r.le(1);
    if (dt > 1) throw ValidationError("unknown dtype tag " + std::to_string(dt) + " for " + t.name);
    t.dtype = static_cast<DType>(dt);
    const auto rank = r.le(1);
    for (std::uint64_t k = 0; k < rank; ++k) t.shape.push_back(r.le(8));
    const std::size_t n = shape_size(t.shape);
    if (n > r.remaining() / dtype_size(t.dtype)) throw ValidationError("payload of " + t.name + " exceeds file size");
    t.values.resize(n);
    for (auto& v : t.values) {
      v = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(r.le(4))))
                                : std::bit_cast<double>(r.le(8));
    }
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw ValidationError("trailing bytes after the last tensor");
  return out;
}

template <class T>
std::vector<NamedTensor> model_tensors(const Model<T>& m) {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : m.params.parameters()) {
    NamedTensor t{name, dtype_of<T>(), p->value.shape(), {}};
    t.values.assign(p->value.data().begin(), p->value.data().end());
    out.push_back(std::move(t));
  }
  return out;
}

// Loads every tensor of the model by name; missing, extra or reshaped tensors are errors.
template <class T>
void assign_tensors(Model<T>& m, const std::vector<NamedTensor>& tensors) {
  auto params = m.params.parameters();
  if (params.size() != tensors.size()) {
    throw ValidationError("weight file has " + std::to_string(tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("weight file lacks tensor " + name);
    if (it->second->shape != p->value.shape()) {
      throw ShapeError("tensor " + name + " has shape " + shape_str(it->second->shape) + ", model expects " +
                       shape_str(p->value.shape()));
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<T>(it->second->values[i]);
  }
}

inline nlohmann::json model_config_json(const ModelConfig& c, const std::vector<std::string>& class_names) {
  return {{"image_size", c.image_size},
          {"channels", c.channels},
          {"num_classes", c.num_classes},
          {"stem_filters", c.stem_filters},
          {"residual_filters", c.residual_filters},
          {"attention", {{"d", c.attention.d}, {"heads", c.attention.heads}, {"kv_groups", c.attention.kv_groups}}},
          {"dropout", c.dropout},
          {"dense_units", c.dense_units},
          {"spatial_kernel", c.spatial_kernel},
          {"class_names", class_names}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, std::vector<std::string>* class_names = nullptr) {
  try {
    ModelConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.stem_filters = j.at("stem_filters").get<std::vector<std::size_t>>();
    c.residual_filters = j.at("residual_filters").get<std::size_t>();
    const auto& att = j.at("attention");
    c.attention = {att.at("d").get<std::size_t>(), att.at("heads").get<std::size_t>(), att.at("kv_groups").get<std::size_t>()};
    c.dropout = j.at("dropout").get<double>();
    c.dense_units = j.at("dense_units").get<std::size_t>();
    c.spatial_kernel = j.at("spatial_kernel").get<std::size_t>();
    c.validate();
    if (class_names) *class_names = j.value("class_names", std::vector<std::string>{});
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad model config: ") + e.what());
  }
}

// `path` holds the weights; `path` with extension .json holds the config.
template <class T>
void save_model(const std::filesystem::path& path, const Model<T>& m, const std::vector<std::string>& class_names) {
  write_file_bytes(path, encode_weights(model_tensors(m)));
  auto side = path;
  const std::string text = model_config_json(m.config, class_names).dump(2) + "\n";
  write_file_bytes(side.replace_extension(".json"), std::vector<std::uint8_t>(text.begin(), text.end()));
}

template <class T>
Model<T> load_model(const std::filesystem::path& path, std::vector<std::string>* class_names = nullptr) {
  auto side = path;
  side.replace_extension(".json");
  const auto text = read_file_bytes(side);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse " + side.string() + ": " + e.what());
  }
  auto m = build_model<T>(model_config_from_json(j, class_names), RngState(0));
  assign_tensors(m, decode_weights(read_file_bytes(path)));
  return m;
}

}  // namespace amri
