#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "amri/data.hpp"
#include "test_util.hpp"

using namespace amri;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("amri_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> encode_jpeg(const Image8& im, int quality) {
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr err{};
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buf, &size);
  cinfo.image_width = static_cast<JDIMENSION>(im.width);
  cinfo.image_height = static_cast<JDIMENSION>(im.height);
  cinfo.input_components = static_cast<int>(im.channels);
  cinfo.in_color_space = im.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(im.pixels.data() + cinfo.next_scanline * im.width * im.channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buf, buf + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buf);
  return out;
}

Image8 random_image(std::size_t w, std::size_t h, std::size_t c, RngState& rng) {
  Image8 im(w, h, c);
  for (auto& p : im.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return im;
}

// Tree with `per` tiny PNGs in each named class directory.
fs::path make_tree(const std::string& name, const std::vector<std::string>& classes, std::size_t per) {
  auto root = temp_dir(name);
  RngState rng(5);
  for (const auto& c : classes) {
    fs::create_directories(root / c);
    for (std::size_t i = 0; i < per; ++i) {
      char fn[32];
      std::snprintf(fn, sizeof fn, "img_%03zu.png", i);
      write_png(root / c / fn, random_image(6, 5, 1, rng));
    }
  }
  return root;
}

DatasetManifest single_class(std::size_t n, std::size_t classes = 1) {
  DatasetManifest m;
  for (std::size_t c = 0; c < classes; ++c) m.class_names.push_back("c" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < n; ++i) m.entries.push_back({"c" + std::to_string(c) + "/" + std::to_string(i) + ".png", c});
  return m;
}

}  // namespace

TEST(ImageIo, PngRoundTrip) {
  RngState rng(1);
  for (std::size_t c : {1, 3}) {
    auto im = random_image(17, 9, c, rng);
    auto back = decode_image(encode_png(im));
    EXPECT_TRUE(back == im);
  }
}

TEST(ImageIo, JpegDecode) {
  Image8 im(16, 16, 3);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      im.at(y, x, 0) = 200;
      im.at(y, x, 1) = static_cast<std::uint8_t>(8 * x);
      im.at(y, x, 2) = 40;
    }
  auto back = decode_image(encode_jpeg(im, 100));
  ASSERT_EQ(back.width, 16u);
  ASSERT_EQ(back.channels, 3u);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], im.pixels[i], 6);
  Image8 g(8, 8, 1, 128);
  auto gb = decode_image(encode_jpeg(g, 95));
  EXPECT_EQ(gb.channels, 1u);
  for (auto p : gb.pixels) EXPECT_NEAR(p, 128, 1);
}

TEST(ImageIo, GarbageIsRejected) {
  EXPECT_THROW(decode_image({1, 2, 3, 4}), ValidationError);
  RngState rng(2);
  auto png = encode_png(random_image(8, 8, 3, rng));
  png.resize(png.size() / 2);
  EXPECT_THROW(decode_image(png), ValidationError);
  auto jpg = encode_jpeg(random_image(8, 8, 3, rng), 90);
  jpg.resize(20);
  EXPECT_THROW(decode_image(jpg), ValidationError);
}

TEST(Preprocess, SameSizeResizeIsIdentity) {
  RngState rng(3);
  auto t = tu::random_tensor<float>({128, 128, 3}, rng, 0, 255);
  EXPECT_TRUE(resize_bilinear(t, 128, 128) == t);
  Image8 im = random_image(128, 128, 3, rng);
  auto p = preprocess_image(im);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], static_cast<float>(im.pixels[i]) / 255.0f);
}

TEST(Preprocess, WhiteIsOneAndGrayReplicates) {
  Image8 white(40, 30, 1, 255);
  auto p = preprocess_image(white);
  EXPECT_EQ(p.shape(), (Shape{128, 128, 3}));
  for (float v : p.data()) EXPECT_EQ(v, 1.0f);
  RngState rng(4);
  auto g = preprocess_image(random_image(64, 64, 1, rng));
  for (std::size_t i = 0; i < 128 * 128; ++i) {
    EXPECT_EQ(g[3 * i], g[3 * i + 1]);
    EXPECT_EQ(g[3 * i], g[3 * i + 2]);
  }
}

TEST(Preprocess, CheckerboardHalvesToGray) {
  Image8 board(256, 256, 1);
  for (std::size_t y = 0; y < 256; ++y)
    for (std::size_t x = 0; x < 256; ++x) board.at(y, x, 0) = (x + y) % 2 ? 255 : 0;
  auto p = preprocess_image(board);
  for (float v : p.data()) EXPECT_NEAR(v, 0.5f, 1e-6);
}

TEST(Sharpen, ConstantInteriorUnchanged) {
  Tensor<float> t({6, 7, 3}, 0.4f);
  auto s = sharpen(t);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(s[i], 0.4f, 1e-6);
}

TEST(Sharpen, BrightPixel) {
  Tensor<float> t({5, 5, 1});
  t.at({2, 2, 0}) = 1.0f;
  auto s = sharpen(t);
  EXPECT_EQ(s.at({2, 2, 0}), 1.0f);
  for (auto [y, x] : {std::pair{1, 2}, {3, 2}, {2, 1}, {2, 3}}) {
    EXPECT_EQ(s.at({static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0}), 0.0f);
  }
  RngState rng(6);
  auto r = sharpen(tu::random_tensor<float>({9, 9, 3}, rng, 0, 1));
  for (float v : r.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Augment, IdentityAndFlip) {
  RngState rng(7);
  auto t = tu::random_tensor<float>({32, 24, 3}, rng, 0, 1);
  EXPECT_TRUE(augment(t, AugmentParams{}) == t);
  AugmentParams f;
  f.hflip = true;
  auto once = augment(t, f);
  EXPECT_FALSE(once == t);
  EXPECT_TRUE(augment(once, f) == t);
  EXPECT_EQ(once.at({3, 0, 1}), t.at({3, 23, 1}));
}

TEST(Augment, RotationKeepsMass) {
  Tensor<float> t({128, 128, 1});
  for (std::size_t y = 44; y < 84; ++y)
    for (std::size_t x = 44; x < 84; ++x) t.at({y, x, 0}) = 1.0f;
  AugmentParams p;
  p.rotation_deg = 15.0;
  auto r = augment(t, p);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    a += t[i];
    b += r[i];
  }
  EXPECT_NEAR(b / a, 1.0, 0.02);
  EXPECT_FALSE(r == t);
}

TEST(Augment, ShiftAndZoomMoveContent) {
  Tensor<float> t({20, 20, 1});
  t.at({10, 10, 0}) = 1.0f;
  AugmentParams p;
  p.width_shift = 0.1;  // two pixels right
  auto r = augment(t, p);
  EXPECT_EQ(r.at({10, 12, 0}), 1.0f);
  EXPECT_EQ(r.at({10, 10, 0}), 0.0f);
}

TEST(Augment, RangesAndEncoding) {
  Tensor<float> t({4, 4, 1});
  AugmentParams bad;
  bad.rotation_deg = 16;
  EXPECT_THROW(augment(t, bad), ValidationError);
  bad = {};
  bad.zoom = 1.3;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = {};
  bad.shear = -0.25;
  EXPECT_THROW(bad.validate(), ValidationError);
  RngState rng(8);
  for (int i = 0; i < 50; ++i) {
    auto p = AugmentParams::random(rng);
    EXPECT_NO_THROW(p.validate());
    EXPECT_EQ(AugmentParams::decode(p.encode()), p);
  }
  EXPECT_THROW(AugmentParams::decode("1,2,3"), ValidationError);
}

TEST(Scan, MergesClasses) {
  auto root = make_tree("scan", {"MildDemented", "ModerateDemented", "NonDemented", "VeryMildDemented"}, 3);
  auto plain = scan_dataset(root);
  EXPECT_EQ(plain.class_names,
            (std::vector<std::string>{"MildDemented", "ModerateDemented", "NonDemented", "VeryMildDemented"}));
  EXPECT_EQ(plain.entries.size(), 12u);
  EXPECT_EQ(plain.entries[0].path, "MildDemented/img_000.png");

  auto three = scan_dataset(root, {{"MildDemented", "ModerateDemented"}});
  EXPECT_EQ(three.class_names, (std::vector<std::string>{"ModerateDemented", "NonDemented", "VeryMildDemented"}));
  EXPECT_EQ(three.counts(Split::none), (std::vector<std::size_t>{6, 3, 3}));

  auto two = scan_dataset(root, {{"VeryMildDemented", "Demented"}, {"MildDemented", "Demented"}, {"ModerateDemented", "Demented"}});
  EXPECT_EQ(two.class_names, (std::vector<std::string>{"Demented", "NonDemented"}));
  EXPECT_EQ(two.counts(Split::none), (std::vector<std::size_t>{9, 3}));

  EXPECT_THROW(scan_dataset(root, {{"Severe", "X"}}), ValidationError);
  fs::create_directories(root / "Empty");
  EXPECT_THROW(scan_dataset(root), ValidationError);
  fs::remove_all(root);
}

TEST(SplitData, HundredSamples) {
  auto m = split_dataset(single_class(100), 43);
  EXPECT_EQ(m.counts(Split::test)[0], 15u);
  EXPECT_EQ(m.counts(Split::val)[0], 13u);
  EXPECT_EQ(m.counts(Split::train)[0], 72u);
  EXPECT_EQ(m.counts(Split::none)[0], 0u);
}

TEST(SplitData, DeterministicAndSeeded) {
  auto a = split_dataset(single_class(100), 43);
  auto b = split_dataset(single_class(100), 43);
  auto c = split_dataset(single_class(100), 44);
  EXPECT_EQ(manifest_csv(a), manifest_csv(b));
  EXPECT_EQ(manifest_hash(a), manifest_hash(b));
  EXPECT_NE(manifest_hash(a), manifest_hash(c));
}

TEST(SplitData, FractionsWithinOneSample) {
  for (std::size_t n = 3; n < 400; n += 7) {
    auto m = split_dataset(single_class(n, 3), 43);
    for (std::size_t c = 0; c < 3; ++c) {
      const double nd = static_cast<double>(n);
      EXPECT_LE(std::abs(static_cast<double>(m.counts(Split::test)[c]) - 0.15 * nd), 1.0) << n;
      EXPECT_LE(std::abs(static_cast<double>(m.counts(Split::val)[c]) - 0.1275 * nd), 1.0) << n;
      EXPECT_LE(std::abs(static_cast<double>(m.counts(Split::train)[c]) - 0.7225 * nd), 1.0) << n;
    }
  }
}

TEST(SplitData, SmallClassWarns) {
  std::vector<std::string> warnings;
  auto m = split_dataset(single_class(2), 43, 0.15, 0.15, &warnings);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(split_dataset(single_class(5), 43, 0.0, 0.15), ValidationError);
  EXPECT_THROW(split_dataset(single_class(5), 43, 0.15, 1.0), ValidationError);
}

TEST(Balance, Targets) {
  EXPECT_EQ(balance_targets({3200, 2240, 896, 64}), (std::vector<std::size_t>{3200, 2240, 2240, 747}));
  EXPECT_EQ(balance_targets({100, 100}), (std::vector<std::size_t>{100, 100}));
  EXPECT_EQ(balance_targets({100, 90, 50}), (std::vector<std::size_t>{100, 90, 90}));
  EXPECT_EQ(balance_targets({100, 90, 9}), (std::vector<std::size_t>{100, 90, 90}));
  EXPECT_EQ(balance_targets({100, 90, 8}), (std::vector<std::size_t>{100, 90, 30}));
  EXPECT_THROW(balance_targets({5}), ValidationError);
}

TEST(Balance, OnlyTrainGrows) {
  DatasetManifest m;
  m.class_names = {"a", "b", "c"};
  const std::size_t n[3] = {200, 120, 40};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n[c]; ++i) m.entries.push_back({m.class_names[c] + "/" + std::to_string(i), c});
  m = split_dataset(m, 43);
  const auto before_val = m.counts(Split::val);
  const auto before_test = m.counts(Split::test);
  const auto train = m.counts(Split::train);
  auto b = balance_training_set(m, 43);
  EXPECT_NO_THROW(b.validate());
  EXPECT_EQ(b.counts(Split::val), before_val);
  EXPECT_EQ(b.counts(Split::test), before_test);
  const auto targets = balance_targets(train);
  EXPECT_EQ(b.counts(Split::train), targets);
  EXPECT_EQ(targets[2], targets[1]);
  for (const auto& e : b.entries) {
    if (e.augment) {
      EXPECT_EQ(e.split, Split::train);
    }
  }
  EXPECT_EQ(manifest_csv(balance_training_set(m, 43)), manifest_csv(b));
}

TEST(ManifestCsv, RoundTrip) {
  auto m = balance_training_set(split_dataset(single_class(30, 2), 43), 43);
  m.entries.push_back({"c0/odd, name \"q\".png", 0, Split::test});
  auto text = manifest_csv(m);
  EXPECT_EQ(text.substr(0, 17), "path,label,split\n");
  auto back = parse_manifest_csv(text);
  EXPECT_EQ(manifest_csv(back), text);
  EXPECT_THROW(parse_manifest_csv("file,label\n"), ValidationError);
  EXPECT_THROW(parse_manifest_csv("path,label,split\na.png,x,train\na.png,x,val\n"), ValidationError);
  EXPECT_THROW(parse_manifest_csv("path,label,split\n\"a.png#aug0:0,0,0,0,1,0\",x,test\n"), ValidationError);
}

TEST(ManifestCsv, AugmentedCopiesAreStoredAsTheirParams) {
  DatasetManifest m;
  m.class_names = {"a", "b", "c"};
  for (std::size_t i = 0; i < 20; ++i) m.entries.push_back({"a/" + std::to_string(i), 0, Split::train});
  for (std::size_t i = 0; i < 10; ++i) m.entries.push_back({"b/" + std::to_string(i), 1, Split::train});
  for (std::size_t i = 0; i < 4; ++i) m.entries.push_back({"c/" + std::to_string(i), 2, Split::train});
  auto b = balance_training_set(m, 1);
  ASSERT_EQ(b.entries.size(), 40u);
  auto back = parse_manifest_csv(manifest_csv(b));
  for (std::size_t i = 34; i < 40; ++i) {
    ASSERT_TRUE(back.entries[i].augment.has_value());
    EXPECT_EQ(*back.entries[i].augment, *b.entries[i].augment);
    EXPECT_EQ(back.entries[i].path, b.entries[i].path);
  }
}

TEST(LoadBatch, ThreadsDoNotChangeResult) {
  auto root = make_tree("load", {"x", "y"}, 5);
  auto m = balance_training_set(split_dataset(scan_dataset(root), 43), 43);
  std::vector<std::size_t> all(m.entries.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  PreprocessOptions opt{32, true};
  auto a = load_batch(m, all, root, opt, 1);
  auto b = load_batch(m, all, root, opt, 3);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.shape(), (Shape{m.entries.size(), 32, 32, 3}));
  EXPECT_THROW(load_batch(m, all, root / "missing", opt, 2), IoError);
  fs::remove_all(root);
}

TEST(Volume, MiddleSlices) {
  EXPECT_EQ(middle_slice_start(256, 20), 118u);
  EXPECT_EQ(middle_slice_start(10, 10), 0u);
  EXPECT_EQ(middle_slice_start(5, 1), 2u);
  EXPECT_THROW(middle_slice_start(5, 6), ValidationError);

  Volume v{Tensor<float>({5, 3, 4})};
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
  auto ax = select_middle_slices(v, Plane::axial, 1);
  ASSERT_EQ(ax.size(), 1u);
  EXPECT_EQ(ax[0].shape(), (Shape{3, 4}));
  EXPECT_EQ(ax[0][0], 24.0f);
  auto co = select_middle_slices(v, Plane::coronal, 3);
  EXPECT_EQ(co.size(), 3u);
  EXPECT_EQ(co[0].shape(), (Shape{5, 4}));
  EXPECT_EQ(co[1].at({2, 3}), v.voxels.at({2, 1, 3}));
  auto sa = select_middle_slices(v, Plane::sagittal, 2);
  EXPECT_EQ(sa[0].shape(), (Shape{5, 3}));
  EXPECT_EQ(sa[1].at({4, 2}), v.voxels.at({4, 2, 2}));
}

TEST(Volume, FileRoundTrip) {
  Volume v{Tensor<float>({3, 2, 2})};
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i * 5000);
  auto bytes = encode_volume(v);
  EXPECT_EQ(bytes.size(), 16u + 24u);
  EXPECT_EQ(bytes[4], 3);
  EXPECT_TRUE(decode_volume(bytes).voxels == v.voxels);
  bytes.pop_back();
  EXPECT_THROW(decode_volume(bytes), ValidationError);
  EXPECT_THROW(decode_volume({'N', 'O', 'P', 'E'}), ValidationError);
}
