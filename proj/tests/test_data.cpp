#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace ctfm;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ctfm_test_data" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double cloud_fraction(const Scene& s) {
  double total = 0.0;
  for (float v : s.mask.data()) total += v;
  return total / static_cast<double>(s.mask.numel());
}

Scene flat_scene(std::size_t h, std::size_t w, std::size_t bands) {
  Scene s;
  s.id = "flat";
  s.bands = Tensor<float>({bands, h, w});
  s.mask = Tensor<float>({h, w});
  for (std::size_t i = 0; i < s.bands.numel(); ++i) s.bands[i] = static_cast<float>(i % 251) / 250.0f;
  for (std::size_t i = 0; i < s.mask.numel(); ++i) s.mask[i] = (i / 7) % 2 ? 1.0f : 0.0f;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Synth, DensityExtremes) {
  SynthOptions opt;
  opt.cloud_density = 0.0;
  EXPECT_EQ(cloud_fraction(synth_scene(1, opt)), 0.0);
  opt.cloud_density = 1.0;
  EXPECT_EQ(cloud_fraction(synth_scene(1, opt)), 1.0);
}

TEST(Synth, CloudFractionMonotoneInDensity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    double prev = -1.0;
    for (double d = 0.0; d <= 1.0 + 1e-12; d += 0.1) {
      SynthOptions opt;
      opt.cloud_density = std::min(d, 1.0);
      const double f = cloud_fraction(synth_scene(seed, opt));
      EXPECT_GE(f, prev) << "seed " << seed << " density " << d;
      prev = f;
    }
  }
}

TEST(Synth, DeterministicAndSeedSensitive) {
  SynthOptions opt;
  opt.size = 48;
  const Scene a = synth_scene(42, opt), b = synth_scene(42, opt), c = synth_scene(43, opt);
  EXPECT_TRUE(testing_util::bit_equal(a.bands, b.bands));
  EXPECT_TRUE(testing_util::bit_equal(a.mask, b.mask));
  EXPECT_FALSE(testing_util::bit_equal(a.bands, c.bands));
  EXPECT_EQ(a.id, "synth_42");
  a.validate();
  for (float v : a.bands.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  // The mask does not depend on how many bands are rendered.
  opt.bands = 10;
  EXPECT_TRUE(testing_util::bit_equal(synth_scene(42, opt).mask, a.mask));
}

TEST(Synth, CloudsAreBrighterThanGround) {
  SynthOptions opt;
  opt.size = 64;
  const Scene s = synth_scene(5, opt);
  double cloud = 0, clear = 0, nc = 0, nk = 0;
  for (std::size_t b = 0; b < s.band_count(); ++b)
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      if (s.mask[i] == 1.0f) {
        cloud += s.bands[b * 4096 + i];
        ++nc;
      } else {
        clear += s.bands[b * 4096 + i];
        ++nk;
      }
    }
  ASSERT_GT(nc, 0);
  ASSERT_GT(nk, 0);
  EXPECT_GT(cloud / nc, clear / nk + 0.2);
}

TEST(Synth, InvalidOptions) {
  SynthOptions opt;
  opt.cloud_density = 1.5;
  EXPECT_THROW(synth_scene(0, opt), Error);
  opt.cloud_density = -0.1;
  EXPECT_THROW(synth_scene(0, opt), Error);
  opt.cloud_density = 0.5;
  opt.texture_level = 2.0;
  EXPECT_THROW(synth_scene(0, opt), Error);
}

TEST(Crop, ExactTiling) {
  const Scene s = flat_scene(768, 768, 1);
  const auto set = crop(s, 384);
  EXPECT_EQ(set.patches.size(), 4u);
  EXPECT_EQ(set.rows, 2u);
  EXPECT_EQ(set.cols, 2u);
}

TEST(Crop, ReflectPadsToAMultiple) {
  const Scene s = flat_scene(800, 800, 1);
  const auto set = crop(s, 384);
  EXPECT_EQ(set.patches.size(), 9u);
  EXPECT_EQ(set.rows * set.patch_size, 1152u);
  // Padded row 800 mirrors row 798; the edge sample is not repeated.
  const auto& last = set.patches.back();  // rows 768..1151, cols 768..1151
  EXPECT_EQ(last.mask.at({800 - 768, 0}), s.mask.at({798, 768}));
  EXPECT_EQ(last.bands.at({0, 799 - 768, 801 - 768}), s.bands.at({0, 799, 797}));
  std::vector<Tensor<float>> masks;
  for (const auto& p : set.patches) masks.push_back(p.mask);
  const auto stitched = stitch(set, masks);
  EXPECT_EQ(stitched.shape(), (Shape{800, 800}));
  EXPECT_TRUE(testing_util::bit_equal(stitched, s.mask));
}

TEST(Crop, StitchInvertsCropOnEveryBand) {
  SynthOptions opt;
  opt.size = 100;
  const Scene s = synth_scene(3, opt);
  const auto set = crop(s, 32);
  EXPECT_EQ(set.patches.size(), 16u);
  for (std::size_t b = 0; b < s.band_count(); ++b) {
    std::vector<Tensor<float>> pieces;
    for (const auto& p : set.patches)
      pieces.emplace_back(Shape{32, 32}, std::vector<float>(p.bands.raw() + b * 1024, p.bands.raw() + (b + 1) * 1024));
    const auto band = stitch(set, pieces);
    for (std::size_t i = 0; i < band.numel(); ++i) ASSERT_EQ(band[i], s.bands[b * 10000 + i]);
  }
  std::vector<Tensor<float>> masks;
  for (const auto& p : set.patches) masks.push_back(p.mask);
  EXPECT_TRUE(testing_util::bit_equal(stitch(set, masks), s.mask));
}

TEST(Crop, Errors) {
  const Scene s = flat_scene(64, 64, 2);
  EXPECT_THROW(crop(s, 40), Error);
  const auto set = crop(s, 32);
  std::vector<Tensor<float>> too_few(set.patches.size() - 1, Tensor<float>({32, 32}));
  try {
    stitch(set, too_few);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(Batch, StacksPatches) {
  const Scene s = flat_scene(64, 64, 3);
  const auto set = crop(s, 32);
  std::vector<const Patch*> ptrs;
  for (const auto& p : set.patches) ptrs.push_back(&p);
  auto [x, y] = make_batch<double>(ptrs);
  EXPECT_EQ(x.shape(), (Shape{4, 3, 32, 32}));
  EXPECT_EQ(y.shape(), (Shape{4, 1, 32, 32}));
  EXPECT_EQ(x.at({2, 1, 5, 6}), static_cast<double>(set.patches[2].bands.at({1, 5, 6})));
  EXPECT_EQ(y.at({3, 0, 7, 8}), static_cast<double>(set.patches[3].mask.at({7, 8})));
}

TEST(Raster, RoundTripAndLayout) {
  const auto dir = fresh_dir("raster");
  Tensor<float> band({2, 3}, {0.0f, -1.5f, 3.25f, 1e-30f, 7.0f, 0.1f});
  const auto path = (dir / "b.ctfr").string();
  write_raster(path, band);
  EXPECT_TRUE(testing_util::bit_equal(read_raster(path), band));
  const std::string bytes = slurp(path);
  ASSERT_EQ(bytes.size(), 4u + 1 + 4 + 4 + 6 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "CTFR");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes.substr(5, 4), std::string("\x02\x00\x00\x00", 4));
  EXPECT_EQ(bytes.substr(9, 4), std::string("\x03\x00\x00\x00", 4));
  // -1.5f = 0xBFC00000, little endian.
  EXPECT_EQ(bytes.substr(17, 4), std::string("\x00\x00\xC0\xBF", 4));

  {
    std::ofstream out(dir / "bad.ctfr", std::ios::binary);
    out << "XXXX";
  }
  try {
    read_raster((dir / "bad.ctfr").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  fs::resize_file(path, bytes.size() - 3);
  EXPECT_THROW(read_raster(path), Error);
}

TEST(MaskPgm, RoundTripAndValidation) {
  const auto dir = fresh_dir("pgm");
  Tensor<float> mask({3, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0});
  const auto path = (dir / "m.pgm").string();
  write_mask_pgm(path, mask);
  EXPECT_EQ(slurp(path).substr(0, 11), "P5\n4 3\n255\n");
  EXPECT_TRUE(testing_util::bit_equal(read_mask_pgm(path), mask));
  {
    std::ofstream out(dir / "gray.pgm", std::ios::binary);
    out << "P5\n# comment\n2 1\n255\n";
    out.put(static_cast<char>(0));
    out.put(static_cast<char>(128));
  }
  try {
    read_mask_pgm((dir / "gray.pgm").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
    EXPECT_NE(std::string(e.what()).find("non-binary"), std::string::npos);
  }
  {
    std::ofstream out(dir / "one.pgm", std::ios::binary);
    out << "P5 2 1 1\n";
    out.put(static_cast<char>(1));
    out.put(static_cast<char>(0));
  }
  const auto one = read_mask_pgm((dir / "one.pgm").string());
  EXPECT_EQ(one[0], 1.0f);
  EXPECT_EQ(one[1], 0.0f);
}

TEST(Overlay, ColorsEncodeTheConfusion) {
  const auto dir = fresh_dir("overlay");
  Tensor<float> pred({1, 4}, {1, 1, 0, 0}), truth({1, 4}, {1, 0, 1, 0});
  const auto path = dir / "o.ppm";
  write_overlay_ppm(path.string(), pred, truth);
  const std::string bytes = slurp(path);
  const std::string header = "P6\n4 1\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 12);
  const std::string px = bytes.substr(header.size());
  EXPECT_EQ(px, std::string("\xFF\xFF\xFF" "\xFF\x00\x00" "\x00\xFF\x00" "\x00\x00\x00", 12));
}

TEST(Manifest, SaveLoadRoundTrip) {
  const auto dir = fresh_dir("manifest");
  SynthOptions opt;
  opt.size = 32;
  const Scene s = synth_scene(77, opt);
  const std::string manifest = save_scene(s, dir.string());
  const Scene back = load_scene(manifest);
  EXPECT_EQ(back.id, s.id);
  EXPECT_TRUE(testing_util::bit_equal(back.bands, s.bands));
  EXPECT_TRUE(testing_util::bit_equal(back.mask, s.mask));

  save_scene(synth_scene(3, opt), dir.string());
  const auto all = load_dataset(dir.string());
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].id, "synth_3");
  EXPECT_EQ(all[1].id, "synth_77");
}

TEST(Manifest, MinMaxNormalization) {
  const auto dir = fresh_dir("minmax");
  write_raster((dir / "b1.ctfr").string(), Tensor<float>({1, 4}, {100, 200, 300, 500}));
  write_raster((dir / "b2.ctfr").string(), Tensor<float>({1, 4}, {7, 7, 7, 7}));
  write_mask_pgm((dir / "m.pgm").string(), Tensor<float>({1, 4}, {0, 1, 1, 0}));
  {
    std::ofstream out(dir / "s.json");
    out << R"({"band_files": ["b1.ctfr", "b2.ctfr"], "mask_file": "m.pgm"})";
  }
  const Scene s = load_scene((dir / "s.json").string());
  EXPECT_EQ(s.id, "s");
  EXPECT_FLOAT_EQ(s.bands.at({0, 0, 0}), 0.0f);
  EXPECT_FLOAT_EQ(s.bands.at({0, 0, 1}), 0.25f);
  EXPECT_FLOAT_EQ(s.bands.at({0, 0, 3}), 1.0f);
  // A constant band has no range and maps to 0.
  EXPECT_FLOAT_EQ(s.bands.at({1, 0, 2}), 0.0f);
  {
    std::ofstream out(dir / "given.json");
    out << R"({"id": "g", "band_files": ["b1.ctfr", "b2.ctfr"], "mask_file": "m.pgm",
               "normalization": "given", "band_ranges": [[0, 1000], [0, 14]]})";
  }
  const Scene g = load_scene((dir / "given.json").string());
  EXPECT_FLOAT_EQ(g.bands.at({0, 0, 1}), 0.2f);
  EXPECT_FLOAT_EQ(g.bands.at({1, 0, 0}), 0.5f);
}

TEST(Manifest, StructuredErrors) {
  const auto dir = fresh_dir("errors");
  write_raster((dir / "b1.ctfr").string(), Tensor<float>({2, 2}, 1.0f));
  write_raster((dir / "b2.ctfr").string(), Tensor<float>({2, 3}, 1.0f));
  write_mask_pgm((dir / "m.pgm").string(), Tensor<float>({2, 2}, 0.0f));
  auto manifest = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir / name) << body;
    return (dir / name).string();
  };
  auto kind_of = [](const std::string& path) {
    try {
      load_scene(path);
    } catch (const Error& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error for " << path;
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind_of(manifest("missing.json", R"({"band_files": ["b1.ctfr", "nope.ctfr"], "mask_file": "m.pgm"})")),
            ErrorKind::Io);
  EXPECT_EQ(kind_of(manifest("shape.json", R"({"band_files": ["b1.ctfr", "b2.ctfr"], "mask_file": "m.pgm"})")),
            ErrorKind::ShapeMismatch);
  EXPECT_EQ(kind_of(manifest("nomask.json", R"({"band_files": ["b1.ctfr"]})")), ErrorKind::Format);
  EXPECT_EQ(kind_of(manifest("syntax.json", "{")), ErrorKind::Format);
  EXPECT_EQ(kind_of(manifest("norm.json", R"({"band_files": ["b1.ctfr"], "mask_file": "m.pgm",
                                               "normalization": "zscore"})")),
            ErrorKind::Format);
  {
    std::ofstream out(dir / "gray.pgm", std::ios::binary);
    out << "P5\n2 2\n255\n";
    for (int v : {0, 255, 3, 0}) out.put(static_cast<char>(v));
  }
  EXPECT_EQ(kind_of(manifest("gray.json", R"({"band_files": ["b1.ctfr"], "mask_file": "gray.pgm"})")),
            ErrorKind::Format);
  EXPECT_THROW(load_dataset((dir / "no_such_dir").string()), Error);
}
