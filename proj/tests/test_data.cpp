#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <set>

#include "tripath/data.hpp"

using namespace tripath;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("tripath_data_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SynthOptions opts(int count = 4, int size = 32, int n = 3) {
  SynthOptions o;
  o.count = count;
  o.size = size;
  o.num_classes = n;
  return o;
}

}  // namespace

TEST(Synth, SameSeedGivesByteIdenticalFiles) {
  TempDir a("same_a"), b("same_b");
  auto o = opts();
  o.val_count = 1;
  o.test_count = 2;
  synth_dataset(a.path, o);
  synth_dataset(b.path, o);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = b.path / fs::relative(e.path(), a.path);
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 1u + 3u * 7u);

  TempDir c("same_c");
  o.seed = 8;
  synth_dataset(c.path, o);
  EXPECT_NE(slurp(a.path / "B" / "s0.png"), slurp(c.path / "B" / "s0.png"));
}

TEST(Synth, ChangedFractionWithinBand) {
  TempDir d("band");
  auto o = opts(12, 64, 3);
  const auto m = synth_dataset(d.path, o);
  ASSERT_EQ(m.entries.size(), 12u);
  for (const auto& id : m.entries) {
    const Raster mask = read_png(d.path / "label" / (id + ".png"));
    ASSERT_EQ(mask.channels, 1);
    std::size_t changed = 0;
    for (std::uint8_t v : mask.pixels) {
      ASSERT_LE(v, 3);
      changed += v != 0;
    }
    const double frac = static_cast<double>(changed) / mask.pixels.size();
    EXPECT_GE(frac, 0.05) << id;
    EXPECT_LE(frac, 0.25) << id;
  }
}

TEST(Synth, ClassCountsCoverEveryPixel) {
  TempDir d("counts");
  const auto m = synth_dataset(d.path, opts(5, 32, 4));
  std::vector<std::size_t> count(5, 0);
  for (const auto& p : load_split(m))
    for (std::uint8_t v : p.mask->pixels) ++count.at(v);
  std::size_t sum = 0;
  for (auto c : count) sum += c;
  EXPECT_EQ(sum, 5u * 32u * 32u);
  EXPECT_GT(count[0], 0u);
}

TEST(Synth, BinaryCaseUsesOnlyZeroAndOne) {
  TempDir d("binary");
  const auto m = synth_dataset(d.path, opts(3, 32, 1));
  EXPECT_EQ(m.num_classes, 1);
  bool saw_one = false;
  for (const auto& p : load_split(m))
    for (std::uint8_t v : p.mask->pixels) {
      ASSERT_LE(v, 1);
      saw_one |= v == 1;
    }
  EXPECT_TRUE(saw_one);
}

TEST(Synth, UnchangedPixelsAreIdenticalAcrossDates) {
  TempDir d("unchanged");
  const auto m = synth_dataset(d.path, opts(2, 32, 2));
  for (const auto& p : load_split(m))
    for (std::size_t i = 0; i < p.mask->pixels.size(); ++i)
      if (p.mask->pixels[i] == 0)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(p.t1.pixels[i * 3 + c], p.t2.pixels[i * 3 + c]);
}

TEST(Synth, SplitsAndRejectedOptions) {
  TempDir d("splits");
  auto o = opts(2, 16, 2);
  o.val_count = 1;
  o.test_count = 3;
  synth_dataset(d.path, o);
  EXPECT_EQ(load_manifest(d.path, "train").entries, (std::vector<std::string>{"s0", "s1"}));
  EXPECT_EQ(load_manifest(d.path, "val").entries, (std::vector<std::string>{"v0"}));
  const auto test = load_manifest(d.path, "test");
  EXPECT_EQ(test.entries.size(), 3u);
  EXPECT_TRUE(test.labeled);
  EXPECT_EQ(test.class_names, (std::vector<std::string>{"change_1", "change_2"}));

  o = opts(2, 30, 2);
  EXPECT_THROW(synth_dataset(d.path, o), InvalidArg);
  o = opts(2, 32, 0);
  EXPECT_THROW(synth_dataset(d.path, o), InvalidArg);
}

TEST(Loader, LabelOutOfRangeNamesSample) {
  TempDir d("range");
  synth_dataset(d.path, opts(4, 16, 2));
  Raster bad(16, 16, 1);
  bad.at(3, 3) = 3;
  write_png(d.path / "label" / "s3.png", bad);
  try {
    load_manifest(d.path, "train");
    FAIL() << "expected LabelOutOfRange";
  } catch (const LabelOutOfRange& e) {
    EXPECT_EQ(e.subject(), "s3");
  }
}

TEST(Loader, EmptyImageDirectory) {
  TempDir d("emptyA");
  synth_dataset(d.path, opts(2, 16, 2));
  for (const auto& e : fs::directory_iterator(d.path / "A")) fs::remove(e.path());
  EXPECT_THROW(load_manifest(d.path, "train"), MissingFile);
  fs::remove_all(d.path / "A");
  EXPECT_THROW(load_manifest(d.path, "train"), MissingFile);
}

TEST(Loader, MissingPairMember) {
  TempDir d("missingB");
  synth_dataset(d.path, opts(2, 16, 2));
  fs::remove(d.path / "B" / "s1.png");
  try {
    load_manifest(d.path, "train");
    FAIL() << "expected MissingFile";
  } catch (const MissingFile& e) {
    EXPECT_EQ(e.subject(), "s1");
  }
}

TEST(Loader, ShapeMismatch) {
  TempDir d("shape");
  synth_dataset(d.path, opts(2, 16, 2));
  write_png(d.path / "B" / "s0.png", Raster(16, 8, 3));
  EXPECT_THROW(load_manifest(d.path, "train"), tripath::ShapeMismatch);

  TempDir e("shape_mask");
  synth_dataset(e.path, opts(2, 16, 2));
  write_png(e.path / "label" / "s1.png", Raster(8, 16, 1));
  EXPECT_THROW(load_manifest(e.path, "train"), tripath::ShapeMismatch);
}

TEST(Loader, UnlabeledTestSplit) {
  TempDir d("unlabeled");
  auto o = opts(1, 16, 2);
  o.test_count = 2;
  synth_dataset(d.path, o);
  fs::remove(d.path / "label" / "t1.png");
  const auto m = load_manifest(d.path, "test");
  EXPECT_FALSE(m.labeled);
  for (const auto& p : load_split(m)) EXPECT_FALSE(p.mask.has_value());
}

TEST(Loader, BadManifest) {
  TempDir d("manifest");
  synth_dataset(d.path, opts(1, 16, 2));
  std::ofstream(d.path / "manifest.json") << "{\"num_classes\": 2, \"class_names\": [\"a\"]}";
  EXPECT_THROW(load_manifest(d.path, "train"), FormatError);
  std::ofstream(d.path / "manifest.json") << "{not json";
  EXPECT_THROW(load_manifest(d.path, "train"), FormatError);
  EXPECT_THROW(load_manifest(d.path, "holdout"), InvalidArg);
  EXPECT_THROW(load_manifest(d.path / "nowhere", "train"), MissingFile);
}

TEST(Loader, GrayscaleImagesBecomeRgb) {
  TempDir d("gray");
  synth_dataset(d.path, opts(1, 16, 2));
  Raster g(16, 16, 1, 77);
  write_png(d.path / "A" / "s0.png", g);
  const auto p = load_pair(load_manifest(d.path, "train"), "s0");
  EXPECT_EQ(p.t1.channels, 3);
  for (auto v : p.t1.pixels) EXPECT_EQ(v, 77);
}

// ---- augmentation

TEST(Dihedral, GroupStructure) {
  Raster r(5, 5, 1);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = static_cast<std::uint8_t>(i);
  // four quarter turns and two flips are the identity
  EXPECT_EQ(dihedral(dihedral(dihedral(dihedral(r, 1), 1), 1), 1).pixels, r.pixels);
  EXPECT_EQ(dihedral(dihedral(r, 4), 4).pixels, r.pixels);
  std::set<std::vector<std::uint8_t>> distinct;
  for (int k = 0; k < 8; ++k) distinct.insert(dihedral(r, k).pixels);
  EXPECT_EQ(distinct.size(), 8u);
  EXPECT_THROW(dihedral(r, 8), InvalidArg);
}

TEST(Dihedral, CodesMatchExplicitMaps) {
  const int h = 3, w = 4;
  Raster r(w, h, 1);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = static_cast<std::uint8_t>(10 + i);
  const Raster flip = dihedral(r, 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) EXPECT_EQ(flip.at(y, x), r.at(y, w - 1 - x));
  // counter-clockwise: the top-right corner moves to the top-left
  const Raster rot = dihedral(r, 1);
  ASSERT_EQ(rot.height, w);
  ASSERT_EQ(rot.width, h);
  EXPECT_EQ(rot.at(0, 0), r.at(0, w - 1));
  EXPECT_EQ(rot.at(w - 1, h - 1), r.at(h - 1, 0));
  const Raster six = dihedral(r, 6);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) EXPECT_EQ(six.at(y, x), r.at(h - 1 - y, x));
}

TEST(Dihedral, PairIsTransformedJointly) {
  ImagePair p{"x", Raster(6, 6, 3), Raster(6, 6, 3), Raster(6, 6, 1)};
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const auto v = static_cast<std::uint8_t>(y * 6 + x);
      for (int c = 0; c < 3; ++c) {
        p.t1.at(y, x, c) = v;
        p.t2.at(y, x, c) = static_cast<std::uint8_t>(100 + v);
      }
      p.mask->at(y, x) = v % 3;
    }
  for (int k = 0; k < 8; ++k) {
    const auto q = dihedral(p, k);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        const int v = q.t1.at(y, x, 0);
        EXPECT_EQ(q.t2.at(y, x, 2), 100 + v);
        EXPECT_EQ(q.mask->at(y, x), v % 3);
      }
  }
}

// ---- batching

namespace {

std::vector<ImagePair> toy_samples(int n, int h, int w) {
  std::vector<ImagePair> out;
  for (int i = 0; i < n; ++i) {
    ImagePair p{"p" + std::to_string(i), Raster(w, h, 3), Raster(w, h, 3), Raster(w, h, 1)};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          p.t1.at(y, x, c) = static_cast<std::uint8_t>(i * 16 + y * w + x);
          p.t2.at(y, x, c) = static_cast<std::uint8_t>(200 - x);
        }
        p.mask->at(y, x) = static_cast<std::uint8_t>((x + i) % 2);
      }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST(Batches, CountAndPartialLastBatch) {
  BatchOptions o;
  o.batch_size = 4;
  BatchStream<float> s(toy_samples(10, 4, 4), o);
  EXPECT_EQ(s.batches_per_epoch(), 3u);
  const auto e = s.epoch(0);
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0].size(), 4);
  EXPECT_EQ(e[2].size(), 2);
  EXPECT_EQ(e[2].t1.shape(), (Shape{2, 3, 4, 4}));
  EXPECT_EQ(e[2].masks.size(), 2u * 16u);
  std::multiset<std::string> seen;
  for (const auto& b : e) seen.insert(b.sample_ids.begin(), b.sample_ids.end());
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), 10u);
}

TEST(Batches, EpochsAreDeterministicAndDiffer) {
  BatchOptions o;
  o.batch_size = 3;
  o.augment = true;
  o.seed = 42;
  BatchStream<double> s(toy_samples(7, 4, 4), o);
  const auto a = s.epoch(2), b = s.epoch(2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].sample_ids, b[i].sample_ids);
    EXPECT_EQ(a[i].transforms, b[i].transforms);
    EXPECT_EQ(a[i].masks, b[i].masks);
    EXPECT_EQ(a[i].t1.data().size(), b[i].t1.data().size());
    EXPECT_TRUE(std::equal(a[i].t1.data().begin(), a[i].t1.data().end(), b[i].t1.data().begin()));
  }
  std::vector<std::string> ids_a, ids_c;
  std::vector<int> codes_a, codes_c;
  const auto c = s.epoch(3);
  for (const auto& x : a) {
    ids_a.insert(ids_a.end(), x.sample_ids.begin(), x.sample_ids.end());
    codes_a.insert(codes_a.end(), x.transforms.begin(), x.transforms.end());
  }
  for (const auto& x : c) {
    ids_c.insert(ids_c.end(), x.sample_ids.begin(), x.sample_ids.end());
    codes_c.insert(codes_c.end(), x.transforms.begin(), x.transforms.end());
  }
  EXPECT_TRUE(ids_a != ids_c || codes_a != codes_c);
}

TEST(Batches, AugmentationMatchesDihedralOfSource) {
  BatchOptions o;
  o.batch_size = 2;
  o.augment = true;
  o.seed = 5;
  o.norm = {{0, 0, 0}, {1, 1, 1}};
  const auto samples = toy_samples(4, 4, 4);
  BatchStream<double> s(samples, o);
  std::set<int> codes;
  for (int e = 0; e < 6; ++e)
    for (const auto& b : s.epoch(e))
      for (int i = 0; i < b.size(); ++i) {
        const int idx = std::stoi(b.sample_ids[i].substr(1));
        const auto want = dihedral(samples[idx], b.transforms[i]);
        codes.insert(b.transforms[i]);
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x) {
            EXPECT_EQ(b.masks[i * 16 + y * 4 + x], want.mask->at(y, x));
            EXPECT_DOUBLE_EQ(b.t1.data()[((i * 3 + 1) * 4 + y) * 4 + x], want.t1.at(y, x, 1) / 255.0);
            EXPECT_DOUBLE_EQ(b.t2.data()[((i * 3 + 2) * 4 + y) * 4 + x], want.t2.at(y, x, 2) / 255.0);
          }
      }
  EXPECT_GT(codes.size(), 2u);
}

TEST(Batches, NonSquareUsesRectanglePreservingCodes) {
  BatchOptions o;
  o.batch_size = 4;
  o.augment = true;
  o.seed = 9;
  BatchStream<float> s(toy_samples(4, 2, 4), o);
  for (int e = 0; e < 8; ++e)
    for (const auto& b : s.epoch(e)) {
      EXPECT_EQ(b.t1.shape(), (Shape{4, 3, 2, 4}));
      for (int c : b.transforms) EXPECT_TRUE(c == 0 || c == 6) << c;
    }
}

TEST(Batches, Normalization) {
  BatchOptions o;
  o.batch_size = 1;
  o.shuffle = false;
  auto samples = toy_samples(1, 2, 2);
  BatchStream<double> s(samples, o);
  const auto b = s.epoch(0)[0];
  const Normalization n;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i)
      EXPECT_DOUBLE_EQ(b.t1.data()[c * 4 + i], (samples[0].t1.pixels[i * 3 + c] / 255.0 - n.mean[c]) / n.stddev[c]);
  EXPECT_EQ(b.sample_ids, (std::vector<std::string>{"p0"}));
}

TEST(Batches, RejectsIndivisibleSize) {
  BatchOptions o;
  o.patch_size = 4;
  EXPECT_THROW(BatchStream<float>(toy_samples(1, 6, 8), o), ShapeError);
  o.batch_size = 0;
  EXPECT_THROW(BatchStream<float>(toy_samples(1, 4, 4), o), InvalidArg);
}
