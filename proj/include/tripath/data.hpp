#pragma once

// Bi-temporal dataset on disk:
//   <root>/manifest.json
//   <root>/A/<id>.png      image at T1 (8-bit RGB)
//   <root>/B/<id>.png      image at T2 (8-bit RGB)
//   <root>/label/<id>.png  single-channel class indices 0..N, no palette
// plus the synthetic generator and the deterministic batch stream.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tripath/image.hpp"
#include "tripath/nn.hpp"

namespace tripath {

namespace fs = std::filesystem;

struct DatasetManifest {
  fs::path root;
  std::string split;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> entries;
  bool labeled = false;
  int height = 0, width = 0;  // shared by every entry; 0 when entries is empty
};

// Raw 8-bit rasters; intensity() maps to [0, 1].
struct ImagePair {
  std::string sample_id;
  Raster t1, t2;
  std::optional<Raster> mask;

  int height() const { return t1.height; }
  int width() const { return t1.width; }
  static double intensity(std::uint8_t v) { return v / 255.0; }
};

struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> stddev{0.229, 0.224, 0.225};
};

inline bool valid_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

namespace detail {

inline Raster as_rgb(Raster r) {
  if (r.channels == 3) return r;
  Raster out(r.width, r.height, 3);
  for (std::size_t i = 0; i < r.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = r.pixels[i];
  return out;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string(), e.what());
  }
}

inline Raster read_mask(const fs::path& path, const std::string& id, int num_classes) {
  Raster m = read_png(path);
  if (m.channels != 1) throw FormatError(id, "mask must be single-channel");
  for (std::uint8_t v : m.pixels)
    if (v > num_classes)
      throw LabelOutOfRange(id, "mask value " + std::to_string(v) + " exceeds N=" + std::to_string(num_classes));
  return m;
}

}  // namespace detail

inline ImagePair load_pair(const DatasetManifest& m, const std::string& id) {
  const fs::path a = m.root / "A" / (id + ".png"), b = m.root / "B" / (id + ".png");
  if (!fs::is_regular_file(a)) throw MissingFile(id, a.string());
  if (!fs::is_regular_file(b)) throw MissingFile(id, b.string());
  ImagePair p;
  p.sample_id = id;
  p.t1 = detail::as_rgb(read_png(a));
  p.t2 = detail::as_rgb(read_png(b));
  if (p.t1.width != p.t2.width || p.t1.height != p.t2.height)
    throw ShapeMismatch(id, "T1 and T2 sizes differ");
  if (m.labeled) {
    const fs::path l = m.root / "label" / (id + ".png");
    if (!fs::is_regular_file(l)) throw MissingFile(id, l.string());
    p.mask = detail::read_mask(l, id, m.num_classes);
    if (p.mask->width != p.t1.width || p.mask->height != p.t1.height)
      throw ShapeMismatch(id, "mask size differs from images");
  }
  return p;
}

// Reads manifest.json and checks every entry of `split` on disk.
// train/val must be labeled; test is labeled only if every label exists.
inline DatasetManifest load_manifest(const fs::path& root, const std::string& split) {
  if (!valid_split(split)) throw InvalidArg(split, "split must be train, val or test");
  if (!fs::is_directory(root)) throw MissingFile(root.string(), "dataset root not found");
  const nlohmann::json j = detail::read_json(root / "manifest.json");
  DatasetManifest m;
  m.root = root;
  m.split = split;
  try {
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("splits") && j["splits"].contains(split))
      m.entries = j["splits"][split].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((root / "manifest.json").string(), e.what());
  }
  if (m.num_classes < 1) throw FormatError("num_classes", "N must be at least 1");
  if (static_cast<int>(m.class_names.size()) != m.num_classes)
    throw FormatError("class_names", "expected " + std::to_string(m.num_classes) + " names");
  for (const char* dir : {"A", "B"})
    if (!fs::is_directory(root / dir) || fs::is_empty(root / dir)) throw MissingFile(std::string(dir) + "/");

  if (split == "test") {
    m.labeled = !m.entries.empty() && std::all_of(m.entries.begin(), m.entries.end(), [&](const std::string& id) {
      return fs::is_regular_file(root / "label" / (id + ".png"));
    });
  } else {
    m.labeled = true;
    if (!m.entries.empty() && !fs::is_directory(root / "label")) throw MissingFile("label/");
  }
  for (const auto& id : m.entries) {
    const ImagePair p = load_pair(m, id);
    if (m.height == 0) {
      m.height = p.height();
      m.width = p.width();
    } else if (p.height() != m.height || p.width() != m.width) {
      throw ShapeMismatch(id, "entry size differs from the rest of the split");
    }
  }
  return m;
}

inline std::vector<ImagePair> load_split(const DatasetManifest& m) {
  std::vector<ImagePair> out;
  out.reserve(m.entries.size());
  for (const auto& id : m.entries) out.push_back(load_pair(m, id));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
  std::uint64_t seed = 7;
  int count = 4;
  int size = 64;
  int num_classes = 3;
  int patch_size = 4;
  int val_count = 0;
  int test_count = 0;
  double min_changed = 0.05;
  double max_changed = 0.25;
};

namespace detail {

inline std::array<double, 3> class_color(int k, int n) {
  // evenly spaced hues, full value
  const double h = 6.0 * (k - 1) / n;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h) % 6) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (double& v : rgb) v = 0.1 + 0.8 * v;
  return rgb;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Stripe pattern whose orientation and period depend on the class.
inline double class_texture(int k, int n, int y, int x) {
  const double theta = std::numbers::pi * (k - 1) / n;
  const double period = 4.0 + 2.0 * ((k - 1) % 3);
  const double u = x * std::cos(theta) + y * std::sin(theta);
  return 0.8 + 0.2 * std::sin(2.0 * std::numbers::pi * u / period);
}

struct SynthSample {
  Raster t1, t2, mask;
};

inline SynthSample synth_sample(Rng& rng, const SynthOptions& o) {
  const int s = o.size;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SynthSample out{Raster(s, s, 3), Raster(s, s, 3), Raster(s, s, 1)};

  std::array<double, 3> base, amp, fx, fy, ph;
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.3 + 0.4 * u01(rng);
    amp[c] = 0.1 + 0.1 * u01(rng);
    fx[c] = (0.5 + 2.0 * u01(rng)) * 2.0 * std::numbers::pi / s;
    fy[c] = (0.5 + 2.0 * u01(rng)) * 2.0 * std::numbers::pi / s;
    ph[c] = 2.0 * std::numbers::pi * u01(rng);
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + amp[c] * std::sin(fx[c] * x + ph[c]) * std::cos(fy[c] * y) + noise(rng);
        out.t1.at(y, x, c) = to_byte(v);
      }
  out.t2 = out.t1;

  // Regions are capped at ~5% of the image so one region never jumps the
  // changed fraction past the upper bound.
  const double target = o.min_changed + (o.max_changed - o.min_changed - 0.05) * u01(rng);
  const int max_side = std::max(3, static_cast<int>(std::floor(std::sqrt(0.05) * s)));
  const int min_side = std::max(2, s / 10);
  std::uniform_int_distribution<int> side(min_side, std::max(min_side, max_side));
  std::uniform_int_distribution<int> cls(1, o.num_classes);
  std::size_t changed = 0;
  const std::size_t total = static_cast<std::size_t>(s) * s;
  for (int attempt = 0; attempt < 1000 && changed < target * total; ++attempt) {
    const int k = cls(rng);
    const int h = side(rng), w = side(rng);
    const int y0 = std::uniform_int_distribution<int>(0, s - h)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, s - w)(rng);
    const bool ellipse = u01(rng) < 0.5;
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        if (ellipse) {
          const double dy = (y + 0.5 - y0 - h / 2.0) / (h / 2.0), dx = (x + 0.5 - x0 - w / 2.0) / (w / 2.0);
          if (dy * dy + dx * dx > 1.0) continue;
        }
        if (out.mask.at(y, x) == 0) ++changed;
        out.mask.at(y, x) = static_cast<std::uint8_t>(k);
      }
  }
  const auto color = [&](int k) { return class_color(k, o.num_classes); };
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const int k = out.mask.at(y, x);
      if (k == 0) continue;
      const auto rgb = color(k);
      const double t = class_texture(k, o.num_classes, y, x);
      for (int c = 0; c < 3; ++c) out.t2.at(y, x, c) = to_byte(rgb[c] * t + noise(rng));
    }
  return out;
}

}  // namespace detail

// Writes a complete dataset under `root` and returns the train manifest.
// Identical options produce byte-identical files.
inline DatasetManifest synth_dataset(const fs::path& root, const SynthOptions& o) {
  if (o.count < 1) throw InvalidArg("count", "must be positive");
  if (o.size < 1) throw InvalidArg("size", "must be positive");
  if (o.num_classes < 1 || o.num_classes > 255) throw InvalidArg("num_classes", "must be in [1, 255]");
  if (o.patch_size < 1 || o.size % o.patch_size != 0)
    throw InvalidArg("size", std::to_string(o.size) + " is not divisible by patch size " + std::to_string(o.patch_size));
  if (o.val_count < 0 || o.test_count < 0) throw InvalidArg("val_count/test_count", "must be non-negative");
  if (!(0.0 <= o.min_changed && o.min_changed + 0.05 <= o.max_changed && o.max_changed <= 1.0))
    throw InvalidArg("changed band", "need 0 <= min and min + 0.05 <= max <= 1");

  Rng rng(derive_seed(o.seed, "synth"));
  nlohmann::json splits = {{"train", nlohmann::json::array()},
                           {"val", nlohmann::json::array()},
                           {"test", nlohmann::json::array()}};
  const std::array<std::tuple<const char*, const char*, int>, 3> plan{
      {{"train", "s", o.count}, {"val", "v", o.val_count}, {"test", "t", o.test_count}}};
  for (const auto& [split, prefix, n] : plan) {
    for (int i = 0; i < n; ++i) {
      const std::string id = prefix + std::to_string(i);
      const auto s = detail::synth_sample(rng, o);
      write_png(root / "A" / (id + ".png"), s.t1);
      write_png(root / "B" / (id + ".png"), s.t2);
      write_png(root / "label" / (id + ".png"), s.mask);
      splits[split].push_back(id);
    }
  }
  nlohmann::json j;
  j["num_classes"] = o.num_classes;
  j["class_names"] = nlohmann::json::array();
  for (int k = 1; k <= o.num_classes; ++k) j["class_names"].push_back("change_" + std::to_string(k));
  j["splits"] = splits;
  std::ofstream(root / "manifest.json") << j.dump(2) << '\n';
  return load_manifest(root, "train");
}

// ---------------------------------------------------------------------------
// Dihedral augmentation. Code k in [0, 8): horizontal flip when k >= 4,
// then (k % 4) counter-clockwise quarter turns.

inline Raster dihedral(const Raster& src, int code) {
  if (code < 0 || code >= 8) throw InvalidArg(std::to_string(code), "dihedral code must be in [0, 8)");
  Raster cur = src;
  if (code >= 4) {
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x)
        for (int c = 0; c < cur.channels; ++c) cur.at(y, x, c) = src.at(y, src.width - 1 - x, c);
  }
  for (int r = 0; r < code % 4; ++r) {
    Raster next(cur.height, cur.width, cur.channels);
    // out(y, x) = in(x, W - 1 - y)
    for (int y = 0; y < next.height; ++y)
      for (int x = 0; x < next.width; ++x)
        for (int c = 0; c < cur.channels; ++c) next.at(y, x, c) = cur.at(x, cur.width - 1 - y, c);
    cur = std::move(next);
  }
  return cur;
}

inline ImagePair dihedral(const ImagePair& p, int code) {
  ImagePair out{p.sample_id, dihedral(p.t1, code), dihedral(p.t2, code), std::nullopt};
  if (p.mask) out.mask = dihedral(*p.mask, code);
  return out;
}

// ---------------------------------------------------------------------------
// Batching

template <class T>
struct Batch {
  Tensor<T> t1, t2;                 // [B, 3, H, W], normalized
  std::vector<std::uint8_t> masks;  // [B, H, W]; empty for unlabeled data
  std::vector<std::string> sample_ids;
  std::vector<int> transforms;      // dihedral code applied per sample
  int size() const { return static_cast<int>(sample_ids.size()); }
  bool labeled() const { return !masks.empty(); }
};

struct BatchOptions {
  int batch_size = 4;
  bool augment = false;
  bool shuffle = true;
  std::uint64_t seed = 0;
  int patch_size = 1;
  Normalization norm;
};

template <class T>
void write_normalized(const Raster& r, const Normalization& n, T* dst) {
  const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
  for (int c = 0; c < 3; ++c) {
    const double m = n.mean[c], inv = 1.0 / n.stddev[c];
    for (std::size_t i = 0; i < plane; ++i)
      dst[c * plane + i] = static_cast<T>((ImagePair::intensity(r.pixels[i * 3 + c]) - m) * inv);
  }
}

template <class T>
Batch<T> collate(const std::vector<ImagePair>& pairs, const std::vector<int>& codes, const Normalization& norm) {
  if (pairs.empty()) throw InvalidArg("batch", "cannot collate an empty batch");
  const int h = pairs[0].height(), w = pairs[0].width();
  const int b = static_cast<int>(pairs.size());
  Batch<T> out;
  out.t1 = Tensor<T>({b, 3, h, w});
  out.t2 = Tensor<T>({b, 3, h, w});
  const bool labeled = std::all_of(pairs.begin(), pairs.end(), [](const ImagePair& p) { return p.mask.has_value(); });
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < b; ++i) {
    const ImagePair& p = pairs[static_cast<std::size_t>(i)];
    if (p.height() != h || p.width() != w) throw ShapeMismatch(p.sample_id, "batch members must share a size");
    write_normalized(p.t1, norm, out.t1.ptr() + i * 3 * plane);
    write_normalized(p.t2, norm, out.t2.ptr() + i * 3 * plane);
    if (labeled) out.masks.insert(out.masks.end(), p.mask->pixels.begin(), p.mask->pixels.end());
    out.sample_ids.push_back(p.sample_id);
  }
  out.transforms = codes;
  return out;
}

// Deterministic epochs: the order and augmentations of epoch e depend only
// on (seed, e). The last batch may be smaller than batch_size.
template <class T>
class BatchStream {
 public:
  BatchStream(std::vector<ImagePair> samples, BatchOptions opt) : samples_(std::move(samples)), opt_(opt) {
    if (opt_.batch_size < 1) throw InvalidArg("batch_size", "must be at least 1");
    for (const auto& p : samples_)
      if (p.height() % opt_.patch_size != 0 || p.width() % opt_.patch_size != 0)
        throw ShapeError(p.sample_id, "spatial size not divisible by patch size " + std::to_string(opt_.patch_size));
  }

  std::size_t num_samples() const { return samples_.size(); }
  std::size_t batches_per_epoch() const {
    return (samples_.size() + static_cast<std::size_t>(opt_.batch_size) - 1) / static_cast<std::size_t>(opt_.batch_size);
  }

  std::vector<Batch<T>> epoch(int e) const {
    Rng rng(derive_seed(opt_.seed, "epoch" + std::to_string(e)));
    std::vector<std::size_t> order(samples_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (opt_.shuffle) std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch<T>> out;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt_.batch_size)) {
      std::vector<ImagePair> pairs;
      std::vector<int> codes;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt_.batch_size));
      for (std::size_t i = start; i < end; ++i) {
        const ImagePair& p = samples_[order[i]];
        int code = 0;
        if (opt_.augment) {
          // quarter turns only keep the batch rectangular for square images
          const int choices = p.height() == p.width() ? 8 : 2;
          code = std::uniform_int_distribution<int>(0, choices - 1)(rng);
          if (choices == 2) code *= 6;  // {identity, flip + half turn}
        }
        pairs.push_back(code ? dihedral(p, code) : p);
        codes.push_back(code);
      }
      out.push_back(collate<T>(pairs, codes, opt_.norm));
    }
    return out;
  }

 private:
  std::vector<ImagePair> samples_;
  BatchOptions opt_;
};

}  // namespace tripath
