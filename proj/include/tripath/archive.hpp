#pragma once

// Single-file tensor archive used for checkpoints and external weights.
//
// Layout (little endian):
//   8 bytes   magic "TRIPATH1"
//   8 bytes   uint64 length L of the JSON header
//   L bytes   JSON header: {"metadata": {...},
//                           "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
//   payload   raw tensor bytes, offsets relative to the payload start
//
// dtype is "f32" or "f64". Tensors keep insertion order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tripath/tensor.hpp"

namespace tripath {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

class Archive {
 public:
  struct Record {
    std::string name;
    std::string dtype;
    Shape shape;
    std::vector<char> bytes;
  };

  nlohmann::json metadata = nlohmann::json::object();

  template <class T>
  static constexpr const char* dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
  }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    Record r{name, dtype_of<T>(), t.shape(), std::vector<char>(t.numel() * sizeof(T))};
    std::memcpy(r.bytes.data(), t.ptr(), r.bytes.size());
    auto it = index_.find(name);
    if (it != index_.end()) {
      records_[it->second] = std::move(r);
    } else {
      index_[name] = records_.size();
      records_.push_back(std::move(r));
    }
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Record& record(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw MissingTensor(name);
    return records_[it->second];
  }

  const std::vector<Record>& records() const { return records_; }

  void erase(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return;
    records_.erase(records_.begin() + static_cast<std::ptrdiff_t>(it->second));
    rebuild_index();
  }

  // Copies a stored tensor into `dst` (shapes must match); converts between
  // f32 and f64 when the stored dtype differs from T.
  template <class T>
  void get_into(const std::string& name, Tensor<T>& dst) const {
    const Record& r = record(name);
    if (r.shape != dst.shape())
      throw ShapeMismatch(name, "stored " + to_string(r.shape) + ", expected " + to_string(dst.shape()));
    auto out = dst.data();
    if (r.dtype == dtype_of<T>()) {
      std::memcpy(out.data(), r.bytes.data(), r.bytes.size());
    } else if (r.dtype == "f32") {
      const auto* src = reinterpret_cast<const float*>(r.bytes.data());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src[i]);
    } else {
      const auto* src = reinterpret_cast<const double*>(r.bytes.data());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src[i]);
    }
  }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    Tensor<T> t(record(name).shape);
    get_into(name, t);
    return t;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["metadata"] = metadata;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& r : records_) {
      header["tensors"].push_back(
          {{"name", r.name}, {"dtype", r.dtype}, {"shape", r.shape}, {"offset", offset}, {"nbytes", r.bytes.size()}});
      offset += r.bytes.size();
    }
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingFile(path.string(), "cannot open for writing");
    const std::uint64_t len = text.size();
    os.write(kMagic, 8);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& r : records_) os.write(r.bytes.data(), static_cast<std::streamsize>(r.bytes.size()));
    if (!os) throw FormatError(path.string(), "write failed");
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFile(path.string());
    char magic[8];
    std::uint64_t len = 0;
    is.read(magic, 8);
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string(), "not a tensor archive");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
    if (!is || header.is_discarded()) throw FormatError(path.string(), "corrupt header");
    const std::streamoff payload = is.tellg();
    Archive a;
    a.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& t : header.at("tensors")) {
      Record r;
      r.name = t.at("name").get<std::string>();
      r.dtype = t.at("dtype").get<std::string>();
      r.shape = t.at("shape").get<Shape>();
      const std::size_t elem = r.dtype == "f32" ? 4 : r.dtype == "f64" ? 8 : 0;
      if (elem == 0) throw FormatError(r.name, "unknown dtype " + r.dtype);
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      if (nbytes != numel(r.shape) * elem) throw FormatError(r.name, "byte count does not match shape");
      r.bytes.resize(nbytes);
      is.seekg(payload + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
      is.read(r.bytes.data(), static_cast<std::streamsize>(nbytes));
      if (!is) throw FormatError(r.name, "truncated payload");
      a.index_[r.name] = a.records_.size();
      a.records_.push_back(std::move(r));
    }
    return a;
  }

 private:
  static constexpr char kMagic[8] = {'T', 'R', 'I', 'P', 'A', 'T', 'H', '1'};

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) index_[records_[i].name] = i;
  }

  std::vector<Record> records_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace tripath
