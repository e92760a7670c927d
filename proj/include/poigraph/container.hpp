#pragma once

// Binary artifact container shared by checkpoints and graph files:
// an 8-byte magic, a version word, a JSON manifest describing named tensors
// (name, dtype, shape, byte offset) and format metadata, then one flat
// little-endian blob of row-major arrays.

#include <bit>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poigraph/common.hpp"
#include "poigraph/tensor.hpp"

namespace poigraph {

using Json = nlohmann::json;

inline constexpr char kContainerMagic[9] = "PGRBIN01";
inline constexpr uint32_t kContainerVersion = 1;

class ContainerWriter {
 public:
  explicit ContainerWriter(std::string format) { meta_["format"] = std::move(format); }

  Json& meta() { return meta_; }

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    add_raw(name, std::is_same_v<T, float> ? "f32" : "f64", t.shape(),
            t.data(), sizeof(T) * static_cast<size_t>(t.numel()));
  }

  void add_i64(const std::string& name, const std::vector<int64_t>& v) {
    add_raw(name, "i64", Shape{static_cast<int64_t>(v.size())}, v.data(),
            sizeof(int64_t) * v.size());
  }

  std::string finish() const {
    Json manifest;
    manifest["container_version"] = kContainerVersion;
    manifest["meta"] = meta_;
    manifest["tensors"] = tensors_;
    manifest["blob_bytes"] = blob_.size();
    const std::string mjson = manifest.dump();
    std::string out;
    out.reserve(8 + 4 + 8 + mjson.size() + blob_.size());
    out.append(kContainerMagic, 8);
    put_u32le(out, kContainerVersion);
    put_u64le(out, mjson.size());
    out += mjson;
    out += blob_;
    return out;
  }

  void write(const std::string& path) const { write_file_atomic(path, finish()); }

 private:
  template <typename V>
  void add_raw(const std::string& name, const char* dtype, const Shape& shape,
               const V* data, size_t bytes) {
    Json t;
    t["name"] = name;
    t["dtype"] = dtype;
    t["shape"] = shape;
    t["offset"] = blob_.size();
    t["bytes"] = bytes;
    tensors_.push_back(std::move(t));
    append_le(data, bytes);
  }

  template <typename V>
  void append_le(const V* data, size_t bytes) {
    if constexpr (std::endian::native == std::endian::little) {
      blob_.append(reinterpret_cast<const char*>(data), bytes);
    } else {
      const size_t w = sizeof(V);
      const auto* p = reinterpret_cast<const unsigned char*>(data);
      for (size_t i = 0; i < bytes; i += w) {
        for (size_t k = 0; k < w; ++k) blob_.push_back(static_cast<char>(p[i + w - 1 - k]));
      }
    }
  }

  Json meta_;
  Json tensors_ = Json::array();
  std::string blob_;
};

class ContainerReader {
 public:
  static ContainerReader from_file(const std::string& path, const std::string& expect_format) {
    return ContainerReader(read_file(path), expect_format, path);
  }

  ContainerReader(std::string bytes, const std::string& expect_format,
                  const std::string& origin = "<memory>")
      : bytes_(std::move(bytes)) {
    if (bytes_.size() < 20 || std::memcmp(bytes_.data(), kContainerMagic, 8) != 0) {
      throw IoError("not a container file: " + origin);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data());
    const uint32_t ver = get_u32le(p + 8);
    if (ver != kContainerVersion) {
      throw IoError("container version mismatch in " + origin + ": file has " +
                    std::to_string(ver) + ", reader supports " +
                    std::to_string(kContainerVersion));
    }
    const uint64_t mlen = get_u64le(p + 12);
    if (20 + mlen > bytes_.size()) throw IoError("truncated container manifest: " + origin);
    try {
      manifest_ = Json::parse(bytes_.substr(20, mlen));
    } catch (const std::exception& e) {
      throw IoError("corrupt container manifest in " + origin + ": " + e.what());
    }
    blob_offset_ = 20 + mlen;
    const uint64_t blob_bytes = manifest_.value("blob_bytes", uint64_t{0});
    if (blob_offset_ + blob_bytes != bytes_.size()) {
      throw IoError("container blob length mismatch in " + origin + ": manifest says " +
                    std::to_string(blob_bytes) + " bytes, file has " +
                    std::to_string(bytes_.size() - blob_offset_));
    }
    const std::string fmt = manifest_["meta"].value("format", "");
    if (fmt != expect_format) {
      throw IoError("container format mismatch in " + origin + ": expected '" +
                    expect_format + "', found '" + fmt + "'");
    }
    for (const auto& t : manifest_["tensors"]) {
      specs_[t["name"].get<std::string>()] = t;
    }
  }

  const Json& meta() const { return manifest_["meta"]; }

  bool has(const std::string& name) const { return specs_.count(name) > 0; }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> names;
    for (const auto& t : manifest_["tensors"]) names.push_back(t["name"].get<std::string>());
    return names;
  }

  Shape shape_of(const std::string& name) const {
    return spec(name)["shape"].get<Shape>();
  }

  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const Json& s = spec(name);
    const std::string dtype = s["dtype"].get<std::string>();
    const Shape shape = s["shape"].get<Shape>();
    if (dtype == "f32") return load_typed<float>(s, shape).template cast<T>();
    if (dtype == "f64") return load_typed<double>(s, shape).template cast<T>();
    throw IoError("tensor '" + name + "' has non-float dtype " + dtype);
  }

  std::vector<int64_t> i64(const std::string& name) const {
    const Json& s = spec(name);
    if (s["dtype"].get<std::string>() != "i64") {
      throw IoError("tensor '" + name + "' is not i64");
    }
    const Shape shape = s["shape"].get<Shape>();
    Tensor<int64_t> t = load_typed<int64_t>(s, shape);
    return t.vec();
  }

 private:
  const Json& spec(const std::string& name) const {
    auto it = specs_.find(name);
    if (it == specs_.end()) throw IoError("container has no tensor '" + name + "'");
    return it->second;
  }

  template <typename V>
  Tensor<V> load_typed(const Json& s, const Shape& shape) const {
    const uint64_t offset = s["offset"].get<uint64_t>();
    const uint64_t bytes = s["bytes"].get<uint64_t>();
    const int64_t n = shape_numel(shape);
    if (bytes != sizeof(V) * static_cast<uint64_t>(n)) {
      throw IoError("tensor byte count inconsistent with shape for '" +
                    s["name"].get<std::string>() + "'");
    }
    if (blob_offset_ + offset + bytes > bytes_.size()) {
      throw IoError("tensor data out of blob bounds for '" + s["name"].get<std::string>() + "'");
    }
    std::vector<V> data(static_cast<size_t>(n));
    const char* src = bytes_.data() + blob_offset_ + offset;
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(data.data(), src, bytes);
    } else {
      const auto* p = reinterpret_cast<const unsigned char*>(src);
      auto* out = reinterpret_cast<unsigned char*>(data.data());
      const size_t w = sizeof(V);
      for (size_t i = 0; i < bytes; i += w) {
        for (size_t k = 0; k < w; ++k) out[i + k] = p[i + w - 1 - k];
      }
    }
    return Tensor<V>(shape, std::move(data));
  }

  std::string bytes_;
  Json manifest_;
  size_t blob_offset_ = 0;
  std::map<std::string, Json> specs_;
};

}  // namespace poigraph
