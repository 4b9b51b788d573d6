// SPDX-License-Identifier: Apache-2.0
//
// Named-array container in the safetensors layout: an 8-byte little-endian
// header length, a JSON header mapping tensor names to dtype/shape/offsets
// (plus an optional "__metadata__" string map), then tightly packed row-major
// tensor data. Only F32 and F64 tensors are supported.
#pragma once

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "faceadapt/common.hpp"

namespace faceadapt {

static_assert(std::endian::native == std::endian::little,
              "container serialization assumes a little-endian host");

enum class Dtype { F32, F64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "F32" : "F64"; }

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

template <typename Scalar>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  if constexpr (std::is_same_v<Scalar, float>)
    return Dtype::F32;
  else
    return Dtype::F64;
}

struct HostTensor {
  Dtype dtype = Dtype::F32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> data;  // row-major (C order)

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }

  template <typename Scalar>
  static HostTensor from_matrix(const MatX<Scalar>& m) {
    HostTensor t;
    t.dtype = dtype_of<Scalar>();
    t.shape = {m.rows(), m.cols()};
    t.data.resize(std::size_t(m.size()) * sizeof(Scalar));
    auto* out = reinterpret_cast<Scalar*>(t.data.data());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) *out++ = m(i, j);
    return t;
  }

  template <typename Scalar>
  static HostTensor from_vector(const VecX<Scalar>& v) {
    HostTensor t;
    t.dtype = dtype_of<Scalar>();
    t.shape = {v.size()};
    t.data.resize(std::size_t(v.size()) * sizeof(Scalar));
    std::memcpy(t.data.data(), v.data(), t.data.size());
    return t;
  }

  /// Element at flat row-major index, converted to double.
  double at(std::int64_t idx) const {
    if (dtype == Dtype::F32) {
      float v;
      std::memcpy(&v, data.data() + idx * 4, 4);
      return v;
    }
    double v;
    std::memcpy(&v, data.data() + idx * 8, 8);
    return v;
  }

  template <typename Scalar>
  MatX<Scalar> to_matrix(Index rows, Index cols) const {
    if (numel() != rows * cols)
      throw DataError("tensor element count does not match requested matrix shape");
    MatX<Scalar> m(rows, cols);
    std::int64_t idx = 0;
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = Scalar(at(idx++));
    return m;
  }

  /// 2-D tensors only; uses the stored shape.
  template <typename Scalar>
  MatX<Scalar> to_matrix() const {
    if (shape.size() != 2) throw DataError("tensor is not 2-D");
    return to_matrix<Scalar>(Index(shape[0]), Index(shape[1]));
  }

  template <typename Scalar>
  VecX<Scalar> to_vector() const {
    VecX<Scalar> v(numel());
    for (std::int64_t i = 0; i < numel(); ++i) v(i) = Scalar(at(i));
    return v;
  }
};

class Container {
 public:
  std::map<std::string, HostTensor> tensors;
  std::map<std::string, std::string> metadata;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  const HostTensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing tensor '" + name + "'");
    return it->second;
  }

  template <typename Scalar>
  void set_matrix(const std::string& name, const MatX<Scalar>& m) {
    tensors[name] = HostTensor::from_matrix(m);
  }

  template <typename Scalar>
  void set_vector(const std::string& name, const VecX<Scalar>& v) {
    tensors[name] = HostTensor::from_vector(v);
  }

  template <typename Scalar>
  MatX<Scalar> matrix(const std::string& name) const {
    return at(name).template to_matrix<Scalar>();
  }

  template <typename Scalar>
  VecX<Scalar> vector(const std::string& name) const {
    return at(name).template to_vector<Scalar>();
  }

  /// Order- and content-sensitive hash over names, dtypes, shapes and raw
  /// bytes (names are iterated in sorted order). Hex string.
  std::string fingerprint() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, t] : tensors) {
      h = fnv1a64(name, h);
      h = fnv1a64("|", h);
      const char* dn = dtype_name(t.dtype);
      h = fnv1a64(dn, h);
      for (auto s : t.shape) h = fnv1a64(&s, sizeof(s), h);
      h = fnv1a64(t.data.data(), t.data.size(), h);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header = nlohmann::json::object();
    if (!metadata.empty()) {
      nlohmann::json md = nlohmann::json::object();
      for (const auto& [k, v] : metadata) md[k] = v;
      header["__metadata__"] = md;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
      nlohmann::json entry;
      entry["dtype"] = dtype_name(t.dtype);
      entry["shape"] = t.shape;
      entry["data_offsets"] = {offset, offset + t.data.size()};
      header[name] = entry;
      offset += t.data.size();
    }
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    std::uint64_t n = hs.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size()));
    if (!out) throw DataError("failed writing '" + path.string() + "'");
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in || n == 0 || n > (1ull << 31))
      throw DataError("bad container header in '" + path.string() + "'");
    std::string hs(n, '\0');
    in.read(hs.data(), std::streamsize(n));
    if (!in) throw DataError("truncated container header in '" + path.string() + "'");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("container header is not valid JSON: " + std::string(e.what()));
    }
    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});

    Container c;
    for (auto it = header.begin(); it != header.end(); ++it) {
      if (it.key() == "__metadata__") {
        for (auto m = it.value().begin(); m != it.value().end(); ++m)
          c.metadata[m.key()] = m.value().get<std::string>();
        continue;
      }
      const auto& entry = it.value();
      HostTensor t;
      const std::string dt = entry.at("dtype").get<std::string>();
      if (dt == "F32")
        t.dtype = Dtype::F32;
      else if (dt == "F64")
        t.dtype = Dtype::F64;
      else
        throw DataError("unsupported dtype '" + dt + "' for tensor '" + it.key() + "'");
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offs = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offs.size() != 2 || offs[1] < offs[0] || offs[1] > payload.size())
        throw DataError("bad data offsets for tensor '" + it.key() + "'");
      const std::uint64_t bytes = offs[1] - offs[0];
      if (bytes != std::uint64_t(t.numel()) * dtype_size(t.dtype))
        throw DataError("data size does not match shape for tensor '" + it.key() + "'");
      t.data.assign(payload.begin() + std::ptrdiff_t(offs[0]),
                    payload.begin() + std::ptrdiff_t(offs[1]));
      c.tensors[it.key()] = std::move(t);
    }
    return c;
  }
};

}  // namespace faceadapt
