// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container used for every weight/adapter/dump file safekit touches.
//
// Layout (bit-exact, little-endian):
//   bytes 0..7   u64 N = header length
//   bytes 8..8+N UTF-8 JSON object: tensor name -> {"dtype": "F16"|"F32"|"F64",
//                "shape": [u64...], "data_offsets": [begin, end]}, plus an
//                optional "__metadata__" string map
//   bytes 8+N..  raw row-major tensor data; data_offsets are relative to the
//                end of the header
//
// This matches the common single-file safetensors convention, so published
// adapters can be ingested directly. F16 is accepted as a storage dtype and
// widened on conversion; safekit never writes F16.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "safekit/common.hpp"

namespace safekit {

enum class Dtype : std::uint8_t { kF16, kF32, kF64 };

inline std::size_t dtype_size(Dtype t) {
  switch (t) {
    case Dtype::kF16: return 2;
    case Dtype::kF32: return 4;
    case Dtype::kF64: return 8;
  }
  throw Error("invalid dtype enum value");
}

inline const char* dtype_name(Dtype t) {
  switch (t) {
    case Dtype::kF16: return "F16";
    case Dtype::kF32: return "F32";
    case Dtype::kF64: return "F64";
  }
  throw Error("invalid dtype enum value");
}

inline Dtype parse_dtype(const std::string& tag, const std::string& tensor) {
  if (tag == "F16") return Dtype::kF16;
  if (tag == "F32") return Dtype::kF32;
  if (tag == "F64") return Dtype::kF64;
  throw Error("tensor '" + tensor + "': unknown dtype tag '" + tag + "'");
}

/// Dense tensor as stored: raw little-endian bytes plus dtype/shape. Raw bytes
/// are kept verbatim so copied tensors round-trip bit-exactly; conversion to
/// the f64 compute representation happens on demand.
struct Tensor {
  Dtype dtype = Dtype::kF32;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> data;

  bool operator==(const Tensor&) const = default;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
        throw Error("tensor shape overflows 64-bit element count");
      }
      n *= d;
    }
    return n;
  }

  std::size_t byte_size() const { return element_count() * dtype_size(dtype); }

  std::vector<double> to_doubles() const {
    const std::size_t n = element_count();
    if (data.size() != byte_size()) {
      throw Error("tensor data length " + std::to_string(data.size()) +
                  " does not match shape/dtype size " +
                  std::to_string(byte_size()));
    }
    std::vector<double> out(n);
    switch (dtype) {
      case Dtype::kF64: {
        std::memcpy(out.data(), data.data(), n * sizeof(double));
        break;
      }
      case Dtype::kF32: {
        for (std::size_t i = 0; i < n; ++i) {
          float f;
          std::memcpy(&f, data.data() + i * 4, 4);
          out[i] = static_cast<double>(f);
        }
        break;
      }
      case Dtype::kF16: {
        for (std::size_t i = 0; i < n; ++i) {
          std::uint16_t h;
          std::memcpy(&h, data.data() + i * 2, 2);
          out[i] = static_cast<double>(f16_to_f32(h));
        }
        break;
      }
    }
    return out;
  }

  /// Rank-0/1/2 tensors as a row-major f64 matrix (rank 0 -> 1x1, rank 1 ->
  /// 1xN row). Higher ranks are rejected.
  Matrix to_matrix() const {
    if (shape.size() > 2) {
      throw Error("tensor of rank " + std::to_string(shape.size()) +
                  " cannot be viewed as a matrix");
    }
    const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
    const std::size_t cols =
        shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : 1);
    const auto vals = to_doubles();
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::copy(vals.begin(), vals.end(), m.data());
    return m;
  }

  static Tensor from_doubles(const std::vector<double>& vals,
                             std::vector<std::size_t> shape,
                             Dtype storage = Dtype::kF64) {
    Tensor t;
    t.dtype = storage;
    t.shape = std::move(shape);
    if (t.element_count() != vals.size()) {
      throw Error("value count " + std::to_string(vals.size()) +
                  " does not match shape element count " +
                  std::to_string(t.element_count()));
    }
    switch (storage) {
      case Dtype::kF64: {
        t.data.resize(vals.size() * 8);
        std::memcpy(t.data.data(), vals.data(), t.data.size());
        break;
      }
      case Dtype::kF32: {
        t.data.resize(vals.size() * 4);
        for (std::size_t i = 0; i < vals.size(); ++i) {
          const float f = static_cast<float>(vals[i]);
          std::memcpy(t.data.data() + i * 4, &f, 4);
        }
        break;
      }
      case Dtype::kF16:
        throw Error("writing f16 tensors is not supported; store F32 instead");
    }
    return t;
  }

  static Tensor from_matrix(const Matrix& m, Dtype storage = Dtype::kF64) {
    std::vector<double> vals(m.data(), m.data() + m.size());
    return from_doubles(vals,
                        {static_cast<std::size_t>(m.rows()),
                         static_cast<std::size_t>(m.cols())},
                        storage);
  }
};

/// Named tensor collection with deterministic (lexicographic) iteration order.
/// Immutable-by-convention after load; safe to share across threads read-only.
class TensorMap {
 public:
  using const_iterator = std::map<std::string, Tensor>::const_iterator;

  bool operator==(const TensorMap&) const = default;

  /// Strict insert: name collisions are a hard error, never last-wins.
  void insert(std::string name, Tensor t) {
    auto [it, inserted] = entries_.emplace(std::move(name), std::move(t));
    if (!inserted) {
      throw Error("duplicate tensor name '" + it->first + "'");
    }
  }

  /// Insert-or-replace, for building derived archives.
  void set(std::string name, Tensor t) {
    entries_[std::move(name)] = std::move(t);
  }

  void erase(const std::string& name) { entries_.erase(name); }

  bool contains(const std::string& name) const {
    return entries_.count(name) != 0;
  }

  const Tensor& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw Error("tensor '" + name + "' not found in archive");
    }
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(name);
    return out;
  }

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const {
    return metadata_;
  }

 private:
  std::map<std::string, Tensor> entries_;
  std::map<std::string, std::string> metadata_;
};

namespace detail {

inline std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

}  // namespace detail

/// Reads a checkpoint container. Header sanity (length bounds, duplicate
/// names, dtype tags, byte-range sizes and overlap) is validated against the
/// actual file length before any tensor data is interpreted.
inline TensorMap read_archive(const std::filesystem::path& path) {
  const std::string where = "archive '" + path.string() + "'";
  const std::vector<std::uint8_t> file = read_file_bytes(path);
  if (file.size() < 8) {
    throw Error(where + ": truncated, smaller than the 8-byte header length");
  }
  const std::uint64_t header_len = detail::read_u64_le(file.data());
  if (header_len > file.size() - 8) {
    throw Error(where + ": header length " + std::to_string(header_len) +
                " exceeds file size " + std::to_string(file.size()));
  }
  const std::string header_text(reinterpret_cast<const char*>(file.data() + 8),
                                header_len);
  const std::uint8_t* blob = file.data() + 8 + header_len;
  const std::uint64_t data_size = file.size() - 8 - header_len;

  // Parse with a callback so duplicate top-level keys are caught; a plain
  // parse would silently keep the last occurrence.
  std::set<std::string> seen;
  std::string duplicate;
  nlohmann::json::parser_callback_t cb =
      [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& j) {
        if (depth == 1 && event == nlohmann::json::parse_event_t::key) {
          const auto key = j.get<std::string>();
          if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
      };
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text, cb);
  } catch (const nlohmann::json::exception& e) {
    throw Error(where + ": malformed JSON header: " + e.what());
  }
  if (!header.is_object()) {
    throw Error(where + ": header is not a JSON object");
  }
  if (!duplicate.empty()) {
    throw Error(where + ": duplicate tensor name '" + duplicate + "'");
  }

  TensorMap map;
  struct Range {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;

  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) {
        throw Error(where + ": __metadata__ must be a string map");
      }
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) {
          throw Error(where + ": __metadata__ value for '" + k +
                      "' is not a string");
        }
        map.metadata()[k] = v.get<std::string>();
      }
      continue;
    }
    const std::string ctx = where + ": tensor '" + name + "'";
    if (!entry.is_object() || !entry.contains("dtype") ||
        !entry.contains("shape") || !entry.contains("data_offsets")) {
      throw Error(ctx + ": entry must carry dtype, shape and data_offsets");
    }
    if (!entry["dtype"].is_string()) throw Error(ctx + ": dtype must be a string");

    Tensor t;
    t.dtype = parse_dtype(entry["dtype"].get<std::string>(), name);
    if (!entry["shape"].is_array()) throw Error(ctx + ": shape must be an array");
    for (const auto& dim : entry["shape"]) {
      if (!dim.is_number_unsigned()) {
        throw Error(ctx + ": shape entries must be non-negative integers");
      }
      t.shape.push_back(dim.get<std::size_t>());
    }
    const auto& off = entry["data_offsets"];
    if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() ||
        !off[1].is_number_unsigned()) {
      throw Error(ctx + ": data_offsets must be [begin, end]");
    }
    const std::uint64_t begin = off[0].get<std::uint64_t>();
    const std::uint64_t end = off[1].get<std::uint64_t>();
    if (begin > end || end > data_size) {
      throw Error(ctx + ": data_offsets [" + std::to_string(begin) + ", " +
                  std::to_string(end) + ") exceed data section size " +
                  std::to_string(data_size));
    }
    const std::uint64_t expected = t.byte_size();
    if (end - begin != expected) {
      throw Error(ctx + ": byte range length " + std::to_string(end - begin) +
                  " does not match shape/dtype size " +
                  std::to_string(expected));
    }
    t.data.assign(blob + begin, blob + end);
    ranges.push_back({begin, end, name});
    map.insert(name, std::move(t));
  }

  std::sort(ranges.begin(), ranges.end(), [](const Range& a, const Range& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    const Range& prev = ranges[i - 1];
    const Range& cur = ranges[i];
    if (prev.begin == prev.end || cur.begin == cur.end) continue;
    if (cur.begin < prev.end) {
      throw Error(where + ": tensors '" + prev.name + "' [" +
                  std::to_string(prev.begin) + ", " + std::to_string(prev.end) +
                  ") and '" + cur.name + "' [" + std::to_string(cur.begin) +
                  ", " + std::to_string(cur.end) + ") overlap");
    }
  }
  return map;
}

/// Writes the container. Output is canonical: tensors laid out contiguously in
/// lexicographic name order, so writing the same map twice is byte-identical.
inline void write_archive(const TensorMap& map,
                          const std::filesystem::path& path) {
  nlohmann::json header = nlohmann::json::object();
  if (!map.metadata().empty()) header["__metadata__"] = map.metadata();

  std::uint64_t offset = 0;
  for (const auto& [name, t] : map) {
    if (t.data.size() != t.byte_size()) {
      throw Error("tensor '" + name + "': data length " +
                  std::to_string(t.data.size()) +
                  " does not match shape/dtype size " +
                  std::to_string(t.byte_size()));
    }
    if (t.data.size() >
        std::numeric_limits<std::uint64_t>::max() - offset) {
      throw Error("tensor '" + name + "' overflows 64-bit data offsets");
    }
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + t.data.size()}}};
    offset += t.data.size();
  }

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write archive: " + path.string());
  const std::uint64_t n = header_text.size();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : map) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size()));
  }
  out.flush();
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace safekit
