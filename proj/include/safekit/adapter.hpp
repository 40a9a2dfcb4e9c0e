// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// LoRA adapter model: per-layer low-rank factor pairs plus the pairing of
// adapted layers with aligned/unaligned base weights. A "layer" is each
// individually named 2-D weight matrix carrying an adapter; the effective
// update is delta_w = gamma * A * B with A (d x r) and B (r x k).

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "safekit/common.hpp"
#include "safekit/tensor_archive.hpp"

namespace safekit {

/// How factor tensors are located in an archive: a layer's factors are the
/// entries "<layer_id><a_suffix>" and "<layer_id><b_suffix>". The scaling
/// factor gamma comes from archive metadata (gamma_key) unless overridden;
/// it defaults to 1 when absent.
struct AdapterNaming {
  std::string a_suffix = ".lora_A";
  std::string b_suffix = ".lora_B";
  std::string delta_suffix = ".delta";  // dense repaired layers (merge output)
  std::string gamma_key = "gamma";
  std::optional<double> gamma_override;
};

struct LoraLayer {
  std::string layer_id;
  Tensor a;  // d x r, as stored
  Tensor b;  // r x k, as stored
  double gamma = 1.0;

  std::size_t d() const { return a.shape[0]; }
  std::size_t r() const { return a.shape[1]; }
  std::size_t k() const { return b.shape[1]; }

  Matrix matrix_a() const { return a.to_matrix(); }
  Matrix matrix_b() const { return b.to_matrix(); }
};

struct LoraAdapter {
  std::map<std::string, LoraLayer> layers;
  std::map<std::string, std::string> metadata;
};

/// delta_w = gamma * A * B, accumulated in f64.
inline Matrix materialize_delta(const LoraLayer& layer) {
  return layer.gamma * (layer.matrix_a() * layer.matrix_b());
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return !suffix.empty() && s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline void check_factor_rank(const Tensor& t, const std::string& name) {
  if (t.shape.size() != 2 || t.shape[0] == 0 || t.shape[1] == 0) {
    throw Error("LoRA factor '" + name + "' must be a non-empty 2-D tensor");
  }
}

}  // namespace detail

/// Collects factor pairs from an archive. Orphan factors, dimension
/// mismatches and non-positive gamma are hard errors.
inline LoraAdapter load_adapter(const TensorMap& archive,
                                const AdapterNaming& naming = {}) {
  double gamma = 1.0;
  if (naming.gamma_override) {
    gamma = *naming.gamma_override;
  } else if (auto it = archive.metadata().find(naming.gamma_key);
             it != archive.metadata().end()) {
    try {
      std::size_t pos = 0;
      gamma = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw Error("metadata key '" + naming.gamma_key +
                  "' is not a number: '" + it->second + "'");
    }
  }
  if (!(gamma > 0.0)) {
    throw Error("gamma must be positive, got " + std::to_string(gamma));
  }

  std::map<std::string, const Tensor*> a_parts;
  std::map<std::string, const Tensor*> b_parts;
  for (const auto& [name, tensor] : archive) {
    if (detail::ends_with(name, naming.a_suffix)) {
      a_parts[name.substr(0, name.size() - naming.a_suffix.size())] = &tensor;
    } else if (detail::ends_with(name, naming.b_suffix)) {
      b_parts[name.substr(0, name.size() - naming.b_suffix.size())] = &tensor;
    }
  }

  LoraAdapter adapter;
  adapter.metadata = archive.metadata();
  for (const auto& [id, a_tensor] : a_parts) {
    auto bit = b_parts.find(id);
    if (bit == b_parts.end()) {
      throw Error("orphan LoRA factor '" + id + naming.a_suffix +
                  "' (missing '" + id + naming.b_suffix + "')");
    }
    detail::check_factor_rank(*a_tensor, id + naming.a_suffix);
    detail::check_factor_rank(*bit->second, id + naming.b_suffix);
    const std::size_t d = a_tensor->shape[0];
    const std::size_t r = a_tensor->shape[1];
    const std::size_t rb = bit->second->shape[0];
    const std::size_t k = bit->second->shape[1];
    if (r != rb) {
      throw Error("layer '" + id + "': inner dimensions disagree (A is " +
                  std::to_string(d) + "x" + std::to_string(r) + ", B is " +
                  std::to_string(rb) + "x" + std::to_string(k) + ")");
    }
    if (r > std::min(d, k)) {
      throw Error("layer '" + id + "': rank " + std::to_string(r) +
                  " exceeds min(d, k) = " + std::to_string(std::min(d, k)));
    }
    adapter.layers[id] =
        LoraLayer{id, *a_tensor, *bit->second, gamma};
  }
  for (const auto& [id, b_tensor] : b_parts) {
    if (!a_parts.count(id)) {
      throw Error("orphan LoRA factor '" + id + naming.b_suffix +
                  "' (missing '" + id + naming.a_suffix + "')");
    }
  }
  return adapter;
}

/// Aligned/unaligned base weights for one adapted layer, in compute dtype.
struct WeightPair {
  std::string layer_id;
  Matrix aligned;
  Matrix unaligned;
};

/// Pairs the requested layers across two weight archives. Layers present in
/// only one archive, or with differing shapes, are reported together.
inline std::vector<WeightPair> pair_base_weights(
    const TensorMap& aligned, const TensorMap& unaligned,
    const std::set<std::string>& layer_ids) {
  std::vector<WeightPair> pairs;
  std::string problems;
  for (const auto& id : layer_ids) {
    const bool in_a = aligned.contains(id);
    const bool in_u = unaligned.contains(id);
    if (!in_a || !in_u) {
      problems += "\n  unpaired layer '" + id + "' (present in " +
                  (in_a ? "aligned only" : in_u ? "unaligned only" : "neither") +
                  ")";
      continue;
    }
    Matrix wa = aligned.at(id).to_matrix();
    Matrix wu = unaligned.at(id).to_matrix();
    if (wa.rows() != wu.rows() || wa.cols() != wu.cols()) {
      problems += "\n  layer '" + id + "': shape mismatch (" +
                  std::to_string(wa.rows()) + "x" + std::to_string(wa.cols()) +
                  " vs " + std::to_string(wu.rows()) + "x" +
                  std::to_string(wu.cols()) + ")";
      continue;
    }
    pairs.push_back({id, std::move(wa), std::move(wu)});
  }
  if (!problems.empty()) {
    throw Error("cannot pair base weights:" + problems);
  }
  return pairs;
}

}  // namespace safekit
