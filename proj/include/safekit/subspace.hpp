// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Safety-aligned subspace per layer. The alignment direction is the weight
// difference V = W_aligned - W_unaligned; the projection operator is
// C = V V^T / ||V||_F. Note the normalization is by ||V||_F, not ||V||_F^2,
// so C is not an orthogonal projector and no idempotence holds; it is applied
// exactly as defined. A layer's deviation score is the cosine (under the
// Frobenius inner product, i.e. over flattened matrices) between the adapter
// update and its image under C.

#pragma once

#include <algorithm>
#include <optional>
#include <string>

#include "safekit/adapter.hpp"
#include "safekit/common.hpp"

namespace safekit {

struct SafetySubspace {
  std::string layer_id;
  Matrix direction;            // V, d x k
  double direction_norm = 0.0; // ||V||_F, always > 0

  std::size_t rows() const { return static_cast<std::size_t>(direction.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(direction.cols()); }

  /// C * x computed as V (V^T x) / ||V||_F, avoiding the d x d operator.
  Matrix apply(const Matrix& x) const {
    return direction * (direction.transpose() * x) / direction_norm;
  }

  /// The explicit d x d operator; only materialized where d is small
  /// (reports, tests). apply() gives the identical result.
  Matrix projector() const {
    return direction * direction.transpose() / direction_norm;
  }
};

/// Builds the subspace from a weight pair. A zero difference has no alignment
/// direction and yields nullopt; callers treat such layers as degenerate.
inline std::optional<SafetySubspace> compute_subspace(const WeightPair& pair) {
  if (!pair.aligned.allFinite() || !pair.unaligned.allFinite()) {
    throw Error("layer '" + pair.layer_id +
                "': non-finite values in base weights");
  }
  Matrix v = pair.aligned - pair.unaligned;
  const double norm = v.norm();
  if (norm == 0.0) return std::nullopt;
  return SafetySubspace{pair.layer_id, std::move(v), norm};
}

/// Cosine alignment score of one layer. rho is in [-1, 1]; the degenerate
/// flag marks the two conventions: a zero update scores 1 (nothing drifted),
/// a nonzero update with zero projection scores 0 (fully off-subspace).
struct LayerScore {
  std::string layer_id;
  double rho = 1.0;
  bool degenerate = false;
};

inline LayerScore alignment_score(const Matrix& delta,
                                  const SafetySubspace& subspace) {
  if (delta.rows() != subspace.direction.rows() ||
      delta.cols() != subspace.direction.cols()) {
    throw Error("layer '" + subspace.layer_id + "': update shape " +
                std::to_string(delta.rows()) + "x" +
                std::to_string(delta.cols()) + " does not match subspace " +
                std::to_string(subspace.direction.rows()) + "x" +
                std::to_string(subspace.direction.cols()));
  }
  if (!delta.allFinite()) {
    throw Error("layer '" + subspace.layer_id +
                "': non-finite values in adapter update");
  }
  const double delta_norm = delta.norm();
  if (delta_norm == 0.0) return {subspace.layer_id, 1.0, true};
  const Matrix projected = subspace.apply(delta);
  const double projected_norm = projected.norm();
  if (projected_norm == 0.0) return {subspace.layer_id, 0.0, true};
  const double dot = delta.cwiseProduct(projected).sum();
  const double rho = std::clamp(dot / (delta_norm * projected_norm), -1.0, 1.0);
  return {subspace.layer_id, rho, false};
}

}  // namespace safekit
