// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0

#include "safekit/subspace.hpp"

#include <cmath>
#include <limits>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using Catch::Matchers::ContainsSubstring;
using safekit::LayerScore;
using safekit::Matrix;
using safekit::SafetySubspace;
using safekit::WeightPair;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows,
                     Eigen::Index cols, double lo = -2.0, double hi = 2.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = testutil::uniform(rng, lo, hi);
    }
  }
  return m;
}

oracle::Mat flatten(const Matrix& m) {
  return oracle::Mat(m.data(), m.data() + m.size());
}

}  // namespace

TEST_CASE("difference direction and norm") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix(2, 2);
  pair.aligned << 4, 0, 0, 3;
  pair.unaligned = Matrix(2, 2);
  pair.unaligned << 1, 0, 0, -1;

  const auto sub = safekit::compute_subspace(pair);
  REQUIRE(sub.has_value());
  REQUIRE(sub->direction(0, 0) == 3.0);
  REQUIRE(sub->direction(1, 1) == 4.0);
  REQUIRE(sub->direction_norm == 5.0);
}

TEST_CASE("identical weights yield no subspace") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Ones(3, 2);
  pair.unaligned = Matrix::Ones(3, 2);
  REQUIRE_FALSE(safekit::compute_subspace(pair).has_value());
}

TEST_CASE("non-finite base weights are rejected") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Ones(1, 1);
  pair.unaligned = Matrix::Ones(1, 1);
  pair.aligned(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(safekit::compute_subspace(pair),
                      ContainsSubstring("non-finite"));
}

TEST_CASE("apply avoids materializing the d x d matrix yet matches it") {
  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 20; ++iter) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 6);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 6);
    WeightPair pair{"l", random_matrix(rng, d, k), random_matrix(rng, d, k)};
    const auto sub = safekit::compute_subspace(pair);
    if (!sub) continue;
    const Matrix x = random_matrix(rng, d, k);
    const Matrix direct = sub->projector() * x;
    const Matrix fast = sub->apply(x);
    REQUIRE((direct - fast).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("alignment score matches the flatten-and-dot oracle") {
  std::mt19937_64 rng(11);
  for (int iter = 0; iter < 200; ++iter) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 6);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 6);
    WeightPair pair{"l", random_matrix(rng, d, k), random_matrix(rng, d, k)};
    const auto sub = safekit::compute_subspace(pair);
    if (!sub) continue;
    const Matrix delta = random_matrix(rng, d, k);

    const LayerScore score = safekit::alignment_score(delta, *sub);
    const double expected =
        oracle::rho(flatten(delta), flatten(sub->direction),
                    static_cast<std::size_t>(d), static_cast<std::size_t>(k));
    REQUIRE(std::abs(score.rho - expected) < 1e-12);
    REQUIRE(score.rho >= -1.0);
    REQUIRE(score.rho <= 1.0);
    // The subspace matrix is positive semidefinite, so the cosine between
    // delta and its image is in fact non-negative.
    REQUIRE(score.rho >= 0.0);
  }
}

TEST_CASE("zero update scores 1 and is degenerate") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Ones(2, 2);
  pair.unaligned = Matrix::Zero(2, 2);
  const auto sub = safekit::compute_subspace(pair);
  const LayerScore score = safekit::alignment_score(Matrix::Zero(2, 2), *sub);
  REQUIRE(score.rho == 1.0);
  REQUIRE(score.degenerate);
}

TEST_CASE("update annihilated by the subspace scores 0 and is degenerate") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Zero(2, 2);
  pair.aligned(0, 0) = 1.0;  // V = [[1,0],[0,0]]
  pair.unaligned = Matrix::Zero(2, 2);
  const auto sub = safekit::compute_subspace(pair);

  Matrix delta = Matrix::Zero(2, 2);
  delta(1, 1) = 1.0;
  const LayerScore score = safekit::alignment_score(delta, *sub);
  REQUIRE(score.rho == 0.0);
  REQUIRE(score.degenerate);
}

TEST_CASE("on-subspace update scores exactly 1") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Zero(2, 2);
  pair.aligned(0, 0) = 1.0;
  pair.unaligned = Matrix::Zero(2, 2);
  const auto sub = safekit::compute_subspace(pair);

  Matrix delta = Matrix::Zero(2, 2);
  delta(0, 0) = 1.0;
  const LayerScore score = safekit::alignment_score(delta, *sub);
  REQUIRE(score.rho == 1.0);
  REQUIRE_FALSE(score.degenerate);
}

TEST_CASE("score is invariant to update scale") {
  std::mt19937_64 rng(13);
  for (int iter = 0; iter < 50; ++iter) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 5);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 5);
    WeightPair pair{"l", random_matrix(rng, d, k), random_matrix(rng, d, k)};
    const auto sub = safekit::compute_subspace(pair);
    if (!sub) continue;
    const Matrix delta = random_matrix(rng, d, k);
    const double base = safekit::alignment_score(delta, *sub).rho;
    for (double s : {1e-3, 0.5, 7.0, 1e4}) {
      const double scaled = safekit::alignment_score(s * delta, *sub).rho;
      REQUIRE(std::abs(scaled - base) < 1e-12);
    }
  }
}

TEST_CASE("shape and finiteness mismatches are rejected") {
  WeightPair pair;
  pair.layer_id = "l0";
  pair.aligned = Matrix::Ones(2, 2);
  pair.unaligned = Matrix::Zero(2, 2);
  const auto sub = safekit::compute_subspace(pair);

  REQUIRE_THROWS_WITH(safekit::alignment_score(Matrix::Ones(3, 2), *sub),
                      ContainsSubstring("3x2 does not match subspace 2x2"));

  Matrix bad = Matrix::Ones(2, 2);
  bad(0, 1) = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_WITH(safekit::alignment_score(bad, *sub),
                      ContainsSubstring("non-finite"));
}
