// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0

#include "safekit/realign.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using Catch::Matchers::ContainsSubstring;
using safekit::LayerScore;
using safekit::LoraAdapter;
using safekit::LoraLayer;
using safekit::Matrix;
using safekit::RealignmentOptions;
using safekit::RealignmentResult;
using safekit::RepairMode;
using safekit::SubspaceSet;
using safekit::Tensor;
using safekit::TensorMap;
using testutil::TempDir;

namespace {

// Three rank-1 layers against the subspace direction V = [[1,0],[0,0]]:
//   layerA: update [[1,0],[0,0]]   -> rho = 1          (keep)
//   layerB: update [[0,0],[0,1]]   -> rho = 0, image 0 (repair, projects to 0)
//   layerC: update [[1,0],[1,0]]   -> rho = 1/sqrt(2)  (repair at high tau)
TensorMap fixture_adapter() {
  TensorMap m;
  m.insert("layerA.lora_A", Tensor::from_doubles({1.0, 0.0}, {2, 1}));
  m.insert("layerA.lora_B", Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  m.insert("layerB.lora_A", Tensor::from_doubles({0.0, 1.0}, {2, 1}));
  m.insert("layerB.lora_B", Tensor::from_doubles({0.0, 1.0}, {1, 2}));
  m.insert("layerC.lora_A", Tensor::from_doubles({1.0, 1.0}, {2, 1}));
  m.insert("layerC.lora_B", Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  return m;
}

TensorMap fixture_aligned() {
  TensorMap m;
  for (const char* id : {"layerA", "layerB", "layerC"}) {
    m.insert(id, Tensor::from_doubles({1.0, 0.0, 0.0, 0.0}, {2, 2}));
  }
  return m;
}

TensorMap fixture_unaligned() {
  TensorMap m;
  for (const char* id : {"layerA", "layerB", "layerC"}) {
    m.insert(id, Tensor::from_doubles({0.0, 0.0, 0.0, 0.0}, {2, 2}));
  }
  return m;
}

SubspaceSet fixture_subspaces() {
  return safekit::compute_subspaces(fixture_aligned(), fixture_unaligned(),
                                    {"layerA", "layerB", "layerC"});
}

TensorMap fixture_safe_adapter() {
  TensorMap m;
  for (const char* id : {"layerA", "layerB", "layerC"}) {
    m.insert(std::string(id) + ".lora_A",
             Tensor::from_doubles({1.0, 0.0}, {2, 1}));
    m.insert(std::string(id) + ".lora_B",
             Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  }
  return m;
}

LoraLayer layer_from(const Matrix& a, const Matrix& b, double gamma = 1.0) {
  LoraLayer layer;
  layer.layer_id = "l";
  layer.a = Tensor::from_matrix(a);
  layer.b = Tensor::from_matrix(b);
  layer.gamma = gamma;
  return layer;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(),
                     sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("selection is strictly below threshold") {
  const std::vector<LayerScore> scores = {
      {"a", 0.5, false}, {"b", 0.49, false}, {"c", 1.0, true}};
  const auto unsafe = safekit::select_unsafe_layers(scores, 0.5);
  REQUIRE(unsafe == std::set<std::string>{"b"});

  REQUIRE_THROWS_WITH(safekit::select_unsafe_layers(scores, 0.0),
                      ContainsSubstring("tau"));
  REQUIRE_THROWS_WITH(safekit::select_unsafe_layers(scores, 1.0),
                      ContainsSubstring("tau"));
}

TEST_CASE("selection grows monotonically with the threshold") {
  std::mt19937_64 rng(3);
  std::vector<LayerScore> scores;
  for (int i = 0; i < 64; ++i) {
    scores.push_back(
        {"l" + std::to_string(i), testutil::uniform(rng, 0.0, 1.0), false});
  }
  std::set<std::string> prev;
  for (double tau : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    const auto cur = safekit::select_unsafe_layers(scores, tau);
    REQUIRE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST_CASE("projecting factor A equals projecting the whole update") {
  std::mt19937_64 rng(17);
  for (int iter = 0; iter < 50; ++iter) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 5);
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng() % 5);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(
                                   rng() % static_cast<std::uint64_t>(
                                               std::min(d, k)));
    Matrix a(d, r), b(r, k), wa(d, k), wu(d, k);
    for (auto* m : {&a, &b, &wa, &wu}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        m->data()[i] = testutil::uniform(rng, -1.5, 1.5);
      }
    }
    safekit::WeightPair pair{"l", wa, wu};
    const auto sub = safekit::compute_subspace(pair);
    if (!sub) continue;

    const LoraLayer layer = layer_from(a, b, 1.25);
    const LoraLayer projected = safekit::project_layer(layer, *sub);
    const Matrix via_factor = safekit::materialize_delta(projected);
    const Matrix direct = sub->apply(safekit::materialize_delta(layer));
    REQUIRE((via_factor - direct).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE(projected.a.shape == layer.a.shape);
    REQUIRE(projected.b == layer.b);
  }
}

TEST_CASE("projection rejects mismatched dimensions") {
  safekit::WeightPair pair{"l", Matrix::Ones(3, 2), Matrix::Zero(3, 2)};
  const auto sub = safekit::compute_subspace(pair);
  const LoraLayer layer = layer_from(Matrix::Ones(2, 1), Matrix::Ones(1, 2));
  REQUIRE_THROWS_WITH(safekit::project_layer(layer, *sub),
                      ContainsSubstring("do not match factor rows"));
}

TEST_CASE("merge endpoint alpha=1 is bit-exact and interior alpha is affine") {
  std::mt19937_64 rng(23);
  const auto rand_layer = [&](Eigen::Index d, Eigen::Index r, Eigen::Index k) {
    Matrix a(d, r), b(r, k);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      a.data()[i] = testutil::uniform(rng, -2.0, 2.0);
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      b.data()[i] = testutil::uniform(rng, -2.0, 2.0);
    }
    return layer_from(a, b, 0.75);
  };
  for (int iter = 0; iter < 30; ++iter) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 5);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 5);
    const LoraLayer f = rand_layer(d, 1, k);
    const LoraLayer s = rand_layer(d, 1, k);

    const Matrix at_one = safekit::merge_layer(f, s, 1.0);
    REQUIRE(bit_equal(at_one, safekit::materialize_delta(f)));

    const Matrix at_zero = safekit::merge_layer(f, s, 0.0);
    REQUIRE(bit_equal(at_zero, safekit::materialize_delta(s)));

    const double alpha = testutil::uniform(rng, 0.05, 0.95);
    const Matrix merged = safekit::merge_layer(f, s, alpha);
    const Matrix affine = alpha * at_one + (1.0 - alpha) * at_zero;
    REQUIRE((merged - affine).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("merge validates alpha and shapes") {
  const LoraLayer f = layer_from(Matrix::Ones(2, 1), Matrix::Ones(1, 2));
  const LoraLayer s = layer_from(Matrix::Ones(2, 1), Matrix::Ones(1, 3));
  REQUIRE_THROWS_WITH(safekit::merge_layer(f, f, 1.5),
                      ContainsSubstring("alpha"));
  REQUIRE_THROWS_WITH(safekit::merge_layer(f, f, -0.1),
                      ContainsSubstring("alpha"));
  REQUIRE_THROWS_WITH(safekit::merge_layer(f, s, 0.5),
                      ContainsSubstring("safe update is"));
}

TEST_CASE("dense updates refactorize exactly at doubled rank") {
  std::mt19937_64 rng(29);
  for (int iter = 0; iter < 20; ++iter) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 5);
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng() % 5);
    Matrix a1(d, 1), b1(1, k), a2(d, 1), b2(1, k);
    for (auto* m : {&a1, &a2}) {
      for (Eigen::Index i = 0; i < d; ++i) {
        m->data()[i] = testutil::uniform(rng, -1.0, 1.0);
      }
    }
    for (auto* m : {&b1, &b2}) {
      for (Eigen::Index i = 0; i < k; ++i) {
        m->data()[i] = testutil::uniform(rng, -1.0, 1.0);
      }
    }
    const Matrix delta = a1 * b1 + a2 * b2;  // rank <= 2
    const double gamma = 1.5;
    const auto [fa, fb] = safekit::refactorize_delta(delta, 2, gamma);
    REQUIRE(fa.cols() == 2);
    REQUIRE(fb.rows() == 2);
    REQUIRE(((gamma * fa * fb) - delta).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("refactorization rank is capped by the matrix dimensions") {
  const Matrix delta = Matrix::Ones(2, 3);
  const auto [fa, fb] = safekit::refactorize_delta(delta, 10, 1.0);
  REQUIRE(fa.cols() == 2);
  REQUIRE((fa * fb - delta).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("projection repair rewrites only the unsafe factor") {
  const TensorMap adapter = fixture_adapter();
  RealignmentOptions opts;
  opts.mode = RepairMode::kProject;
  opts.tau = 0.5;

  const RealignmentResult res =
      safekit::realign(adapter, fixture_subspaces(), opts);

  REQUIRE(res.report.repaired_count == 1);
  REQUIRE(res.report.actions.at("layerA") == safekit::LayerAction::kKeep);
  REQUIRE(res.report.actions.at("layerB") == safekit::LayerAction::kRepair);
  REQUIRE(res.report.actions.at("layerC") == safekit::LayerAction::kKeep);

  // Scores are reported in ascending rho order.
  REQUIRE(res.report.scores.size() == 3);
  REQUIRE(res.report.scores[0].layer_id == "layerB");
  REQUIRE(res.report.scores[0].rho == 0.0);
  REQUIRE(res.report.scores[1].layer_id == "layerC");
  REQUIRE(std::abs(res.report.scores[1].rho - 1.0 / std::sqrt(2.0)) < 1e-12);
  REQUIRE(res.report.scores[2].layer_id == "layerA");
  REQUIRE(res.report.scores[2].rho == 1.0);

  // Untouched layers are byte-identical; the repaired A factor is the
  // projected one, which for layerB is exactly zero.
  REQUIRE(res.adapter.at("layerA.lora_A") == adapter.at("layerA.lora_A"));
  REQUIRE(res.adapter.at("layerA.lora_B") == adapter.at("layerA.lora_B"));
  REQUIRE(res.adapter.at("layerB.lora_B") == adapter.at("layerB.lora_B"));
  const Matrix repaired_a = res.adapter.at("layerB.lora_A").to_matrix();
  REQUIRE(repaired_a == Matrix::Zero(2, 1));
}

TEST_CASE("higher threshold repairs the diagonal layer too") {
  RealignmentOptions opts;
  opts.mode = RepairMode::kProject;
  opts.tau = 0.8;
  const RealignmentResult res =
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts);
  REQUIRE(res.report.repaired_count == 2);
  REQUIRE(res.report.actions.at("layerC") == safekit::LayerAction::kRepair);

  // layerC's update [[1,0],[1,0]] projects to [[1,0],[0,0]].
  const LoraAdapter out = safekit::load_adapter(res.adapter);
  const Matrix delta = safekit::materialize_delta(out.layers.at("layerC"));
  Matrix expected = Matrix::Zero(2, 2);
  expected(0, 0) = 1.0;
  REQUIRE((delta - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("no unsafe layers leaves the archive identical") {
  TensorMap adapter;
  adapter.insert("layerA.lora_A", Tensor::from_doubles({1.0, 0.0}, {2, 1}));
  adapter.insert("layerA.lora_B", Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  RealignmentOptions opts;
  opts.tau = 0.5;
  const RealignmentResult res = safekit::realign(
      adapter,
      safekit::compute_subspaces(fixture_aligned(), fixture_unaligned(),
                                 {"layerA"}),
      opts);
  REQUIRE(res.adapter == adapter);
  REQUIRE(res.report.repaired_count == 0);
}

TEST_CASE("zero-update layers are skipped as degenerate") {
  TensorMap adapter;
  adapter.insert("layerA.lora_A", Tensor::from_doubles({0.0, 0.0}, {2, 1}));
  adapter.insert("layerA.lora_B", Tensor::from_doubles({0.0, 0.0}, {1, 2}));
  RealignmentOptions opts;
  opts.tau = 0.9;
  const RealignmentResult res = safekit::realign(
      adapter,
      safekit::compute_subspaces(fixture_aligned(), fixture_unaligned(),
                                 {"layerA"}),
      opts);
  REQUIRE(res.report.repaired_count == 0);
  REQUIRE(res.report.actions.at("layerA") ==
          safekit::LayerAction::kSkipDegenerate);
  REQUIRE(res.adapter == adapter);
}

TEST_CASE("zero subspace direction skips the layer") {
  TensorMap adapter;
  adapter.insert("layerA.lora_A", Tensor::from_doubles({1.0, 0.0}, {2, 1}));
  adapter.insert("layerA.lora_B", Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  const SubspaceSet subs = safekit::compute_subspaces(
      fixture_unaligned(), fixture_unaligned(), {"layerA"});
  REQUIRE_FALSE(subs.at("layerA").has_value());

  RealignmentOptions opts;
  opts.tau = 0.9;
  const RealignmentResult res = safekit::realign(adapter, subs, opts);
  REQUIRE(res.report.actions.at("layerA") ==
          safekit::LayerAction::kSkipDegenerate);
  REQUIRE(res.report.scores[0].rho == 1.0);
  REQUIRE(res.report.scores[0].degenerate);
  REQUIRE(res.adapter == adapter);
}

TEST_CASE("merge repair stores a dense delta tensor") {
  RealignmentOptions opts;
  opts.mode = RepairMode::kMerge;
  opts.tau = 0.5;
  opts.alpha = 0.8;
  const TensorMap safe = fixture_safe_adapter();
  const RealignmentResult res =
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts, &safe);

  REQUIRE(res.report.repaired_count == 1);
  REQUIRE_FALSE(res.adapter.contains("layerB.lora_A"));
  REQUIRE_FALSE(res.adapter.contains("layerB.lora_B"));
  const Matrix merged = res.adapter.at("layerB.delta").to_matrix();
  Matrix expected(2, 2);
  expected << 0.2, 0.0, 0.0, 0.8;
  REQUIRE((merged - expected).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(res.adapter.at("layerA.lora_A") ==
          fixture_adapter().at("layerA.lora_A"));
}

TEST_CASE("merge repair can refactorize back to factors") {
  RealignmentOptions opts;
  opts.mode = RepairMode::kMerge;
  opts.tau = 0.5;
  opts.alpha = 0.8;
  opts.refactor_merged = true;
  const TensorMap safe = fixture_safe_adapter();
  const RealignmentResult res =
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts, &safe);

  REQUIRE_FALSE(res.adapter.contains("layerB.delta"));
  const LoraAdapter out = safekit::load_adapter(res.adapter);
  const Matrix delta = safekit::materialize_delta(out.layers.at("layerB"));
  Matrix expected(2, 2);
  expected << 0.2, 0.0, 0.0, 0.8;
  REQUIRE((delta - expected).cwiseAbs().maxCoeff() < 1e-9);
  REQUIRE(out.layers.at("layerB").r() == 2);
}

TEST_CASE("merge mode validates its inputs") {
  RealignmentOptions opts;
  opts.mode = RepairMode::kMerge;
  opts.tau = 0.5;
  REQUIRE_THROWS_WITH(
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts),
      ContainsSubstring("requires a safe adapter"));

  const TensorMap safe = fixture_safe_adapter();
  REQUIRE_THROWS_WITH(
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts, &safe),
      ContainsSubstring("requires alpha"));

  opts.alpha = 0.8;
  TensorMap partial;
  partial.insert("layerA.lora_A", Tensor::from_doubles({1.0, 0.0}, {2, 1}));
  partial.insert("layerA.lora_B", Tensor::from_doubles({1.0, 0.0}, {1, 2}));
  REQUIRE_THROWS_WITH(
      safekit::realign(fixture_adapter(), fixture_subspaces(), opts, &partial),
      ContainsSubstring("does not cover every layer"));
}

TEST_CASE("missing subspace for an adapter layer is an error") {
  RealignmentOptions opts;
  opts.tau = 0.5;
  const SubspaceSet only_a = safekit::compute_subspaces(
      fixture_aligned(), fixture_unaligned(), {"layerA"});
  REQUIRE_THROWS_WITH(safekit::realign(fixture_adapter(), only_a, opts),
                      ContainsSubstring("no subspace computed"));
}

TEST_CASE("default sweep grids match the documented ranges") {
  REQUIRE(safekit::default_tau_grid() ==
          std::vector<double>{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
  REQUIRE(safekit::default_alpha_grid() == std::vector<double>{0.7, 0.8, 0.9});
}

TEST_CASE("project sweep emits one row per threshold, in grid order") {
  TempDir dir;
  safekit::SweepOptions opts;
  opts.mode = RepairMode::kProject;
  opts.work_dir = dir.path() / "work";

  const auto rows = safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                   nullptr, opts, safekit::stub_eval_hook());
  REQUIRE(rows.size() == 7);
  std::size_t prev = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].tau == safekit::default_tau_grid()[i]);
    REQUIRE_FALSE(rows[i].alpha.has_value());
    REQUIRE_FALSE(rows[i].utility.has_value());
    REQUIRE(rows[i].repaired_count >= prev);
    prev = rows[i].repaired_count;
  }
  REQUIRE(rows.front().repaired_count == 1);
  REQUIRE(rows.back().repaired_count == 2);
  // Without keep_all nothing is left behind.
  REQUIRE(std::filesystem::is_empty(opts.work_dir));
}

TEST_CASE("merge sweep covers the tau x alpha grid and can keep adapters") {
  TempDir dir;
  safekit::SweepOptions opts;
  opts.mode = RepairMode::kMerge;
  opts.work_dir = dir.path() / "work";
  opts.keep_all = true;

  const TensorMap safe = fixture_safe_adapter();
  const auto rows = safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                   &safe, opts, safekit::stub_eval_hook());
  REQUIRE(rows.size() == 21);
  REQUIRE(rows[0].tau == 0.3);
  REQUIRE(rows[0].alpha == 0.7);
  REQUIRE(rows[1].tau == 0.3);
  REQUIRE(rows[1].alpha == 0.8);
  REQUIRE(rows[20].tau == 0.9);
  REQUIRE(rows[20].alpha == 0.9);

  std::size_t kept = 0;
  for (const auto& entry :
       std::filesystem::directory_iterator(opts.work_dir)) {
    (void)entry;
    ++kept;
  }
  REQUIRE(kept == 21);
}

TEST_CASE("parallel sweep matches sequential output") {
  TempDir dir;
  safekit::SweepOptions seq;
  seq.work_dir = dir.path() / "seq";
  safekit::SweepOptions par = seq;
  par.work_dir = dir.path() / "par";
  par.parallelism = 4;

  const auto a = safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                nullptr, seq, safekit::stub_eval_hook());
  const auto b = safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                nullptr, par, safekit::stub_eval_hook());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].tau == b[i].tau);
    REQUIRE(a[i].repaired_count == b[i].repaired_count);
  }
}

TEST_CASE("sweep hands each grid point's adapter to the hook") {
  TempDir dir;
  safekit::SweepOptions opts;
  opts.work_dir = dir.path() / "work";
  opts.tau_grid = {0.4, 0.8};

  std::vector<double> seen;
  const auto rows = safekit::sweep(
      fixture_adapter(), fixture_subspaces(), nullptr, opts,
      [&](const safekit::SweepPoint& p, const std::filesystem::path& adapter) {
        REQUIRE(std::filesystem::exists(adapter));
        seen.push_back(p.tau);
        safekit::EvalOutcome o;
        o.harmfulness = 10.0 * p.tau;
        o.utility = 90.0;
        return o;
      });
  REQUIRE(seen == std::vector<double>{0.4, 0.8});
  REQUIRE(rows[0].harmfulness == 4.0);
  REQUIRE(rows[1].harmfulness == 8.0);
  REQUIRE(rows[0].utility == 90.0);
}

TEST_CASE("sweep validates its grids") {
  safekit::SweepOptions opts;
  opts.tau_grid = {};
  REQUIRE_THROWS_WITH(safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                     nullptr, opts, safekit::stub_eval_hook()),
                      ContainsSubstring("tau grid"));

  safekit::SweepOptions merge_opts;
  merge_opts.mode = RepairMode::kMerge;
  merge_opts.alpha_grid = {};
  const TensorMap safe = fixture_safe_adapter();
  REQUIRE_THROWS_WITH(safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                     &safe, merge_opts,
                                     safekit::stub_eval_hook()),
                      ContainsSubstring("alpha grid"));
}

TEST_CASE("sweep report JSON carries nulls for unevaluated points") {
  TempDir dir;
  safekit::SweepOptions opts;
  opts.work_dir = dir.path() / "work";
  opts.tau_grid = {0.5};
  const auto rows = safekit::sweep(fixture_adapter(), fixture_subspaces(),
                                   nullptr, opts, safekit::stub_eval_hook());
  const nlohmann::json j = safekit::sweep_rows_to_json(rows, opts.mode);
  REQUIRE(j["mode"] == "project");
  REQUIRE(j["rows"].size() == 1);
  REQUIRE(j["rows"][0]["utility"].is_null());
  REQUIRE(j["rows"][0]["harmfulness"].is_null());
  REQUIRE(j["rows"][0]["repaired_count"] == 1);
}
