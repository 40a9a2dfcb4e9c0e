// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer selection and repair. Layers whose alignment score falls strictly
// below the threshold tau are repaired, either by projecting the update onto
// the safety subspace (applied to factor A, which is algebraically identical
// to projecting the materialized update and keeps the rank-r storage) or by
// a convex merge with a known-safe adapter's update. Merged updates are
// stored as dense delta tensors; a sum of two rank-r updates generally has
// rank 2r, so factor form is not preserved. Degenerate layers (zero update
// or zero subspace direction) are never repaired.

#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/SVD>

#include "json.hpp"
#include "safekit/adapter.hpp"
#include "safekit/common.hpp"
#include "safekit/subspace.hpp"
#include "safekit/tensor_archive.hpp"

namespace safekit {

enum class RepairMode { kProject, kMerge };

inline const char* repair_mode_name(RepairMode m) {
  return m == RepairMode::kProject ? "project" : "merge";
}

inline RepairMode parse_repair_mode(const std::string& s) {
  if (s == "project") return RepairMode::kProject;
  if (s == "merge") return RepairMode::kMerge;
  throw Error("unknown repair mode '" + s + "' (expected project or merge)");
}

enum class LayerAction { kKeep, kRepair, kSkipDegenerate };

inline const char* layer_action_name(LayerAction a) {
  switch (a) {
    case LayerAction::kKeep: return "keep";
    case LayerAction::kRepair: return "repair";
    case LayerAction::kSkipDegenerate: return "skip_degenerate";
  }
  throw Error("invalid layer action");
}

/// Per-layer subspace, nullopt where the weight difference was zero.
using SubspaceSet = std::map<std::string, std::optional<SafetySubspace>>;

/// Convenience: subspaces for a set of layers straight from weight archives.
inline SubspaceSet compute_subspaces(const TensorMap& aligned,
                                     const TensorMap& unaligned,
                                     const std::set<std::string>& layer_ids) {
  SubspaceSet out;
  for (auto& pair : pair_base_weights(aligned, unaligned, layer_ids)) {
    out[pair.layer_id] = compute_subspace(pair);
  }
  return out;
}

/// Strictly-below-threshold selection; rho == tau stays safe. Degenerate
/// zero-update layers carry rho = 1 and are therefore never selected.
inline std::set<std::string> select_unsafe_layers(
    const std::vector<LayerScore>& scores, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) {
    throw Error("tau must lie in (0, 1), got " + std::to_string(tau));
  }
  std::set<std::string> unsafe;
  for (const auto& s : scores) {
    if (s.rho < tau) unsafe.insert(s.layer_id);
  }
  return unsafe;
}

/// Projects the layer update onto the subspace by replacing A with C*A, so
/// that gamma * (C*A) * B == C * (gamma * A * B) exactly.
inline LoraLayer project_layer(const LoraLayer& layer,
                               const SafetySubspace& subspace) {
  if (static_cast<std::size_t>(subspace.direction.rows()) != layer.d()) {
    throw Error("layer '" + layer.layer_id + "': subspace rows " +
                std::to_string(subspace.direction.rows()) +
                " do not match factor rows " + std::to_string(layer.d()));
  }
  const Matrix projected_a = subspace.apply(layer.matrix_a());
  LoraLayer out = layer;
  const Dtype storage =
      layer.a.dtype == Dtype::kF16 ? Dtype::kF32 : layer.a.dtype;
  out.a = Tensor::from_matrix(projected_a, storage);
  return out;
}

/// alpha * delta_f + (1 - alpha) * delta_s as a dense update. alpha = 1 is
/// the exact identity on the fine-tuned update.
inline Matrix merge_layer(const LoraLayer& fine_tuned, const LoraLayer& safe,
                          double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  Matrix delta_f = materialize_delta(fine_tuned);
  if (alpha == 1.0) return delta_f;
  Matrix delta_s = materialize_delta(safe);
  if (delta_f.rows() != delta_s.rows() || delta_f.cols() != delta_s.cols()) {
    throw Error("layer '" + fine_tuned.layer_id +
                "': fine-tuned update is " + std::to_string(delta_f.rows()) +
                "x" + std::to_string(delta_f.cols()) + " but safe update is " +
                std::to_string(delta_s.rows()) + "x" +
                std::to_string(delta_s.cols()));
  }
  return alpha * delta_f + (1.0 - alpha) * delta_s;
}

/// Optional post-step: exact re-factorization of a dense update at rank
/// min(2r, d, k) via SVD, scaled so that gamma * A * B reproduces it.
inline std::pair<Matrix, Matrix> refactorize_delta(const Matrix& delta,
                                                   std::size_t rank,
                                                   double gamma) {
  const std::size_t cap = static_cast<std::size_t>(
      std::min(delta.rows(), delta.cols()));
  const std::size_t r = std::min(rank, cap);
  Eigen::JacobiSVD<Matrix> svd(delta,
                               Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  Matrix a(delta.rows(), r);
  Matrix b(r, delta.cols());
  for (std::size_t i = 0; i < r; ++i) {
    const double s = std::sqrt(sv[static_cast<Eigen::Index>(i)]);
    a.col(static_cast<Eigen::Index>(i)) =
        svd.matrixU().col(static_cast<Eigen::Index>(i)) * (s / gamma);
    b.row(static_cast<Eigen::Index>(i)) =
        svd.matrixV().col(static_cast<Eigen::Index>(i)).transpose() * s;
  }
  return {std::move(a), std::move(b)};
}

struct RealignmentOptions {
  RepairMode mode = RepairMode::kProject;
  double tau = 0.6;
  std::optional<double> alpha;   // required iff mode == kMerge
  bool refactor_merged = false;  // store merged updates as rank-2r factors
  AdapterNaming naming;
};

struct RealignmentReport {
  RepairMode mode = RepairMode::kProject;
  double tau = 0.0;
  std::optional<double> alpha;
  std::vector<LayerScore> scores;  // sorted by rho ascending
  std::map<std::string, LayerAction> actions;
  std::size_t repaired_count = 0;
  std::string output_adapter;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = repair_mode_name(mode);
    j["tau"] = tau;
    if (alpha) j["alpha"] = *alpha;
    j["scores"] = nlohmann::json::array();
    for (const auto& s : scores) {
      j["scores"].push_back({{"layer_id", s.layer_id},
                             {"rho", s.rho},
                             {"degenerate", s.degenerate}});
    }
    nlohmann::json acts = nlohmann::json::object();
    for (const auto& [id, a] : actions) acts[id] = layer_action_name(a);
    j["actions"] = std::move(acts);
    j["repaired_count"] = repaired_count;
    if (!output_adapter.empty()) j["output_adapter"] = output_adapter;
    return j;
  }
};

struct RealignmentResult {
  TensorMap adapter;  // repaired archive content
  RealignmentReport report;
};

namespace detail {

inline void sort_scores(std::vector<LayerScore>& scores) {
  std::sort(scores.begin(), scores.end(),
            [](const LayerScore& a, const LayerScore& b) {
              return a.rho != b.rho ? a.rho < b.rho : a.layer_id < b.layer_id;
            });
}

inline Dtype repaired_storage(const Tensor& original) {
  return original.dtype == Dtype::kF16 ? Dtype::kF32 : original.dtype;
}

}  // namespace detail

/// Scores every adapter layer, repairs the unsafe ones per the options, and
/// returns the repaired archive plus a full audit report. Safe layers are
/// copied verbatim (bit-exact); with no unsafe layers the output archive
/// equals the input.
inline RealignmentResult realign(const TensorMap& adapter_archive,
                                 const SubspaceSet& subspaces,
                                 const RealignmentOptions& options,
                                 const TensorMap* safe_archive = nullptr) {
  if (!(options.tau > 0.0 && options.tau < 1.0)) {
    throw Error("tau must lie in (0, 1), got " + std::to_string(options.tau));
  }
  const LoraAdapter adapter = load_adapter(adapter_archive, options.naming);
  LoraAdapter safe;
  if (options.mode == RepairMode::kMerge) {
    if (safe_archive == nullptr) {
      throw Error("merge mode requires a safe adapter");
    }
    if (!options.alpha || !(*options.alpha > 0.0 && *options.alpha < 1.0)) {
      throw Error("merge mode requires alpha in (0, 1)");
    }
    safe = load_adapter(*safe_archive, options.naming);
    std::string missing;
    for (const auto& [id, layer] : adapter.layers) {
      if (!safe.layers.count(id)) missing += "\n  '" + id + "'";
    }
    if (!missing.empty()) {
      throw Error("safe adapter does not cover every layer:" + missing);
    }
  }

  RealignmentResult result;
  result.adapter = adapter_archive;
  result.report.mode = options.mode;
  result.report.tau = options.tau;
  result.report.alpha = options.alpha;

  for (const auto& [id, layer] : adapter.layers) {
    auto sub_it = subspaces.find(id);
    if (sub_it == subspaces.end()) {
      throw Error("no subspace computed for layer '" + id + "'");
    }
    LayerScore score{id, 1.0, true};
    LayerAction action = LayerAction::kSkipDegenerate;
    if (sub_it->second.has_value()) {
      score = alignment_score(materialize_delta(layer), *sub_it->second);
      const bool zero_update = score.degenerate && score.rho == 1.0;
      if (zero_update) {
        action = LayerAction::kSkipDegenerate;
      } else if (score.rho < options.tau) {
        action = LayerAction::kRepair;
      } else {
        action = LayerAction::kKeep;
      }
    }
    result.report.scores.push_back(score);
    result.report.actions[id] = action;
    if (action != LayerAction::kRepair) continue;

    ++result.report.repaired_count;
    const std::string a_name = id + options.naming.a_suffix;
    const std::string b_name = id + options.naming.b_suffix;
    if (options.mode == RepairMode::kProject) {
      const LoraLayer projected = project_layer(layer, *sub_it->second);
      result.adapter.set(a_name, projected.a);
    } else {
      const Matrix merged = merge_layer(layer, safe.layers.at(id),
                                        *options.alpha);
      const Dtype storage = detail::repaired_storage(layer.a);
      result.adapter.erase(a_name);
      result.adapter.erase(b_name);
      if (options.refactor_merged) {
        auto [fa, fb] = refactorize_delta(merged, 2 * layer.r(), layer.gamma);
        result.adapter.set(a_name, Tensor::from_matrix(fa, storage));
        result.adapter.set(b_name, Tensor::from_matrix(fb, storage));
      } else {
        result.adapter.set(id + options.naming.delta_suffix,
                           Tensor::from_matrix(merged, storage));
      }
    }
  }
  detail::sort_scores(result.report.scores);
  return result;
}

// ---------------------------------------------------------------------------
// Threshold / merge-factor sweeps
// ---------------------------------------------------------------------------

inline const std::vector<double>& default_tau_grid() {
  static const std::vector<double> grid = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return grid;
}

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid = {0.7, 0.8, 0.9};
  return grid;
}

struct SweepPoint {
  double tau = 0.0;
  std::optional<double> alpha;
};

struct EvalOutcome {
  std::optional<double> utility;
  std::optional<double> harmfulness;
};

/// Called once per grid point with the realigned adapter on disk. A stub hook
/// returning an empty outcome yields a repair-count-only table.
using EvalHook =
    std::function<EvalOutcome(const SweepPoint&, const std::filesystem::path&)>;

inline EvalHook stub_eval_hook() {
  return [](const SweepPoint&, const std::filesystem::path&) {
    return EvalOutcome{};
  };
}

struct SweepRow {
  double tau = 0.0;
  std::optional<double> alpha;
  std::size_t repaired_count = 0;
  std::optional<double> utility;
  std::optional<double> harmfulness;
};

struct SweepOptions {
  RepairMode mode = RepairMode::kProject;
  std::vector<double> tau_grid = default_tau_grid();
  std::vector<double> alpha_grid = default_alpha_grid();
  bool refactor_merged = false;
  AdapterNaming naming;
  std::filesystem::path work_dir;  // where per-point adapters are written
  bool keep_all = false;           // keep every adapter instead of the last
  std::size_t parallelism = 1;     // grid points evaluated concurrently
};

inline nlohmann::json sweep_rows_to_json(const std::vector<SweepRow>& rows,
                                         RepairMode mode) {
  nlohmann::json j;
  j["mode"] = repair_mode_name(mode);
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["tau"] = r.tau;
    if (r.alpha) row["alpha"] = *r.alpha;
    row["repaired_count"] = r.repaired_count;
    row["utility"] = r.utility ? nlohmann::json(*r.utility)
                               : nlohmann::json(nullptr);
    row["harmfulness"] = r.harmfulness ? nlohmann::json(*r.harmfulness)
                                       : nlohmann::json(nullptr);
    j["rows"].push_back(std::move(row));
  }
  return j;
}

///// Runs realign + eval over the grid: tau x alpha for merge, tau only for
/// project. Rows come back in grid order (tau-major). Grid points run
/// sequentially unless parallelism > 1; each point keeps at most one adapter
/// on disk unless keep_all is set.
inline std::vector<SweepRow> sweep(const TensorMap& adapter_archive,
                                   const SubspaceSet& subspaces,
                                   const TensorMap* safe_archive,
                                   const SweepOptions& options,
                                   const EvalHook& eval_hook) {
  if (options.tau_grid.empty()) throw Error("tau grid must be non-empty");
  if (options.mode == RepairMode::kMerge && options.alpha_grid.empty()) {
    throw Error("alpha grid must be non-empty in merge mode");
  }
  std::vector<SweepPoint> points;
  for (double tau : options.tau_grid) {
    if (options.mode == RepairMode::kMerge) {
      for (double alpha : options.alpha_grid) points.push_back({tau, alpha});
    } else {
      points.push_back({tau, std::nullopt});
    }
  }

  std::filesystem::path work = options.work_dir;
  if (work.empty()) work = std::filesystem::temp_directory_path();
  std::filesystem::create_directories(work);

  std::vector<SweepRow> rows(points.size());
  auto run_point = [&](std::size_t i) {
    const SweepPoint& p = points[i];
    RealignmentOptions ro;
    ro.mode = options.mode;
    ro.tau = p.tau;
    ro.alpha = p.alpha;
    ro.refactor_merged = options.refactor_merged;
    ro.naming = options.naming;
    RealignmentResult res = realign(adapter_archive, subspaces, ro,
                                    safe_archive);
    std::string tag = "tau" + std::to_string(p.tau);
    if (p.alpha) tag += "_alpha" + std::to_string(*p.alpha);
    const std::filesystem::path out = work / ("adapter_" + tag + ".st");
    write_archive(res.adapter, out);
    const EvalOutcome outcome = eval_hook(p, out);
    if (!options.keep_all) std::filesystem::remove(out);
    rows[i] = {p.tau, p.alpha, res.report.repaired_count, outcome.utility,
               outcome.harmfulness};
  };

  if (options.parallelism <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run_point(i);
  } else {
    std::atomic<std::size_t> next{0};
    const std::size_t workers =
        std::min(options.parallelism, points.size());
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < points.size();
             i = next.fetch_add(1)) {
          try {
            run_point(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return rows;
}

}  // namespace safekit
