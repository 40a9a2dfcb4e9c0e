// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-token KL divergence between two models' next-token distributions,
// computed from offline dumps rather than live hooks. Direction is
// KL(a || b) with the fine-tuned model conventionally passed as a. Both
// probabilities are clamped below at epsilon before the log ratio, which
// bounds the contribution of vocabulary entries one model assigns zero
// mass; the clamping can leave a tiny negative residue on near-identical
// inputs, so entries are floored at zero.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "safekit/common.hpp"
#include "safekit/tensor_archive.hpp"

namespace safekit {

inline constexpr double kKlEpsilon = 1e-12;
inline constexpr double kProbSumTolerance = 1e-6;

struct TokenDistribution {
  std::size_t position = 0;
  std::vector<double> probs;
};

struct KlProfile {
  std::string prompt_id;
  std::vector<double> kl_per_position;
};

inline void validate_distribution(const TokenDistribution& dist,
                                  const std::string& where) {
  double sum = 0.0;
  for (double p : dist.probs) {
    if (!(p >= 0.0)) {
      throw Error(where + ": probability entries must be non-negative");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kProbSumTolerance) {
    throw Error(where + ": probabilities sum to " + std::to_string(sum) +
                ", outside tolerance " + std::to_string(kProbSumTolerance));
  }
}

inline std::vector<double> softmax_f64(const std::vector<double>& logits) {
  if (logits.empty()) throw Error("cannot softmax an empty vector");
  const double max = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - max);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

/// KL(a || b) per position, truncated to the shorter sequence.
inline KlProfile per_token_kl(const std::vector<TokenDistribution>& dist_a,
                              const std::vector<TokenDistribution>& dist_b,
                              const std::string& prompt_id = "",
                              double epsilon = kKlEpsilon) {
  if (dist_a.empty() || dist_b.empty()) {
    throw Error("per-token KL requires non-empty distribution sequences");
  }
  KlProfile profile;
  profile.prompt_id = prompt_id;
  const std::size_t len = std::min(dist_a.size(), dist_b.size());
  for (std::size_t t = 0; t < len; ++t) {
    const auto& a = dist_a[t];
    const auto& b = dist_b[t];
    if (a.probs.size() != b.probs.size()) {
      throw Error("vocabulary mismatch at position " + std::to_string(t) +
                  ": " + std::to_string(a.probs.size()) + " vs " +
                  std::to_string(b.probs.size()));
    }
    const std::string where =
        (prompt_id.empty() ? std::string("position ")
                           : "'" + prompt_id + "' position ") +
        std::to_string(t);
    validate_distribution(a, where + " (a)");
    validate_distribution(b, where + " (b)");
    double kl = 0.0;
    for (std::size_t v = 0; v < a.probs.size(); ++v) {
      const double pa = std::max(a.probs[v], epsilon);
      const double pb = std::max(b.probs[v], epsilon);
      kl += pa * std::log(pa / pb);
    }
    profile.kl_per_position.push_back(std::max(kl, 0.0));
  }
  return profile;
}

struct AggregateProfile {
  std::vector<double> mean;
  std::vector<double> stddev;  // population standard deviation
  std::vector<std::size_t> counts;
};

/// Position-wise mean and dispersion across profiles. Positions covered by
/// fewer than min_count profiles are dropped; since every profile covers a
/// prefix, the output is the longest prefix with enough coverage.
inline AggregateProfile aggregate_profiles(
    const std::vector<KlProfile>& profiles, std::size_t min_count = 1) {
  if (profiles.empty()) {
    throw Error("cannot aggregate an empty profile list");
  }
  if (min_count == 0) min_count = 1;
  std::size_t max_len = 0;
  for (const auto& p : profiles) {
    max_len = std::max(max_len, p.kl_per_position.size());
  }
  AggregateProfile out;
  for (std::size_t t = 0; t < max_len; ++t) {
    std::size_t count = 0;
    double sum = 0.0;
    for (const auto& p : profiles) {
      if (t < p.kl_per_position.size()) {
        ++count;
        sum += p.kl_per_position[t];
      }
    }
    if (count < min_count) break;
    const double mean = sum / static_cast<double>(count);
    double var = 0.0;
    for (const auto& p : profiles) {
      if (t < p.kl_per_position.size()) {
        const double d = p.kl_per_position[t] - mean;
        var += d * d;
      }
    }
    out.mean.push_back(mean);
    out.stddev.push_back(std::sqrt(var / static_cast<double>(count)));
    out.counts.push_back(count);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dump loading
// ---------------------------------------------------------------------------

enum class DumpKind { kAuto, kProbs, kLogits };

inline DumpKind parse_dump_kind(const std::string& s) {
  if (s == "auto") return DumpKind::kAuto;
  if (s == "probs") return DumpKind::kProbs;
  if (s == "logits") return DumpKind::kLogits;
  throw Error("unknown dump kind '" + s +
              "' (expected auto, probs, or logits)");
}

namespace detail {

inline bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isdigit(c); });
}

/// Rows look like probabilities when every entry is in [0, 1] and each row
/// sums to 1 within tolerance; anything else is treated as logits.
inline bool rows_look_like_probs(const std::vector<std::vector<double>>& rows) {
  for (const auto& row : rows) {
    double sum = 0.0;
    for (double v : row) {
      if (!(v >= 0.0 && v <= 1.0)) return false;
      sum += v;
    }
    if (std::abs(sum - 1.0) > kProbSumTolerance) return false;
  }
  return true;
}

}  // namespace detail

/// Parses a distribution dump archive. Tensors are named either
/// "logits/{prompt_id}" (2-D, positions x vocab) or
/// "logits/{prompt_id}/{position}" (1-D); the two forms cannot be mixed for
/// one prompt, and per-position dumps must cover exactly 0..T-1. Values are
/// taken as probabilities or soft-maxed from logits; kind kAuto decides per
/// prompt from the values themselves.
inline std::map<std::string, std::vector<TokenDistribution>>
load_distribution_dump(const TensorMap& archive,
                       DumpKind kind = DumpKind::kAuto) {
  constexpr const char* kPrefix = "logits/";
  std::map<std::string, std::vector<std::vector<double>>> rows_by_prompt;
  std::map<std::string, std::map<std::size_t, std::vector<double>>>
      positions_by_prompt;

  for (const auto& [name, tensor] : archive) {
    if (name.rfind(kPrefix, 0) != 0 || name.size() <= std::strlen(kPrefix)) {
      throw Error("unrecognized tensor name '" + name +
                  "' (expected logits/{prompt_id} or "
                  "logits/{prompt_id}/{position})");
    }
    const std::string rest = name.substr(std::strlen(kPrefix));
    const std::size_t slash = rest.rfind('/');
    const bool per_position =
        slash != std::string::npos && slash + 1 < rest.size() &&
        detail::all_digits(rest.substr(slash + 1));
    if (per_position) {
      const std::string pid = rest.substr(0, slash);
      if (pid.empty()) {
        throw Error("tensor '" + name + "' has an empty prompt id");
      }
      if (tensor.shape.size() != 1) {
        throw Error("tensor '" + name + "' must be 1-D, got rank " +
                    std::to_string(tensor.shape.size()));
      }
      if (rows_by_prompt.count(pid)) {
        throw Error("prompt '" + pid +
                    "' mixes matrix and per-position tensors");
      }
      const std::size_t pos = std::stoull(rest.substr(slash + 1));
      auto& slots = positions_by_prompt[pid];
      if (slots.count(pos)) {
        throw Error("prompt '" + pid + "' has duplicate position " +
                    std::to_string(pos));
      }
      slots[pos] = tensor.to_doubles();
    } else {
      const std::string pid = rest;
      if (positions_by_prompt.count(pid)) {
        throw Error("prompt '" + pid +
                    "' mixes matrix and per-position tensors");
      }
      if (rows_by_prompt.count(pid)) {
        throw Error("duplicate matrix tensor for prompt '" + pid + "'");
      }
      if (tensor.shape.size() != 2) {
        throw Error("tensor '" + name + "' must be 2-D, got rank " +
                    std::to_string(tensor.shape.size()));
      }
      const std::vector<double> flat = tensor.to_doubles();
      const std::size_t vocab = tensor.shape[1];
      if (vocab == 0) throw Error("tensor '" + name + "' has zero vocab");
      auto& rows = rows_by_prompt[pid];
      for (std::size_t t = 0; t < tensor.shape[0]; ++t) {
        rows.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(t * vocab),
                          flat.begin() +
                              static_cast<std::ptrdiff_t>((t + 1) * vocab));
      }
    }
  }

  for (auto& [pid, slots] : positions_by_prompt) {
    auto& rows = rows_by_prompt[pid];
    std::size_t expect = 0;
    for (auto& [pos, row] : slots) {
      if (pos != expect) {
        throw Error("prompt '" + pid + "' positions are not contiguous: " +
                    "expected " + std::to_string(expect) + ", found " +
                    std::to_string(pos));
      }
      rows.push_back(std::move(row));
      ++expect;
    }
  }

  std::map<std::string, std::vector<TokenDistribution>> out;
  for (auto& [pid, rows] : rows_by_prompt) {
    if (rows.empty()) {
      throw Error("prompt '" + pid + "' has no positions");
    }
    const std::size_t vocab = rows.front().size();
    for (const auto& row : rows) {
      if (row.size() != vocab) {
        throw Error("prompt '" + pid + "' has inconsistent vocabulary sizes");
      }
    }
    const bool as_probs = kind == DumpKind::kProbs ||
                          (kind == DumpKind::kAuto &&
                           detail::rows_look_like_probs(rows));
    auto& dists = out[pid];
    for (std::size_t t = 0; t < rows.size(); ++t) {
      TokenDistribution dist;
      dist.position = t;
      dist.probs = as_probs ? std::move(rows[t]) : softmax_f64(rows[t]);
      validate_distribution(dist, "'" + pid + "' position " +
                                      std::to_string(t));
      dists.push_back(std::move(dist));
    }
  }
  return out;
}

}  // namespace safekit
