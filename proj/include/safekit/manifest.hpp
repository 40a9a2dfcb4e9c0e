// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: every CLI run writes manifest-<subcommand>.json next to its
// reports, recording the tool version, the effective configuration (after
// flag/config-file/default precedence) with its hash, and content digests of
// every input file. Timestamps live only here, so the reports themselves
// stay byte-deterministic.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "safekit/common.hpp"

namespace safekit {

inline std::string file_digest(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string subcommand;
  nlohmann::json effective_config = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tool"] = kToolName;
    j["version"] = kToolVersion;
    j["subcommand"] = subcommand;
    j["timestamp"] = utc_timestamp();
    j["effective_config"] = effective_config;
    j["config_hash"] = to_hex(fnv1a64(effective_config.dump()));
    nlohmann::json digests = nlohmann::json::object();
    for (const auto& path : inputs) {
      digests[path.string()] = file_digest(path);
    }
    j["input_digests"] = std::move(digests);
    j["outputs"] = nlohmann::json::array();
    for (const auto& path : outputs) j["outputs"].push_back(path.string());
    return j;
  }
};

inline std::filesystem::path write_manifest(
    const RunManifest& manifest, const std::filesystem::path& report_dir) {
  std::filesystem::create_directories(report_dir);
  const std::filesystem::path path =
      report_dir / ("manifest-" + manifest.subcommand + ".json");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << manifest.to_json().dump(2) << "\n";
  if (!out) throw Error("failed writing '" + path.string() + "'");
  return path;
}

/// Writes JSON with sorted keys and stable formatting; reports written this
/// way are byte-identical across runs given identical content.
inline void write_json_report(const nlohmann::json& j,
                              const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace safekit
