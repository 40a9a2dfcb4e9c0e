// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point. Every subcommand takes --config FILE (a flat
// JSON object whose keys are long option names); precedence is CLI flag,
// then config file, then built-in default. Every run writes
// manifest-<subcommand>.json into --report-dir; reports themselves carry no
// timestamps and are byte-deterministic for fixed inputs. Exit codes:
// 0 success, 1 runtime failure, 2 usage error.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "safekit/adapter.hpp"
#include "safekit/common.hpp"
#include "safekit/dataset.hpp"
#include "safekit/eval.hpp"
#include "safekit/kl.hpp"
#include "safekit/manifest.hpp"
#include "safekit/realign.hpp"
#include "safekit/subspace.hpp"
#include "safekit/tensor_archive.hpp"

namespace safekit {

/// Thrown by handlers for post-parse option conflicts; maps to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

namespace cli_detail {

inline LogLevel parse_log_level(const std::string& s) {
  if (s == "debug") return LogLevel::kDebug;
  if (s == "info") return LogLevel::kInfo;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "error") return LogLevel::kError;
  throw UsageError("unknown log level '" + s +
                   "' (expected debug, info, warn, or error)");
}

struct Logger {
  LogLevel threshold = LogLevel::kInfo;
  void log(LogLevel level, const std::string& msg) const {
    if (level < threshold) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
  }
  void debug(const std::string& m) const { log(LogLevel::kDebug, m); }
  void info(const std::string& m) const { log(LogLevel::kInfo, m); }
  void warn(const std::string& m) const { log(LogLevel::kWarn, m); }
};

/// Applies a flat JSON config file beneath already-parsed flags: keys are
/// long option names without the leading dashes ({"tau": 0.5, "mode":
/// "project"}), arrays map to repeated option values, and only options the
/// command line did not set are filled in, so precedence is always
/// flag > config > default. Unknown keys and non-scalar values are usage
/// errors.
inline void apply_config(CLI::App* sub, const std::string& config_path) {
  if (config_path.empty()) return;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(config_path));
  } catch (const std::exception& e) {
    throw UsageError("cannot read config '" + config_path + "': " + e.what());
  }
  if (!j.is_object()) {
    throw UsageError("config '" + config_path +
                     "' must be a flat JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw UsageError("unknown config key '" + key + "' for subcommand '" +
                       sub->get_name() + "'");
    }
    if (opt->count() > 0) continue;  // the command line wins
    const auto scalar = [&key](const nlohmann::json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
      if (v.is_number()) return v.dump();
      throw UsageError("config key '" + key +
                       "' must be a scalar or an array of scalars");
    };
    if (value.is_array()) {
      for (const auto& el : value) opt->add_result(scalar(el));
    } else {
      opt->add_result(scalar(value));
    }
    opt->run_callback();
  }
}

struct CommonOpts {
  std::uint64_t seed = 0;
  std::string report_dir = "reports";
  std::string log_level = "info";
  std::string config;
};

inline void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--seed", opts.seed, "Random seed")->capture_default_str();
  sub->add_option("--report-dir", opts.report_dir,
                  "Directory for reports and the run manifest")
      ->capture_default_str();
  sub->add_option("--log-level", opts.log_level,
                  "Log verbosity: debug, info, warn, error")
      ->capture_default_str();
  sub->add_option("--config", opts.config,
                  "Flat JSON config file; command-line flags take precedence");
}

inline nlohmann::json common_config(const std::string& subcommand,
                                    const CommonOpts& opts) {
  nlohmann::json j;
  j["subcommand"] = subcommand;
  j["seed"] = opts.seed;
  j["report_dir"] = opts.report_dir;
  j["log_level"] = opts.log_level;
  return j;
}

inline std::set<std::string> archive_names(const TensorMap& map) {
  std::set<std::string> names;
  for (const auto& [name, tensor] : map) names.insert(name);
  return names;
}

inline std::set<std::string> adapter_layer_ids(const LoraAdapter& adapter) {
  std::set<std::string> ids;
  for (const auto& [id, layer] : adapter.layers) ids.insert(id);
  return ids;
}

inline nlohmann::json scores_to_json(const std::vector<LayerScore>& scores) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : scores) {
    arr.push_back({{"layer_id", s.layer_id},
                   {"rho", s.rho},
                   {"degenerate", s.degenerate}});
  }
  return arr;
}

// --- inspect ---------------------------------------------------------------

struct InspectOpts {
  CommonOpts common;
  std::string archive;
  std::string out;
};

inline int run_inspect(const InspectOpts& opts) {
  read_archive(opts.archive);  // full validation first

  const std::vector<std::uint8_t> bytes = read_file_bytes(opts.archive);
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  const nlohmann::json header = nlohmann::json::parse(
      std::string(reinterpret_cast<const char*>(bytes.data() + 8),
                  header_len));

  nlohmann::json report;
  report["file"] = opts.archive;
  report["tensors"] = nlohmann::json::array();
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      report["metadata"] = entry;
      continue;
    }
    report["tensors"].push_back({{"name", name},
                                 {"dtype", entry["dtype"]},
                                 {"shape", entry["shape"]},
                                 {"data_offsets", entry["data_offsets"]}});
  }

  for (const auto& t : report["tensors"]) {
    std::string shape;
    for (const auto& d : t["shape"]) {
      if (!shape.empty()) shape += "x";
      shape += d.dump();
    }
    std::cout << t["name"].get<std::string>() << "  "
              << t["dtype"].get<std::string>() << "  [" << shape
              << "]  bytes " << t["data_offsets"][0].dump() << ".."
              << t["data_offsets"][1].dump() << "\n";
  }

  const std::filesystem::path out =
      opts.out.empty() ? std::filesystem::path(opts.common.report_dir) /
                             "inspect.json"
                       : std::filesystem::path(opts.out);
  write_json_report(report, out);

  RunManifest manifest;
  manifest.subcommand = "inspect";
  manifest.effective_config = common_config("inspect", opts.common);
  manifest.effective_config["archive"] = opts.archive;
  manifest.inputs = {opts.archive};
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- subspace ---------------------------------------------------------------

struct SubspaceOpts {
  CommonOpts common;
  std::string aligned;
  std::string unaligned;
  std::vector<std::string> layers;
  std::string out;
};

inline int run_subspace(const SubspaceOpts& opts) {
  const TensorMap aligned = read_archive(opts.aligned);
  const TensorMap unaligned = read_archive(opts.unaligned);
  std::set<std::string> ids(opts.layers.begin(), opts.layers.end());
  if (ids.empty()) {
    ids = archive_names(aligned);
    for (const auto& name : archive_names(unaligned)) ids.insert(name);
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& pair : pair_base_weights(aligned, unaligned, ids)) {
    const auto sub = compute_subspace(pair);
    nlohmann::json row;
    row["layer_id"] = pair.layer_id;
    row["rows"] = pair.aligned.rows();
    row["cols"] = pair.aligned.cols();
    row["degenerate"] = !sub.has_value();
    row["direction_norm"] = sub ? sub->direction_norm : 0.0;
    rows.push_back(std::move(row));
  }
  nlohmann::json report;
  report["layers"] = std::move(rows);

  const std::filesystem::path out =
      opts.out.empty() ? std::filesystem::path(opts.common.report_dir) /
                             "subspace.json"
                       : std::filesystem::path(opts.out);
  write_json_report(report, out);

  RunManifest manifest;
  manifest.subcommand = "subspace";
  manifest.effective_config = common_config("subspace", opts.common);
  manifest.effective_config["aligned"] = opts.aligned;
  manifest.effective_config["unaligned"] = opts.unaligned;
  manifest.inputs = {opts.aligned, opts.unaligned};
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- score -------------------------------------------------------------------

struct ScoreOpts {
  CommonOpts common;
  std::string adapter;
  std::string aligned;
  std::string unaligned;
  double gamma = 0.0;  // 0 = take from archive metadata / default 1
  std::string out;
};

inline std::vector<LayerScore> score_layers(const LoraAdapter& adapter,
                                            const SubspaceSet& subspaces) {
  std::vector<LayerScore> scores;
  for (const auto& [id, layer] : adapter.layers) {
    auto it = subspaces.find(id);
    if (it == subspaces.end()) {
      throw Error("no subspace computed for layer '" + id + "'");
    }
    if (!it->second) {
      scores.push_back({id, 1.0, true});
    } else {
      scores.push_back(alignment_score(materialize_delta(layer), *it->second));
    }
  }
  detail::sort_scores(scores);
  return scores;
}

inline int run_score(const ScoreOpts& opts) {
  AdapterNaming naming;
  if (opts.gamma != 0.0) naming.gamma_override = opts.gamma;
  const TensorMap adapter_archive = read_archive(opts.adapter);
  const LoraAdapter adapter = load_adapter(adapter_archive, naming);
  const SubspaceSet subspaces =
      compute_subspaces(read_archive(opts.aligned), read_archive(opts.unaligned),
                        adapter_layer_ids(adapter));
  const std::vector<LayerScore> scores = score_layers(adapter, subspaces);

  nlohmann::json report;
  report["scores"] = scores_to_json(scores);

  const std::filesystem::path out =
      opts.out.empty()
          ? std::filesystem::path(opts.common.report_dir) / "scores.json"
          : std::filesystem::path(opts.out);
  write_json_report(report, out);

  RunManifest manifest;
  manifest.subcommand = "score";
  manifest.effective_config = common_config("score", opts.common);
  manifest.effective_config["adapter"] = opts.adapter;
  manifest.effective_config["aligned"] = opts.aligned;
  manifest.effective_config["unaligned"] = opts.unaligned;
  if (opts.gamma != 0.0) manifest.effective_config["gamma"] = opts.gamma;
  manifest.inputs = {opts.adapter, opts.aligned, opts.unaligned};
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- realign -----------------------------------------------------------------

struct RealignOpts {
  CommonOpts common;
  std::string adapter;
  std::string aligned;
  std::string unaligned;
  std::string mode = "project";
  double tau = 0.6;
  double alpha = -1.0;  // unset sentinel
  std::string safe_adapter;
  bool refactor = false;
  double gamma = 0.0;
  std::string out;
  std::string report;
};

inline RealignmentOptions make_realign_options(const RealignOpts& opts) {
  RealignmentOptions ro;
  ro.mode = parse_repair_mode(opts.mode);
  ro.tau = opts.tau;
  ro.refactor_merged = opts.refactor;
  if (opts.gamma != 0.0) ro.naming.gamma_override = opts.gamma;
  if (ro.mode == RepairMode::kProject) {
    if (opts.alpha >= 0.0) {
      throw UsageError("--alpha only applies to --mode merge");
    }
    if (!opts.safe_adapter.empty()) {
      throw UsageError("--safe-adapter only applies to --mode merge");
    }
  } else {
    if (opts.safe_adapter.empty()) {
      throw UsageError("--mode merge requires --safe-adapter");
    }
    if (opts.alpha < 0.0) {
      throw UsageError("--mode merge requires --alpha");
    }
    ro.alpha = opts.alpha;
  }
  return ro;
}

inline int run_realign(const RealignOpts& opts) {
  const RealignmentOptions ro = make_realign_options(opts);
  const TensorMap adapter_archive = read_archive(opts.adapter);
  const LoraAdapter adapter = load_adapter(adapter_archive, ro.naming);
  const SubspaceSet subspaces =
      compute_subspaces(read_archive(opts.aligned), read_archive(opts.unaligned),
                        adapter_layer_ids(adapter));
  TensorMap safe_archive;
  if (ro.mode == RepairMode::kMerge) {
    safe_archive = read_archive(opts.safe_adapter);
  }
  RealignmentResult result =
      realign(adapter_archive, subspaces, ro,
              ro.mode == RepairMode::kMerge ? &safe_archive : nullptr);
  write_archive(result.adapter, opts.out);
  result.report.output_adapter = opts.out;

  const std::filesystem::path report_path =
      opts.report.empty()
          ? std::filesystem::path(opts.common.report_dir) / "realign.json"
          : std::filesystem::path(opts.report);
  write_json_report(result.report.to_json(), report_path);

  RunManifest manifest;
  manifest.subcommand = "realign";
  manifest.effective_config = common_config("realign", opts.common);
  manifest.effective_config["adapter"] = opts.adapter;
  manifest.effective_config["aligned"] = opts.aligned;
  manifest.effective_config["unaligned"] = opts.unaligned;
  manifest.effective_config["mode"] = opts.mode;
  manifest.effective_config["tau"] = opts.tau;
  if (ro.mode == RepairMode::kMerge) {
    manifest.effective_config["alpha"] = opts.alpha;
    manifest.effective_config["safe_adapter"] = opts.safe_adapter;
  }
  manifest.effective_config["refactor"] = opts.refactor;
  manifest.effective_config["out"] = opts.out;
  manifest.inputs = {opts.adapter, opts.aligned, opts.unaligned};
  if (!opts.safe_adapter.empty()) manifest.inputs.push_back(opts.safe_adapter);
  manifest.outputs = {opts.out, report_path};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- sweep -------------------------------------------------------------------

struct SweepCliOpts {
  CommonOpts common;
  std::string adapter;
  std::string aligned;
  std::string unaligned;
  std::string mode = "project";
  std::vector<double> tau_grid;
  std::vector<double> alpha_grid;
  std::string safe_adapter;
  bool refactor = false;
  double gamma = 0.0;
  std::string eval_config;
  std::string work_dir;
  bool keep_all = false;
  std::size_t parallelism = 1;
  std::string out;
};

inline EvalHook make_live_eval_hook(const std::filesystem::path& config_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("cannot parse eval config '" + config_path.string() +
                "': " + e.what());
  }
  if (!j.is_object() || !j.contains("prompts") || !j.contains("gen") ||
      !j.contains("judge")) {
    throw Error("eval config requires keys: prompts, gen, judge");
  }
  const PromptSet prompts =
      load_prompt_set(j["prompts"].get<std::string>(), SetKind::kRedteam);
  const EndpointConfig gen_base = EndpointConfig::from_json(j["gen"]);
  const EndpointConfig judge = EndpointConfig::from_json(j["judge"]);

  return [prompts, gen_base, judge](const SweepPoint&,
                                    const std::filesystem::path& adapter) {
    EndpointConfig gen = gen_base;
    const std::string key = "{adapter}";
    const std::size_t pos = gen.model_id.find(key);
    if (pos != std::string::npos) {
      gen.model_id.replace(pos, key.size(), adapter.string());
    }
    const GenerationOutcome g = generate_responses(prompts, gen);
    const SafetyJudgeOutcome sj = judge_safety(g.responses, prompts, judge);
    EvalOutcome outcome;
    if (!sj.verdicts.empty()) {
      outcome.harmfulness =
          harmfulness_score(sj.verdicts, prompts.name).score_percent;
    }
    return outcome;
  };
}

inline int run_sweep(const SweepCliOpts& opts) {
  SweepOptions so;
  so.mode = parse_repair_mode(opts.mode);
  if (!opts.tau_grid.empty()) so.tau_grid = opts.tau_grid;
  if (!opts.alpha_grid.empty()) so.alpha_grid = opts.alpha_grid;
  so.refactor_merged = opts.refactor;
  if (opts.gamma != 0.0) so.naming.gamma_override = opts.gamma;
  so.keep_all = opts.keep_all;
  so.parallelism = opts.parallelism;
  so.work_dir = opts.work_dir.empty()
                    ? std::filesystem::path(opts.common.report_dir) / "sweep"
                    : std::filesystem::path(opts.work_dir);
  if (so.mode == RepairMode::kProject) {
    if (!opts.alpha_grid.empty()) {
      throw UsageError("--alpha-grid only applies to --mode merge");
    }
    if (!opts.safe_adapter.empty()) {
      throw UsageError("--safe-adapter only applies to --mode merge");
    }
  } else if (opts.safe_adapter.empty()) {
    throw UsageError("--mode merge requires --safe-adapter");
  }

  const TensorMap adapter_archive = read_archive(opts.adapter);
  const LoraAdapter adapter = load_adapter(adapter_archive, so.naming);
  const SubspaceSet subspaces =
      compute_subspaces(read_archive(opts.aligned), read_archive(opts.unaligned),
                        adapter_layer_ids(adapter));
  TensorMap safe_archive;
  if (so.mode == RepairMode::kMerge) {
    safe_archive = read_archive(opts.safe_adapter);
  }
  const EvalHook hook = opts.eval_config.empty()
                            ? stub_eval_hook()
                            : make_live_eval_hook(opts.eval_config);
  const std::vector<SweepRow> rows =
      sweep(adapter_archive, subspaces,
            so.mode == RepairMode::kMerge ? &safe_archive : nullptr, so, hook);

  const std::filesystem::path out =
      opts.out.empty()
          ? std::filesystem::path(opts.common.report_dir) / "sweep.json"
          : std::filesystem::path(opts.out);
  write_json_report(sweep_rows_to_json(rows, so.mode), out);

  RunManifest manifest;
  manifest.subcommand = "sweep";
  manifest.effective_config = common_config("sweep", opts.common);
  manifest.effective_config["adapter"] = opts.adapter;
  manifest.effective_config["aligned"] = opts.aligned;
  manifest.effective_config["unaligned"] = opts.unaligned;
  manifest.effective_config["mode"] = opts.mode;
  manifest.effective_config["tau_grid"] = so.tau_grid;
  if (so.mode == RepairMode::kMerge) {
    manifest.effective_config["alpha_grid"] = so.alpha_grid;
    manifest.effective_config["safe_adapter"] = opts.safe_adapter;
  }
  manifest.effective_config["keep_all"] = opts.keep_all;
  manifest.effective_config["parallelism"] = opts.parallelism;
  manifest.inputs = {opts.adapter, opts.aligned, opts.unaligned};
  if (!opts.safe_adapter.empty()) manifest.inputs.push_back(opts.safe_adapter);
  if (!opts.eval_config.empty()) manifest.inputs.push_back(opts.eval_config);
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- mix / split ---------------------------------------------------------------

struct MixOpts {
  CommonOpts common;
  std::string task;
  std::string safety;
  std::size_t n = 0;
  std::string out;
};

inline int run_mix(const MixOpts& opts) {
  const PromptSet task = load_prompt_set(opts.task, SetKind::kTaskQa);
  const PromptSet safety =
      load_prompt_set(opts.safety, SetKind::kSafetyRefusals);
  const PromptSet mixed =
      mix_safety_samples(task, safety, opts.n, opts.common.seed);
  if (std::filesystem::path(opts.out).has_parent_path()) {
    std::filesystem::create_directories(
        std::filesystem::path(opts.out).parent_path());
  }
  write_prompt_set(mixed, opts.out);

  RunManifest manifest;
  manifest.subcommand = "mix";
  manifest.effective_config = common_config("mix", opts.common);
  manifest.effective_config["task"] = opts.task;
  manifest.effective_config["safety"] = opts.safety;
  manifest.effective_config["n"] = opts.n;
  manifest.effective_config["out"] = opts.out;
  manifest.inputs = {opts.task, opts.safety};
  manifest.outputs = {opts.out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

struct SplitOpts {
  CommonOpts common;
  std::string input;
  std::string kind = "task_qa";
  double fraction = 0.2;
  std::string out_train;
  std::string out_test;
};

inline int run_split(const SplitOpts& opts) {
  const PromptSet set = load_prompt_set(opts.input, parse_set_kind(opts.kind));
  auto [train, test] =
      split_train_test(set, opts.fraction, opts.common.seed);
  for (const auto& p : {opts.out_train, opts.out_test}) {
    if (std::filesystem::path(p).has_parent_path()) {
      std::filesystem::create_directories(
          std::filesystem::path(p).parent_path());
    }
  }
  write_prompt_set(train, opts.out_train);
  write_prompt_set(test, opts.out_test);

  RunManifest manifest;
  manifest.subcommand = "split";
  manifest.effective_config = common_config("split", opts.common);
  manifest.effective_config["input"] = opts.input;
  manifest.effective_config["kind"] = opts.kind;
  manifest.effective_config["fraction"] = opts.fraction;
  manifest.effective_config["out_train"] = opts.out_train;
  manifest.effective_config["out_test"] = opts.out_test;
  manifest.inputs = {opts.input};
  manifest.outputs = {opts.out_train, opts.out_test};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- eval ----------------------------------------------------------------------

struct EvalOpts {
  CommonOpts common;
  std::string prompts;
  std::string kind = "redteam";
  std::string gen_endpoint;
  std::string judge_endpoint;
  std::size_t top_k = 5;
  std::string out;
};

inline int run_eval(const EvalOpts& opts) {
  const PromptSet prompts =
      load_prompt_set(opts.prompts, parse_set_kind(opts.kind));
  const EndpointConfig gen_cfg = load_endpoint_config(opts.gen_endpoint);
  const EndpointConfig judge_cfg = load_endpoint_config(opts.judge_endpoint);

  const GenerationOutcome gen = generate_responses(prompts, gen_cfg);
  const SafetyJudgeOutcome judged =
      judge_safety(gen.responses, prompts, judge_cfg);

  nlohmann::json report;
  report["tool"] = kToolName;
  report["tool_version"] = kToolVersion;
  report["prompt_set"] = prompts.name;
  report["prompt_count"] = prompts.size();
  report["generation_failures"] = gen.failures;
  report["judge_failures"] = judged.failures;
  report["gen_endpoint"] = gen_cfg.to_json();
  report["judge_endpoint"] = judge_cfg.to_json();
  if (!judged.verdicts.empty()) {
    const HarmfulnessReport harm =
        harmfulness_score(judged.verdicts, prompts.name);
    report["harmfulness"] = harm.to_json();
    nlohmann::json breakdown = nlohmann::json::array();
    for (const auto& [code, count] :
         category_breakdown(judged.verdicts, opts.top_k)) {
      breakdown.push_back({{"category", code}, {"count", count}});
    }
    report["top_categories"] = std::move(breakdown);
  }
  nlohmann::json verdicts = nlohmann::json::array();
  for (const auto& v : judged.verdicts) verdicts.push_back(v.to_json());
  report["verdicts"] = std::move(verdicts);

  const std::filesystem::path out =
      opts.out.empty()
          ? std::filesystem::path(opts.common.report_dir) / "eval.json"
          : std::filesystem::path(opts.out);
  write_json_report(report, out);

  RunManifest manifest;
  manifest.subcommand = "eval";
  manifest.effective_config = common_config("eval", opts.common);
  manifest.effective_config["prompts"] = opts.prompts;
  manifest.effective_config["kind"] = opts.kind;
  manifest.effective_config["gen_endpoint"] = opts.gen_endpoint;
  manifest.effective_config["judge_endpoint"] = opts.judge_endpoint;
  manifest.effective_config["top_k"] = opts.top_k;
  manifest.inputs = {opts.prompts, opts.gen_endpoint, opts.judge_endpoint};
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

// --- kl ------------------------------------------------------------------------

struct KlOpts {
  CommonOpts common;
  std::string dump_a;
  std::string dump_b;
  std::string kind = "auto";
  std::size_t min_count = 1;
  double epsilon = kKlEpsilon;
  std::string out;
};

inline int run_kl(const KlOpts& opts) {
  const DumpKind kind = parse_dump_kind(opts.kind);
  const auto dists_a = load_distribution_dump(read_archive(opts.dump_a), kind);
  const auto dists_b = load_distribution_dump(read_archive(opts.dump_b), kind);

  std::vector<KlProfile> profiles;
  nlohmann::json per_prompt = nlohmann::json::object();
  for (const auto& [pid, da] : dists_a) {
    auto it = dists_b.find(pid);
    if (it == dists_b.end()) {
      throw Error("prompt '" + pid + "' is missing from '" + opts.dump_b +
                  "'");
    }
    profiles.push_back(per_token_kl(da, it->second, pid, opts.epsilon));
    per_prompt[pid] = profiles.back().kl_per_position;
  }
  if (profiles.empty()) throw Error("no prompts found in the dumps");

  const AggregateProfile agg = aggregate_profiles(profiles, opts.min_count);
  nlohmann::json report;
  report["direction"] = "KL(a || b)";
  report["dump_a"] = opts.dump_a;
  report["dump_b"] = opts.dump_b;
  report["epsilon"] = opts.epsilon;
  report["input_kind"] = opts.kind;
  report["min_count"] = opts.min_count;
  report["profiles"] = std::move(per_prompt);
  report["aggregate"] = {{"mean", agg.mean},
                         {"stddev", agg.stddev},
                         {"counts", agg.counts}};

  const std::filesystem::path out =
      opts.out.empty()
          ? std::filesystem::path(opts.common.report_dir) / "kl.json"
          : std::filesystem::path(opts.out);
  write_json_report(report, out);

  RunManifest manifest;
  manifest.subcommand = "kl";
  manifest.effective_config = common_config("kl", opts.common);
  manifest.effective_config["dump_a"] = opts.dump_a;
  manifest.effective_config["dump_b"] = opts.dump_b;
  manifest.effective_config["input_kind"] = opts.kind;
  manifest.effective_config["min_count"] = opts.min_count;
  manifest.effective_config["epsilon"] = opts.epsilon;
  manifest.inputs = {opts.dump_a, opts.dump_b};
  manifest.outputs = {out};
  write_manifest(manifest, opts.common.report_dir);
  return 0;
}

}  // namespace cli_detail

/// Parses argv (without the program name) and dispatches. Returns the
/// process exit code.
inline int run_cli(const std::vector<std::string>& args) {
  using namespace cli_detail;

  CLI::App app{"safekit: detect and repair safety drift in low-rank adapters"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  InspectOpts inspect;
  auto* inspect_cmd =
      app.add_subcommand("inspect", "List tensors in a weight archive");
  add_common(inspect_cmd, inspect.common);
  inspect_cmd->add_option("archive", inspect.archive, "Archive to inspect")
      ->required();
  inspect_cmd->add_option("--out", inspect.out, "Listing JSON path");

  SubspaceOpts subspace;
  auto* subspace_cmd = app.add_subcommand(
      "subspace", "Summarize per-layer safety directions from a weight pair");
  add_common(subspace_cmd, subspace.common);
  subspace_cmd->add_option("--aligned", subspace.aligned,
                           "Safety-aligned base weights")
      ->required();
  subspace_cmd->add_option("--unaligned", subspace.unaligned,
                           "Unaligned base weights")
      ->required();
  subspace_cmd->add_option("--layers", subspace.layers,
                           "Restrict to these layer ids");
  subspace_cmd->add_option("--out", subspace.out, "Report JSON path");

  ScoreOpts score;
  auto* score_cmd = app.add_subcommand(
      "score", "Score adapter layers against the safety subspace");
  add_common(score_cmd, score.common);
  score_cmd->add_option("--adapter", score.adapter, "LoRA adapter archive")
      ->required();
  score_cmd->add_option("--aligned", score.aligned,
                        "Safety-aligned base weights")
      ->required();
  score_cmd->add_option("--unaligned", score.unaligned,
                        "Unaligned base weights")
      ->required();
  score_cmd->add_option("--gamma", score.gamma,
                        "Override the adapter scaling factor");
  score_cmd->add_option("--out", score.out, "Scores JSON path");

  RealignOpts realign_opts;
  auto* realign_cmd = app.add_subcommand(
      "realign", "Repair unsafe adapter layers by projection or merging");
  add_common(realign_cmd, realign_opts.common);
  realign_cmd
      ->add_option("--adapter", realign_opts.adapter, "LoRA adapter archive")
      ->required();
  realign_cmd
      ->add_option("--aligned", realign_opts.aligned,
                   "Safety-aligned base weights")
      ->required();
  realign_cmd
      ->add_option("--unaligned", realign_opts.unaligned,
                   "Unaligned base weights")
      ->required();
  realign_cmd->add_option("--mode", realign_opts.mode, "project or merge")
      ->capture_default_str();
  realign_cmd->add_option("--tau", realign_opts.tau, "Safety threshold")
      ->capture_default_str();
  realign_cmd->add_option("--alpha", realign_opts.alpha,
                          "Merge weight toward the fine-tuned update");
  realign_cmd->add_option("--safe-adapter", realign_opts.safe_adapter,
                          "Known-safe adapter archive (merge mode)");
  realign_cmd->add_flag("--refactor", realign_opts.refactor,
                        "Re-factorize merged updates at doubled rank");
  realign_cmd->add_option("--gamma", realign_opts.gamma,
                          "Override the adapter scaling factor");
  realign_cmd->add_option("--out", realign_opts.out, "Repaired adapter path")
      ->required();
  realign_cmd->add_option("--report", realign_opts.report, "Report JSON path");

  SweepCliOpts sweep_opts;
  auto* sweep_cmd = app.add_subcommand(
      "sweep", "Repair across a grid of thresholds and merge weights");
  add_common(sweep_cmd, sweep_opts.common);
  sweep_cmd->add_option("--adapter", sweep_opts.adapter, "LoRA adapter archive")
      ->required();
  sweep_cmd
      ->add_option("--aligned", sweep_opts.aligned,
                   "Safety-aligned base weights")
      ->required();
  sweep_cmd
      ->add_option("--unaligned", sweep_opts.unaligned,
                   "Unaligned base weights")
      ->required();
  sweep_cmd->add_option("--mode", sweep_opts.mode, "project or merge")
      ->capture_default_str();
  sweep_cmd->add_option("--tau-grid", sweep_opts.tau_grid,
                        "Thresholds to sweep");
  sweep_cmd->add_option("--alpha-grid", sweep_opts.alpha_grid,
                        "Merge weights to sweep (merge mode)");
  sweep_cmd->add_option("--safe-adapter", sweep_opts.safe_adapter,
                        "Known-safe adapter archive (merge mode)");
  sweep_cmd->add_flag("--refactor", sweep_opts.refactor,
                      "Re-factorize merged updates at doubled rank");
  sweep_cmd->add_option("--gamma", sweep_opts.gamma,
                        "Override the adapter scaling factor");
  sweep_cmd->add_option("--eval-config", sweep_opts.eval_config,
                        "JSON with prompts + gen/judge endpoints");
  sweep_cmd->add_option("--work-dir", sweep_opts.work_dir,
                        "Where per-point adapters are written");
  sweep_cmd->add_flag("--keep-all", sweep_opts.keep_all,
                      "Keep every per-point adapter on disk");
  sweep_cmd->add_option("--parallelism", sweep_opts.parallelism,
                        "Grid points evaluated concurrently")
      ->capture_default_str();
  sweep_cmd->add_option("--out", sweep_opts.out, "Sweep table JSON path");

  MixOpts mix;
  auto* mix_cmd = app.add_subcommand(
      "mix", "Interleave safety refusals into a task set");
  add_common(mix_cmd, mix.common);
  mix_cmd->add_option("--task", mix.task, "Task QA JSONL")->required();
  mix_cmd->add_option("--safety", mix.safety, "Safety refusal JSONL")
      ->required();
  mix_cmd->add_option("--n", mix.n, "Safety records to inject")->required();
  mix_cmd->add_option("--out", mix.out, "Mixed JSONL path")->required();

  SplitOpts split;
  auto* split_cmd =
      app.add_subcommand("split", "Deterministic train/test split");
  add_common(split_cmd, split.common);
  split_cmd->add_option("--input", split.input, "Input JSONL")->required();
  split_cmd->add_option("--kind", split.kind,
                        "task_qa, redteam, or safety_refusals")
      ->capture_default_str();
  split_cmd->add_option("--fraction", split.fraction, "Test fraction")
      ->capture_default_str();
  split_cmd->add_option("--out-train", split.out_train, "Train JSONL path")
      ->required();
  split_cmd->add_option("--out-test", split.out_test, "Test JSONL path")
      ->required();

  EvalOpts eval;
  auto* eval_cmd = app.add_subcommand(
      "eval", "Generate, judge, and score responses for a prompt set");
  add_common(eval_cmd, eval.common);
  eval_cmd->add_option("--prompts", eval.prompts, "Prompt JSONL")->required();
  eval_cmd->add_option("--kind", eval.kind, "Prompt set kind")
      ->capture_default_str();
  eval_cmd
      ->add_option("--gen-endpoint", eval.gen_endpoint,
                   "Generation endpoint config JSON")
      ->required();
  eval_cmd
      ->add_option("--judge-endpoint", eval.judge_endpoint,
                   "Judge endpoint config JSON")
      ->required();
  eval_cmd->add_option("--top-k", eval.top_k, "Categories in the breakdown")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Report JSON path");

  KlOpts kl;
  auto* kl_cmd = app.add_subcommand(
      "kl", "Per-token KL divergence between two distribution dumps");
  add_common(kl_cmd, kl.common);
  kl_cmd->add_option("--dump-a", kl.dump_a, "Fine-tuned model dump")
      ->required();
  kl_cmd->add_option("--dump-b", kl.dump_b, "Reference model dump")
      ->required();
  kl_cmd->add_option("--kind", kl.kind, "auto, probs, or logits")
      ->capture_default_str();
  kl_cmd->add_option("--min-count", kl.min_count,
                     "Minimum profiles covering an aggregated position")
      ->capture_default_str();
  kl_cmd->add_option("--epsilon", kl.epsilon, "Probability clamp floor")
      ->capture_default_str();
  kl_cmd->add_option("--out", kl.out, "Profile JSON path");

  try {
    // CLI11 expects argv order reversed when parsing a vector.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    // Merge config-file values beneath flags before any option is read.
    for (CLI::App* sub : app.get_subcommands()) {
      apply_config(sub, sub->get_option("--config")->as<std::string>());
    }
    Logger logger{parse_log_level(
        inspect_cmd->parsed()    ? inspect.common.log_level
        : subspace_cmd->parsed() ? subspace.common.log_level
        : score_cmd->parsed()    ? score.common.log_level
        : realign_cmd->parsed()  ? realign_opts.common.log_level
        : sweep_cmd->parsed()    ? sweep_opts.common.log_level
        : mix_cmd->parsed()      ? mix.common.log_level
        : split_cmd->parsed()    ? split.common.log_level
        : eval_cmd->parsed()     ? eval.common.log_level
                                 : kl.common.log_level)};
    if (inspect_cmd->parsed()) return run_inspect(inspect);
    if (subspace_cmd->parsed()) return run_subspace(subspace);
    if (score_cmd->parsed()) return run_score(score);
    if (realign_cmd->parsed()) {
      logger.debug("realign mode " + realign_opts.mode);
      return run_realign(realign_opts);
    }
    if (sweep_cmd->parsed()) return run_sweep(sweep_opts);
    if (mix_cmd->parsed()) return run_mix(mix);
    if (split_cmd->parsed()) return run_split(split);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (kl_cmd->parsed()) return run_kl(kl);
    std::cerr << "error: no subcommand given\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace safekit
