// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0
//
// Line-delimited JSON prompt/QA sets, deterministic train/test splitting,
// and safety-sample interleaving. Records without an explicit id get a
// stable content-hash id, so re-ingesting a written set is idempotent.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "safekit/common.hpp"

namespace safekit {

enum class SetKind { kTaskQa, kRedteam, kSafetyRefusals };

inline const char* set_kind_name(SetKind k) {
  switch (k) {
    case SetKind::kTaskQa: return "task_qa";
    case SetKind::kRedteam: return "redteam";
    case SetKind::kSafetyRefusals: return "safety_refusals";
  }
  throw Error("invalid set kind");
}

inline SetKind parse_set_kind(const std::string& s) {
  if (s == "task_qa") return SetKind::kTaskQa;
  if (s == "redteam") return SetKind::kRedteam;
  if (s == "safety_refusals") return SetKind::kSafetyRefusals;
  throw Error("unknown set kind '" + s +
              "' (expected task_qa, redteam, or safety_refusals)");
}

struct QaRecord {
  std::string id;
  std::string question;
  std::optional<std::string> answer;
  std::optional<std::string> category;
  std::optional<std::string> source;  // provenance tag, e.g. task vs safety

  bool operator==(const QaRecord&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["id"] = id;
    j["question"] = question;
    if (answer) j["answer"] = *answer;
    if (category) j["category"] = *category;
    if (source) j["source"] = *source;
    return j;
  }
};

struct PromptSet {
  std::string name;
  SetKind kind = SetKind::kTaskQa;
  std::vector<QaRecord> records;

  std::size_t size() const { return records.size(); }

  /// Distinct category tags present, sorted.
  std::vector<std::string> categories() const {
    std::set<std::string> seen;
    for (const auto& r : records) {
      if (r.category) seen.insert(*r.category);
    }
    return {seen.begin(), seen.end()};
  }
};

namespace detail {

inline std::string record_content_id(const QaRecord& r) {
  std::string key = r.question;
  key += '\x1f';
  if (r.answer) key += *r.answer;
  key += '\x1f';
  if (r.category) key += *r.category;
  return to_hex(fnv1a64(key));
}

/// Returns id itself if free, otherwise the first "id-<n>" that is.
inline std::string disambiguate_id(const std::string& id,
                                   const std::set<std::string>& used) {
  if (!used.count(id)) return id;
  for (std::size_t n = 1;; ++n) {
    std::string candidate = id + "-" + std::to_string(n);
    if (!used.count(candidate)) return candidate;
  }
}

inline std::optional<std::string> optional_string_field(
    const nlohmann::json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw Error(where + ": field '" + key + "' must be a string");
  }
  return it->get<std::string>();
}

}  // namespace detail

/// Reads one JSON object per line. Blank lines are skipped. Missing ids are
/// assigned from a content hash; explicit duplicate ids are an error, while
/// hash collisions get a deterministic "-<n>" suffix.
inline PromptSet load_prompt_set(const std::filesystem::path& path,
                                 SetKind kind) {
  PromptSet set;
  set.name = path.stem().string();
  set.kind = kind;

  std::istringstream in(read_file_text(path));
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> used_ids;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw Error(where + ": record must be a JSON object");

    QaRecord rec;
    auto question = detail::optional_string_field(j, "question", where);
    if (!question || trim(*question).empty()) {
      throw Error(where + ": record requires a non-empty 'question'");
    }
    rec.question = *question;
    rec.answer = detail::optional_string_field(j, "answer", where);
    rec.category = detail::optional_string_field(j, "category", where);
    rec.source = detail::optional_string_field(j, "source", where);
    if (kind == SetKind::kRedteam && !rec.category) {
      throw Error(where + ": red-team records require a 'category'");
    }

    auto explicit_id = detail::optional_string_field(j, "id", where);
    if (explicit_id) {
      if (trim(*explicit_id).empty()) {
        throw Error(where + ": explicit 'id' must be non-empty");
      }
      if (used_ids.count(*explicit_id)) {
        throw Error(where + ": duplicate id '" + *explicit_id + "'");
      }
      rec.id = *explicit_id;
    } else {
      rec.id = detail::disambiguate_id(detail::record_content_id(rec),
                                       used_ids);
    }
    used_ids.insert(rec.id);
    set.records.push_back(std::move(rec));
  }
  if (kind == SetKind::kRedteam && set.records.empty()) {
    throw Error(path.string() + ": red-team prompt set is empty");
  }
  return set;
}

inline void write_prompt_set(const PromptSet& set,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& r : set.records) out << r.to_json().dump() << "\n";
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Deterministic shuffle-then-partition; the test split takes
/// ceil(n * test_fraction) records (computed with a small slack so exact
/// products like 0.2 * 80 do not round up through float error).
inline std::pair<PromptSet, PromptSet> split_train_test(const PromptSet& set,
                                                        double test_fraction,
                                                        std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error("test fraction must lie in (0, 1), got " +
                std::to_string(test_fraction));
  }
  std::vector<std::size_t> order(set.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  deterministic_shuffle(order, rng);

  const double exact = test_fraction * static_cast<double>(order.size());
  const auto test_n = static_cast<std::size_t>(std::ceil(exact - 1e-9));

  PromptSet train{set.name + "-train", set.kind, {}};
  PromptSet test{set.name + "-test", set.kind, {}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < test_n ? test : train).records.push_back(set.records[order[i]]);
  }
  return {std::move(train), std::move(test)};
}

/// Samples n safety records without replacement and inserts each at a
/// uniformly random position among the task records. Every output record
/// carries a provenance source tag. Conflicting ids coming from the safety
/// set are suffixed deterministically.
inline PromptSet mix_safety_samples(const PromptSet& task_set,
                                    const PromptSet& safety_set,
                                    std::size_t n, std::uint64_t seed) {
  if (safety_set.kind != SetKind::kSafetyRefusals) {
    throw Error("safety set must have kind safety_refusals, got " +
                std::string(set_kind_name(safety_set.kind)));
  }
  if (n > safety_set.records.size()) {
    throw Error("cannot sample " + std::to_string(n) +
                " safety records from a pool of " +
                std::to_string(safety_set.records.size()));
  }

  PromptSet out{task_set.name + "-mixed", task_set.kind, task_set.records};
  std::set<std::string> used_ids;
  for (auto& r : out.records) {
    r.source = "task";
    used_ids.insert(r.id);
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool(safety_set.records.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  deterministic_shuffle(pool, rng);

  for (std::size_t i = 0; i < n; ++i) {
    QaRecord rec = safety_set.records[pool[i]];
    rec.source = "safety";
    rec.id = detail::disambiguate_id(rec.id, used_ids);
    used_ids.insert(rec.id);
    const std::size_t pos = uniform_index(rng, out.records.size() + 1);
    out.records.insert(out.records.begin() + static_cast<std::ptrdiff_t>(pos),
                       std::move(rec));
  }
  return out;
}

}  // namespace safekit
