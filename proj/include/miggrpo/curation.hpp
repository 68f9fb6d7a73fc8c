// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "miggrpo/errors.hpp"
#include "miggrpo/parallel.hpp"
#include "miggrpo/policy.hpp"
#include "miggrpo/taskgen.hpp"

namespace miggrpo {

struct SubsetCounts {
  int kept = 0;
  int dropped = 0;
};

struct FilterStats {
  int total = 0;
  int kept = 0;
  std::map<std::string, SubsetCounts> per_subset;

  double kept_fraction() const { return total == 0 ? 0.0 : static_cast<double>(kept) / total; }
};

inline nlohmann::json to_json(const FilterStats& s) {
  nlohmann::json subsets = nlohmann::json::object();
  for (const auto& [name, c] : s.per_subset) subsets[name] = {{"kept", c.kept}, {"dropped", c.dropped}};
  return {{"total", s.total}, {"kept", s.kept}, {"dropped", s.total - s.kept}, {"kept_fraction", s.kept_fraction()},
          {"per_subset", subsets}};
}

using TaskIndex = std::unordered_map<std::string, const GroundingTask*>;

inline TaskIndex index_tasks(std::span<const GroundingTask> tasks) {
  TaskIndex idx;
  for (const auto& t : tasks) idx.emplace(t.task_id, &t);
  return idx;
}

struct ConsistencyResult {
  std::vector<std::string> kept_ids;  // in sample order
  FilterStats stats;
};

/// Keeps a teacher sample iff all four responses are well formed, on the
/// truth image, and reach IoU >= iou_threshold against the annotation.
inline ConsistencyResult consistency_filter(std::span<const TeacherSample> samples, std::span<const GroundingTask> tasks,
                                            double iou_threshold = 0.5) {
  const TaskIndex idx = index_tasks(tasks);
  std::string unknown;
  for (const auto& s : samples) {
    if (!idx.contains(s.task_id)) unknown += (unknown.empty() ? "" : ", ") + s.task_id;
  }
  if (!unknown.empty()) throw DataError("teacher samples reference unknown tasks: " + unknown);

  ConsistencyResult out;
  for (const auto& s : samples) {
    if (s.responses.size() != kTeacherResponses) {
      throw DataError("teacher sample " + s.task_id + " must carry exactly 4 responses");
    }
    const GroundingTask& t = *idx.at(s.task_id);
    const auto ctx = t.parse_context();
    bool keep = true;
    for (const auto& r : s.responses) keep = keep && response_correct(parse(r, ctx), t, iou_threshold);
    auto& c = out.stats.per_subset[t.subset_tag];
    ++out.stats.total;
    if (keep) {
      ++out.stats.kept;
      ++c.kept;
      out.kept_ids.push_back(s.task_id);
    } else {
      ++c.dropped;
    }
  }
  return out;
}

struct RejectionLogEntry {
  std::string task_id;
  int prediction = 0;
  std::string text;
  bool correct = false;
};

inline nlohmann::json to_json(const RejectionLogEntry& e) {
  return {{"task_id", e.task_id}, {"prediction", e.prediction}, {"text", e.text}, {"correct", e.correct}};
}

struct RejectionConfig {
  int num_predictions = 8;
  double temperature = 0.7;
  double iou_threshold = 0.5;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RejectionResult {
  std::vector<std::string> kept_ids;  // in task order
  FilterStats stats;
  std::vector<int> correct_histogram;  // index: number of correct predictions
  std::vector<RejectionLogEntry> log;  // task order, then prediction order
};

/// Per-task seed of the k-th rejection-sampling prediction.
inline std::uint64_t rejection_seed(std::uint64_t seed, const std::string& task_id, int k) {
  return derive_seed(seed, "rejection", task_id, static_cast<std::uint64_t>(k));
}

/// Drops tasks the model gets uniformly right or uniformly wrong across
/// num_predictions samples; keeps 1 <= correct <= num_predictions - 1.
inline RejectionResult rejection_sample(const PolicyParams& model, std::span<const GroundingTask> tasks,
                                        const RejectionConfig& cfg, const Vocabulary& vocab) {
  if (cfg.num_predictions < 2) throw std::invalid_argument("rejection sampling needs at least 2 predictions");
  const auto n = static_cast<std::size_t>(cfg.num_predictions);
  std::vector<std::vector<RejectionLogEntry>> per_task(tasks.size());
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    const auto ctx = t.parse_context();
    for (int k = 0; k < cfg.num_predictions; ++k) {
      const Rollout r = sample(model, t.query_features, cfg.temperature, rejection_seed(cfg.seed, t.task_id, k), vocab);
      per_task[i].push_back({t.task_id, k, r.rendered_text, response_correct(parse(r.rendered_text, ctx), t, cfg.iou_threshold)});
    }
  });

  RejectionResult out;
  out.correct_histogram.assign(n + 1, 0);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    int correct = 0;
    for (const auto& e : per_task[i]) correct += e.correct ? 1 : 0;
    ++out.correct_histogram[static_cast<std::size_t>(correct)];
    const bool keep = correct >= 1 && correct <= cfg.num_predictions - 1;
    auto& c = out.stats.per_subset[tasks[i].subset_tag];
    ++out.stats.total;
    if (keep) {
      ++out.stats.kept;
      ++c.kept;
      out.kept_ids.push_back(tasks[i].task_id);
    } else {
      ++c.dropped;
    }
    out.log.insert(out.log.end(), per_task[i].begin(), per_task[i].end());
  }
  return out;
}

inline nlohmann::json to_json(const RejectionResult& r) {
  nlohmann::json j = to_json(r.stats);
  j["correct_histogram"] = r.correct_histogram;
  return j;
}

}  // namespace miggrpo
