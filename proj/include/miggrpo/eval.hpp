// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "miggrpo/parallel.hpp"
#include "miggrpo/policy.hpp"
#include "miggrpo/taskgen.hpp"

namespace miggrpo {

struct TaskResult {
  std::string task_id;
  std::string subset;
  std::string domain;
  double iou = 0.0;  // 0 when no box, wrong image, or missing
  bool correct = false;
  bool well_formed = false;
  bool missing = false;
};

struct AccResult {
  std::vector<TaskResult> per_task;  // task order
  double accuracy = 0.0;
  std::vector<std::string> missing;
};

/// Acc@IoU with an inclusive threshold: correct iff the prediction holds a
/// valid box on the truth image with IoU >= threshold. Tasks without a
/// prediction count as incorrect and are listed in `missing`.
inline AccResult acc_at_iou(const std::unordered_map<std::string, ParsedResponse>& predictions,
                            std::span<const GroundingTask> tasks, double threshold = 0.5) {
  AccResult out;
  int correct = 0;
  for (const auto& t : tasks) {
    TaskResult r{t.task_id, t.subset_tag, t.domain_tag, 0.0, false, false, false};
    const auto it = predictions.find(t.task_id);
    if (it == predictions.end()) {
      r.missing = true;
      out.missing.push_back(t.task_id);
    } else {
      const ParsedResponse& p = it->second;
      r.well_formed = p.well_formed;
      if (p.answer_bbox && p.answer_image_index && *p.answer_image_index == t.truth_image) {
        r.iou = iou(*p.answer_bbox, t.truth_bbox);
        r.correct = r.iou >= threshold;
      }
    }
    correct += r.correct ? 1 : 0;
    out.per_task.push_back(std::move(r));
  }
  out.accuracy = tasks.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(tasks.size());
  return out;
}

struct Prediction {
  std::string text;
  ParsedResponse parsed;
};

/// Greedy (argmax) decode of every task.
inline std::unordered_map<std::string, Prediction> greedy_predictions(const PolicyParams& model,
                                                                      std::span<const GroundingTask> tasks,
                                                                      const Vocabulary& vocab, int workers = 1) {
  std::vector<Prediction> preds(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    preds[i].text = render(greedy_decode(model, tasks[i].query_features), vocab);
    preds[i].parsed = parse(preds[i].text, tasks[i].parse_context());
  });
  std::unordered_map<std::string, Prediction> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) out.emplace(tasks[i].task_id, std::move(preds[i]));
  return out;
}

inline std::unordered_map<std::string, ParsedResponse> parsed_only(const std::unordered_map<std::string, Prediction>& p) {
  std::unordered_map<std::string, ParsedResponse> out;
  for (const auto& [id, pred] : p) out.emplace(id, pred.parsed);
  return out;
}

struct SubsetScore {
  int count = 0;
  int correct = 0;
  double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / count; }
};

struct EvalReport {
  std::map<std::string, SubsetScore> per_subset;  // ordered by subset name
  std::map<std::string, std::vector<std::string>> domain_subsets;
  double macro_average = 0.0;
  std::optional<double> in_domain_average;
  std::optional<double> out_of_domain_average;
  double overall_accuracy = 0.0;
  double format_rate = 0.0;
  double mean_iou = 0.0;
  int task_count = 0;
  std::vector<std::string> missing;
};

inline constexpr const char* kUntagged = "untagged";

/// Per-subset accuracies with unweighted (macro) averages overall and per
/// domain. Empty or unrecognized tags go to the "untagged" bucket.
inline EvalReport aggregate_report(std::span<const TaskResult> results) {
  EvalReport rep;
  int correct = 0;
  int formatted = 0;
  std::vector<double> ious;
  for (const auto& r : results) {
    const std::string subset = r.subset.empty() ? kUntagged : r.subset;
    const std::string domain = (r.domain == "in_domain" || r.domain == "out_of_domain") ? r.domain : kUntagged;
    auto& s = rep.per_subset[subset];
    ++s.count;
    s.correct += r.correct ? 1 : 0;
    auto& ds = rep.domain_subsets[domain];
    if (std::find(ds.begin(), ds.end(), subset) == ds.end()) ds.push_back(subset);
    correct += r.correct ? 1 : 0;
    formatted += r.well_formed ? 1 : 0;
    ious.push_back(r.iou);
    if (r.missing) rep.missing.push_back(r.task_id);
  }
  rep.task_count = static_cast<int>(results.size());
  if (!results.empty()) {
    const double n = static_cast<double>(results.size());
    rep.overall_accuracy = correct / n;
    rep.format_rate = formatted / n;
    // Summed in value order so the result does not depend on task order.
    std::sort(ious.begin(), ious.end());
    rep.mean_iou = std::accumulate(ious.begin(), ious.end(), 0.0) / n;
  }
  double macro = 0.0;
  for (const auto& [name, s] : rep.per_subset) macro += s.accuracy();
  if (!rep.per_subset.empty()) rep.macro_average = macro / static_cast<double>(rep.per_subset.size());
  auto domain_avg = [&](const std::string& d) -> std::optional<double> {
    const auto it = rep.domain_subsets.find(d);
    if (it == rep.domain_subsets.end()) return std::nullopt;
    double sum = 0.0;
    for (const auto& s : it->second) sum += rep.per_subset.at(s).accuracy();
    return sum / static_cast<double>(it->second.size());
  };
  for (auto& [d, subsets] : rep.domain_subsets) std::sort(subsets.begin(), subsets.end());
  rep.in_domain_average = domain_avg("in_domain");
  rep.out_of_domain_average = domain_avg("out_of_domain");
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json subsets = nlohmann::json::object();
  for (const auto& [name, s] : r.per_subset) {
    subsets[name] = {{"count", s.count}, {"correct", s.correct}, {"accuracy", s.accuracy()}};
  }
  nlohmann::json domains = nlohmann::json::object();
  for (const auto& [name, list] : r.domain_subsets) domains[name] = list;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"task_count", r.task_count},
          {"overall_accuracy", r.overall_accuracy},
          {"macro_average", r.macro_average},
          {"in_domain_average", opt(r.in_domain_average)},
          {"out_of_domain_average", opt(r.out_of_domain_average)},
          {"format_rate", r.format_rate},
          {"mean_iou", r.mean_iou},
          {"per_subset", subsets},
          {"domain_subsets", domains},
          {"missing", r.missing}};
}

/// Schema check for an evaluation report; returns violations.
inline std::vector<std::string> validate_report_json(const nlohmann::json& j) {
  std::vector<std::string> errs;
  if (!j.is_object()) return {"report is not a JSON object"};
  for (const char* k : {"overall_accuracy", "macro_average", "format_rate", "mean_iou"}) {
    if (!j.contains(k) || !j[k].is_number() || j[k].get<double>() < 0.0 || j[k].get<double>() > 1.0) {
      errs.push_back(std::string("'") + k + "' must be a number in [0, 1]");
    }
  }
  for (const char* k : {"in_domain_average", "out_of_domain_average"}) {
    if (!j.contains(k) || !(j[k].is_null() || j[k].is_number())) errs.push_back(std::string("'") + k + "' must be a number or null");
  }
  if (!j.contains("task_count") || !j["task_count"].is_number_integer()) errs.emplace_back("'task_count' must be an integer");
  if (!j.contains("per_subset") || !j["per_subset"].is_object()) {
    errs.emplace_back("'per_subset' must be an object");
  } else {
    for (const auto& [name, s] : j["per_subset"].items()) {
      if (!s.contains("count") || !s.contains("correct") || !s.contains("accuracy")) {
        errs.push_back("subset '" + name + "' needs count, correct, accuracy");
      }
    }
  }
  if (!j.contains("missing") || !j["missing"].is_array()) errs.emplace_back("'missing' must be an array");
  return errs;
}

/// task_id,subset,domain,iou,correct
inline std::string per_task_csv(std::span<const TaskResult> results) {
  std::ostringstream os;
  os << "task_id,subset,domain,iou,correct\n";
  for (const auto& r : results) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", r.iou);
    os << r.task_id << ',' << r.subset << ',' << r.domain << ',' << buf << ',' << (r.correct ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace miggrpo
