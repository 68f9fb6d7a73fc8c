// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "miggrpo/checkpoint.hpp"
#include "miggrpo/config.hpp"
#include "miggrpo/curation.hpp"
#include "miggrpo/eval.hpp"
#include "miggrpo/grpo.hpp"
#include "miggrpo/policy.hpp"
#include "miggrpo/sft.hpp"
#include "miggrpo/taskgen.hpp"

namespace miggrpo {

struct Splits {
  std::vector<GroundingTask> train;
  std::vector<GroundingTask> heldout;
};

struct EvalOutcome {
  AccResult acc;
  EvalReport report;
};

/// Typed access to one effective configuration plus the stage operations the
/// CLI and the experiment suites share. Every stage draws its randomness from
/// a seed named after the stage.
class Pipeline {
 public:
  explicit Pipeline(nlohmann::json cfg) : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), vocab_(vocab_config()) {}

  const nlohmann::json& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::uint64_t root_seed() const { return cfg_.at("seed").get<std::uint64_t>(); }
  int workers() const { return cfg_.value("workers", 1); }

  nlohmann::json provenance_json() const { return {{"config_hash", hash_}, {"seed", root_seed()}}; }
  Provenance provenance(const std::string& stage, std::uint64_t step) const { return {root_seed(), step, stage, hash_}; }

  TaskGenConfig taskgen_config() const {
    const auto& j = cfg_.at("data").at("taskgen");
    TaskGenConfig c;
    c.extent = j.at("extent").get<int>();
    c.bins = j.at("bins").get<int>();
    c.max_images = j.at("max_images").get<int>();
    c.min_side = j.at("min_side").get<int>();
    c.max_side = j.at("max_side").get<int>();
    c.max_objects = j.at("max_objects").get<int>();
    c.attention_sharpness = j.at("attention_sharpness").get<double>();
    return c;
  }

  TaskMix train_mix() const {
    const auto& m = cfg_.at("data").at("mix");
    return TaskMix{m.at("common_object").get<double>(), m.at("referring").get<double>(), m.at("region").get<double>(),
                   m.at("difference").get<double>(), 0.0};
  }

  TaskMix heldout_mix() const {
    const double ood = cfg_.at("data").at("heldout_out_of_domain").get<double>();
    TaskMix m = train_mix();
    for (QueryKind k : kAllQueryKinds) m.share(k) *= 1.0 - ood;
    m.out_of_domain = ood;
    return m;
  }

  PolicyDims policy_dims() const { return {vocab_.size(), kFeatureDim, cfg_.at("policy").at("slots").get<int>()}; }

  TeacherNoise teacher_noise() const {
    const auto& t = cfg_.at("teacher");
    return {t.at("p_box").get<double>(), t.at("p_fmt").get<double>()};
  }

  RewardWeights reward_weights() const {
    const auto& r = cfg_.at("reward");
    return {r.at("lambda_acc").get<double>(), r.at("lambda_format").get<double>()};
  }

  SftConfig sft_config() const {
    const auto& s = cfg_.at("sft");
    SftConfig c;
    c.learning_rate = s.at("learning_rate").get<double>();
    c.epochs = s.at("epochs").get<int>();
    c.batch_size = s.at("batch_size").get<int>();
    c.adapter_only = s.at("adapter_only").get<bool>();
    c.seed = stage_seed(cfg_, "sft");
    c.workers = workers();
    return c;
  }

  RejectionConfig rejection_config() const {
    const auto& r = cfg_.at("rejection");
    RejectionConfig c;
    c.num_predictions = r.at("num_predictions").get<int>();
    c.temperature = r.at("temperature").get<double>();
    c.iou_threshold = r.at("iou_threshold").get<double>();
    c.seed = stage_seed(cfg_, "rejection");
    c.workers = workers();
    return c;
  }

  GrpoConfig grpo_config() const {
    const auto& g = cfg_.at("grpo");
    GrpoConfig c;
    c.group_size = g.at("group_size").get<int>();
    c.learning_rate = g.at("learning_rate").get<double>();
    c.batch_size = g.at("batch_size").get<int>();
    c.grad_accum_steps = g.at("grad_accum_steps").get<int>();
    c.beta_kl = g.at("beta_kl").get<double>();
    c.clip_epsilon = g.at("clip_epsilon").get<double>();
    c.temperature = g.at("temperature").get<double>();
    c.max_iterations = g.at("max_iterations").get<int>();
    c.seed = stage_seed(cfg_, "grpo");
    c.reward = reward_weights();
    c.workers = workers();
    return c;
  }

  double eval_threshold() const { return cfg_.at("eval").at("iou_threshold").get<double>(); }

  // -- stages ---------------------------------------------------------------

  Splits generate() const {
    const int count = cfg_.at("data").at("count").get<int>();
    const double frac = cfg_.at("data").at("heldout_fraction").get<double>();
    const int heldout = static_cast<int>(std::lround(frac * count));
    if (count < 2 || heldout < 1 || heldout >= count) throw DataError("data split leaves an empty train or heldout set");
    const std::uint64_t seed = stage_seed(cfg_, "gen");
    const auto tg = taskgen_config();
    return {generate_tasks(seed, count - heldout, train_mix(), tg, "train"),
            generate_tasks(seed, heldout, heldout_mix(), tg, "heldout")};
  }

  std::vector<TeacherSample> teach(std::span<const GroundingTask> tasks) const {
    std::vector<TeacherSample> out;
    const auto seed = stage_seed(cfg_, "teacher");
    const auto noise = teacher_noise();
    for (const auto& t : tasks) out.push_back(teacher_respond(t, noise, seed, vocab_));
    return out;
  }

  /// Every response of every kept sample becomes one SFT example.
  std::vector<SftExample> sft_dataset(std::span<const GroundingTask> tasks, std::span<const TeacherSample> samples,
                                      std::span<const std::string> kept_ids) const {
    const TaskIndex idx = index_tasks(tasks);
    const std::unordered_set<std::string> kept(kept_ids.begin(), kept_ids.end());
    std::vector<SftExample> out;
    for (const auto& s : samples) {
      if (!kept.contains(s.task_id)) continue;
      const auto it = idx.find(s.task_id);
      if (it == idx.end()) throw DataError("CoT sample references unknown task " + s.task_id);
      for (const auto& text : s.responses) {
        auto tokens = tokenize(text, vocab_);
        if (!tokens) throw DataError("CoT response for " + s.task_id + " is not tokenizable: " + text);
        out.push_back({s.task_id, it->second->query_features, std::move(*tokens)});
      }
    }
    return out;
  }

  PolicyParams base_policy() const {
    return PolicyParams::random(policy_dims(), stage_seed(cfg_, "policy"), cfg_.at("policy").at("init_scale").get<double>());
  }

  struct SftOutcome {
    PolicyParams trained;  // with adapter when adapter_only
    PolicyParams merged;
    std::vector<double> loss_trace;
  };

  SftOutcome train_sft(const PolicyParams& base, std::span<const SftExample> data) const {
    const SftConfig sc = sft_config();
    PolicyParams start = base;
    if (sc.adapter_only) {
      const auto& p = cfg_.at("policy");
      attach_adapter(start, p.at("lora_rank").get<int>(), stage_seed(cfg_, "lora"), p.at("lora_init_scale").get<double>());
    }
    SftResult r = sft_train(std::move(start), data, sc);
    PolicyParams merged = merge_adapter(r.params).params;
    return {std::move(r.params), std::move(merged), std::move(r.loss_trace)};
  }

  RejectionResult rejection(const PolicyParams& model, std::span<const GroundingTask> tasks) const {
    return rejection_sample(model, tasks, rejection_config(), vocab_);
  }

  GrpoResult train_rl(const PolicyParams& initial, const PolicyParams& reference, std::span<const GroundingTask> tasks,
                      int start_iteration = 0, const IterationCallback& cb = {}) const {
    return grpo_train(initial, reference, tasks, grpo_config(), vocab_, start_iteration, cb);
  }

  EvalOutcome evaluate(const PolicyParams& model, std::span<const GroundingTask> tasks) const {
    const auto preds = greedy_predictions(model, tasks, vocab_, workers());
    EvalOutcome out;
    out.acc = acc_at_iou(parsed_only(preds), tasks, eval_threshold());
    out.report = aggregate_report(out.acc.per_task);
    return out;
  }

  /// Fraction of tasks whose greedy decode is well formed.
  double greedy_format_rate(const PolicyParams& model, std::span<const GroundingTask> tasks) const {
    if (tasks.empty()) return 0.0;
    int ok = 0;
    for (const auto& t : tasks) {
      ok += format_reward(render(greedy_decode(model, t.query_features), vocab_), t.parse_context());
    }
    return static_cast<double>(ok) / static_cast<double>(tasks.size());
  }

 private:
  Vocabulary::Config vocab_config() const {
    const auto& tg = cfg_.at("data").at("taskgen");
    return {tg.at("extent").get<int>(), tg.at("bins").get<int>(), tg.at("max_images").get<int>(),
            cfg_.at("policy").at("filler_tokens").get<int>()};
  }

  nlohmann::json cfg_;
  std::string hash_;
  Vocabulary vocab_;
};

inline std::vector<GroundingTask> select_tasks(std::span<const GroundingTask> tasks, std::span<const std::string> ids) {
  const std::unordered_set<std::string> keep(ids.begin(), ids.end());
  std::vector<GroundingTask> out;
  for (const auto& t : tasks) {
    if (keep.contains(t.task_id)) out.push_back(t);
  }
  return out;
}

/// Everything one end-to-end run produces.
struct FullRun {
  Splits splits;
  std::vector<TeacherSample> teacher;
  ConsistencyResult cot;
  std::vector<SftExample> sft_data;
  Pipeline::SftOutcome sft;
  RejectionResult rs;
  std::vector<GroundingTask> rl_tasks;
  GrpoResult rl;
  PolicyParams base;
};

struct FullRunOptions {
  bool rejection_sampling = true;
  bool cold_start = true;
};

inline FullRun run_full_pipeline(const Pipeline& p, FullRunOptions opts = {}) {
  FullRun r;
  r.splits = p.generate();
  r.base = p.base_policy();
  PolicyParams init = r.base;
  if (opts.cold_start) {
    r.teacher = p.teach(r.splits.train);
    r.cot = consistency_filter(r.teacher, r.splits.train, 0.5);
    r.sft_data = p.sft_dataset(r.splits.train, r.teacher, r.cot.kept_ids);
    r.sft = p.train_sft(r.base, r.sft_data);
    init = r.sft.merged;
  }
  if (opts.rejection_sampling) {
    r.rs = p.rejection(init, r.splits.train);
    r.rl_tasks = select_tasks(r.splits.train, r.rs.kept_ids);
    if (r.rl_tasks.empty()) {
      throw DataError("rejection sampling kept no tasks (every task was solved by all or none of the predictions)");
    }
  } else {
    r.rl_tasks = r.splits.train;
  }
  r.rl = p.train_rl(init, init, r.rl_tasks);
  return r;
}

}  // namespace miggrpo
