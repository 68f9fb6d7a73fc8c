// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "miggrpo/errors.hpp"
#include "miggrpo/parallel.hpp"
#include "miggrpo/policy.hpp"
#include "miggrpo/reward.hpp"
#include "miggrpo/taskgen.hpp"

namespace miggrpo {

struct GrpoConfig {
  int group_size = 8;
  double learning_rate = 5e-5;
  int batch_size = 2;
  int grad_accum_steps = 4;
  double beta_kl = 0.001;
  double clip_epsilon = 0.2;
  double temperature = 0.7;
  double epsilon_std = 1e-8;
  int max_iterations = 0;
  std::uint64_t seed = 0;
  RewardWeights reward;
  int workers = 1;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("GRPO group size must be >= 2");
    if (beta_kl < 0.0) throw std::invalid_argument("beta_kl must be >= 0");
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw std::invalid_argument("clip_epsilon must lie in (0, 1)");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (batch_size < 1 || grad_accum_steps < 1 || max_iterations < 0) {
      throw std::invalid_argument("batch_size, grad_accum_steps must be >= 1 and max_iterations >= 0");
    }
    reward.validate();
  }
};

/// Group-standardized rewards using the population standard deviation;
/// all zeros when the group's spread is below epsilon_std.
inline std::vector<double> compute_advantages(std::span<const double> rewards, double epsilon_std = 1e-8) {
  if (rewards.size() < 2) throw std::invalid_argument("advantages need a group of at least 2");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < epsilon_std) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

struct GroupBatch {
  std::string task_id;
  std::vector<double> features;
  std::vector<Rollout> rollouts;
  std::vector<double> rewards;
  std::vector<double> advantages;

  bool zero_variance() const {
    return std::all_of(advantages.begin(), advantages.end(), [](double a) { return a == 0.0; });
  }
};

struct GrpoLoss {
  double loss = 0.0;
  double surrogate = 0.0;  // mean clipped surrogate (to be maximized)
  double kl = 0.0;         // mean exact KL to the reference over the batch features
  double clip_fraction = 0.0;
  PolicyParams gradient;
};

/// Clipped, KL-penalized GRPO loss over fixed rollouts:
///   -(1/N) sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) + beta * mean_b KL(theta || ref)
/// with rho_i = pi_theta(o_i) / pi_old(o_i), and its analytic gradient.
inline GrpoLoss grpo_loss(const PolicyParams& theta, const PolicyParams& theta_old, const PolicyParams& theta_ref,
                          std::span<const GroupBatch> batches, const GrpoConfig& cfg) {
  GrpoLoss out;
  out.gradient = theta.zeros_like();
  std::size_t n_rollouts = 0;
  for (const auto& b : batches) n_rollouts += b.rollouts.size();
  if (n_rollouts == 0) throw std::invalid_argument("GRPO loss over an empty batch");
  const double inv_n = 1.0 / static_cast<double>(n_rollouts);
  int clipped = 0;

  for (const auto& b : batches) {
    if (b.advantages.size() != b.rollouts.size()) throw std::invalid_argument("advantages and rollouts differ in size");
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
      const auto& tokens = b.rollouts[i].tokens;
      const double gap = sequence_logprob(theta, b.features, tokens) - sequence_logprob(theta_old, b.features, tokens);
      if (!std::isfinite(gap) || std::abs(gap) > 50.0) {
        throw NumericError("importance ratio out of range for rollout " + b.task_id + "#" + std::to_string(i) +
                           " (log-ratio " + std::to_string(gap) + ")");
      }
      const double rho = std::exp(gap);
      const double a = b.advantages[i];
      const double unclipped = rho * a;
      const double clipped_obj = std::clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
      if (unclipped <= clipped_obj) {
        out.surrogate += unclipped * inv_n;
        if (a != 0.0) accumulate_logprob_gradient(theta, b.features, tokens, -inv_n * a * rho, out.gradient);
      } else {
        out.surrogate += clipped_obj * inv_n;
        ++clipped;
      }
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batches.size());
  for (const auto& b : batches) {
    out.kl += kl_divergence(theta, theta_ref, b.features) * inv_b;
    if (cfg.beta_kl > 0.0) accumulate_kl_gradient(theta, theta_ref, b.features, cfg.beta_kl * inv_b, out.gradient);
  }
  out.loss = -out.surrogate + cfg.beta_kl * out.kl;
  out.clip_fraction = static_cast<double>(clipped) * inv_n;
  return out;
}

struct IterationLog {
  int iteration = 0;
  double mean_reward = 0.0;
  double format_rate = 0.0;
  double acc_at_05_on_batch = 0.0;
  double kl = 0.0;
  double loss = 0.0;
  double mean_abs_advantage = 0.0;
  double zero_variance_fraction = 0.0;
  double clip_fraction = 0.0;
};

inline nlohmann::json to_json(const IterationLog& l) {
  return {{"iteration", l.iteration},
          {"mean_reward", l.mean_reward},
          {"format_rate", l.format_rate},
          {"acc_at_05_on_batch", l.acc_at_05_on_batch},
          {"kl", l.kl},
          {"loss", l.loss},
          {"mean_abs_advantage", l.mean_abs_advantage},
          {"zero_variance_fraction", l.zero_variance_fraction},
          {"clip_fraction", l.clip_fraction}};
}

/// Seed of rollout `g` for `task_id` at iteration `it`.
inline std::uint64_t rollout_seed(std::uint64_t seed, int it, const std::string& task_id, int g) {
  return derive_seed(seed, "grpo-rollout", static_cast<std::uint64_t>(it), task_id, static_cast<std::uint64_t>(g));
}

/// Samples and scores one group from `policy`.
inline GroupBatch collect_group(const PolicyParams& policy, const GroundingTask& task, int iteration,
                                const GrpoConfig& cfg, const Vocabulary& vocab) {
  GroupBatch b;
  b.task_id = task.task_id;
  b.features = task.query_features;
  const auto ctx = task.parse_context();
  for (int g = 0; g < cfg.group_size; ++g) {
    Rollout r = sample(policy, task.query_features, cfg.temperature, rollout_seed(cfg.seed, iteration, task.task_id, g), vocab);
    const ParsedResponse parsed = parse(r.rendered_text, ctx);
    r.reward = total_reward(parsed, r.rendered_text, task.truth_bbox, task.truth_image, cfg.reward, ctx);
    b.rewards.push_back(r.reward->r_total);
    b.rollouts.push_back(std::move(r));
  }
  b.advantages = compute_advantages(b.rewards, cfg.epsilon_std);
  return b;
}

/// Deterministic task schedule: consecutive slices of per-epoch seeded
/// permutations, addressable by iteration so resumed runs line up.
class TaskSchedule {
 public:
  TaskSchedule(std::size_t task_count, std::uint64_t seed) : n_(task_count), seed_(seed) {}

  std::size_t at(std::uint64_t global_index) {
    const std::uint64_t epoch = global_index / n_;
    auto it = perms_.find(epoch);
    if (it == perms_.end()) {
      std::vector<std::size_t> p(n_);
      std::iota(p.begin(), p.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, "grpo-epoch", epoch));
      rng.shuffle(p.begin(), p.end());
      it = perms_.emplace(epoch, std::move(p)).first;
    }
    return it->second[global_index % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::map<std::uint64_t, std::vector<std::size_t>> perms_;
};

struct GrpoResult {
  PolicyParams params;
  std::vector<IterationLog> log;
};

/// Called after each update with the iteration's log, the updated
/// parameters, and the groups that produced the update.
using IterationCallback = std::function<void(const IterationLog&, const PolicyParams&, std::span<const GroupBatch>)>;

/// GRPO loop. Each iteration snapshots theta_old, samples groups for
/// batch_size * grad_accum_steps tasks, accumulates the micro-batch
/// gradients, and applies one plain gradient step. `start_iteration` resumes
/// a run whose parameters after that many iterations are `initial`.
inline GrpoResult grpo_train(const PolicyParams& initial, const PolicyParams& reference,
                             std::span<const GroundingTask> tasks, const GrpoConfig& cfg, const Vocabulary& vocab,
                             int start_iteration = 0, const IterationCallback& on_iteration = {}) {
  cfg.validate();
  GrpoResult out{initial, {}};
  if (cfg.max_iterations <= start_iteration) return out;
  if (tasks.empty()) throw DataError("GRPO needs at least one task");

  TaskSchedule schedule(tasks.size(), cfg.seed);
  const int per_iter = cfg.batch_size * cfg.grad_accum_steps;
  for (int it = start_iteration; it < cfg.max_iterations; ++it) {
    const PolicyParams theta_old = out.params;
    std::vector<std::size_t> picks(static_cast<std::size_t>(per_iter));
    for (std::size_t j = 0; j < picks.size(); ++j) {
      picks[j] = schedule.at(static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(per_iter) + j);
    }
    std::vector<GroupBatch> groups(picks.size());
    parallel_for(groups.size(), cfg.workers,
                 [&](std::size_t j) { groups[j] = collect_group(theta_old, tasks[picks[j]], it, cfg, vocab); });

    PolicyParams grad = out.params.zeros_like();
    IterationLog log;
    log.iteration = it;
    for (int m = 0; m < cfg.grad_accum_steps; ++m) {
      const std::span<const GroupBatch> micro(groups.data() + m * cfg.batch_size, static_cast<std::size_t>(cfg.batch_size));
      const GrpoLoss l = grpo_loss(out.params, theta_old, reference, micro, cfg);
      axpy(grad, 1.0 / cfg.grad_accum_steps, l.gradient);
      log.loss += l.loss / cfg.grad_accum_steps;
      log.kl += l.kl / cfg.grad_accum_steps;
      log.clip_fraction += l.clip_fraction / cfg.grad_accum_steps;
    }
    if (!std::isfinite(log.loss)) throw NumericError("non-finite GRPO loss at iteration " + std::to_string(it));

    double rollouts = 0.0;
    for (const auto& g : groups) {
      for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
        const auto& r = *g.rollouts[i].reward;
        log.mean_reward += r.r_total;
        log.format_rate += r.r_format;
        log.acc_at_05_on_batch += r.r_acc >= 0.5 ? 1.0 : 0.0;
        log.mean_abs_advantage += std::abs(g.advantages[i]);
        rollouts += 1.0;
      }
      log.zero_variance_fraction += g.zero_variance() ? 1.0 : 0.0;
    }
    log.mean_reward /= rollouts;
    log.format_rate /= rollouts;
    log.acc_at_05_on_batch /= rollouts;
    log.mean_abs_advantage /= rollouts;
    log.zero_variance_fraction /= static_cast<double>(groups.size());

    axpy(out.params, -cfg.learning_rate, grad);
    if (!all_finite(out.params)) throw NumericError("non-finite parameters after GRPO iteration " + std::to_string(it));
    out.log.push_back(log);
    if (on_iteration) on_iteration(log, out.params, groups);
  }
  return out;
}

/// Per-slot KL(theta || ref) averaged over tasks.
inline double mean_slot_kl(const PolicyParams& theta, const PolicyParams& ref, std::span<const GroundingTask> tasks) {
  if (tasks.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : tasks) sum += kl_divergence(theta, ref, t.query_features);
  return sum / (static_cast<double>(tasks.size()) * theta.dims.slots);
}

}  // namespace miggrpo
