// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "miggrpo/grpo.hpp"
#include "test_support.hpp"

namespace miggrpo {
namespace {

using testing::random_features;
using testing::random_params;

const Vocabulary& vocab() {
  static const Vocabulary v;
  return v;
}

const std::vector<GroundingTask>& tasks() {
  static const auto t = generate_tasks(1618, 96, TaskMix{});
  return t;
}

const PolicyParams& stage1() {
  static const PolicyParams p = testing::stage1_like_model(tasks(), vocab(), 30, 21);
  return p;
}

double population_std(const std::vector<double>& a) {
  double mean = 0.0;
  for (double x : a) mean += x;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(a.size()));
}

TEST(Advantages, OneHotGroup) {
  const std::vector<double> r{1, 0, 0, 0};
  const auto a = compute_advantages(r);
  ASSERT_EQ(a.size(), 4U);
  EXPECT_NEAR(a[0], 1.732, 1e-3);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(a[static_cast<std::size_t>(i)], -0.577, 1e-3);
  EXPECT_NEAR(a[0], std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(a[1], -1.0 / std::sqrt(3.0), 1e-12);
}

TEST(Advantages, ConstantGroupIsAllZero) {
  const std::vector<double> r(8, 0.7);
  for (double a : compute_advantages(r)) EXPECT_EQ(a, 0.0);
  const std::vector<double> tiny{0.5, 0.5 + 1e-10, 0.5, 0.5};
  for (double a : compute_advantages(tiny)) EXPECT_EQ(a, 0.0);
}

TEST(Advantages, RandomGroupsAreStandardized) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(8);
    for (double& x : r) x = trial % 2 == 0 ? 1.5 * rng.uniform() : static_cast<double>(rng.uniform_int(0, 1));
    if (population_std(r) < 1e-8) continue;
    const auto a = compute_advantages(r);
    double mean = 0.0;
    for (double x : a) mean += x / 8.0;
    EXPECT_LE(std::abs(mean), 1e-12);
    EXPECT_LE(std::abs(population_std(a) - 1.0), 1e-9);
  }
}

TEST(Advantages, NeedsAGroup) {
  const std::vector<double> one{1.0};
  EXPECT_THROW(compute_advantages(one), std::invalid_argument);
}

TEST(GrpoConfig, Validation) {
  GrpoConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.group_size, 8);
  EXPECT_EQ(c.learning_rate, 5e-5);
  EXPECT_EQ(c.batch_size, 2);
  EXPECT_EQ(c.grad_accum_steps, 4);
  EXPECT_EQ(c.beta_kl, 0.001);
  EXPECT_EQ(c.clip_epsilon, 0.2);
  EXPECT_EQ(c.temperature, 0.7);
  auto bad = c;
  bad.group_size = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.beta_kl = -1e-3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.clip_epsilon = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.clip_epsilon = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// Fixed synthetic groups on a small policy, for exact loss checks.
struct LossFixture {
  PolicyDims dims{6, 4, 4};
  PolicyParams old_params = random_params(dims, 2, 0.6, 2);
  PolicyParams ref = random_params(dims, 3, 0.6, 2);
  std::vector<GroupBatch> batches;

  LossFixture() {
    Rng rng(4);
    for (int b = 0; b < 2; ++b) {
      GroupBatch g;
      g.task_id = "task-" + std::to_string(b);
      g.features = random_features(rng, dims.features);
      for (int i = 0; i < 4; ++i) {
        Rollout r;
        const int len = rng.uniform_int(1, dims.slots);
        for (int s = 0; s < len; ++s) r.tokens.push_back(rng.uniform_int(0, dims.vocab - 2));
        if (len < dims.slots && rng.bernoulli(0.7)) r.tokens.push_back(dims.vocab - 1);
        g.rewards.push_back(rng.uniform());
        g.rollouts.push_back(std::move(r));
      }
      g.advantages = compute_advantages(g.rewards);
      batches.push_back(std::move(g));
    }
  }
};

TEST(GrpoLoss, OnPolicyFirstStep) {
  LossFixture fx;
  GrpoConfig cfg;
  cfg.beta_kl = 0.0;
  const auto l = grpo_loss(fx.old_params, fx.old_params, fx.ref, fx.batches, cfg);
  EXPECT_NEAR(l.loss, 0.0, 1e-12);
  EXPECT_EQ(l.clip_fraction, 0.0);

  auto expected = fx.old_params.zeros_like();
  for (const auto& b : fx.batches) {
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
      axpy(expected, -b.advantages[i] / 8.0, logprob_gradient(fx.old_params, b.features, b.rollouts[i].tokens));
    }
  }
  const auto got = flatten(l.gradient);
  const auto want = flatten(expected);
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
}

TEST(GrpoLoss, ZeroAdvantagesGiveZeroGradient) {
  LossFixture fx;
  for (auto& b : fx.batches) std::fill(b.advantages.begin(), b.advantages.end(), 0.0);
  GrpoConfig cfg;
  cfg.beta_kl = 0.0;
  const auto theta = random_params(fx.dims, 5, 0.6, 2);
  const auto l = grpo_loss(theta, fx.old_params, fx.ref, fx.batches, cfg);
  for (double v : flatten(l.gradient)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(l.loss, 0.0);
}

TEST(GrpoLoss, MatchesFiniteDifferencesWithClipAndKl) {
  LossFixture fx;
  GrpoConfig cfg;
  cfg.beta_kl = 0.05;
  cfg.clip_epsilon = 0.2;
  // Move theta off theta_old far enough that some ratios clip.
  auto theta = fx.old_params;
  const auto delta = random_params(fx.dims, 6, 0.08, 2);
  auto flat = flatten(theta);
  const auto d = flatten(delta);
  for (std::size_t k = 0; k < flat.size(); ++k) flat[k] += d[k];
  unflatten(flat, theta);

  int clipped = 0;
  for (const auto& b : fx.batches) {
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
      const double rho = std::exp(sequence_logprob(theta, b.features, b.rollouts[i].tokens) -
                                  sequence_logprob(fx.old_params, b.features, b.rollouts[i].tokens));
      // Stay away from the kinks of min/clip so central differences are valid.
      ASSERT_GT(std::abs(rho - 0.8), 1e-3);
      ASSERT_GT(std::abs(rho - 1.2), 1e-3);
      const double a = b.advantages[i];
      clipped += (a > 0 && rho > 1.2) || (a < 0 && rho < 0.8) ? 1 : 0;
    }
  }
  const auto l = grpo_loss(theta, fx.old_params, fx.ref, fx.batches, cfg);
  EXPECT_EQ(l.clip_fraction, clipped / 8.0);
  EXPECT_GT(clipped, 0);
  EXPECT_LT(clipped, 8);
  EXPECT_GT(l.kl, 0.0);

  Rng rng(7);
  const auto coords = testing::sample_coords(rng, flat.size(), 150);
  ASSERT_GE(coords.size(), 100U);
  const double err = testing::max_fd_error(
      [&](const PolicyParams& q) { return grpo_loss(q, fx.old_params, fx.ref, fx.batches, cfg).loss; }, theta, l.gradient,
      coords, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(GrpoLoss, KlTermIsTheBatchMean) {
  LossFixture fx;
  GrpoConfig cfg;
  cfg.beta_kl = 0.3;
  const auto theta = random_params(fx.dims, 8, 0.6, 2);
  const auto l = grpo_loss(theta, fx.old_params, fx.ref, fx.batches, cfg);
  double kl = 0.0;
  for (const auto& b : fx.batches) kl += kl_divergence(theta, fx.ref, b.features) / 2.0;
  EXPECT_NEAR(l.kl, kl, 1e-12);
  EXPECT_NEAR(l.loss, -l.surrogate + 0.3 * kl, 1e-12);
}

TEST(GrpoLoss, ZeroBetaIgnoresTheReference) {
  LossFixture fx;
  GrpoConfig cfg;
  cfg.beta_kl = 0.0;
  const auto theta = random_params(fx.dims, 9, 0.6, 2);
  const auto other_ref = random_params(fx.dims, 10, 2.0, 2);
  const auto a = grpo_loss(theta, fx.old_params, fx.ref, fx.batches, cfg);
  const auto b = grpo_loss(theta, fx.old_params, other_ref, fx.batches, cfg);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.gradient, b.gradient);
}

TEST(GrpoLoss, LargeLogRatioIsANumericError) {
  LossFixture fx;
  auto theta = fx.old_params;
  for (auto& b : theta.b) b(0) -= 30.0;
  GrpoConfig cfg;
  for (auto& b : fx.batches) {
    for (auto& r : b.rollouts) r.tokens = {0, 0, 0, 0};
  }
  try {
    grpo_loss(theta, fx.old_params, fx.ref, fx.batches, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("task-0#0"), std::string::npos) << e.what();
  }
}

TEST(CollectGroup, ScoresEachRollout) {
  GrpoConfig cfg;
  cfg.seed = 11;
  const auto& t = tasks()[0];
  const auto g = collect_group(stage1(), t, 3, cfg, vocab());
  ASSERT_EQ(g.rollouts.size(), 8U);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& r = g.rollouts[i];
    const auto again = sample(stage1(), t.query_features, 0.7, rollout_seed(11, 3, t.task_id, static_cast<int>(i)), vocab());
    EXPECT_EQ(r.tokens, again.tokens);
    const auto ctx = t.parse_context();
    EXPECT_EQ(g.rewards[i], total_reward(parse(r.rendered_text, ctx), r.rendered_text, t.truth_bbox, t.truth_image, {}, ctx).r_total);
  }
  EXPECT_EQ(g.advantages, compute_advantages(g.rewards));
}

GrpoConfig train_config(int iterations, double beta, double lr = 0.5) {
  GrpoConfig cfg;
  cfg.max_iterations = iterations;
  cfg.beta_kl = beta;
  cfg.learning_rate = lr;
  cfg.seed = 12;
  return cfg;
}

TEST(GrpoTrain, ZeroIterationsReturnsInitial) {
  const auto r = grpo_train(stage1(), stage1(), tasks(), train_config(0, 0.001), vocab());
  EXPECT_EQ(r.params, stage1());
  EXPECT_TRUE(r.log.empty());
}

TEST(GrpoTrain, EmptyTaskSetIsAnError) {
  EXPECT_THROW(grpo_train(stage1(), stage1(), {}, train_config(1, 0.001), vocab()), DataError);
}

TEST(GrpoTrain, DeterministicAndWorkerInvariant) {
  auto cfg = train_config(15, 0.001);
  const auto a = grpo_train(stage1(), stage1(), tasks(), cfg, vocab());
  const auto b = grpo_train(stage1(), stage1(), tasks(), cfg, vocab());
  cfg.workers = 4;
  const auto c = grpo_train(stage1(), stage1(), tasks(), cfg, vocab());
  ASSERT_EQ(a.log.size(), 15U);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(to_json(a.log[i]).dump(), to_json(b.log[i]).dump());
    EXPECT_EQ(to_json(a.log[i]).dump(), to_json(c.log[i]).dump());
  }
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.params, c.params);
  EXPECT_NE(a.params, stage1());
}

TEST(GrpoTrain, ResumeMatchesUninterruptedRun) {
  const auto full = grpo_train(stage1(), stage1(), tasks(), train_config(12, 0.001), vocab());
  const auto head = grpo_train(stage1(), stage1(), tasks(), train_config(5, 0.001), vocab());
  const auto tail = grpo_train(head.params, stage1(), tasks(), train_config(12, 0.001), vocab(), 5);
  EXPECT_EQ(tail.params, full.params);
  ASSERT_EQ(tail.log.size(), 7U);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(to_json(tail.log[i]).dump(), to_json(full.log[i + 5]).dump());
}

TEST(GrpoTrain, LogRecordsAndCallback) {
  int calls = 0;
  const auto r = grpo_train(stage1(), stage1(), tasks(), train_config(6, 0.001), vocab(), 0,
                            [&](const IterationLog& log, const PolicyParams& p, std::span<const GroupBatch> groups) {
                              EXPECT_EQ(log.iteration, calls);
                              EXPECT_TRUE(all_finite(p));
                              EXPECT_EQ(groups.size(), 8U);
                              for (const auto& g : groups) {
                                double mean = 0.0;
                                for (double a : g.advantages) mean += a / 8.0;
                                EXPECT_LE(std::abs(mean), 1e-12);
                                if (!g.zero_variance()) EXPECT_NEAR(population_std(g.advantages), 1.0, 1e-9);
                              }
                              ++calls;
                            });
  EXPECT_EQ(calls, 6);
  for (const auto& l : r.log) {
    const auto j = to_json(l);
    for (const char* k : {"iteration", "mean_reward", "format_rate", "acc_at_05_on_batch", "kl", "loss"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_GE(l.kl, 0.0);
    EXPECT_GE(l.mean_reward, 0.0);
    EXPECT_LE(l.mean_reward, 1.5);
    EXPECT_EQ(l.clip_fraction, 0.0);  // one step per snapshot: every ratio is 1
  }
}

TEST(GrpoTrain, StrongKlWeightStaysNearReference) {
  const auto weak = grpo_train(stage1(), stage1(), tasks(), train_config(60, 0.001), vocab());
  const auto strong = grpo_train(stage1(), stage1(), tasks(), train_config(60, 10.0, 0.05), vocab());
  const double kl_weak = mean_slot_kl(weak.params, stage1(), tasks());
  const double kl_strong = mean_slot_kl(strong.params, stage1(), tasks());
  EXPECT_GT(kl_weak, 0.0);
  EXPECT_LT(kl_strong, kl_weak);
}

}  // namespace
}  // namespace miggrpo
