// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "miggrpo/errors.hpp"
#include "miggrpo/parallel.hpp"
#include "miggrpo/policy.hpp"

namespace miggrpo {

struct SftExample {
  std::string task_id;
  std::vector<double> features;
  TokenSeq tokens;  // full response: think span and answer
};

/// Mean negative log-likelihood of the target sequences.
inline double sft_loss(const PolicyParams& p, std::span<const SftExample> data) {
  if (data.empty()) throw DataError("SFT loss over an empty dataset");
  double total = 0.0;
  for (const auto& ex : data) total -= sequence_logprob(p, ex.features, ex.tokens);
  return total / static_cast<double>(data.size());
}

/// Gradient of sft_loss over `data` (reduced in example order).
inline PolicyParams sft_gradient(const PolicyParams& p, std::span<const SftExample> data, int workers = 1) {
  PolicyParams g = p.zeros_like();
  const double scale = -1.0 / static_cast<double>(data.size());
  if (workers <= 1) {
    for (const auto& ex : data) accumulate_logprob_gradient(p, ex.features, ex.tokens, scale, g);
    return g;
  }
  std::vector<PolicyParams> parts(data.size(), g);
  parallel_for(data.size(), workers,
               [&](std::size_t i) { accumulate_logprob_gradient(p, data[i].features, data[i].tokens, scale, parts[i]); });
  for (const auto& part : parts) axpy(g, 1.0, part);
  return g;
}

struct SftConfig {
  double learning_rate = 1e-4;
  int epochs = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool adapter_only = true;
  int workers = 1;
};

struct SftResult {
  PolicyParams params;
  std::vector<double> loss_trace;  // full-dataset loss after each epoch
  int steps = 0;
};

/// Cosine-decayed learning rate for step `t` of `total`.
inline double cosine_lr(double base, int t, int total) {
  if (total <= 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

/// Plain minibatch gradient descent on the SFT loss with cosine decay over
/// all steps. In adapter-only mode W and b are never written.
inline SftResult sft_train(PolicyParams params, std::span<const SftExample> data, const SftConfig& cfg) {
  if (cfg.adapter_only && !params.adapter) throw std::invalid_argument("adapter-only SFT requires an adapter");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw std::invalid_argument("SFT batch size and epochs must be positive");
  SftResult out{std::move(params), {}, 0};
  if (cfg.epochs == 0) return out;
  if (data.empty()) throw DataError("SFT over an empty dataset");

  const int n = static_cast<int>(data.size());
  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.epochs * batches;
  const TrainMask mask = cfg.adapter_only ? TrainMask::kAdapterOnly : TrainMask::kAll;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::vector<SftExample> batch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "sft-epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    for (int bi = 0; bi < batches; ++bi) {
      batch.clear();
      for (int k = bi * cfg.batch_size; k < std::min(n, (bi + 1) * cfg.batch_size); ++k) {
        batch.push_back(data[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
      }
      const double loss = sft_loss(out.params, batch);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite SFT loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                           " (first task " + batch.front().task_id + ")");
      }
      const PolicyParams g = sft_gradient(out.params, batch, cfg.workers);
      axpy(out.params, -cosine_lr(cfg.learning_rate, out.steps, total_steps), g, mask);
      ++out.steps;
    }
    out.loss_trace.push_back(sft_loss(out.params, data));
  }
  return out;
}

}  // namespace miggrpo
