// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "miggrpo/policy.hpp"
#include "miggrpo/sft.hpp"
#include "miggrpo/taskgen.hpp"

namespace miggrpo::testing {

/// A short adapter SFT run on clean teacher data, merged. Sampled
/// predictions from it are a mix of right and wrong.
inline PolicyParams stage1_like_model(std::span<const GroundingTask> tasks, const Vocabulary& vocab, int epochs = 30,
                                      std::uint64_t seed = 5) {
  std::vector<SftExample> data;
  for (const auto& t : tasks) {
    for (const auto& text : teacher_respond(t, {}, seed, vocab).responses) {
      data.push_back({t.task_id, t.query_features, *tokenize(text, vocab)});
    }
  }
  auto p = PolicyParams::random({vocab.size(), kFeatureDim, 16}, seed, 0.01);
  attach_adapter(p, 4, seed + 1, 0.5);
  SftConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = 0.05;
  cfg.seed = seed + 2;
  return merge_adapter(sft_train(p, data, cfg).params).params;
}

}  // namespace miggrpo::testing
