// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string_view>

#include <json.hpp>

#include "miggrpo/geometry.hpp"
#include "miggrpo/response_format.hpp"

namespace miggrpo {

struct RewardWeights {
  double lambda_acc = 1.0;
  double lambda_format = 0.5;

  void validate() const {
    if (lambda_acc < 0.0 || lambda_format < 0.0 || lambda_acc + lambda_format <= 0.0) {
      throw std::invalid_argument("reward weights must be nonnegative with a positive sum");
    }
  }
};

struct RewardBreakdown {
  double r_acc = 0.0;
  int r_format = 0;
  double r_total = 0.0;
};

/// IoU of the extracted box against the truth. Zero without a box, and zero
/// when the box points at a different image.
inline double accuracy_reward(const ParsedResponse& parsed, const BBox& truth_bbox, int truth_image) {
  if (!parsed.answer_bbox || !parsed.answer_image_index) return 0.0;
  if (*parsed.answer_image_index != truth_image) return 0.0;
  return iou(*parsed.answer_bbox, truth_bbox);
}

/// Weighted sum lambda_acc * r_acc + lambda_format * r_format, where the
/// format term is re-derived from the raw text.
inline RewardBreakdown total_reward(const ParsedResponse& parsed, std::string_view raw_text, const BBox& truth_bbox,
                                    int truth_image, const RewardWeights& weights, const ParseContext& ctx) {
  weights.validate();
  RewardBreakdown r;
  r.r_acc = accuracy_reward(parsed, truth_bbox, truth_image);
  r.r_format = format_reward(raw_text, ctx);
  r.r_total = weights.lambda_acc * r.r_acc + weights.lambda_format * r.r_format;
  return r;
}

inline void to_json(nlohmann::json& j, const RewardBreakdown& r) {
  j = nlohmann::json{{"r_acc", r.r_acc}, {"r_format", r.r_format}, {"r_total", r.r_total}};
}

}  // namespace miggrpo
