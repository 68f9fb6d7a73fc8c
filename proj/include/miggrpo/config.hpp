// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "miggrpo/errors.hpp"
#include "miggrpo/rng.hpp"

namespace miggrpo {

/// Default pipeline configuration. Scale-dependent settings (learning rates,
/// epochs) are meant to be overridden per experiment.
inline nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
    "seed": 2025,
    "workers": 1,
    "data": {
      "count": 500,
      "heldout_fraction": 0.2,
      "mix": {"common_object": 0.25, "referring": 0.25, "region": 0.25, "difference": 0.25},
      "heldout_out_of_domain": 0.2,
      "taskgen": {"extent": 60, "bins": 10, "max_images": 4, "min_side": 12, "max_side": 30,
                  "max_objects": 5, "attention_sharpness": 8.0}
    },
    "teacher": {"p_box": 0.3, "p_fmt": 0.0},
    "policy": {"slots": 16, "filler_tokens": 8, "init_scale": 0.01, "lora_rank": 4, "lora_init_scale": 0.5},
    "sft": {"learning_rate": 1e-4, "epochs": 1, "batch_size": 32, "adapter_only": true},
    "rejection": {"num_predictions": 8, "temperature": 0.7, "iou_threshold": 0.5},
    "grpo": {"group_size": 8, "learning_rate": 5e-5, "batch_size": 2, "grad_accum_steps": 4,
             "beta_kl": 0.001, "clip_epsilon": 0.2, "temperature": 0.7, "max_iterations": 300,
             "checkpoint_every": 100},
    "reward": {"lambda_acc": 1.0, "lambda_format": 0.5},
    "eval": {"iou_threshold": 0.5}
  })");
}

/// Parses a scalar override value: JSON when it parses, else a string.
inline nlohmann::json parse_override_value(const std::string& v) {
  auto j = nlohmann::json::parse(v, nullptr, false);
  return j.is_discarded() ? nlohmann::json(v) : j;
}

/// Applies "section.key=value" to `cfg`. Unknown keys are rejected so typos
/// do not silently fall back to defaults.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw DataError("override must look like section.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw DataError("unknown config key '" + path + "'");
    node = &(*node)[parts[i]];
  }
  *node = parse_override_value(assignment.substr(eq + 1));
}

/// Defaults, merged with the file at `path` (if nonempty), then overrides.
inline nlohmann::json load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json cfg = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    const auto file = nlohmann::json::parse(in, nullptr, false);
    if (file.is_discarded() || !file.is_object()) throw DataError("config " + path.string() + " is not a JSON object");
    cfg.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

/// 16 hex digits identifying the effective configuration.
inline std::string config_hash(const nlohmann::json& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(cfg.dump())));
  return buf;
}

/// Named seed of a pipeline stage, derived from the root seed.
inline std::uint64_t stage_seed(const nlohmann::json& cfg, std::string_view stage) {
  return derive_seed(cfg.at("seed").get<std::uint64_t>(), stage);
}

}  // namespace miggrpo
