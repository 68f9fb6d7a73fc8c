// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "miggrpo/geometry.hpp"

namespace miggrpo {

/// What the parser needs to know about the task a response answers.
struct ParseContext {
  int image_count = 1;
  int extent_w = 60;
  int extent_h = 60;
};

struct ParsedResponse {
  bool well_formed = false;
  std::optional<std::string> think_span;
  std::optional<BBox> answer_bbox;
  std::optional<int> answer_image_index;

  friend bool operator==(const ParsedResponse&, const ParsedResponse&) = default;
};

namespace detail {

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string_view::npos; p = hay.find(needle, p + needle.size())) ++n;
  return n;
}

struct AnswerPayload {
  std::optional<BBox> bbox;
  std::optional<int> image;
  bool valid = false;  // JSON object with a valid in-frame bbox and in-range image
};

inline AnswerPayload parse_answer_payload(std::string_view body, const ParseContext& ctx) {
  AnswerPayload out;
  const auto j = nlohmann::json::parse(body.begin(), body.end(), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return out;
  const auto it = j.find("bbox_2d");
  if (it == j.end() || !it->is_array() || it->size() != 4) return out;
  int c[4];
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& v = (*it)[k];
    if (!v.is_number_integer()) return out;
    const auto wide = v.get<long long>();
    if (wide < -1'000'000 || wide > 1'000'000) return out;
    c[k] = static_cast<int>(wide);
  }
  if (!BBox::valid(c[0], c[1], c[2], c[3])) return out;
  BBox box(c[0], c[1], c[2], c[3]);
  if (!box.within(ctx.extent_w, ctx.extent_h)) return out;
  out.bbox = box;

  const auto img = j.find("image");
  if (img == j.end()) {
    if (ctx.image_count != 1) return out;
    out.image = 0;
  } else {
    if (!img->is_number_integer()) return out;
    const auto idx = img->get<long long>();
    if (idx < 0 || idx >= ctx.image_count) return out;
    out.image = static_cast<int>(idx);
  }
  out.valid = true;
  return out;
}

}  // namespace detail

/// Parses "<think>...</think><answer>{json}</answer>". Never throws: any
/// deviation from the envelope or the JSON schema clears well_formed. When
/// the envelope is broken but an answer payload is still recoverable, the box
/// and image index are filled in for diagnostics.
inline ParsedResponse parse(std::string_view text, const ParseContext& ctx = {}) {
  using namespace detail;
  ParsedResponse out;
  const std::string_view s = trim(text);

  const bool tag_counts_ok = count_occurrences(s, kThinkOpen) == 1 && count_occurrences(s, kThinkClose) == 1 &&
                             count_occurrences(s, kAnswerOpen) == 1 && count_occurrences(s, kAnswerClose) == 1;

  bool envelope_ok = false;
  std::string_view answer_body;
  if (tag_counts_ok && s.starts_with(kThinkOpen)) {
    const auto think_end = s.find(kThinkClose);
    const auto after_think = s.substr(think_end + kThinkClose.size());
    const auto rest = trim(after_think);
    if (rest.starts_with(kAnswerOpen) && rest.ends_with(kAnswerClose)) {
      out.think_span = std::string(s.substr(kThinkOpen.size(), think_end - kThinkOpen.size()));
      answer_body = rest.substr(kAnswerOpen.size(), rest.size() - kAnswerOpen.size() - kAnswerClose.size());
      envelope_ok = true;
    }
  }

  if (!envelope_ok) {
    const auto t0 = s.find(kThinkOpen);
    const auto t1 = t0 == std::string_view::npos ? t0 : s.find(kThinkClose, t0);
    if (t1 != std::string_view::npos) {
      out.think_span = std::string(s.substr(t0 + kThinkOpen.size(), t1 - t0 - kThinkOpen.size()));
    }
    const auto a0 = s.find(kAnswerOpen);
    const auto a1 = a0 == std::string_view::npos ? a0 : s.find(kAnswerClose, a0);
    if (a1 != std::string_view::npos) {
      answer_body = s.substr(a0 + kAnswerOpen.size(), a1 - a0 - kAnswerOpen.size());
    } else {
      const auto b0 = s.find('{');
      const auto b1 = s.rfind('}');
      if (b0 != std::string_view::npos && b1 != std::string_view::npos && b1 > b0) {
        answer_body = s.substr(b0, b1 - b0 + 1);
      }
    }
  }

  const auto payload = parse_answer_payload(trim(answer_body), ctx);
  if (payload.bbox) out.answer_bbox = payload.bbox;
  if (payload.valid) out.answer_image_index = payload.image;
  out.well_formed = envelope_ok && payload.valid;
  return out;
}

/// 1 when the response follows the required envelope with a valid JSON box,
/// 0 otherwise.
inline int format_reward(std::string_view text, const ParseContext& ctx = {}) { return parse(text, ctx).well_formed ? 1 : 0; }

}  // namespace miggrpo
