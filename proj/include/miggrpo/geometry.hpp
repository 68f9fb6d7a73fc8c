// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace miggrpo {

/// Axis-aligned box on the integer pixel lattice, half-open on the right and
/// bottom edges: it covers the cells [x1, x2) x [y1, y2).
class BBox {
 public:
  BBox(int x1, int y1, int x2, int y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
    if (!(x1 < x2 && y1 < y2)) {
      throw std::invalid_argument("BBox requires x1 < x2 and y1 < y2, got [" + std::to_string(x1) + "," +
                                  std::to_string(y1) + "," + std::to_string(x2) + "," + std::to_string(y2) +
                                  "]");
    }
  }

  static bool valid(int x1, int y1, int x2, int y2) { return x1 < x2 && y1 < y2; }

  int x1() const { return x1_; }
  int y1() const { return y1_; }
  int x2() const { return x2_; }
  int y2() const { return y2_; }
  int width() const { return x2_ - x1_; }
  int height() const { return y2_ - y1_; }

  bool within(int extent_w, int extent_h) const {
    return x1_ >= 0 && y1_ >= 0 && x2_ <= extent_w && y2_ <= extent_h;
  }

  std::array<int, 4> corners() const { return {x1_, y1_, x2_, y2_}; }

  friend bool operator==(const BBox&, const BBox&) = default;

 private:
  int x1_, y1_, x2_, y2_;
};

/// Exact non-negative rational num/den, kept in lowest terms.
struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

inline std::int64_t area(const BBox& b) {
  return static_cast<std::int64_t>(b.width()) * static_cast<std::int64_t>(b.height());
}

inline std::int64_t intersection_area(const BBox& a, const BBox& b) {
  const std::int64_t w = std::max(0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const std::int64_t h = std::max(0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  return w * h;
}

inline Ratio iou_ratio(const BBox& a, const BBox& b) {
  const std::int64_t inter = intersection_area(a, b);
  const std::int64_t uni = area(a) + area(b) - inter;
  const std::int64_t g = std::gcd(inter, uni);
  return inter == 0 ? Ratio{0, 1} : Ratio{inter / g, uni / g};
}

inline double iou(const BBox& a, const BBox& b) { return iou_ratio(a, b).value(); }

inline void to_json(nlohmann::json& j, const BBox& b) { j = nlohmann::json::array({b.x1(), b.y1(), b.x2(), b.y2()}); }

inline BBox bbox_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("bbox must be a 4-element integer array");
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw std::invalid_argument("bbox entries must be integers");
  }
  return BBox(j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>());
}

}  // namespace miggrpo
