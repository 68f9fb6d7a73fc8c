// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "miggrpo/errors.hpp"
#include "miggrpo/geometry.hpp"
#include "miggrpo/response_format.hpp"
#include "miggrpo/rng.hpp"
#include "miggrpo/vocab.hpp"

namespace miggrpo {

inline constexpr int kFeatureDim = 32;
inline constexpr int kCategoryCount = 6;
inline constexpr int kColorCount = 4;
inline constexpr std::array<const char*, kCategoryCount> kCategoryNames = {"cup", "dog", "car", "lamp", "chair", "ball"};
inline constexpr std::array<const char*, kColorCount> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 4> kQuadrantNames = {"top-left", "top-right", "bottom-left", "bottom-right"};

struct ObjectSpec {
  int category = 0;
  int color = 0;
  BBox bbox{0, 0, 1, 1};

  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

struct ImageSpec {
  int width = 60;
  int height = 60;
  std::vector<ObjectSpec> objects;

  friend bool operator==(const ImageSpec&, const ImageSpec&) = default;
};

struct SceneSpec {
  std::vector<ImageSpec> images;
  std::optional<ImageSpec> query_image;  // visual query Q, when the query kind uses one

  int image_count() const { return static_cast<int>(images.size()); }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

enum class QueryKind { kCommonObject, kReferring, kRegion, kDifference };
inline constexpr std::array<QueryKind, 4> kAllQueryKinds = {QueryKind::kCommonObject, QueryKind::kReferring,
                                                            QueryKind::kRegion, QueryKind::kDifference};

inline std::string to_string(QueryKind k) {
  switch (k) {
    case QueryKind::kCommonObject: return "common_object";
    case QueryKind::kReferring: return "referring";
    case QueryKind::kRegion: return "region";
    case QueryKind::kDifference: return "difference";
  }
  return "unknown";
}

inline QueryKind query_kind_from_string(const std::string& s) {
  for (QueryKind k : kAllQueryKinds) {
    if (to_string(k) == s) return k;
  }
  throw DataError("unknown query kind '" + s + "'");
}

enum class Domain { kInDomain, kOutOfDomain };

inline std::string to_string(Domain d) { return d == Domain::kInDomain ? "in_domain" : "out_of_domain"; }

/// Attribute slots of the templated query text; unused ones stay -1.
struct QueryAttrs {
  int category = -1;
  int color = -1;
  int image = -1;
  int quadrant = -1;

  friend bool operator==(const QueryAttrs&, const QueryAttrs&) = default;
};

struct GroundingTask {
  std::string task_id;
  SceneSpec scene;
  QueryKind query_kind = QueryKind::kReferring;
  QueryAttrs query;
  std::string query_text;
  std::vector<double> query_features;
  int truth_image = 0;
  BBox truth_bbox{0, 0, 1, 1};
  std::string subset_tag;
  std::string domain_tag = "in_domain";

  ParseContext parse_context() const {
    const auto& img = scene.images.at(static_cast<std::size_t>(truth_image));
    return ParseContext{scene.image_count(), img.width, img.height};
  }
  friend bool operator==(const GroundingTask&, const GroundingTask&) = default;
};

struct TaskGenConfig {
  int extent = 60;
  int bins = 10;
  int max_images = 4;
  int min_side = 12;
  int max_side = 30;
  int max_objects = 5;
  /// Softness of the query-conditioned pooling behind the features. Lower
  /// values let partially matching distractors leak into the target summary.
  double attention_sharpness = 8.0;

  int bin_width() const { return extent / bins; }
};

/// Per-kind proportions plus the share of held-out variant tasks
/// ("robust_difference", tagged out_of_domain). All shares sum to 1.
struct TaskMix {
  double common_object = 0.25;
  double referring = 0.25;
  double region = 0.25;
  double difference = 0.25;
  double out_of_domain = 0.0;

  static TaskMix only(QueryKind k) {
    TaskMix m{0, 0, 0, 0, 0};
    m.share(k) = 1.0;
    return m;
  }

  double& share(QueryKind k) {
    switch (k) {
      case QueryKind::kCommonObject: return common_object;
      case QueryKind::kReferring: return referring;
      case QueryKind::kRegion: return region;
      case QueryKind::kDifference: return difference;
    }
    throw std::logic_error("bad kind");
  }
  double share(QueryKind k) const { return const_cast<TaskMix*>(this)->share(k); }
};

// ---------------------------------------------------------------------------
// Query semantics

inline int quadrant_of(const BBox& b, int width, int height) {
  const bool right = b.x1() + b.x2() >= width;
  const bool bottom = b.y1() + b.y2() >= height;
  return (bottom ? 2 : 0) + (right ? 1 : 0);
}

/// Whether object `obj` in target image `image` satisfies the task's query.
/// This predicate is the definition of the query semantics; generation is
/// checked against it by exhaustive scan.
inline bool satisfies_query(const GroundingTask& task, int image, const ObjectSpec& obj) {
  const auto& scene = task.scene;
  switch (task.query_kind) {
    case QueryKind::kReferring:
      return obj.category == task.query.category && obj.color == task.query.color;
    case QueryKind::kCommonObject:
      return scene.query_image && !scene.query_image->objects.empty() &&
             obj.category == scene.query_image->objects.front().category;
    case QueryKind::kRegion: {
      const auto& img = scene.images[static_cast<std::size_t>(image)];
      return image == task.query.image && quadrant_of(obj.bbox, img.width, img.height) == task.query.quadrant;
    }
    case QueryKind::kDifference: {
      if (image != 1 || scene.image_count() != 2) return false;
      for (const auto& ref : scene.images[0].objects) {
        if (ref.category == obj.category && ref.color == obj.color && iou(ref.bbox, obj.bbox) >= 0.5) return false;
      }
      return true;
    }
  }
  return false;
}

/// Every (image, object index) satisfying the query.
inline std::vector<std::pair<int, int>> satisfying_objects(const GroundingTask& task) {
  std::vector<std::pair<int, int>> hits;
  for (int i = 0; i < task.scene.image_count(); ++i) {
    const auto& objs = task.scene.images[static_cast<std::size_t>(i)].objects;
    for (int o = 0; o < static_cast<int>(objs.size()); ++o) {
      if (satisfies_query(task, i, objs[static_cast<std::size_t>(o)])) hits.emplace_back(i, o);
    }
  }
  return hits;
}

// ---------------------------------------------------------------------------
// Grid quantization

/// Grid-aligned box with maximal IoU against `b`, searching floor/ceil for
/// each corner. Ties keep the first candidate in (floor, ceil) order.
inline BBox quantize_best(const BBox& b, int bin_width, int extent_w, int extent_h) {
  std::optional<BBox> best;
  Ratio best_iou{0, 1};
  const int lo[4] = {b.x1() / bin_width * bin_width, b.y1() / bin_width * bin_width, b.x2() / bin_width * bin_width,
                     b.y2() / bin_width * bin_width};
  for (int mask = 0; mask < 16; ++mask) {
    int c[4];
    for (int k = 0; k < 4; ++k) {
      c[k] = lo[k] + (((mask >> k) & 1) != 0 ? bin_width : 0);
    }
    c[0] = std::min(c[0], extent_w);
    c[2] = std::min(c[2], extent_w);
    c[1] = std::min(c[1], extent_h);
    c[3] = std::min(c[3], extent_h);
    if (!BBox::valid(c[0], c[1], c[2], c[3])) continue;
    const BBox q(c[0], c[1], c[2], c[3]);
    const Ratio r = iou_ratio(q, b);
    // Compare r > best by cross-multiplication to stay exact.
    if (!best || r.num * best_iou.den > best_iou.num * r.den) {
      best = q;
      best_iou = r;
    }
  }
  return *best;
}

inline BBox quantized_truth(const GroundingTask& t, int bin_width) {
  const auto& img = t.scene.images.at(static_cast<std::size_t>(t.truth_image));
  return quantize_best(t.truth_bbox, bin_width, img.width, img.height);
}

// ---------------------------------------------------------------------------
// Featurization

namespace detail {

/// Match score in [0, 1] of a candidate object against the query. The target
/// scores 1; distractors sharing some attributes score partially.
inline double match_score(const GroundingTask& task, int image, const ObjectSpec& obj) {
  const auto& scene = task.scene;
  switch (task.query_kind) {
    case QueryKind::kReferring:
      return 0.5 * (obj.category == task.query.category) + 0.5 * (obj.color == task.query.color);
    case QueryKind::kCommonObject: {
      const auto& q = scene.query_image->objects.front();
      return 0.75 * (obj.category == q.category) + 0.25 * (obj.color == q.color);
    }
    case QueryKind::kRegion: {
      const auto& img = scene.images[static_cast<std::size_t>(image)];
      return 0.5 * (image == task.query.image) +
             0.5 * (quadrant_of(obj.bbox, img.width, img.height) == task.query.quadrant);
    }
    case QueryKind::kDifference: {
      if (image != 1) return 0.0;
      double best = 0.0;
      for (const auto& ref : scene.images[0].objects) {
        if (ref.category == obj.category && ref.color == obj.color) best = std::max(best, iou(ref.bbox, obj.bbox));
      }
      return 1.0 - best;
    }
  }
  return 0.0;
}

inline double rbf(double u, double center, double sigma) {
  const double z = (u - center) / sigma;
  return std::exp(-0.5 * z * z);
}

}  // namespace detail

/// Fixed 32-dim query encoding, entries in [-1, 1]:
///   [0]      constant 1
///   [1..4]   query kind one-hot
///   [5..8]   pooled attention mass per image
///   [9..28]  pooled target corners x1, y1, x2, y2, each as 5 radial bumps
///   [29]     image count, [30] object count, [31] strongest distractor score
inline std::vector<double> featurize(const GroundingTask& task, const TaskGenConfig& cfg) {
  std::vector<double> f(kFeatureDim, 0.0);
  f[0] = 1.0;
  for (int k = 0; k < 4; ++k) f[static_cast<std::size_t>(1 + k)] = task.query_kind == kAllQueryKinds[k] ? 1.0 : 0.0;

  struct Cand {
    int image;
    const ObjectSpec* obj;
    double score;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < task.scene.image_count(); ++i) {
    for (const auto& o : task.scene.images[static_cast<std::size_t>(i)].objects) {
      cands.push_back({i, &o, detail::match_score(task, i, o)});
    }
  }
  double top = 0.0;
  double second = 0.0;
  for (const auto& c : cands) {
    if (c.score > top) {
      second = top;
      top = c.score;
    } else {
      second = std::max(second, c.score);
    }
  }
  double z = 0.0;
  std::vector<double> w(cands.size());
  for (std::size_t k = 0; k < cands.size(); ++k) {
    w[k] = std::exp(cfg.attention_sharpness * (cands[k].score - top));
    z += w[k];
  }
  std::array<double, 4> corner{};
  for (std::size_t k = 0; k < cands.size(); ++k) {
    w[k] /= z;
    if (cands[k].image < 4) f[static_cast<std::size_t>(5 + cands[k].image)] += w[k];
    const auto c = cands[k].obj->bbox.corners();
    for (int j = 0; j < 4; ++j) corner[static_cast<std::size_t>(j)] += w[k] * c[static_cast<std::size_t>(j)];
  }
  const double extent = cfg.extent;
  const double sigma = extent / 8.0;
  for (int j = 0; j < 4; ++j) {
    for (int c = 0; c < 5; ++c) {
      f[static_cast<std::size_t>(9 + 5 * j + c)] = detail::rbf(corner[static_cast<std::size_t>(j)], extent * c / 4.0, sigma);
    }
  }
  f[29] = (task.scene.image_count() - 2.5) / 1.5;
  f[30] = std::clamp(static_cast<double>(cands.size()) / 10.0 - 1.0, -1.0, 1.0);
  f[31] = 2.0 * second - 1.0;
  for (double& x : f) x = std::clamp(x, -1.0, 1.0);  // pooled sums can overshoot by an ulp
  return f;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

inline BBox random_box(Rng& rng, const TaskGenConfig& cfg) {
  while (true) {
    const int w = rng.uniform_int(cfg.min_side, cfg.max_side);
    const int h = rng.uniform_int(cfg.min_side, cfg.max_side);
    const int x = rng.uniform_int(0, cfg.extent - w);
    const int y = rng.uniform_int(0, cfg.extent - h);
    const BBox b(x, y, x + w, y + h);
    if (iou(quantize_best(b, cfg.bin_width(), cfg.extent, cfg.extent), b) >= 0.5) return b;
  }
}

/// Random object that overlaps existing ones by IoU < 0.3 and satisfies
/// `accept` on its attributes. Returns nullopt when placement keeps failing.
template <typename Accept>
std::optional<ObjectSpec> place_object(Rng& rng, const TaskGenConfig& cfg, const std::vector<ObjectSpec>& existing,
                                       Accept&& accept, int max_tries = 200) {
  for (int t = 0; t < max_tries; ++t) {
    ObjectSpec o{rng.uniform_int(0, kCategoryCount - 1), rng.uniform_int(0, kColorCount - 1), random_box(rng, cfg)};
    if (!accept(o)) continue;
    bool clash = false;
    for (const auto& e : existing) {
      if (iou(e.bbox, o.bbox) >= 0.3 || (e.category == o.category && e.color == o.color && e.bbox == o.bbox)) {
        clash = true;
        break;
      }
    }
    if (!clash) return o;
  }
  return std::nullopt;
}

inline ImageSpec empty_image(const TaskGenConfig& cfg) { return ImageSpec{cfg.extent, cfg.extent, {}}; }

/// Fills `img` with `n` objects passing `accept` (best effort).
template <typename Accept>
void fill_image(Rng& rng, const TaskGenConfig& cfg, ImageSpec& img, int n, Accept&& accept) {
  for (int k = 0; k < n; ++k) {
    if (auto o = place_object(rng, cfg, img.objects, accept)) img.objects.push_back(*o);
  }
}

inline bool build_referring(Rng& rng, const TaskGenConfig& cfg, GroundingTask& t) {
  const int m = rng.uniform_int(1, cfg.max_images);
  t.truth_image = rng.uniform_int(0, m - 1);
  auto target = place_object(rng, cfg, {}, [](const ObjectSpec&) { return true; });
  if (!target) return false;
  t.query.category = target->category;
  t.query.color = target->color;
  const auto not_target_attrs = [&](const ObjectSpec& o) {
    return !(o.category == t.query.category && o.color == t.query.color);
  };
  for (int i = 0; i < m; ++i) {
    ImageSpec img = empty_image(cfg);
    if (i == t.truth_image) img.objects.push_back(*target);
    const int n = rng.uniform_int(i == t.truth_image ? 0 : 1, cfg.max_objects - (i == t.truth_image ? 1 : 0));
    fill_image(rng, cfg, img, n, not_target_attrs);
    if (img.objects.empty()) return false;
    t.scene.images.push_back(std::move(img));
  }
  t.truth_bbox = target->bbox;
  t.query_text = std::string("Locate the ") + kColorNames[static_cast<std::size_t>(t.query.color)] + " " +
                 kCategoryNames[static_cast<std::size_t>(t.query.category)] + " in the images.";
  return true;
}

inline bool build_common_object(Rng& rng, const TaskGenConfig& cfg, GroundingTask& t) {
  if (cfg.max_images < 2) return false;
  const int m = rng.uniform_int(2, cfg.max_images);
  t.truth_image = rng.uniform_int(0, m - 1);
  auto target = place_object(rng, cfg, {}, [](const ObjectSpec&) { return true; });
  if (!target) return false;
  ImageSpec q = empty_image(cfg);
  auto q_obj = place_object(rng, cfg, {}, [&](const ObjectSpec& o) { return o.category == target->category; });
  if (!q_obj) return false;
  q.objects.push_back(*q_obj);
  t.scene.query_image = q;
  const auto other_category = [&](const ObjectSpec& o) { return o.category != target->category; };
  for (int i = 0; i < m; ++i) {
    ImageSpec img = empty_image(cfg);
    if (i == t.truth_image) img.objects.push_back(*target);
    const int n = rng.uniform_int(i == t.truth_image ? 0 : 1, cfg.max_objects - (i == t.truth_image ? 1 : 0));
    fill_image(rng, cfg, img, n, other_category);
    if (img.objects.empty()) return false;
    t.scene.images.push_back(std::move(img));
  }
  t.truth_bbox = target->bbox;
  t.query.category = target->category;
  t.query_text = "Find the object in the target images that shares its category with the object in the query image.";
  return true;
}

inline bool build_region(Rng& rng, const TaskGenConfig& cfg, GroundingTask& t) {
  const int m = rng.uniform_int(1, cfg.max_images);
  t.truth_image = rng.uniform_int(0, m - 1);
  auto target = place_object(rng, cfg, {}, [](const ObjectSpec&) { return true; });
  if (!target) return false;
  t.query.image = t.truth_image;
  t.query.quadrant = quadrant_of(target->bbox, cfg.extent, cfg.extent);
  for (int i = 0; i < m; ++i) {
    ImageSpec img = empty_image(cfg);
    if (i == t.truth_image) img.objects.push_back(*target);
    const int n = rng.uniform_int(i == t.truth_image ? 0 : 1, cfg.max_objects - (i == t.truth_image ? 1 : 0));
    const bool is_target_image = i == t.truth_image;
    fill_image(rng, cfg, img, n, [&](const ObjectSpec& o) {
      return !is_target_image || quadrant_of(o.bbox, cfg.extent, cfg.extent) != t.query.quadrant;
    });
    t.scene.images.push_back(std::move(img));
  }
  t.truth_bbox = target->bbox;
  t.query_text = std::string("Locate the object in the ") + kQuadrantNames[static_cast<std::size_t>(t.query.quadrant)] +
                 " region of image " + std::to_string(t.truth_image + 1) + ".";
  return true;
}

inline bool build_difference(Rng& rng, const TaskGenConfig& cfg, GroundingTask& t, bool robust) {
  if (cfg.max_images < 2) return false;
  ImageSpec base = empty_image(cfg);
  fill_image(rng, cfg, base, rng.uniform_int(1, cfg.max_objects - 1), [](const ObjectSpec&) { return true; });
  if (base.objects.empty()) return false;
  ImageSpec changed = empty_image(cfg);
  for (const auto& o : base.objects) {
    ObjectSpec moved = o;
    if (robust) {
      // Small jitter of every shared object; the counterpart stays matched.
      for (int tries = 0; tries < 20; ++tries) {
        const int dx = rng.uniform_int(-3, 3);
        const int dy = rng.uniform_int(-3, 3);
        const int x1 = o.bbox.x1() + dx, y1 = o.bbox.y1() + dy, x2 = o.bbox.x2() + dx, y2 = o.bbox.y2() + dy;
        if (x1 < 0 || y1 < 0 || x2 > cfg.extent || y2 > cfg.extent) continue;
        const BBox b(x1, y1, x2, y2);
        if (iou(quantize_best(b, cfg.bin_width(), cfg.extent, cfg.extent), b) < 0.5) continue;
        moved.bbox = b;
        break;
      }
    }
    changed.objects.push_back(moved);
  }
  auto target = place_object(rng, cfg, changed.objects, [&](const ObjectSpec& o) {
    for (const auto& b : base.objects) {
      if (b.category == o.category && b.color == o.color) return false;
    }
    return true;
  });
  if (!target) return false;
  // Insert the new object at a random position so index order carries no hint.
  const auto pos = rng.uniform_int(0, static_cast<int>(changed.objects.size()));
  changed.objects.insert(changed.objects.begin() + pos, *target);
  t.scene.images = {base, changed};
  t.truth_image = 1;
  t.truth_bbox = target->bbox;
  t.query_text = robust ? "Image 2 is a slightly shifted copy of image 1 with one object added. Locate the added object."
                        : "Locate the object that appears in image 2 but not in image 1.";
  return true;
}

inline std::vector<int> apportion(std::span<const double> shares, int count) {
  std::vector<int> n(shares.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  int used = 0;
  for (std::size_t k = 0; k < shares.size(); ++k) {
    const double exact = shares[k] * count;
    n[k] = static_cast<int>(std::floor(exact));
    used += n[k];
    rema.emplace_back(exact - n[k], k);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < count; ++k, ++used) n[rema[k % rema.size()].second] += 1;
  return n;
}

}  // namespace detail

inline void validate_mix(const TaskMix& mix, const TaskGenConfig& cfg) {
  const double shares[] = {mix.common_object, mix.referring, mix.region, mix.difference, mix.out_of_domain};
  double sum = 0.0;
  for (double s : shares) {
    if (s < 0.0 || !std::isfinite(s)) throw DataError("task mix proportions must be nonnegative");
    sum += s;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DataError("task mix proportions must sum to 1");
  if (cfg.max_images < 2 && mix.common_object > 0) {
    throw DataError("infeasible mix: common_object needs at least 2 target images (max_images = 1)");
  }
  if (cfg.max_images < 2 && (mix.difference > 0 || mix.out_of_domain > 0)) {
    throw DataError("infeasible mix: difference tasks need 2 target images (max_images = 1)");
  }
  if (cfg.max_images > 4 || cfg.max_objects < 1 || cfg.max_objects > 5) {
    throw DataError("scene limits: 1 <= max_images <= 4 and 1 <= max_objects <= 5");
  }
}

/// Builds one task of the given kind with a private RNG stream.
inline GroundingTask generate_task(std::uint64_t seed, const std::string& task_id, QueryKind kind, bool held_out_variant,
                                   const TaskGenConfig& cfg) {
  Rng rng(derive_seed(seed, "task", task_id));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    GroundingTask t;
    t.task_id = task_id;
    t.query_kind = kind;
    bool ok = false;
    switch (kind) {
      case QueryKind::kReferring: ok = detail::build_referring(rng, cfg, t); break;
      case QueryKind::kCommonObject: ok = detail::build_common_object(rng, cfg, t); break;
      case QueryKind::kRegion: ok = detail::build_region(rng, cfg, t); break;
      case QueryKind::kDifference: ok = detail::build_difference(rng, cfg, t, held_out_variant); break;
    }
    if (!ok) continue;
    const auto hits = satisfying_objects(t);
    if (hits.size() != 1) continue;
    t.subset_tag = held_out_variant ? "robust_difference" : to_string(kind);
    t.domain_tag = to_string(held_out_variant ? Domain::kOutOfDomain : Domain::kInDomain);
    t.query_features = featurize(t, cfg);
    return t;
  }
  throw DataError("could not generate a valid " + to_string(kind) + " task for " + task_id);
}

/// `count` tasks with ids "<prefix>-000000" onward. Per-kind counts follow
/// the mix by largest remainder; order is a seeded shuffle of kinds.
inline std::vector<GroundingTask> generate_tasks(std::uint64_t seed, int count, const TaskMix& mix,
                                                 const TaskGenConfig& cfg = {}, const std::string& prefix = "task") {
  if (count < 1) throw DataError("task count must be >= 1");
  validate_mix(mix, cfg);
  const double shares[] = {mix.common_object, mix.referring, mix.region, mix.difference, mix.out_of_domain};
  const auto counts = detail::apportion(shares, count);
  std::vector<int> slots;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    slots.insert(slots.end(), static_cast<std::size_t>(counts[k]), static_cast<int>(k));
  }
  Rng order(derive_seed(seed, "task-order", prefix));
  order.shuffle(slots.begin(), slots.end());

  std::vector<GroundingTask> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%s-%06d", prefix.c_str(), i);
    const int slot = slots[static_cast<std::size_t>(i)];
    const bool variant = slot == 4;
    const QueryKind kind = variant ? QueryKind::kDifference : kAllQueryKinds[static_cast<std::size_t>(slot)];
    tasks.push_back(generate_task(seed, id, kind, variant, cfg));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Noisy teacher

struct TeacherNoise {
  double p_box = 0.0;
  double p_fmt = 0.0;
};

struct TeacherSample {
  std::string task_id;
  std::vector<std::string> responses;  // exactly 4
  bool all_consistent = false;
};

inline constexpr int kTeacherResponses = 4;

/// Correct at the given IoU threshold: valid box on the truth image, well
/// formed, IoU >= threshold.
inline bool response_correct(const ParsedResponse& p, const GroundingTask& t, double threshold) {
  return p.well_formed && p.answer_bbox && p.answer_image_index && *p.answer_image_index == t.truth_image &&
         iou(*p.answer_bbox, t.truth_bbox) >= threshold;
}

namespace detail {

/// A grid box scoring IoU < 0.5 against the truth: another object, or a
/// jittered copy of the quantized truth.
inline std::pair<BBox, int> corrupt_box(Rng& rng, const GroundingTask& t, const Vocabulary& vocab) {
  const int bw = vocab.bin_width();
  const BBox q = quantized_truth(t, bw);
  if (rng.bernoulli(0.5)) {
    std::vector<std::pair<BBox, int>> wrong;
    for (int i = 0; i < t.scene.image_count(); ++i) {
      const auto& img = t.scene.images[static_cast<std::size_t>(i)];
      for (const auto& o : img.objects) {
        const BBox oq = quantize_best(o.bbox, bw, img.width, img.height);
        if (i != t.truth_image || iou(oq, t.truth_bbox) < 0.5) wrong.emplace_back(oq, i);
      }
    }
    if (!wrong.empty()) return wrong[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(wrong.size()) - 1))];
  }
  const int edges = vocab.bins();
  while (true) {
    const int dx = rng.uniform_int(-4, 4);
    const int dy = rng.uniform_int(-4, 4);
    const int x1 = q.x1() / bw + dx, y1 = q.y1() / bw + dy;
    const int x2 = q.x2() / bw + dx + rng.uniform_int(-1, 1), y2 = q.y2() / bw + dy + rng.uniform_int(-1, 1);
    if (x1 < 0 || y1 < 0 || x2 > edges || y2 > edges || x1 >= x2 || y1 >= y2) continue;
    const BBox b(x1 * bw, y1 * bw, x2 * bw, y2 * bw);
    if (iou(b, t.truth_bbox) < 0.5) return {b, t.truth_image};
  }
}

/// Token-level envelope damage; every variant fails the format check.
inline TokenSeq malform(Rng& rng, TokenSeq seq, const Vocabulary& vocab) {
  switch (rng.uniform_int(0, 4)) {
    case 0:  // missing <think>
      seq.erase(seq.begin());
      break;
    case 1:  // missing </answer>
      seq.pop_back();
      break;
    case 2:  // trailing garbage
      seq.push_back(vocab.filler(0));
      break;
    case 3: {  // answer block before think block
      const auto close = std::find(seq.begin(), seq.end(), Token{Vocabulary::kThinkClose});
      TokenSeq reordered(close + 1, seq.end());
      reordered.insert(reordered.end(), seq.begin(), close + 1);
      seq = std::move(reordered);
      break;
    }
    default: {  // broken JSON: unclosed object
      const auto close = std::find(seq.begin(), seq.end(), Token{Vocabulary::kObjClose});
      seq.erase(close);
      break;
    }
  }
  return seq;
}

}  // namespace detail

/// Four responses, each independently the canonical correct response except
/// for box corruption (probability p_box) and envelope damage (p_fmt).
inline TeacherSample teacher_respond(const GroundingTask& task, const TeacherNoise& noise, std::uint64_t seed,
                                     const Vocabulary& vocab) {
  if (noise.p_box < 0 || noise.p_box > 1 || noise.p_fmt < 0 || noise.p_fmt > 1) {
    throw std::invalid_argument("teacher noise probabilities must lie in [0, 1]");
  }
  Rng rng(derive_seed(seed, "teacher", task.task_id));
  // The reasoning span names the query kind, so clean responses agree token for token.
  const int reasoning[] = {static_cast<int>(task.query_kind) % vocab.filler_count()};

  TeacherSample out;
  out.task_id = task.task_id;
  out.all_consistent = true;
  const BBox q = quantized_truth(task, vocab.bin_width());
  const auto ctx = task.parse_context();
  for (int r = 0; r < kTeacherResponses; ++r) {
    BBox box = q;
    int image = task.truth_image;
    if (rng.bernoulli(noise.p_box)) std::tie(box, image) = detail::corrupt_box(rng, task, vocab);
    TokenSeq seq = canonical_tokens(vocab, reasoning, box.x1(), box.y1(), box.x2(), box.y2(), image);
    if (rng.bernoulli(noise.p_fmt)) seq = detail::malform(rng, std::move(seq), vocab);
    out.responses.push_back(render(seq, vocab));
    out.all_consistent = out.all_consistent && response_correct(parse(out.responses.back(), ctx), task, 0.5);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json image_to_json(const ImageSpec& img) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : img.objects) objs.push_back({{"category", o.category}, {"color", o.color}, {"bbox", o.bbox}});
  return {{"width", img.width}, {"height", img.height}, {"objects", objs}};
}

inline ImageSpec image_from_json(const nlohmann::json& j) {
  ImageSpec img;
  img.width = j.at("width").get<int>();
  img.height = j.at("height").get<int>();
  for (const auto& o : j.at("objects")) {
    img.objects.push_back({o.at("category").get<int>(), o.at("color").get<int>(), bbox_from_json(o.at("bbox"))});
  }
  return img;
}

}  // namespace detail

inline nlohmann::json to_json(const GroundingTask& t) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : t.scene.images) images.push_back(detail::image_to_json(img));
  nlohmann::json scene{{"images", images}};
  scene["query_image"] = t.scene.query_image ? detail::image_to_json(*t.scene.query_image) : nlohmann::json(nullptr);
  return nlohmann::json{
      {"task_id", t.task_id},
      {"scene", scene},
      {"query_kind", to_string(t.query_kind)},
      {"query", {{"category", t.query.category}, {"color", t.query.color}, {"image", t.query.image}, {"quadrant", t.query.quadrant}}},
      {"query_text", t.query_text},
      {"query_features", t.query_features},
      {"truth_image", t.truth_image},
      {"truth_bbox", t.truth_bbox},
      {"subset", t.subset_tag},
      {"domain", t.domain_tag},
  };
}

/// Schema check for one task record; returns human-readable violations.
inline std::vector<std::string> validate_task_json(const nlohmann::json& j) {
  std::vector<std::string> errs;
  auto need = [&](const char* key, auto pred, const char* what) {
    if (!j.contains(key)) {
      errs.push_back(std::string("missing field '") + key + "'");
    } else if (!pred(j.at(key))) {
      errs.push_back(std::string("field '") + key + "' must be " + what);
    }
  };
  if (!j.is_object()) return {"record is not a JSON object"};
  need("task_id", [](const auto& v) { return v.is_string() && !v.template get<std::string>().empty(); }, "a nonempty string");
  need("scene", [](const auto& v) { return v.is_object() && v.contains("images") && v["images"].is_array(); }, "an object with an images array");
  need("query_kind", [](const auto& v) { return v.is_string(); }, "a string");
  need("query_text", [](const auto& v) { return v.is_string(); }, "a string");
  need("query_features", [](const auto& v) {
    if (!v.is_array() || v.size() != kFeatureDim) return false;
    for (const auto& x : v) {
      if (!x.is_number() || x.template get<double>() < -1.0 || x.template get<double>() > 1.0) return false;
    }
    return true;
  }, "a 32-element array with entries in [-1, 1]");
  need("truth_image", [](const auto& v) { return v.is_number_integer(); }, "an integer");
  need("truth_bbox", [](const auto& v) {
    if (!v.is_array() || v.size() != 4) return false;
    for (const auto& x : v) if (!x.is_number_integer()) return false;
    return v[0].template get<int>() < v[2].template get<int>() && v[1].template get<int>() < v[3].template get<int>();
  }, "a valid [x1, y1, x2, y2] integer box");
  need("subset", [](const auto& v) { return v.is_string(); }, "a string");
  need("domain", [](const auto& v) { return v.is_string() && (v == "in_domain" || v == "out_of_domain"); }, "in_domain or out_of_domain");
  if (!errs.empty()) return errs;

  const auto& images = j["scene"]["images"];
  if (images.empty() || images.size() > 4) errs.emplace_back("scene must hold 1 to 4 images");
  const int m = static_cast<int>(images.size());
  const int ti = j["truth_image"].get<int>();
  if (ti < 0 || ti >= m) errs.emplace_back("truth_image out of range");
  for (const auto& img : images) {
    if (!img.contains("objects") || !img["objects"].is_array() || img["objects"].empty() || img["objects"].size() > 5) {
      errs.emplace_back("each image must hold 1 to 5 objects");
    }
  }
  try {
    query_kind_from_string(j["query_kind"].get<std::string>());
  } catch (const DataError& e) {
    errs.emplace_back(e.what());
  }
  return errs;
}

inline GroundingTask task_from_json(const nlohmann::json& j) {
  if (const auto errs = validate_task_json(j); !errs.empty()) {
    throw DataError("invalid task record" + (j.contains("task_id") ? " " + j["task_id"].dump() : std::string()) + ": " +
                    errs.front());
  }
  try {
    GroundingTask t;
    t.task_id = j.at("task_id").get<std::string>();
    for (const auto& img : j.at("scene").at("images")) t.scene.images.push_back(detail::image_from_json(img));
    const auto& q = j.at("scene").at("query_image");
    if (!q.is_null()) t.scene.query_image = detail::image_from_json(q);
    t.query_kind = query_kind_from_string(j.at("query_kind").get<std::string>());
    const auto& qa = j.at("query");
    t.query = {qa.at("category").get<int>(), qa.at("color").get<int>(), qa.at("image").get<int>(), qa.at("quadrant").get<int>()};
    t.query_text = j.at("query_text").get<std::string>();
    t.query_features = j.at("query_features").get<std::vector<double>>();
    t.truth_image = j.at("truth_image").get<int>();
    t.truth_bbox = bbox_from_json(j.at("truth_bbox"));
    t.subset_tag = j.at("subset").get<std::string>();
    t.domain_tag = j.at("domain").get<std::string>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed task record: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("malformed task record: ") + e.what());
  }
}

inline nlohmann::json to_json(const TeacherSample& s) {
  return {{"task_id", s.task_id}, {"responses", s.responses}, {"all_consistent", s.all_consistent}};
}

inline TeacherSample teacher_sample_from_json(const nlohmann::json& j) {
  try {
    TeacherSample s{j.at("task_id").get<std::string>(), j.at("responses").get<std::vector<std::string>>(),
                    j.value("all_consistent", false)};
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed teacher record: ") + e.what());
  }
}

}  // namespace miggrpo
