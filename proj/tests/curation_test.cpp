// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "miggrpo/curation.hpp"
#include "fixtures.hpp"
#include "test_support.hpp"

namespace miggrpo {
namespace {

const Vocabulary& vocab() {
  static const Vocabulary v;
  return v;
}

const std::vector<GroundingTask>& tasks() {
  static const auto t = generate_tasks(2718, 500, TaskMix{});
  return t;
}

// Re-scores a response from its text alone.
bool oracle_correct(const std::string& text, const GroundingTask& t) {
  const auto p = parse(text, t.parse_context());
  if (!p.well_formed || p.answer_image_index != t.truth_image) return false;
  const auto [inter, uni] = testing::lattice_counts(*p.answer_bbox, t.truth_bbox);
  return 2 * inter >= uni;
}

const PolicyParams& partial_model() {
  static const PolicyParams model = testing::stage1_like_model(std::span(tasks().data(), 80), vocab());
  return model;
}

TEST(ConsistencyFilter, KeepsZeroNoiseSamples) {
  std::vector<TeacherSample> samples;
  for (const auto& t : tasks()) samples.push_back(teacher_respond(t, {}, 1, vocab()));
  const auto r = consistency_filter(samples, tasks());
  EXPECT_EQ(r.kept_ids.size(), tasks().size());
  EXPECT_EQ(r.stats.total, 500);
  EXPECT_EQ(r.stats.kept, 500);
  EXPECT_EQ(r.stats.kept_fraction(), 1.0);
}

TEST(ConsistencyFilter, OneMalformedResponseDropsTheSample) {
  const auto& t = tasks()[0];
  auto s = teacher_respond(t, {}, 1, vocab());
  std::string& r = s.responses[2];
  r.erase(r.size() - std::string("</answer>").size());
  const std::vector<TeacherSample> samples{s};
  const auto out = consistency_filter(samples, tasks());
  EXPECT_TRUE(out.kept_ids.empty());
  EXPECT_EQ(out.stats.per_subset.at(t.subset_tag).dropped, 1);
}

TEST(ConsistencyFilter, NoisyTeacherMatchesBruteForceAndBinomial) {
  // 10,000 samples: 500 tasks under 20 teacher seeds.
  int kept = 0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<TeacherSample> samples;
    for (const auto& t : tasks()) samples.push_back(teacher_respond(t, {0.3, 0.0}, 100 + seed, vocab()));
    const auto r = consistency_filter(samples, tasks(), 0.5);
    std::vector<std::string> oracle;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      bool all = true;
      for (const auto& text : samples[i].responses) all = all && oracle_correct(text, tasks()[i]);
      if (all) oracle.push_back(samples[i].task_id);
    }
    ASSERT_EQ(r.kept_ids, oracle);
    int per_subset_total = 0;
    for (const auto& [name, c] : r.stats.per_subset) per_subset_total += c.kept + c.dropped;
    EXPECT_EQ(per_subset_total, r.stats.total);
    kept += r.stats.kept;
    n += r.stats.total;
  }
  ASSERT_EQ(n, 10000);
  const double p = std::pow(0.7, 4);
  const double sigma = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(static_cast<double>(kept) / n, p, 3 * sigma);
}

TEST(ConsistencyFilter, UnknownTaskIsListed) {
  TeacherSample s = teacher_respond(tasks()[0], {}, 1, vocab());
  s.task_id = "nowhere-1";
  TeacherSample s2 = s;
  s2.task_id = "nowhere-2";
  try {
    consistency_filter(std::vector<TeacherSample>{s, s2}, tasks());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("nowhere-1"), std::string::npos);
    EXPECT_NE(msg.find("nowhere-2"), std::string::npos);
  }
}

TEST(ConsistencyFilter, NeedsFourResponses) {
  TeacherSample s = teacher_respond(tasks()[0], {}, 1, vocab());
  s.responses.pop_back();
  EXPECT_THROW(consistency_filter(std::vector<TeacherSample>{s}, tasks()), DataError);
}

TEST(ConsistencyFilter, Idempotent) {
  std::vector<TeacherSample> samples;
  for (const auto& t : tasks()) samples.push_back(teacher_respond(t, {0.3, 0.1}, 8, vocab()));
  const auto first = consistency_filter(samples, tasks());
  std::vector<TeacherSample> kept;
  for (const auto& s : samples) {
    if (std::find(first.kept_ids.begin(), first.kept_ids.end(), s.task_id) != first.kept_ids.end()) kept.push_back(s);
  }
  const auto second = consistency_filter(kept, tasks());
  EXPECT_EQ(second.kept_ids, first.kept_ids);
}

TEST(RejectionSample, ConfidentCorrectModelIsDropped) {
  const auto& t = tasks()[1];
  const TokenSeq target = *tokenize(teacher_respond(t, {}, 1, vocab()).responses[0], vocab());
  auto p = PolicyParams::zeros({vocab().size(), 32, 16});
  for (std::size_t s = 0; s < target.size(); ++s) p.b[s](target[s]) = 40.0;
  RejectionConfig cfg;
  const std::vector<GroundingTask> one{t};
  const auto r = rejection_sample(p, one, cfg, vocab());
  EXPECT_TRUE(r.kept_ids.empty());
  EXPECT_EQ(r.correct_histogram[8], 1);
}

TEST(RejectionSample, UntrainedModelIsDropped) {
  const auto p = PolicyParams::random({vocab().size(), 32, 16}, 9, 0.01);
  RejectionConfig cfg;
  const std::span<const GroundingTask> some(tasks().data(), 100);
  const auto r = rejection_sample(p, some, cfg, vocab());
  EXPECT_TRUE(r.kept_ids.empty());
  EXPECT_EQ(r.correct_histogram[0], 100);
  EXPECT_EQ(r.stats.kept_fraction(), 0.0);
}

TEST(RejectionSample, KeptSetEqualsReplayOfTheLog) {
  RejectionConfig cfg;
  cfg.seed = 10;
  const std::span<const GroundingTask> some(tasks().data(), 200);
  const auto r = rejection_sample(partial_model(), some, cfg, vocab());
  ASSERT_EQ(r.log.size(), 200U * 8U);

  std::map<std::string, int> correct;
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    const auto& e = r.log[i];
    const auto& t = some[i / 8];
    ASSERT_EQ(e.task_id, t.task_id);
    ASSERT_EQ(e.prediction, static_cast<int>(i % 8));
    ASSERT_EQ(e.correct, oracle_correct(e.text, t)) << e.text;
    // The logged text is what the seeded sampler produces.
    ASSERT_EQ(e.text, sample(partial_model(), t.query_features, cfg.temperature, rejection_seed(cfg.seed, t.task_id, e.prediction),
                             vocab()).rendered_text);
    correct[e.task_id] += oracle_correct(e.text, t) ? 1 : 0;
  }
  std::vector<std::string> oracle;
  std::vector<int> hist(9, 0);
  for (const auto& t : some) {
    const int c = correct[t.task_id];
    ++hist[static_cast<std::size_t>(c)];
    if (c >= 1 && c <= 7) oracle.push_back(t.task_id);
  }
  EXPECT_EQ(r.kept_ids, oracle);
  EXPECT_EQ(r.correct_histogram, hist);
  // The interesting regime: some tasks kept, some dropped.
  EXPECT_GT(r.kept_ids.size(), 0U);
  EXPECT_LT(r.kept_ids.size(), 200U);
  EXPECT_EQ(r.stats.total - r.stats.kept, hist[0] + hist[8]);
}

TEST(RejectionSample, IdempotentAndWorkerInvariant) {
  RejectionConfig cfg;
  cfg.seed = 11;
  const std::span<const GroundingTask> some(tasks().data(), 150);
  const auto first = rejection_sample(partial_model(), some, cfg, vocab());
  std::vector<GroundingTask> kept;
  for (const auto& t : some) {
    if (std::find(first.kept_ids.begin(), first.kept_ids.end(), t.task_id) != first.kept_ids.end()) kept.push_back(t);
  }
  const auto second = rejection_sample(partial_model(), kept, cfg, vocab());
  EXPECT_EQ(second.kept_ids, first.kept_ids);

  cfg.workers = 4;
  const auto parallel = rejection_sample(partial_model(), some, cfg, vocab());
  EXPECT_EQ(parallel.kept_ids, first.kept_ids);
  ASSERT_EQ(parallel.log.size(), first.log.size());
  for (std::size_t i = 0; i < first.log.size(); ++i) EXPECT_EQ(parallel.log[i].text, first.log[i].text);
}

TEST(RejectionSample, NeedsTwoPredictions) {
  RejectionConfig cfg;
  cfg.num_predictions = 1;
  EXPECT_THROW(rejection_sample(partial_model(), tasks(), cfg, vocab()), std::invalid_argument);
}

TEST(FilterStats, JsonTotals) {
  RejectionConfig cfg;
  const std::span<const GroundingTask> some(tasks().data(), 50);
  const auto r = rejection_sample(partial_model(), some, cfg, vocab());
  const auto j = to_json(r);
  EXPECT_EQ(j.at("total"), 50);
  EXPECT_EQ(j.at("dropped").get<int>(), 50 - j.at("kept").get<int>());
  int hist_total = 0;
  for (int c : j.at("correct_histogram")) hist_total += c;
  EXPECT_EQ(hist_total, 50);
}

}  // namespace
}  // namespace miggrpo
