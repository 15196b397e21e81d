/* Copyright 2026 The imbalance-forge Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "imbalance_forge/sampling.hpp"
#include "test_util.hpp"

namespace imbalance_forge {
namespace {

using testing::make_record;
using testing::make_task;

constexpr auto kA = ClassGroup::kAnatomy;
constexpr auto kI = ClassGroup::kInstrument;

TEST(ClassRepeatFactor, Values) {
  EXPECT_EQ(class_repeat_factor(0.15, 0.15), 1.0);
  EXPECT_EQ(class_repeat_factor(0.6, 0.15), 1.0);
  EXPECT_EQ(class_repeat_factor(0.0375, 0.15), 2.0);
  EXPECT_NEAR(class_repeat_factor(0.01, 0.15), 3.8730, 5e-5);
  EXPECT_EQ(class_repeat_factor(0.0, 0.15), 20.0);
  EXPECT_THROW(class_repeat_factor(0.1, 0.0), ValidationError);
  EXPECT_THROW(class_repeat_factor(1.5, 0.15), ValidationError);
}

TEST(ClassRepeatFactor, AtLeastOneAndMonotone) {
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= 100; ++i) {
    const double r = class_repeat_factor(i / 100.0, 0.15);
    EXPECT_GE(r, 1.0);
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(ImageRepeatFactor, MaxOverPresentClasses) {
  const std::vector<double> rc{1.0, 2.5, 1.7};
  EXPECT_EQ(image_repeat_factor(make_record("a", {5, 0, 0}), rc), 1.0);
  EXPECT_EQ(image_repeat_factor(make_record("b", {5, 3, 0}), rc), 2.5);
  EXPECT_EQ(image_repeat_factor(make_record("c", {0, 0, 9}), rc), 1.7);
  EXPECT_THROW(image_repeat_factor(make_record("d", {0, 0, 0}), rc), ValidationError);
}

TEST(EpochPlan, AllOnesIsPermutation) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 30; ++i) recs.push_back(make_record("r" + std::to_string(i), {10, 0}));
  const DatasetManifest m(make_task({kA, kI}), recs);
  const EpochPlan plan = build_epoch_plan(m, RepeatFactorConfig{0.15, 20.0, 9}, 0);
  std::vector<std::size_t> order = plan.order;
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> expected(30);
  std::iota(expected.begin(), expected.end(), 0u);
  EXPECT_EQ(order, expected);
  ASSERT_EQ(plan.entries.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(plan.entries[i], m.record(plan.order[i]).record_id);
}

TEST(EpochPlan, MeanLengthForOneAndOnePointFive) {
  const DatasetManifest m(make_task({kA}), {make_record("a", {1}), make_record("b", {1})});
  const std::vector<double> factors{1.0, 1.5};
  double total = 0.0;
  constexpr int kEpochs = 10000;
  for (int e = 0; e < kEpochs; ++e) {
    const auto len = plan_from_repeat_factors(m, factors, 17, e).order.size();
    ASSERT_TRUE(len == 2 || len == 3);
    total += static_cast<double>(len);
  }
  EXPECT_NEAR(total / kEpochs, 2.5, 0.02);
}

TEST(EpochPlan, CountsAreFloorOrCeilAndEveryRecordAppears) {
  Rng rng(5);
  std::vector<RecordStats> recs;
  std::vector<double> factors;
  for (int i = 0; i < 40; ++i) {
    recs.push_back(make_record("r" + std::to_string(i), {1}));
    factors.push_back(1.0 + 4.0 * rng.uniform());
  }
  const DatasetManifest m(make_task({kA}), recs);
  for (int e = 0; e < 50; ++e) {
    const EpochPlan plan = plan_from_repeat_factors(m, factors, 3, e);
    std::vector<int> count(40, 0);
    for (auto idx : plan.order) ++count[idx];
    for (std::size_t i = 0; i < 40; ++i) {
      const double fl = std::floor(factors[i]);
      EXPECT_TRUE(count[i] == fl || count[i] == fl + 1) << i;
      EXPECT_GE(count[i], 1);
    }
  }
}

TEST(EpochPlan, ExposureAmplificationForOnePercentClass) {
  // 100 records, class 1 in exactly one: f = 0.01, r = sqrt(15).
  std::vector<RecordStats> recs;
  for (int i = 0; i < 100; ++i) recs.push_back(make_record("r" + std::to_string(i), {10, i == 0 ? 1 : 0}));
  const DatasetManifest m(make_task({kA, kI}), recs);
  double hits = 0.0;
  constexpr int kEpochs = 10000;
  for (int e = 0; e < kEpochs; ++e) {
    const EpochPlan plan = build_epoch_plan(m, RepeatFactorConfig{0.15, 20.0, 1}, e);
    hits += static_cast<double>(std::count(plan.order.begin(), plan.order.end(), 0u));
  }
  EXPECT_NEAR(hits / kEpochs, 3.873, 0.05);
}

TEST(EpochPlan, DeterministicPerSeedAndEpoch) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 20; ++i) recs.push_back(make_record("r" + std::to_string(i), {10, i % 7 == 0 ? 1 : 0}));
  const DatasetManifest m(make_task({kA, kI}), recs);
  const RepeatFactorConfig cfg{0.15, 20.0, 4};
  EXPECT_EQ(build_epoch_plan(m, cfg, 3).order, build_epoch_plan(m, cfg, 3).order);
  EXPECT_NE(build_epoch_plan(m, cfg, 3).order, build_epoch_plan(m, cfg, 4).order);
  EXPECT_EQ(plan_to_jsonl(build_epoch_plan(m, cfg, 3)), plan_to_jsonl(build_epoch_plan(m, cfg, 3)));
}

TEST(EpochPlan, JsonlFormat) {
  const DatasetManifest m(make_task({kA}), {make_record("only", {1})});
  EXPECT_EQ(plan_to_jsonl(uniform_epoch(m, 0, 2)), "{\"epoch\":2,\"record\":\"only\"}\n");
}

TEST(UniformEpoch, PermutationsDifferAcrossEpochs) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 16; ++i) recs.push_back(make_record("r" + std::to_string(i), {1}));
  const DatasetManifest m(make_task({kA}), recs);
  std::set<std::vector<std::size_t>> seen;
  for (int e = 0; e < 100; ++e) {
    auto order = uniform_epoch(m, 8, e).order;
    seen.insert(order);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> expected(16);
    std::iota(expected.begin(), expected.end(), 0u);
    ASSERT_EQ(order, expected);
  }
  EXPECT_EQ(seen.size(), 100u);
}

TEST(IoUState, EmaUpdates) {
  IoUState s(3);
  s.update({{0, 1.0}});
  EXPECT_DOUBLE_EQ(s.ema(0), 0.55);
  EXPECT_EQ(s.ema(1), 0.5);
  s.update({{2, 0.5}});
  EXPECT_EQ(s.ema(2), 0.5);

  IoUState t(1);
  for (int k = 0; k < 50; ++k) t.update({{0, 0.8}});
  EXPECT_NEAR(t.ema(0), 0.8 + (0.5 - 0.8) * std::pow(0.9, 50), 1e-12);
  EXPECT_NEAR(t.ema(0), 0.7985, 5e-5);
  EXPECT_EQ(t.steps(), 50u);
}

TEST(IoUState, ValidationAndJsonRoundTrip) {
  IoUState s(2);
  EXPECT_THROW(s.update({{0, 1.2}}), ValidationError);
  EXPECT_THROW(s.update({{5, 0.2}}), ValidationError);
  EXPECT_THROW(IoUState(2, 0.0), ValidationError);
  s.update({{1, 0.25}});
  const IoUState back = IoUState::from_json(s.to_json());
  EXPECT_EQ(back.ema(0), s.ema(0));
  EXPECT_EQ(back.ema(1), s.ema(1));
  EXPECT_EQ(back.steps(), 1u);
  EXPECT_EQ(back.smoothing(), 0.1);
}

TEST(AdaptiveProbs, ClosedForms) {
  IoUState s(3);
  for (double p : adaptive_class_probs(s)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  s.set(0, 0.0);
  s.set(1, 1.0);
  s.set(2, 1.0);
  const auto p = adaptive_class_probs(s);
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 2.0), 1e-15);
  EXPECT_NEAR(p[0], 0.5761, 5e-5);
  EXPECT_NEAR(p[1], 0.2119, 5e-5);
  EXPECT_NEAR(p[2], 0.2119, 5e-5);
  EXPECT_EQ(adaptive_class_probs(IoUState(1))[0], 1.0);
}

TEST(SelectMaxPixel, InjectedCandidates) {
  const DatasetManifest m(make_task({kA, kI}),
                          {make_record("a", {90, 10}, 10, 10), make_record("b", {0, 500}, 25, 20),
                           make_record("c", {100, 0}, 10, 10)});
  const std::vector<std::size_t> cands{0, 1, 2};
  EXPECT_EQ(select_max_pixel(m, cands, 1), 1u);
  const std::vector<std::size_t> reversed{2, 1, 0};
  EXPECT_EQ(select_max_pixel(m, reversed, 1), 1u);
}

TEST(SelectMaxPixel, TiesGoToSmallerIndex) {
  const DatasetManifest m(make_task({kA, kI}),
                          {make_record("a", {0, 7}), make_record("b", {3, 7}), make_record("c", {0, 7})});
  const std::vector<std::size_t> cands{2, 1, 0, 2};
  EXPECT_EQ(select_max_pixel(m, cands, 1), 0u);
}

TEST(AdaptiveBatch, SingleRecord) {
  const DatasetManifest m(make_task({kA, kI}), {make_record("solo", {3, 4})});
  AdaptiveStreams streams = AdaptiveStreams::from_seed(1);
  const auto batch = adaptive_batch(m, IoUState(2), AdaptiveConfig{1, 10, 1}, streams);
  EXPECT_EQ(batch.records, std::vector<std::size_t>{0});
}

TEST(AdaptiveBatch, UniformStateGivesUniformTargets) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(make_record("r" + std::to_string(i), {1, 1, 1, 1}));
  const DatasetManifest m(make_task({kA, kI, kI, kI}), recs);
  AdaptiveStreams streams = AdaptiveStreams::from_seed(77);
  std::vector<int> hist(4, 0);
  const IoUState state(4);
  for (int b = 0; b < 1250; ++b) {
    for (int t : adaptive_batch(m, state, AdaptiveConfig{8, 10, 77}, streams).target_classes) ++hist[t];
  }
  double chi2 = 0.0;
  for (int h : hist) chi2 += (h - 2500.0) * (h - 2500.0) / 2500.0;
  // 3 degrees of freedom, significance 0.01.
  EXPECT_LT(chi2, 11.345);
}

TEST(AdaptiveBatch, AllocationFollowsSoftmax) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(make_record("r" + std::to_string(i), {1, 1, 1}));
  const DatasetManifest m(make_task({kA, kI, kI}), recs);
  IoUState state(3);
  state.set(0, 0.0);
  state.set(1, 1.0);
  state.set(2, 1.0);
  AdaptiveStreams streams = AdaptiveStreams::from_seed(5);
  std::vector<double> hist(3, 0.0);
  for (int b = 0; b < 10000; ++b) {
    for (int t : adaptive_batch(m, state, AdaptiveConfig{1, 10, 5}, streams).target_classes) hist[t] += 1.0;
  }
  EXPECT_NEAR(hist[0] / 10000, 0.5761, 0.01);
  EXPECT_NEAR(hist[1] / 10000, 0.2119, 0.01);
  EXPECT_NEAR(hist[2] / 10000, 0.2119, 0.01);
}

TEST(AdaptiveBatch, PrefersRecordsRichInTarget) {
  // Class 1 lives in record 0 only.
  std::vector<RecordStats> recs;
  for (int i = 0; i < 20; ++i) recs.push_back(make_record("r" + std::to_string(i), {10, i == 0 ? 5 : 0}));
  const DatasetManifest m(make_task({kA, kI}), recs);
  IoUState state(2);
  state.set(0, 1.0);
  state.set(1, 0.0);
  AdaptiveStreams streams = AdaptiveStreams::from_seed(2);
  int rich = 0, rich_targeted = 0, targeted = 0;
  for (int b = 0; b < 500; ++b) {
    const auto batch = adaptive_batch(m, state, AdaptiveConfig{8, 10, 2}, streams);
    for (std::size_t s = 0; s < batch.records.size(); ++s) {
      rich += batch.records[s] == 0;
      if (batch.target_classes[s] == 1) {
        ++targeted;
        rich_targeted += batch.records[s] == 0;
      }
    }
  }
  // P(record 0 among 10 draws from 20) = 1 - 0.95^10.
  EXPECT_NEAR(static_cast<double>(rich_targeted) / targeted, 1.0 - std::pow(0.95, 10), 0.03);
  EXPECT_GT(rich, 4000 * 0.25);
}

TEST(AdaptiveBatch, DeterministicStreams) {
  std::vector<RecordStats> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(make_record("r" + std::to_string(i), {10, i}));
  const DatasetManifest m(make_task({kA, kI}), recs);
  auto draw = [&] {
    AdaptiveStreams streams = AdaptiveStreams::from_seed(99);
    std::vector<std::size_t> all;
    for (int b = 0; b < 5; ++b) {
      const auto batch = adaptive_batch(m, IoUState(2), AdaptiveConfig{8, 10, 99}, streams);
      all.insert(all.end(), batch.records.begin(), batch.records.end());
    }
    return all;
  };
  EXPECT_EQ(draw(), draw());
}

}  // namespace
}  // namespace imbalance_forge
