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

#include <cmath>

#include <gtest/gtest.h>

#include "imbalance_forge/schedule.hpp"

namespace imbalance_forge {
namespace {

ScheduleConfig exponential() { return ScheduleConfig{}; }

ScheduleConfig polynomial(int n = 10, double p = 0.9) {
  ScheduleConfig c;
  c.kind = DecayKind::kPolynomial;
  c.n = n;
  c.p = p;
  return c;
}

TEST(Schedule, ExponentialValues) {
  const auto c = exponential();
  EXPECT_EQ(lr_at(c, 0), 1e-4);
  EXPECT_EQ(lr_at(c, 1), 1e-4 * 0.98);
  EXPECT_DOUBLE_EQ(lr_at(c, 1), 9.8e-5);
  double expected = 1e-4;
  for (int i = 0; i < 10; ++i) expected *= 0.98;
  EXPECT_EQ(lr_at(c, 10), expected);
  EXPECT_NEAR(lr_at(c, 10), 1e-4 * std::pow(0.98, 10), 1e-18);
}

TEST(Schedule, ExponentialRatioIsAlphaExactly) {
  const auto c = exponential();
  for (int i = 0; i < c.n; ++i) EXPECT_EQ(lr_at(c, i + 1), lr_at(c, i) * c.alpha);
}

TEST(Schedule, PolynomialValues) {
  const auto c = polynomial(10, 0.9);
  EXPECT_EQ(lr_at(c, 0), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(c, 5), 1e-4 * std::pow(0.5, 0.9));
  EXPECT_EQ(lr_at(c, 10), 0.0);
}

TEST(Schedule, StrictlyDecreasingBetweenRestarts) {
  for (auto c : {exponential(), polynomial(30, 2.0)}) {
    c.n = 30;
    c.restart_epochs = {10, 20};
    for (int i = 0; i < c.n; ++i) {
      if (i + 1 == 10 || i + 1 == 20) continue;
      EXPECT_LT(lr_at(c, i + 1), lr_at(c, i)) << i;
    }
  }
}

TEST(Schedule, RestartsScaleTheBaseRate) {
  auto c = exponential();
  c.restart_epochs = {5, 12};
  EXPECT_EQ(lr_at(c, 5), 1e-4 * 0.65);
  EXPECT_DOUBLE_EQ(lr_at(c, 5), 6.5e-5);
  EXPECT_EQ(lr_at(c, 6), 1e-4 * 0.65 * 0.98);
  EXPECT_EQ(lr_at(c, 12), 1e-4 * 0.65 * 0.65);

  auto p = polynomial(20, 1.0);
  p.restart_epochs = {10};
  EXPECT_EQ(lr_at(p, 10), 1e-4 * 0.65);
  EXPECT_DOUBLE_EQ(lr_at(p, 15), 1e-4 * 0.65 * 0.5);
  EXPECT_EQ(lr_at(p, 20), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(p, 5), 1e-4 * 0.5);
}

TEST(Schedule, Validation) {
  auto c = exponential();
  c.alpha = 1.0;
  EXPECT_THROW(lr_at(c, 0), ValidationError);
  c = exponential();
  c.restart_epochs = {5, 5};
  EXPECT_THROW(c.validate(), ValidationError);
  c.restart_epochs = {0};
  EXPECT_THROW(c.validate(), ValidationError);
  c = exponential();
  EXPECT_THROW(lr_at(c, -1), ValidationError);
  EXPECT_THROW(lr_at(c, c.n + 1), ValidationError);
  EXPECT_THROW(ScheduleConfig::from_json({{"kind", "cosine"}}), ValidationError);
}

TEST(Schedule, JsonRoundTrip) {
  auto c = polynomial(40, 0.5);
  c.restart_epochs = {10, 30};
  c.lr0 = 3e-3;
  const auto back = ScheduleConfig::from_json(c.to_json());
  for (int i = 0; i <= 40; ++i) EXPECT_EQ(lr_at(back, i), lr_at(c, i));
}

}  // namespace
}  // namespace imbalance_forge
