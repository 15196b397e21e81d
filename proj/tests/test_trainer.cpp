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
#include <sstream>

#include <gtest/gtest.h>

#include "imbalance_forge/trainer.hpp"
#include "test_util.hpp"

namespace imbalance_forge {
namespace {

SynthConfig two_class_config() {
  SynthConfig c;
  c.num_images = 40;
  c.height = 8;
  c.width = 8;
  c.feature_dim = 2;
  c.noise_sigma = 0.1;
  c.seed = 3;
  c.classes = {{0, "bg", ClassGroup::kAnatomy, 1.0, {0.0, 0.0}, 1.0},
               {1, "fg", ClassGroup::kInstrument, 0.8, {1.0, 1.0}, 0.3}};
  return c;
}

SynthConfig four_class_config() {
  SynthConfig c;
  c.num_images = 40;
  c.height = 8;
  c.width = 8;
  c.feature_dim = 3;
  c.noise_sigma = 0.2;
  c.seed = 4;
  c.classes = {{0, "bg", ClassGroup::kAnatomy, 1.0, {0.0, 0.0, 0.0}, 1.0},
               {1, "organ", ClassGroup::kAnatomy, 0.8, {1.0, 0.0, 0.0}, 0.3},
               {2, "tool", ClassGroup::kInstrument, 0.5, {0.0, 1.0, 0.0}, 0.15},
               {3, "rare", ClassGroup::kInstrument, 0.1, {0.0, 0.0, 1.0}, 0.15}};
  return c;
}

TrainConfig small_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.schedule.n = std::max(1, epochs);
  t.schedule.lr0 = 0.05;
  t.model.stages = 1;
  t.seeds = {1, 2, 3};
  return t;
}

std::vector<const SynthRecord*> pointers(const SynthDataset& d) {
  std::vector<const SynthRecord*> out;
  for (const auto& r : d.records) out.push_back(&r);
  return out;
}

TEST(ToyModel, ShapesAndValidation) {
  ModelConfig m;
  const ToyModel two(5, 4, m, 1);
  ASSERT_EQ(two.layers().size(), 2u);
  EXPECT_EQ(two.layers()[0].weight.shape(), (Shape{5, 32}));
  EXPECT_EQ(two.logits(Tensor({7, 5})).shape(), (Shape{7, 4}));
  m.stages = 1;
  const ToyModel one(5, 4, m, 1);
  EXPECT_EQ(one.logits(Tensor({3, 5})).shape(), (Shape{3, 4}));
  m.stages = 3;
  EXPECT_THROW(ToyModel(5, 4, m, 1), ValidationError);
}

TEST(ToyModel, TapeForwardMatchesLogits) {
  const ToyModel model(3, 4, ModelConfig{}, 9);
  Rng rng(1);
  Tensor x({6, 3});
  for (double& v : x.data()) v = rng.normal();
  Tape tape;
  std::vector<NodeId> params;
  const NodeId out = model.forward(tape, x, params);
  EXPECT_EQ(params.size(), 4u);
  EXPECT_EQ(tape.value(out), model.logits(x));
}

TEST(TrainConfig, JsonAndValidation) {
  const TrainConfig t = TrainConfig::from_json(
      {{"sampler", "adaptive"}, {"loss", "lovasz"}, {"epochs", 7}, {"seeds", {{"data", 5}}}});
  EXPECT_EQ(t.sampler, SamplerKind::kAdaptive);
  EXPECT_EQ(t.loss, LossKind::kLovasz);
  EXPECT_EQ(t.schedule.n, 7);
  EXPECT_EQ(t.seeds.data, 5u);
  EXPECT_EQ(TrainConfig::from_json(t.to_json()).to_json(), t.to_json());
  EXPECT_THROW(TrainConfig::from_json({{"lossx", "ce"}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"loss", "dice"}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"sampler", "class_balanced"}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"batch_size", 0}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"epochs", 10}, {"schedule", {{"n", 3}}}}),
               ValidationError);
}

TEST(Train, ZeroEpochsLogsOnlyInitialEvaluation) {
  const auto data = generate_dataset(two_class_config());
  const auto res = train(data, small_train(0));
  ASSERT_EQ(res.log.size(), 1u);
  EXPECT_EQ(res.log[0].epoch, 0);
  EXPECT_FALSE(res.log[0].train_loss.has_value());
  EXPECT_EQ(res.train_records + res.val_records, 40u);
}

TEST(Train, SeparableDataLossDecreases) {
  const auto data = generate_dataset(two_class_config());
  for (LossKind loss : {LossKind::kCrossEntropy, LossKind::kOhem, LossKind::kLovasz}) {
    auto cfg = small_train(5);
    cfg.loss = loss;
    const auto res = train(data, cfg);
    ASSERT_EQ(res.log.size(), 6u);
    EXPECT_LT(*res.log.back().train_loss, *res.log[1].train_loss) << to_string(loss);
    EXPECT_GT(res.log.back().report.miou, 0.9) << to_string(loss);
  }
}

TEST(Train, BitwiseDeterministic) {
  const auto data = generate_dataset(four_class_config());
  for (SamplerKind s : {SamplerKind::kUniform, SamplerKind::kRepeatFactor,
                        SamplerKind::kAdaptive}) {
    auto cfg = small_train(3);
    cfg.sampler = s;
    cfg.augment.hflip = cfg.augment.blur = cfg.augment.color_jitter = true;
    const auto a = train(data, cfg), b = train(data, cfg);
    std::string csv_a, csv_b;
    for (const auto& e : a.log) csv_a += metrics_csv_row(e);
    for (const auto& e : b.log) csv_b += metrics_csv_row(e);
    EXPECT_EQ(csv_a, csv_b);
    for (std::size_t l = 0; l < a.final_model.layers().size(); ++l) {
      EXPECT_EQ(a.final_model.layers()[l].weight, b.final_model.layers()[l].weight);
      EXPECT_EQ(a.final_model.layers()[l].bias, b.final_model.layers()[l].bias);
    }
  }
}

TEST(Train, SeedsChangeTheRun) {
  const auto data = generate_dataset(four_class_config());
  auto cfg = small_train(2);
  const auto a = train(data, cfg);
  cfg.seeds.model = 99;
  const auto b = train(data, cfg);
  EXPECT_NE(a.final_model.layers()[0].weight, b.final_model.layers()[0].weight);
}

TEST(Train, AllNineCellsCompose) {
  const auto data = generate_dataset(four_class_config());
  for (SamplerKind s : {SamplerKind::kUniform, SamplerKind::kRepeatFactor,
                        SamplerKind::kAdaptive}) {
    for (LossKind l : {LossKind::kCrossEntropy, LossKind::kOhem, LossKind::kLovasz}) {
      auto cfg = small_train(1);
      cfg.sampler = s;
      cfg.loss = l;
      const auto res = train(data, cfg);
      ASSERT_EQ(res.log.size(), 2u);
      EXPECT_TRUE(std::isfinite(*res.log[1].train_loss));
    }
  }
}

TEST(Train, BestEpochIsMaxOfLog) {
  const auto data = generate_dataset(four_class_config());
  const auto res = train(data, small_train(6));
  double best = -1.0;
  for (const auto& e : res.log) best = std::max(best, e.report.miou);
  EXPECT_EQ(res.best().report.miou, best);
  for (std::size_t i = 0; i < res.best_index; ++i) {
    EXPECT_LT(res.log[i].report.miou, best);
  }
}

TEST(Train, LearningRateFollowsSchedule) {
  const auto data = generate_dataset(two_class_config());
  auto cfg = small_train(4);
  cfg.schedule.restart_epochs = {2};
  const auto res = train(data, cfg);
  EXPECT_EQ(res.log[0].lr, lr_at(cfg.schedule, 0));
  for (int e = 0; e < 4; ++e) EXPECT_EQ(res.log[e + 1].lr, lr_at(cfg.schedule, e));
}

TEST(Train, SplitIsByRecordHash) {
  int val = 0;
  for (int i = 0; i < 10000; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "img_%05d", i);
    val += is_validation_record(id);
  }
  EXPECT_NEAR(val / 10000.0, 0.2, 0.015);
}

TEST(Adam, SingleStepMovesByLrTimesSign) {
  Tensor p({3}, std::vector<double>{1.0, 2.0, 3.0});
  Adam adam;
  adam.step({&p}, {Tensor({3}, std::vector<double>{0.5, -2.0, 0.0})}, 0.1);
  EXPECT_NEAR(p[0], 0.9, 1e-7);
  EXPECT_NEAR(p[1], 2.1, 1e-7);
  EXPECT_EQ(p[2], 3.0);
}

TEST(Adam, OneStepChangesAParameter) {
  const auto data = generate_dataset(four_class_config());
  ToyModel model(3, 4, ModelConfig{}, 1);
  const ToyModel before = model;
  Rng rng(0);
  const Batch batch = assemble_batch({&data.records[0], &data.records[1]}, {}, rng);
  Tape tape;
  std::vector<NodeId> params;
  const NodeId z = model.forward(tape, batch.features, params);
  const auto loss = cross_entropy(tape.value(z), batch.labels);
  tape.backward(z, loss.grad_logits);
  std::vector<Tensor> grads;
  for (NodeId id : params) grads.push_back(tape.grad(id));
  Adam adam;
  adam.step(model.parameters(), grads, 1e-3);
  bool changed = false;
  for (std::size_t l = 0; l < 2; ++l) {
    changed |= model.layers()[l].weight != before.layers()[l].weight;
    changed |= model.layers()[l].bias != before.layers()[l].bias;
  }
  EXPECT_TRUE(changed);
}

TEST(Evaluate, OracleLookupGivesPerfectMiou) {
  const auto data = generate_dataset(four_class_config());
  const auto recs = pointers(data);
  const auto report = evaluate([](const SynthRecord& r) { return r.labels; }, recs,
                               data.manifest.task(), {3});
  EXPECT_EQ(report.miou, 1.0);
  EXPECT_EQ(*report.groups.rare, 1.0);
}

TEST(Evaluate, ConstantModelScoresOnlyItsClass) {
  const auto data = generate_dataset(four_class_config());
  const auto recs = pointers(data);
  const auto report = evaluate(
      [](const SynthRecord& r) {
        LabelMap m(r.labels.height, r.labels.width);
        std::fill(m.pixels.begin(), m.pixels.end(), std::uint8_t{1});
        return m;
      },
      recs, data.manifest.task(), {});
  EXPECT_GT(*report.per_class[1], 0.0);
  for (int c : {0, 2, 3}) EXPECT_EQ(*report.per_class[c], 0.0);
}

TEST(Evaluate, MatchesBruteForceOnRandomModel) {
  auto cfg = four_class_config();
  cfg.classes.resize(3);
  const auto data = generate_dataset(cfg);
  const auto recs = pointers(data);
  const ToyModel model(3, 3, ModelConfig{}, 17);
  const auto report = evaluate(model, recs, data.manifest.task(), {});
  for (int c = 0; c < 3; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (const auto* r : recs) {
      const LabelMap pred = model.predict(r->features);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.pixels[i] == c, g = r->labels.pixels[i] == c;
        inter += p && g;
        uni += p || g;
      }
    }
    ASSERT_GT(uni, 0);
    EXPECT_EQ(*report.per_class[c], static_cast<double>(inter) / static_cast<double>(uni));
  }
  EXPECT_THROW(evaluate(model, {}, data.manifest.task(), {}), ValidationError);
}

TEST(Checkpoint, RoundTripIsFloatExact) {
  testing::TempDir dir("ckpt");
  const ToyModel model(3, 4, ModelConfig{}, 5);
  save_checkpoint(dir / "m.bin", model, {{"config_hash", "abc"}});
  const auto header = io::read_json(dir / "m.bin.json");
  EXPECT_EQ(header["config_hash"], "abc");
  EXPECT_EQ(header["dtype"], "f32le");
  EXPECT_EQ(std::filesystem::file_size(dir / "m.bin"), 4u * (3 * 32 + 32 + 32 * 4 + 4));
  const ToyModel back = load_checkpoint(dir / "m.bin");
  ASSERT_EQ(back.layers().size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& w = model.layers()[l].weight;
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_EQ(back.layers()[l].weight[i], static_cast<double>(static_cast<float>(w[i])));
    }
  }
  io::write_text(dir / "m.bin", "abc");
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), ValidationError);
}

TEST(Checkpoint, ConfigHashIsStable) {
  const nlohmann::json j = {{"a", 1}, {"b", {1, 2}}};
  EXPECT_EQ(config_hash(j), config_hash(nlohmann::json::parse(j.dump())));
  EXPECT_EQ(config_hash(j).size(), 16u);
  EXPECT_NE(config_hash(j), config_hash({{"a", 2}}));
}

TEST(MetricsCsv, HeaderAndRows) {
  EXPECT_STREQ(metrics_csv_header(), "epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou\n");
  EpochLog e;
  e.epoch = 3;
  e.lr = 9.8e-5;
  e.train_loss = 0.5;
  e.report.miou = 0.25;
  e.report.groups.anatomies = 0.75;
  EXPECT_EQ(metrics_csv_row(e), "3,9.8e-05,0.5,0.25,0.75,,\n");
  const auto data = generate_dataset(two_class_config());
  const auto res = train(data, small_train(1));
  const std::string row0 = metrics_csv_row(res.log[0]);
  EXPECT_EQ(row0.rfind("0,0.05,,", 0), 0u) << row0;
}

}  // namespace
}  // namespace imbalance_forge
