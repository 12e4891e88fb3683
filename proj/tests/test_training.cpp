#include <catch2/catch_amalgamated.hpp>

#include "exitprint/dataset.hpp"
#include "exitprint/train.hpp"
#include "test_util.hpp"

using namespace exitprint;

namespace {

// Linearly separable two-class set: dark images vs bright images.
Dataset<float> brightness_dataset(int n_train, int n_val, std::uint64_t seed) {
  Dataset<float> d;
  d.name = "brightness";
  d.input_shape = {3, 8, 8};
  d.n_classes = 2;
  Pcg32 rng(seed);
  auto make = [&](int n, std::vector<LabeledExample<float>>& out) {
    for (int i = 0; i < n; ++i) {
      LabeledExample<float> ex;
      ex.label = static_cast<int>(rng.bounded(2));
      const double base = ex.label == 0 ? 0.25 : 0.75;
      ex.x = Tensor<float>(d.input_shape);
      for (std::int64_t k = 0; k < ex.x.numel(); ++k)
        ex.x[k] = static_cast<float>(base + rng.uniform(-0.15, 0.15));
      out.push_back(std::move(ex));
    }
  };
  make(n_train, d.train);
  make(n_val, d.val);
  make(n_val, d.test);
  return d;
}

ArchSpec small_arch() {
  ArchSpec a;
  a.channels = {4, 6};
  a.pool_blocks = {1};
  a.attach_blocks = {1};
  return a;
}

TrainConfig quick_cfg(std::uint64_t seed, int epochs = 5) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.optimizer = OptimizerDesc::sgd(0.05);
  tc.seed = seed;
  return tc;
}

}  // namespace

TEST_CASE("training a separable problem reaches high validation accuracy") {
  auto data = brightness_dataset(120, 40, 3);
  auto result = train_backbone<float>(small_arch(), data, quick_cfg(1, 5));
  REQUIRE(result.final_val_accuracy >= 0.95);
  REQUIRE(result.epochs.size() == 5);
}

TEST_CASE("training config validation") {
  auto data = brightness_dataset(20, 10, 4);
  TrainConfig bad = quick_cfg(1);
  bad.epochs = 0;
  REQUIRE_THROWS_AS(train_backbone<float>(small_arch(), data, bad), std::invalid_argument);
  bad = quick_cfg(1);
  bad.optimizer.learning_rate = 0.0;
  REQUIRE_THROWS_AS(train_backbone<float>(small_arch(), data, bad), std::invalid_argument);
}

TEST_CASE("same seed twice reproduces identical parameters") {
  auto data = brightness_dataset(60, 20, 5);
  auto a = train_backbone<float>(small_arch(), data, quick_cfg(11, 2));
  auto b = train_backbone<float>(small_arch(), data, quick_cfg(11, 2));
  REQUIRE(backbone_checksum(a.model) == backbone_checksum(b.model));
  // worker count must not affect the result
  auto c = train_backbone<float>(small_arch(), data, quick_cfg(11, 2), nullptr, 1);
  REQUIRE(backbone_checksum(a.model) == backbone_checksum(c.model));
}

TEST_CASE("augmentation keeps training deterministic") {
  auto data = brightness_dataset(60, 20, 6);
  TrainConfig cfg = quick_cfg(13, 2);
  cfg.augment.horizontal_flip = true;
  cfg.augment.random_crop = true;
  auto a = train_backbone<float>(small_arch(), data, cfg);
  auto b = train_backbone<float>(small_arch(), data, cfg);
  REQUIRE(backbone_checksum(a.model) == backbone_checksum(b.model));
}

TEST_CASE("divergent training is reported, not silent") {
  auto data = brightness_dataset(60, 20, 7);
  TrainConfig cfg = quick_cfg(1, 3);
  // large enough to overflow float activations into inf/NaN
  cfg.optimizer = OptimizerDesc::sgd(1e20);
  REQUIRE_THROWS_AS(train_backbone<float>(small_arch(), data, cfg), TrainingError);
}

TEST_CASE("train_ics freezes the backbone bit for bit") {
  auto data = brightness_dataset(80, 30, 8);
  auto trained = train_backbone<float>(small_arch(), data, quick_cfg(2, 3));
  auto m = build_multiexit<float>(trained.model, attach_indices_for(small_arch()), 3);
  const auto before = backbone_checksum(m.backbone);
  const auto ic_before = ic_checksum(m);

  TrainConfig icc;
  icc.epochs = 4;
  icc.optimizer = OptimizerDesc::adam(0.001);
  icc.seed = 4;
  auto out = train_ics(m, data, icc);
  REQUIRE(backbone_checksum(out.backbone) == before);
  REQUIRE(ic_checksum(out) != ic_before);
}

TEST_CASE("IC training improves head accuracy over fresh initialization") {
  // well-trained backbone first, so the head has a real signal to learn
  auto data = brightness_dataset(150, 50, 3);
  auto trained = train_backbone<float>(small_arch(), data, quick_cfg(1, 5));
  REQUIRE(trained.final_val_accuracy >= 0.9);
  auto m = build_multiexit<float>(trained.model, attach_indices_for(small_arch()), 5);

  auto head_acc = [&](const MultiExitModel<float>& model) {
    int correct = 0;
    for (const auto& ex : data.val) {
      auto confs = forward_all_exits(model, ex.x);
      if (argmax_label(confs[0]) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.val.size());
  };
  const double before = head_acc(m);
  TrainConfig icc;
  icc.epochs = 30;
  icc.optimizer = OptimizerDesc::adam(0.01);
  icc.seed = 6;
  auto out = train_ics(m, data, icc);
  REQUIRE(head_acc(out) >= before);
  REQUIRE(head_acc(out) >= 0.9);  // brightness is separable from the first block
}

TEST_CASE("adam IC default learning rate is 0.001") {
  REQUIRE(OptimizerDesc::adam().learning_rate == 0.001);
  REQUIRE(OptimizerDesc::adam().kind == OptimizerDesc::Kind::adam);
}

TEST_CASE("independent population differs only by seed") {
  auto data = brightness_dataset(60, 20, 10);
  TrainConfig bc = quick_cfg(0, 2);
  TrainConfig ic;
  ic.epochs = 2;
  ic.optimizer = OptimizerDesc::adam(0.001);

  SECTION("duplicate seeds are rejected") {
    REQUIRE_THROWS_AS(
        train_independent_population<float>(small_arch(), data, bc, ic, {1, 1}),
        std::invalid_argument);
  }
  SECTION("distinct seeds give pairwise distinct parameters") {
    auto pop = train_independent_population<float>(small_arch(), data, bc, ic, {1, 2, 3});
    REQUIRE(pop.size() == 3);
    std::set<std::uint64_t> sums;
    for (const auto& m : pop) sums.insert(model_checksum(m));
    REQUIRE(sums.size() == 3);
  }
}

TEST_CASE("epoch log lines carry loss, accuracy, and wall time") {
  auto data = brightness_dataset(40, 15, 11);
  std::ostringstream log;
  train_backbone<float>(small_arch(), data, quick_cfg(8, 2), &log);
  const std::string text = log.str();
  REQUIRE(text.find("epoch=1 ") != std::string::npos);
  REQUIRE(text.find("epoch=2 ") != std::string::npos);
  REQUIRE(text.find("train_loss=") != std::string::npos);
  REQUIRE(text.find("val_acc=") != std::string::npos);
  REQUIRE(text.find("wall_s=") != std::string::npos);
}
