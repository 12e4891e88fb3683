#include <catch2/catch_amalgamated.hpp>

#include "exitprint/arch.hpp"
#include "exitprint/dataset.hpp"
#include "exitprint/model.hpp"
#include "exitprint/train.hpp"
#include "test_util.hpp"

using namespace exitprint;
using test_util::random_tensor;
using test_util::tiny_model;

namespace {

// Eight-layer toy backbone: conv relu conv relu conv relu gap dense.
Backbone<float> toy_backbone(std::uint64_t seed, int n_classes = 4) {
  Backbone<float> b({3, 8, 8}, n_classes);
  Pcg32 rng(seed);
  auto add_conv = [&](std::int64_t in, std::int64_t out) {
    auto c = std::make_unique<Conv3x3<float>>(in, out);
    c->init(rng);
    b.add(std::move(c));
    b.add(std::make_unique<ReLU<float>>());
  };
  add_conv(3, 4);
  add_conv(4, 6);
  add_conv(6, 6);
  b.add(std::make_unique<GlobalAvgPool<float>>());
  auto fc = std::make_unique<Dense<float>>(6, n_classes);
  fc->init(rng);
  b.add(std::move(fc));
  return b;
}

// The exit rule re-derived by hand from the confidence vectors, independent
// of early_exit_infer's implementation.
template <typename T>
int brute_force_exit(const std::vector<std::vector<T>>& confs, double t_c) {
  const int n = static_cast<int>(confs.size());
  for (int i = 0; i < n - 1; ++i) {
    T mx = confs[i][0];
    for (T v : confs[i]) mx = std::max(mx, v);
    if (static_cast<double>(mx) >= t_c) return i + 1;
  }
  return n;
}

}  // namespace

TEST_CASE("build_multiexit structural examples") {
  auto backbone = toy_backbone(5);
  REQUIRE(backbone.layers().size() == 8);

  SECTION("attach [2,4] gives n = 3 exits") {
    auto m = build_multiexit<float>(backbone, {2, 4}, 1);
    REQUIRE(m.n_exits() == 3);
    REQUIRE(m.ics[0].attach_index == 2);
    REQUIRE(m.layer_costs.size() == 8 + 2);
  }
  SECTION("no attach indices is rejected") {
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {}, 1), std::invalid_argument);
  }
  SECTION("non-increasing attach indices are rejected") {
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {4, 2}, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {2, 2}, 1), std::invalid_argument);
  }
  SECTION("attach indices must be interior") {
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {0}, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {7}, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(build_multiexit<float>(backbone, {-1}, 1), std::invalid_argument);
  }
  SECTION("backbone parameters are copied unchanged") {
    auto m = build_multiexit<float>(backbone, {2, 4}, 1);
    REQUIRE(backbone_checksum(m.backbone) == backbone_checksum(backbone));
  }
}

TEST_CASE("forward_all_exits yields normalized confidence vectors") {
  auto m = tiny_model<float>(99);
  Pcg32 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    auto confs = forward_all_exits(m, x);
    REQUIRE(confs.size() == static_cast<std::size_t>(m.n_exits()));
    for (const auto& c : confs) {
      double sum = 0.0;
      for (float v : c) {
        REQUIRE(v >= 0.0f);
        sum += v;
      }
      REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }
}

TEST_CASE("forward_all_exits is deterministic bit for bit") {
  auto m = tiny_model<float>(7);
  Pcg32 rng(4);
  auto x = random_tensor<float>({3, 8, 8}, rng);
  auto a = forward_all_exits(m, x);
  auto b = forward_all_exits(m, x);
  REQUIRE(a == b);
}

TEST_CASE("zero-weight IC head outputs the exactly uniform vector") {
  auto m = tiny_model<float>(13, /*n_classes=*/4);
  m.ics[0].fc.weight().zero();
  m.ics[0].fc.bias().zero();
  Pcg32 rng(5);
  auto confs = forward_all_exits(m, random_tensor<float>({3, 8, 8}, rng));
  for (float v : confs[0]) REQUIRE(v == 0.25f);
}

TEST_CASE("forward_all_exits rejects shape mismatch") {
  auto m = tiny_model<float>(1);
  Tensor<float> bad({3, 4, 4});
  REQUIRE_THROWS_AS(forward_all_exits(m, bad), std::invalid_argument);
  REQUIRE_THROWS_AS(early_exit_infer(m, bad, ExitPolicy::never_early()), std::invalid_argument);
}

TEST_CASE("exit policy validation") {
  REQUIRE_THROWS_AS(ExitPolicy::with_threshold(0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(ExitPolicy::with_threshold(1.5), std::invalid_argument);
  REQUIRE_NOTHROW(ExitPolicy::with_threshold(1.0));
  REQUIRE_FALSE(ExitPolicy::never_early().early_exit_enabled());
}

TEST_CASE("early exit trivial policies") {
  auto m = tiny_model<float>(21);
  Pcg32 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    REQUIRE(early_exit_infer(m, x, ExitPolicy::with_threshold(1e-9)).exit_index == 1);
    REQUIRE(early_exit_infer(m, x, ExitPolicy::never_early()).exit_index == m.n_exits());
  }
}

TEST_CASE("early_exit_infer matches the brute-force rule on random inputs") {
  auto m = tiny_model<float>(31);
  Pcg32 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    const double t_c = rng.uniform(0.05, 1.0);
    auto confs = forward_all_exits(m, x);
    const int expected = brute_force_exit(confs, t_c);
    auto trace = early_exit_infer(m, x, ExitPolicy::with_threshold(t_c));
    REQUIRE(trace.exit_index == expected);
    REQUIRE(trace.predicted_label ==
            argmax_label(confs[static_cast<std::size_t>(expected) - 1]));
    REQUIRE(trace.confidences.size() == static_cast<std::size_t>(expected));
  }
}

TEST_CASE("lowering the threshold never deepens the exit") {
  auto m = tiny_model<float>(41);
  Pcg32 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    int prev = 1;
    // ascending thresholds: exits can only stay or deepen
    for (double t_c : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
      int e = early_exit_infer(m, x, ExitPolicy::with_threshold(t_c)).exit_index;
      REQUIRE(e >= prev);
      prev = e;
    }
  }
}

TEST_CASE("trace cost equals the sum of traversed layer costs") {
  auto m = tiny_model<float>(51);
  Pcg32 rng(9);
  auto recompute = [&](const ExitTrace<float>& tr, bool early_enabled) {
    const std::size_t n_layers = m.backbone.layers().size();
    double cost = 0.0;
    if (tr.exit_index < m.n_exits()) {
      const auto& ic = m.ics[static_cast<std::size_t>(tr.exit_index) - 1];
      for (std::size_t l = 0; l <= static_cast<std::size_t>(ic.attach_index); ++l)
        cost += m.layer_costs[l];
      for (int j = 0; j < tr.exit_index; ++j) cost += m.ic_cost(static_cast<std::size_t>(j));
    } else {
      for (std::size_t l = 0; l < n_layers; ++l) cost += m.layer_costs[l];
      if (early_enabled)
        for (std::size_t j = 0; j < m.ics.size(); ++j) cost += m.ic_cost(j);
    }
    return cost;
  };
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    const double t_c = rng.uniform(0.05, 1.0);
    auto tr = early_exit_infer(m, x, ExitPolicy::with_threshold(t_c));
    REQUIRE_THAT(tr.cost, Catch::Matchers::WithinRel(recompute(tr, true), 1e-12));
  }
  auto tr = early_exit_infer(m, random_tensor<float>({3, 8, 8}, rng), ExitPolicy::never_early());
  REQUIRE_THAT(tr.cost, Catch::Matchers::WithinRel(recompute(tr, false), 1e-12));
}

TEST_CASE("cost is monotone non-decreasing in exit index") {
  auto m = tiny_model<float>(61);
  Pcg32 rng(10);
  std::vector<double> cost_at_exit(static_cast<std::size_t>(m.n_exits()) + 1, -1.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    auto tr = early_exit_infer(m, x, ExitPolicy::with_threshold(rng.uniform(0.05, 1.0)));
    cost_at_exit[static_cast<std::size_t>(tr.exit_index)] = tr.cost;
  }
  double prev = 0.0;
  for (double c : cost_at_exit) {
    if (c < 0) continue;
    REQUIRE(c >= prev);
    prev = c;
  }
}

TEST_CASE("default layer costs are MAC counts") {
  auto m = tiny_model<float>(71);
  auto expect = default_layer_costs(m.backbone, m.ics);
  REQUIRE(m.layer_costs == expect);
  auto s = m.backbone.input_shape();
  for (std::size_t i = 0; i < m.backbone.layers().size(); ++i) {
    REQUIRE(m.layer_costs[i] == static_cast<double>(m.backbone.layers()[i]->macs(s)));
    s = m.backbone.layers()[i]->out_shape(s);
  }
}

TEST_CASE("accuracy definition and errors") {
  auto m = tiny_model<float>(81);
  Pcg32 rng(12);
  std::vector<LabeledExample<float>> data;
  for (int i = 0; i < 40; ++i) {
    LabeledExample<float> ex;
    ex.x = random_tensor<float>({3, 8, 8}, rng);
    ex.label = static_cast<int>(rng.bounded(4));
    data.push_back(std::move(ex));
  }
  auto span = std::span<const LabeledExample<float>>(data.data(), data.size());
  const ExitPolicy pol = ExitPolicy::with_threshold(0.4);

  SECTION("empty dataset is an error") {
    REQUIRE_THROWS_AS(accuracy(m, std::span<const LabeledExample<float>>(), pol),
                      std::invalid_argument);
  }
  SECTION("manual recount matches") {
    int correct = 0;
    for (const auto& ex : data)
      if (early_exit_infer(m, ex.x, pol).predicted_label == ex.label) ++correct;
    REQUIRE(accuracy(m, span, pol) == static_cast<double>(correct) / 40.0);
  }
  SECTION("all-correct dataset scores 1.0") {
    std::vector<LabeledExample<float>> easy = data;
    for (auto& ex : easy) ex.label = early_exit_infer(m, ex.x, pol).predicted_label;
    REQUIRE(accuracy(m, std::span<const LabeledExample<float>>(easy.data(), easy.size()), pol) ==
            1.0);
  }
  SECTION("never-early accuracy equals backbone classifier accuracy") {
    int correct = 0;
    for (const auto& ex : data)
      if (argmax_label(forward_all_exits(m, ex.x).back()) == ex.label) ++correct;
    REQUIRE(accuracy(m, span, ExitPolicy::never_early()) ==
            static_cast<double>(correct) / 40.0);
  }
}

TEST_CASE("calibration grid is the declared 0.500..1.000 step 0.005") {
  auto grid = calibration_grid();
  REQUIRE(grid.size() == 101);
  REQUIRE(grid.front() == 0.5);
  REQUIRE(grid.back() == 1.0);
  REQUIRE_THAT(grid[1] - grid[0], Catch::Matchers::WithinAbs(0.005, 1e-12));
}

TEST_CASE("calibrate_threshold edge behaviors") {
  const int n_y = 4;
  auto m = tiny_model<float>(91, n_y);
  Pcg32 rng(14);
  std::vector<LabeledExample<float>> val;
  for (int i = 0; i < 30; ++i) {
    LabeledExample<float> ex;
    ex.x = random_tensor<float>({3, 8, 8}, rng);
    ex.label = 0;
    val.push_back(std::move(ex));
  }
  auto span = std::span<const LabeledExample<float>>(val.data(), val.size());

  SECTION("empty validation set is an error") {
    REQUIRE_THROWS_AS(calibrate_threshold(m, std::span<const LabeledExample<float>>(), 0.05),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(calibrate_threshold(m, span, 1.0), std::invalid_argument);
  }

  SECTION("always-wrong confident ICs at rad 0 give NEVER_EARLY") {
    auto bad = m;
    // final exit always predicts label 0; ICs confidently predict label 1
    for (auto& l : bad.backbone.layers()) {
      if (l->kind() == LayerKind::dense) {
        auto* fc = static_cast<Dense<float>*>(l.get());
        fc->weight().zero();
        fc->bias().zero();
        fc->bias()[0] = 50.0f;
      }
    }
    for (auto& ic : bad.ics) {
      ic.fc.weight().zero();
      ic.fc.bias().zero();
      ic.fc.bias()[1] = 50.0f;
    }
    auto pol = calibrate_threshold(bad, span, 0.0);
    REQUIRE_FALSE(pol.early_exit_enabled());
    REQUIRE(pol.rad_target == 0.0);
  }

  SECTION("uniform ICs never exit so the grid minimum qualifies") {
    auto neutral = m;
    for (auto& ic : neutral.ics) {
      ic.fc.weight().zero();
      ic.fc.bias().zero();
    }
    // max IC confidence is 1/4 < 0.5, so no early exits at any grid value
    auto pol = calibrate_threshold(neutral, span, 0.5);
    REQUIRE(pol.early_exit_enabled());
    REQUIRE(*pol.t_c == 0.5);
  }
}

TEST_CASE("calibrate_threshold agrees with an exhaustive grid sweep") {
  // small trained model so the sweep is non-trivial
  DatasetSpec dspec;
  dspec.name = "cal";
  dspec.splits = {150, 60, 20};
  dspec.n_classes = 3;
  dspec.input_shape = {3, 16, 16};
  dspec.seed = 77;
  auto data = load_dataset<float>(dspec);
  ArchSpec arch;
  arch.channels = {6, 10};
  arch.pool_blocks = {1};
  arch.attach_blocks = {1};
  TrainConfig tc;
  tc.epochs = 3;
  tc.optimizer = OptimizerDesc::sgd(0.03);
  tc.seed = 5;
  auto trained = train_backbone<float>(arch, data, tc);
  auto m = build_multiexit<float>(trained.model, attach_indices_for(arch), 6);
  TrainConfig icc;
  icc.epochs = 3;
  icc.optimizer = OptimizerDesc::adam(0.001);
  icc.seed = 7;
  m = train_ics(m, data, icc);

  auto val = std::span<const LabeledExample<float>>(data.val.data(), data.val.size());
  for (double rad : {0.05, 0.15, 0.3}) {
    auto pol = calibrate_threshold(m, val, rad);
    // oracle: recompute RAD per grid point through the public accuracy op
    const double acc_full = accuracy(m, val, ExitPolicy::never_early());
    std::optional<double> expected;
    for (double t_c : calibration_grid()) {
      const double acc = accuracy(m, val, ExitPolicy::with_threshold(t_c));
      if ((acc_full - acc) / acc_full <= rad) {
        expected = t_c;
        break;
      }
    }
    REQUIRE(pol.early_exit_enabled() == expected.has_value());
    if (expected) REQUIRE(*pol.t_c == *expected);
    REQUIRE(pol.rad_target == rad);
    if (expected) {
      const double acc = accuracy(m, val, pol);
      REQUIRE((acc_full - acc) / acc_full <= rad);
    }
  }
}
