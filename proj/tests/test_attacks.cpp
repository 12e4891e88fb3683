#include <catch2/catch_amalgamated.hpp>

#include "exitprint/attacks.hpp"
#include "exitprint/dataset.hpp"
#include "test_util.hpp"

using namespace exitprint;
using test_util::random_tensor;
using test_util::tiny_model;

namespace {

Dataset<float> small_data(std::uint64_t seed) {
  DatasetSpec spec;
  spec.name = "atk";
  spec.splits = {60, 20, 20};
  spec.n_classes = 4;
  spec.input_shape = {3, 8, 8};
  spec.seed = seed;
  return load_dataset<float>(spec);
}

TrainConfig quick_ic() {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.optimizer = OptimizerDesc::adam(0.001);
  return tc;
}

template <typename T>
std::size_t count_zero_weights(const MultiExitModel<T>& m) {
  std::size_t zeros = 0;
  for (const auto& l : m.backbone.layers()) {
    auto ps = l->params();
    if (ps.empty()) continue;
    const auto& w = *ps[0];
    for (std::int64_t i = 0; i < w.numel(); ++i)
      if (w[i] == T(0)) ++zeros;
  }
  return zeros;
}

template <typename T>
std::size_t count_prunable_weights(const MultiExitModel<T>& m) {
  std::size_t total = 0;
  for (const auto& l : m.backbone.layers()) {
    auto ps = l->params();
    if (!ps.empty()) total += static_cast<std::size_t>(ps[0]->numel());
  }
  return total;
}

template <typename T>
std::uint64_t ic_checksum(const MultiExitModel<T>& m) {
  auto ps = m.ic_parameters();
  return param_checksum<T>(std::vector<const Tensor<T>*>(ps.begin(), ps.end()));
}

template <typename T>
std::vector<T> all_backbone_weights(const MultiExitModel<T>& m) {
  std::vector<T> out;
  for (const auto* p : m.backbone.parameters())
    for (std::int64_t i = 0; i < p->numel(); ++i) out.push_back((*p)[i]);
  return out;
}

}  // namespace

TEST_CASE("prune zeroes exactly the requested fraction") {
  auto m = tiny_model<float>(3);
  const std::size_t total = count_prunable_weights(m);
  for (double rate : {0.1, 0.2, 0.3, 0.4}) {
    auto pruned = prune(m, rate);
    const std::size_t zeros = count_zero_weights(pruned);
    const auto expect = static_cast<std::size_t>(static_cast<double>(total) * rate);
    REQUIRE(zeros >= expect - 1);
    REQUIRE(zeros <= expect + 1);
    REQUIRE(ic_checksum(pruned) == ic_checksum(m));
    REQUIRE(backbone_checksum(pruned.backbone) != backbone_checksum(m.backbone));
  }
  REQUIRE_THROWS_AS(prune(m, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(prune(m, 1.0), std::invalid_argument);
}

TEST_CASE("pruning twice yields the same zero set as pruning once") {
  auto m = tiny_model<float>(5);
  auto once = prune(m, 0.25);
  auto twice = prune(once, 0.25);
  REQUIRE(all_backbone_weights(twice) == all_backbone_weights(once));
}

TEST_CASE("pruned weights are the smallest by magnitude") {
  auto m = tiny_model<float>(7);
  auto pruned = prune(m, 0.2);
  // the largest zeroed weight must not exceed the smallest survivor
  double max_zeroed = 0.0, min_kept = 1e30;
  std::size_t zeroed = 0;
  auto itm = m.backbone.layers().begin();
  auto itp = pruned.backbone.layers().begin();
  for (; itm != m.backbone.layers().end(); ++itm, ++itp) {
    auto po = (*itm)->params();
    auto pp = (*itp)->params();
    if (po.empty()) continue;
    const auto& wo = *po[0];
    const auto& wp = *pp[0];
    for (std::int64_t i = 0; i < wo.numel(); ++i) {
      if (wp[i] == 0.0f && wo[i] != 0.0f) {
        max_zeroed = std::max(max_zeroed, std::abs(static_cast<double>(wo[i])));
        ++zeroed;
      } else if (wp[i] != 0.0f) {
        min_kept = std::min(min_kept, std::abs(static_cast<double>(wp[i])));
      }
    }
  }
  REQUIRE(zeroed > 0);
  REQUIRE(max_zeroed <= min_kept);
}

TEST_CASE("quantize error bound and idempotence") {
  auto m = tiny_model<float>(9);
  const int bits = 8;
  auto q = quantize(m, bits);

  auto itm = m.backbone.layers().begin();
  auto itq = q.backbone.layers().begin();
  for (; itm != m.backbone.layers().end(); ++itm, ++itq) {
    auto po = (*itm)->params();
    auto pq = (*itq)->params();
    if (po.empty()) continue;
    const auto& wo = *po[0];
    const auto& wq = *pq[0];
    float lo = wo[0], hi = wo[0];
    for (std::int64_t i = 0; i < wo.numel(); ++i) {
      lo = std::min(lo, wo[i]);
      hi = std::max(hi, wo[i]);
    }
    const double bound = (static_cast<double>(hi) - lo) / (std::pow(2.0, bits) - 1.0) / 2.0;
    for (std::int64_t i = 0; i < wo.numel(); ++i)
      REQUIRE(std::abs(static_cast<double>(wq[i]) - static_cast<double>(wo[i])) <=
              bound + 1e-9);
  }

  auto qq = quantize(q, bits);
  REQUIRE(all_backbone_weights(qq) == all_backbone_weights(q));
  REQUIRE(backbone_checksum(qq.backbone) == backbone_checksum(q.backbone));
  REQUIRE(ic_checksum(q) == ic_checksum(m));
  REQUIRE_THROWS_AS(quantize(m, 1), std::invalid_argument);
}

TEST_CASE("quantize leaves constant tensors unchanged") {
  auto m = tiny_model<float>(11);
  auto* conv = static_cast<Conv3x3<float>*>(m.backbone.layers()[0].get());
  conv->weight().fill(0.5f);
  auto q = quantize(m, 8);
  auto* qconv = static_cast<Conv3x3<float>*>(q.backbone.layers()[0].get());
  for (std::int64_t i = 0; i < qconv->weight().numel(); ++i)
    REQUIRE(qconv->weight()[i] == 0.5f);
}

TEST_CASE("PGD perturbations stay inside the epsilon ball and the unit box") {
  auto m = tiny_model<float>(13);
  Pcg32 rng(5);
  const double eps = 8.0 / 256.0;
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<float>({3, 8, 8}, rng);
    auto adv = pgd_perturb(m.backbone, x, 1, 10, eps, eps / 4.0, rng.next_u64());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      REQUIRE(std::abs(static_cast<double>(adv[i]) - static_cast<double>(x[i])) <= eps + 1e-7);
      REQUIRE(adv[i] >= 0.0f);
      REQUIRE(adv[i] <= 1.0f);
    }
  }
}

TEST_CASE("PGD at epsilon zero returns the clean sample") {
  auto m = tiny_model<float>(17);
  Pcg32 rng(6);
  auto x = random_tensor<float>({3, 8, 8}, rng);
  auto adv = pgd_perturb(m.backbone, x, 2, 10, 0.0, 0.01, 99);
  REQUIRE(adv.storage() == x.storage());
}

TEST_CASE("retrain_ics_attack keeps the backbone and changes the heads") {
  auto data = small_data(21);
  auto m = tiny_model<float>(19);
  auto attacked = retrain_ics_attack(m, data, quick_ic(), 7);
  REQUIRE(backbone_checksum(attacked.backbone) == backbone_checksum(m.backbone));
  REQUIRE(ic_checksum(attacked) != ic_checksum(m));
}

TEST_CASE("edit_ics add and remove semantics") {
  auto data = small_data(23);
  auto m = tiny_model<float>(23);  // 3 blocks -> 2 ICs, n = 3

  SECTION("removing down to one IC keeps a valid 2-exit model") {
    auto out = edit_ics(m, {}, {1}, data, quick_ic(), 3);
    REQUIRE(out.n_exits() == 2);
    REQUIRE(backbone_checksum(out.backbone) == backbone_checksum(m.backbone));
  }
  SECTION("removing every IC is rejected") {
    REQUIRE_THROWS_AS(edit_ics(m, {}, {1, 2}, data, quick_ic(), 3), std::invalid_argument);
  }
  SECTION("adding at an occupied position is rejected") {
    REQUIRE_THROWS_AS(edit_ics(m, {m.ics[0].attach_index}, {}, data, quick_ic(), 3),
                      std::invalid_argument);
  }
  SECTION("duplicate removal indices are rejected") {
    REQUIRE_THROWS_AS(edit_ics(m, {}, {1, 1}, data, quick_ic(), 3), std::invalid_argument);
  }
  SECTION("out-of-range positions are rejected") {
    REQUIRE_THROWS_AS(edit_ics(m, {0}, {}, data, quick_ic(), 3), std::invalid_argument);
    REQUIRE_THROWS_AS(edit_ics(m, {}, {5}, data, quick_ic(), 3), std::invalid_argument);
  }
  SECTION("no-op edit returns an identical model") {
    auto out = edit_ics(m, {}, {}, data, quick_ic(), 3);
    REQUIRE(model_checksum(out) == model_checksum(m));
  }
  SECTION("adding an IC yields one more exit and a trained head") {
    // find a free spatial interior position
    std::set<int> used;
    for (const auto& ic : m.ics) used.insert(ic.attach_index);
    int pos = -1;
    for (int p = 1; p < static_cast<int>(m.backbone.layers().size()) - 1; ++p) {
      if (used.count(p)) continue;
      if (m.backbone.shape_after(static_cast<std::size_t>(p)).size() == 3) {
        pos = p;
        break;
      }
    }
    REQUIRE(pos > 0);
    auto out = edit_ics(m, {pos}, {}, data, quick_ic(), 3);
    REQUIRE(out.n_exits() == m.n_exits() + 1);
    REQUIRE(backbone_checksum(out.backbone) == backbone_checksum(m.backbone));
  }
}

TEST_CASE("set_exit_criteria validates and reports the induced drop") {
  auto data = small_data(29);
  auto m = tiny_model<float>(29);
  auto val = std::span<const LabeledExample<float>>(data.val.data(), data.val.size());
  REQUIRE_THROWS_AS(set_exit_criteria(m, val, 1.5), std::invalid_argument);
  REQUIRE_THROWS_AS(set_exit_criteria(m, val, 0.0), std::invalid_argument);
  auto change = set_exit_criteria(m, val, 0.9);
  REQUIRE(change.policy.early_exit_enabled());
  REQUIRE(*change.policy.t_c == 0.9);
  REQUIRE(std::isfinite(change.rad_induced));
}

TEST_CASE("finetune changes the backbone; epoch validation") {
  auto data = small_data(31);
  auto m = tiny_model<float>(31);
  REQUIRE_THROWS_AS(finetune(m, data, 0, 1, quick_ic()), std::invalid_argument);
  auto out = finetune(m, data, 1, 1, quick_ic());
  REQUIRE(backbone_checksum(out.backbone) != backbone_checksum(m.backbone));
}

TEST_CASE("finetune_with_snapshots returns one model per snapshot epoch") {
  auto data = small_data(33);
  auto m = tiny_model<float>(33);
  m.id = "t";
  auto snaps = finetune_with_snapshots(m, data, 4, 2, 5, quick_ic());
  REQUIRE(snaps.size() == 2);
  REQUIRE(snaps[0].id == "t-finetune-ep2");
  REQUIRE(snaps[1].id == "t-finetune-ep4");
  REQUIRE(backbone_checksum(snaps[0].backbone) != backbone_checksum(snaps[1].backbone));
}

TEST_CASE("adversarial training produces snapshots and changes the backbone") {
  auto data = small_data(35);
  auto m = tiny_model<float>(35);
  m.id = "t";
  AttackConfig ac;
  ac.kind = AttackConfig::Kind::adv_train;
  ac.epochs = 2;
  ac.pgd_iterations = 3;
  ac.seed = 11;
  auto snaps = adversarial_train(m, data, ac, quick_ic(), 2);
  REQUIRE(snaps.size() == 1);
  REQUIRE(snaps[0].id == "t-advtrain-ep2");
  REQUIRE(backbone_checksum(snaps[0].backbone) != backbone_checksum(m.backbone));

  AttackConfig bad = ac;
  bad.epochs = 0;
  REQUIRE_THROWS_AS(adversarial_train(m, data, bad, quick_ic(), 2), std::invalid_argument);
  bad = ac;
  bad.pgd_epsilon = 0.0;
  REQUIRE_THROWS_AS(adversarial_train(m, data, bad, quick_ic(), 2), std::invalid_argument);
}

TEST_CASE("attacks never mutate the input model") {
  auto data = small_data(37);
  auto m = tiny_model<float>(37);
  const auto sum = model_checksum(m);
  (void)prune(m, 0.2);
  (void)quantize(m, 8);
  (void)retrain_ics_attack(m, data, quick_ic(), 1);
  (void)finetune(m, data, 1, 1, quick_ic());
  REQUIRE(model_checksum(m) == sum);
}
