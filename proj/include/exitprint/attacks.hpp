#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitprint/model.hpp"
#include "exitprint/train.hpp"

namespace exitprint {

/// Parameterization of one adversarial modification. Every attack works on
/// a private copy; the input model is never mutated.
struct AttackConfig {
  enum class Kind {
    ic_retrain,
    ic_add_remove,
    exit_criteria,
    prune,
    quantize,
    finetune,
    adv_train
  };
  Kind kind = Kind::ic_retrain;
  std::uint64_t seed = 0;

  // prune
  double prune_rate = 0.1;
  // quantize
  int bits = 8;
  // finetune / adv_train
  int epochs = 4;
  // adv_train PGD budget
  int pgd_iterations = 10;
  double pgd_epsilon = 8.0 / 256.0;
  double pgd_step = (8.0 / 256.0) / 4.0;
  // exit_criteria
  double new_t_c = 0.9;
  // ic_add_remove
  std::vector<int> add_positions;
  std::vector<int> remove_exit_indices;  // 1-based internal exit indices

  static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::ic_retrain: return "ic_retrain";
      case Kind::ic_add_remove: return "ic_add_remove";
      case Kind::exit_criteria: return "exit_criteria";
      case Kind::prune: return "prune";
      case Kind::quantize: return "quantize";
      case Kind::finetune: return "finetune";
      case Kind::adv_train: return "adv_train";
    }
    return "?";
  }
};

/// Fresh IC heads, retrained from scratch; the backbone is untouched.
template <typename T>
MultiExitModel<T> retrain_ics_attack(const MultiExitModel<T>& model, const Dataset<T>& data,
                                     const TrainConfig& ic_cfg, std::uint64_t seed,
                                     unsigned workers = 0) {
  MultiExitModel<T> copy = model;
  Pcg32 rng(derive_seed(seed, "ic-reinit"));
  for (auto& ic : copy.ics) ic.fc.init(rng);
  TrainConfig cfg = ic_cfg;
  cfg.seed = derive_seed(seed, "ic-retrain");
  return train_ics(copy, data, cfg, nullptr, workers);
}

/// Adds ICs at new attach positions and/or removes existing internal exits
/// (1-based indices). New heads get a brief training run; the backbone and
/// surviving heads are untouched.
template <typename T>
MultiExitModel<T> edit_ics(const MultiExitModel<T>& model, const std::vector<int>& add_positions,
                           const std::vector<int>& remove_exit_indices, const Dataset<T>& data,
                           const TrainConfig& ic_cfg, std::uint64_t seed, unsigned workers = 0) {
  MultiExitModel<T> copy = model;

  if (!remove_exit_indices.empty()) {
    std::vector<int> remove = remove_exit_indices;
    std::sort(remove.begin(), remove.end());
    if (std::adjacent_find(remove.begin(), remove.end()) != remove.end())
      throw std::invalid_argument("edit_ics: duplicate remove index");
    for (auto it = remove.rbegin(); it != remove.rend(); ++it) {
      const int idx = *it;
      if (idx < 1 || idx > static_cast<int>(copy.ics.size()))
        throw std::invalid_argument("edit_ics: remove index out of range");
      copy.ics.erase(copy.ics.begin() + (idx - 1));
    }
  }

  bool added = false;
  for (int pos : add_positions) {
    for (const auto& ic : copy.ics)
      if (ic.attach_index == pos)
        throw std::invalid_argument("edit_ics: attach position already occupied");
    const int last = static_cast<int>(copy.backbone.layers().size()) - 1;
    if (pos <= 0 || pos >= last) throw std::invalid_argument("edit_ics: attach position out of range");
    auto feat = copy.backbone.shape_after(static_cast<std::size_t>(pos));
    if (feat.size() != 3)
      throw std::invalid_argument("edit_ics: attach position must produce a spatial feature");
    InternalClassifier<T> ic(pos, feat[0], copy.backbone.n_classes());
    Pcg32 rng(derive_seed(seed, "ic-add", static_cast<std::uint64_t>(pos)));
    ic.fc.init(rng);
    copy.ics.push_back(std::move(ic));
    added = true;
  }
  std::sort(copy.ics.begin(), copy.ics.end(),
            [](const auto& a, const auto& b) { return a.attach_index < b.attach_index; });
  if (copy.ics.empty())
    throw std::invalid_argument("edit_ics: edit would leave fewer than 2 exits");
  copy.layer_costs = default_layer_costs(copy.backbone, copy.ics);
  copy.validate();

  if (added) {
    TrainConfig cfg = ic_cfg;
    cfg.seed = derive_seed(seed, "ic-edit-train");
    return train_ics(copy, data, cfg, nullptr, workers);
  }
  return copy;
}

/// Pure policy change; reports the relative accuracy drop the new threshold
/// induces so callers can enforce a usability cap.
struct PolicyChange {
  ExitPolicy policy;
  double rad_induced = 0.0;
};

template <typename T>
PolicyChange set_exit_criteria(const MultiExitModel<T>& model,
                               std::span<const LabeledExample<T>> val_set, double new_t_c) {
  PolicyChange out;
  out.policy = ExitPolicy::with_threshold(new_t_c);  // validates the range
  const double acc_full = accuracy(model, val_set, ExitPolicy::never_early());
  const double acc_new = accuracy(model, val_set, out.policy);
  out.rad_induced = acc_full > 0.0 ? (acc_full - acc_new) / acc_full : 0.0;
  return out;
}

namespace detail {

// Conv and dense weight matrices (biases excluded) — the prunable and
// quantizable backbone tensors.
template <typename T>
std::vector<Tensor<T>*> backbone_weight_tensors(Backbone<T>& b) {
  std::vector<Tensor<T>*> out;
  for (auto& l : b.layers()) {
    auto ps = l->params();
    if (!ps.empty()) out.push_back(ps[0]);  // weight is first by convention
  }
  return out;
}

}  // namespace detail

/// Global unstructured magnitude pruning across all backbone weight
/// matrices: the `rate` fraction of smallest-|w| weights is zeroed, ties
/// broken by position so repeated pruning selects the same set. IC heads
/// are untouched.
template <typename T>
MultiExitModel<T> prune(const MultiExitModel<T>& model, double rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::invalid_argument("prune: rate must lie in (0,1)");
  MultiExitModel<T> copy = model;
  auto weights = detail::backbone_weight_tensors(copy.backbone);

  std::size_t total = 0;
  for (const auto* w : weights) total += static_cast<std::size_t>(w->numel());
  const std::size_t k = static_cast<std::size_t>(static_cast<double>(total) * rate);
  if (k == 0) return copy;

  std::vector<std::pair<double, std::size_t>> mag;  // (|w|, global position)
  mag.reserve(total);
  std::size_t base = 0;
  for (const auto* w : weights) {
    for (std::int64_t i = 0; i < w->numel(); ++i)
      mag.emplace_back(std::abs(static_cast<double>((*w)[i])), base + static_cast<std::size_t>(i));
    base += static_cast<std::size_t>(w->numel());
  }
  std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(k - 1), mag.end());
  // exact-k selection: everything strictly below the k-th magnitude, then
  // fill remaining slots with threshold-magnitude weights in position order
  const double thresh = mag[k - 1].first;
  std::vector<bool> zero(total, false);
  std::size_t chosen = 0;
  for (const auto& [a, pos] : mag)
    if (a < thresh) {
      zero[pos] = true;
      ++chosen;
    }
  std::vector<std::size_t> at_thresh;
  for (const auto& [a, pos] : mag)
    if (a == thresh) at_thresh.push_back(pos);
  std::sort(at_thresh.begin(), at_thresh.end());
  for (std::size_t pos : at_thresh) {
    if (chosen >= k) break;
    zero[pos] = true;
    ++chosen;
  }

  base = 0;
  for (auto* w : weights) {
    for (std::int64_t i = 0; i < w->numel(); ++i)
      if (zero[base + static_cast<std::size_t>(i)]) (*w)[i] = T(0);
    base += static_cast<std::size_t>(w->numel());
  }
  return copy;
}

/// Simulated per-tensor affine quantization of the backbone weights:
/// round to 2^bits uniformly spaced levels over [min, max], then store the
/// dequantized values. Applying it twice is a bit-for-bit no-op.
template <typename T>
MultiExitModel<T> quantize(const MultiExitModel<T>& model, int bits = 8) {
  if (bits < 2) throw std::invalid_argument("quantize: bits must be >= 2");
  MultiExitModel<T> copy = model;
  auto weights = detail::backbone_weight_tensors(copy.backbone);
  const double levels = std::pow(2.0, bits) - 1.0;
  for (auto* w : weights) {
    double lo = static_cast<double>((*w)[0]), hi = lo;
    for (std::int64_t i = 0; i < w->numel(); ++i) {
      lo = std::min(lo, static_cast<double>((*w)[i]));
      hi = std::max(hi, static_cast<double>((*w)[i]));
    }
    if (hi == lo) continue;
    const double scale = (hi - lo) / levels;
    for (std::int64_t i = 0; i < w->numel(); ++i) {
      const double q = std::round((static_cast<double>((*w)[i]) - lo) / scale);
      (*w)[i] = static_cast<T>(lo + q * scale);
    }
  }
  return copy;
}

/// Inner maximization of adversarial training: L-infinity PGD with random
/// start, projecting both into the epsilon ball and into [0,1].
template <typename T>
Tensor<T> pgd_perturb(const Backbone<T>& model, const Tensor<T>& x, int label, int iterations,
                      double epsilon, double step_size, std::uint64_t seed) {
  Tensor<T> adv = x;
  if (epsilon <= 0.0) return adv;
  Pcg32 rng(seed, /*stream=*/0x9d);
  for (std::int64_t i = 0; i < adv.numel(); ++i) {
    double v = static_cast<double>(adv[i]) + rng.uniform(-epsilon, epsilon);
    adv[i] = static_cast<T>(std::min(1.0, std::max(0.0, v)));
  }
  for (int it = 0; it < iterations; ++it) {
    // input gradient of the final-exit cross-entropy
    std::vector<Tensor<T>> acts = detail::backbone_tape(model, adv);
    const Tensor<T>& logits = acts.back();
    std::vector<T> gl;
    cross_entropy_with_grad(
        std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel())), label, gl);
    Tensor<T> g({logits.numel()});
    for (std::int64_t e = 0; e < g.numel(); ++e) g[e] = gl[static_cast<std::size_t>(e)];
    for (std::size_t li = model.layers().size(); li-- > 0;)
      g = model.layers()[li]->backward(acts[li], g, nullptr);

    for (std::int64_t i = 0; i < adv.numel(); ++i) {
      double v = static_cast<double>(adv[i]) +
                 step_size * (g[i] > T(0) ? 1.0 : (g[i] < T(0) ? -1.0 : 0.0));
      const double lo = static_cast<double>(x[i]) - epsilon;
      const double hi = static_cast<double>(x[i]) + epsilon;
      v = std::min(hi, std::max(lo, v));
      adv[i] = static_cast<T>(std::min(1.0, std::max(0.0, v)));
    }
  }
  return adv;
}

// Shared backbone training loop over an existing model (used by finetuning
// and adversarial training; train_backbone starts from scratch instead).
// The optimizer state persists across epochs; after_epoch fires when each
// epoch's update is complete.
template <typename T>
void finetune_backbone_inplace(MultiExitModel<T>& m, const Dataset<T>& data,
                               const TrainConfig& cfg, unsigned workers, std::ostream* log,
                               bool adversarial = false, int pgd_iters = 0, double eps = 0.0,
                               double step_size = 0.0,
                               const std::function<void(int)>& after_epoch = {}) {
  cfg.validate();
  Backbone<T>& model = m.backbone;
  Optimizer<T> opt(cfg.optimizer);
  const std::size_t n_layers = model.layers().size();
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.decay_for_epoch(epoch);
    Pcg32 shuffle_rng(derive_seed(cfg.seed, "ft-shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    Pcg32 noise_rng(derive_seed(cfg.seed, "ft-noise", static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<const LabeledExample<T>*> batch(bsz);
      std::vector<std::uint64_t> pgd_seeds(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        batch[k] = &data.train[order[start + k]];
        pgd_seeds[k] = noise_rng.next_u64();
      }
      std::vector<std::vector<std::vector<Tensor<T>>>> sample_grads(bsz);
      std::vector<double> sample_loss(bsz);
      parallel_for(
          bsz,
          [&](std::size_t k) {
            sample_grads[k].resize(n_layers);
            Tensor<T> x = batch[k]->x;
            if (adversarial)
              x = pgd_perturb(model, x, batch[k]->label, pgd_iters, eps, step_size, pgd_seeds[k]);
            sample_loss[k] =
                detail::backbone_sample_grads(model, x, batch[k]->label, sample_grads[k]);
          },
          workers);
      std::vector<std::vector<Tensor<T>>> acc(n_layers);
      const double scale = 1.0 / static_cast<double>(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        detail::add_grads(acc, sample_grads[k], scale);
        loss_sum += sample_loss[k];
      }
      seen += static_cast<std::int64_t>(bsz);
      auto flat = detail::flatten_grads(acc);
      auto params = model.parameters();
      opt.step(std::span<Tensor<T>* const>(params.data(), params.size()),
               std::span<const Tensor<T>>(flat.data(), flat.size()));
    }
    const double train_loss = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(train_loss))
      throw TrainingError("finetune: loss diverged (non-finite) at epoch " + std::to_string(epoch));
    auto t1 = std::chrono::steady_clock::now();
    double val_acc = data.val.empty()
                         ? 0.0
                         : detail::backbone_val_accuracy(
                               model,
                               std::span<const LabeledExample<T>>(data.val.data(), data.val.size()),
                               workers);
    log_epoch(log, {epoch, train_loss, val_acc, std::chrono::duration<double>(t1 - t0).count()});
    if (after_epoch) after_epoch(epoch);
  }
}

/// Finetuning with the intermediate models captured every `snapshot_every`
/// epochs, each with its ICs retrained. The last epoch is always included.
template <typename T>
std::vector<MultiExitModel<T>> finetune_with_snapshots(const MultiExitModel<T>& model,
                                                       const Dataset<T>& data, int epochs,
                                                       int snapshot_every, std::uint64_t seed,
                                                       const TrainConfig& ic_cfg,
                                                       unsigned workers = 0,
                                                       std::ostream* log = nullptr) {
  if (epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
  MultiExitModel<T> work = model;
  std::vector<MultiExitModel<T>> snapshots;
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.optimizer = OptimizerDesc::adam(0.001);
  cfg.seed = derive_seed(seed, "finetune");
  finetune_backbone_inplace(work, data, cfg, workers, log, false, 0, 0.0, 0.0, [&](int epoch) {
    if (epoch % snapshot_every == 0 || epoch == epochs) {
      MultiExitModel<T> snap = work;
      TrainConfig ic = ic_cfg;
      ic.seed = derive_seed(seed, "finetune-ic", static_cast<std::uint64_t>(epoch));
      snap = train_ics(snap, data, ic, nullptr, workers);
      snap.id = model.id + "-finetune-ep" + std::to_string(epoch);
      snapshots.push_back(std::move(snap));
    }
  });
  return snapshots;
}

/// Low-rate benign finetuning of the backbone, then a brief IC retraining
/// pass so the result is a working multi-exit model again.
template <typename T>
MultiExitModel<T> finetune(const MultiExitModel<T>& model, const Dataset<T>& data, int epochs,
                           std::uint64_t seed, const TrainConfig& ic_cfg, unsigned workers = 0,
                           std::ostream* log = nullptr) {
  if (epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
  MultiExitModel<T> copy = model;

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.optimizer = OptimizerDesc::adam(0.001);
  cfg.seed = derive_seed(seed, "finetune");
  finetune_backbone_inplace(copy, data, cfg, workers, log);

  TrainConfig ic = ic_cfg;
  ic.seed = derive_seed(seed, "finetune-ic");
  return train_ics(copy, data, ic, nullptr, workers);
}

/// PGD adversarial training of the backbone (cross-entropy on adversarial
/// inputs), with IC retraining afterwards. `snapshot_every` > 0 also returns
/// the intermediate models taken every that-many epochs.
template <typename T>
std::vector<MultiExitModel<T>> adversarial_train(const MultiExitModel<T>& model,
                                                 const Dataset<T>& data, const AttackConfig& cfg,
                                                 const TrainConfig& ic_cfg, int snapshot_every = 2,
                                                 unsigned workers = 0, std::ostream* log = nullptr) {
  if (cfg.epochs < 1) throw std::invalid_argument("adversarial_train: epochs must be >= 1");
  if (!(cfg.pgd_epsilon > 0.0 && cfg.pgd_epsilon < 1.0))
    throw std::invalid_argument("adversarial_train: epsilon must lie in (0,1)");

  std::vector<MultiExitModel<T>> snapshots;
  MultiExitModel<T> work = model;
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = 32;
  tc.optimizer = OptimizerDesc::adam(0.001);
  tc.seed = derive_seed(cfg.seed, "advtrain");
  finetune_backbone_inplace(work, data, tc, workers, log, /*adversarial=*/true,
                            cfg.pgd_iterations, cfg.pgd_epsilon, cfg.pgd_step, [&](int epoch) {
                              if (snapshot_every > 0 &&
                                  (epoch % snapshot_every == 0 || epoch == cfg.epochs)) {
                                MultiExitModel<T> snap = work;
                                TrainConfig ic = ic_cfg;
                                ic.seed = derive_seed(cfg.seed, "advtrain-ic",
                                                      static_cast<std::uint64_t>(epoch));
                                snap = train_ics(snap, data, ic, nullptr, workers);
                                snap.id =
                                    model.id + "-advtrain-ep" + std::to_string(epoch);
                                snapshots.push_back(std::move(snap));
                              }
                            });
  return snapshots;
}

}  // namespace exitprint
