#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitprint/arch.hpp"
#include "exitprint/dataset.hpp"
#include "exitprint/model.hpp"
#include "exitprint/parallel.hpp"
#include "exitprint/rng.hpp"

namespace exitprint {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OptimizerDesc {
  enum class Kind { sgd_momentum, adam };
  Kind kind = Kind::sgd_momentum;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  // (epoch, factor): multiply the learning rate by `factor` at `epoch`.
  std::vector<std::pair<int, double>> lr_decay;

  static OptimizerDesc sgd(double lr, double momentum = 0.9, double wd = 0.0) {
    return {Kind::sgd_momentum, lr, momentum, wd, {}};
  }
  static OptimizerDesc adam(double lr = 0.001) { return {Kind::adam, lr, 0.9, 0.0, {}}; }
};

struct AugmentFlags {
  bool horizontal_flip = false;
  bool random_crop = false;
};

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  OptimizerDesc optimizer;
  std::uint64_t seed = 0;
  AugmentFlags augment;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(optimizer.learning_rate > 0.0))
      throw std::invalid_argument("train: learning rate must be positive");
  }
};

/// First-moment (SGD momentum) or Adam updates over an arbitrary parameter
/// list. State tensors are lazily shaped from the first step.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerDesc desc) : desc_(desc), lr_(desc.learning_rate) {}

  void decay_for_epoch(int epoch) {
    for (auto& [e, factor] : desc_.lr_decay)
      if (e == epoch) lr_ *= factor;
  }

  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads) {
    if (state_m_.empty()) {
      for (const auto* p : params) state_m_.emplace_back(p->shape());
      if (desc_.kind == OptimizerDesc::Kind::adam)
        for (const auto* p : params) state_v_.emplace_back(p->shape());
    }
    ++t_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T>& p = *params[k];
      const Tensor<T>& g = grads[k];
      Tensor<T>& m = state_m_[k];
      if (desc_.kind == OptimizerDesc::Kind::sgd_momentum) {
        for (std::int64_t i = 0; i < p.numel(); ++i) {
          T gi = g[i] + static_cast<T>(desc_.weight_decay) * p[i];
          m[i] = static_cast<T>(desc_.momentum) * m[i] + gi;
          p[i] -= static_cast<T>(lr_) * m[i];
        }
      } else {
        Tensor<T>& v = state_v_[k];
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, t_);
        const double bc2 = 1.0 - std::pow(b2, t_);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
          double gi = static_cast<double>(g[i]) + desc_.weight_decay * static_cast<double>(p[i]);
          double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
          double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
          m[i] = static_cast<T>(mi);
          v[i] = static_cast<T>(vi);
          p[i] -= static_cast<T>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
        }
      }
    }
  }

  double learning_rate() const { return lr_; }

 private:
  OptimizerDesc desc_;
  double lr_;
  int t_ = 0;
  std::vector<Tensor<T>> state_m_;
  std::vector<Tensor<T>> state_v_;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double wall_seconds = 0.0;
};

inline void log_epoch(std::ostream* log, const EpochStats& s) {
  if (!log) return;
  (*log) << "epoch=" << s.epoch << " train_loss=" << s.train_loss
         << " val_acc=" << s.val_accuracy << " wall_s=" << s.wall_seconds << "\n";
  log->flush();
}

namespace detail {

template <typename T>
Tensor<T> augment_sample(const Tensor<T>& x, const AugmentFlags& aug, Pcg32& rng) {
  if (!aug.horizontal_flip && !aug.random_crop) return x;
  Tensor<T> out = x;
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (aug.horizontal_flip && rng.bounded(2) == 1) {
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w / 2; ++xx)
          std::swap(out.at(ch, y, xx), out.at(ch, y, w - 1 - xx));
  }
  if (aug.random_crop) {
    // shift by up to +-4 pixels with zero padding
    const std::int64_t dy = static_cast<std::int64_t>(rng.bounded(9)) - 4;
    const std::int64_t dx = static_cast<std::int64_t>(rng.bounded(9)) - 4;
    if (dy != 0 || dx != 0) {
      Tensor<T> shifted(x.shape());
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const std::int64_t sx = xx + dx;
            if (sx < 0 || sx >= w) continue;
            shifted.at(ch, y, xx) = out.at(ch, sy, sx);
          }
        }
      out = std::move(shifted);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> backbone_tape(const Backbone<T>& b, const Tensor<T>& x) {
  std::vector<Tensor<T>> acts;
  acts.reserve(b.layers().size() + 1);
  acts.push_back(x);
  for (const auto& l : b.layers()) acts.push_back(l->forward(acts.back()));
  return acts;
}

// Cross-entropy loss and parameter gradients for one sample through a plain
// backbone. Gradients are accumulated into `grads` ([layer][param]).
template <typename T>
double backbone_sample_grads(const Backbone<T>& b, const Tensor<T>& x, int label,
                             std::vector<std::vector<Tensor<T>>>& grads) {
  auto acts = backbone_tape(b, x);
  const Tensor<T>& logits = acts.back();
  std::vector<T> gl;
  double loss = cross_entropy_with_grad(
      std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel())), label, gl);
  Tensor<T> g({logits.numel()});
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = gl[static_cast<std::size_t>(i)];
  for (std::size_t i = b.layers().size(); i-- > 0;)
    g = b.layers()[i]->backward(acts[i], g, &grads[i]);
  return loss;
}

template <typename T>
void add_grads(std::vector<std::vector<Tensor<T>>>& acc,
               const std::vector<std::vector<Tensor<T>>>& inc, double scale) {
  for (std::size_t i = 0; i < inc.size(); ++i)
    for (std::size_t k = 0; k < inc[i].size(); ++k) {
      if (acc[i].size() <= k) acc[i].emplace_back(inc[i][k].shape());
      for (std::int64_t e = 0; e < inc[i][k].numel(); ++e)
        acc[i][k][e] += static_cast<T>(static_cast<double>(inc[i][k][e]) * scale);
    }
}

template <typename T>
std::vector<Tensor<T>> flatten_grads(std::vector<std::vector<Tensor<T>>>& nested) {
  std::vector<Tensor<T>> flat;
  for (auto& per_layer : nested)
    for (auto& g : per_layer) flat.push_back(std::move(g));
  return flat;
}

template <typename T>
double backbone_val_accuracy(const Backbone<T>& b, std::span<const LabeledExample<T>> val,
                             unsigned workers) {
  std::vector<int> ok(val.size(), 0);
  parallel_for(
      val.size(),
      [&](std::size_t i) {
        auto acts = backbone_tape(b, val[i].x);
        const Tensor<T>& logits = acts.back();
        int pred = 0;
        for (std::int64_t k = 1; k < logits.numel(); ++k)
          if (logits[k] > logits[pred]) pred = static_cast<int>(k);
        ok[i] = (pred == val[i].label) ? 1 : 0;
      },
      workers);
  std::int64_t s = 0;
  for (int v : ok) s += v;
  return static_cast<double>(s) / static_cast<double>(val.size());
}

}  // namespace detail

template <typename T>
struct BackboneTrainResult {
  Backbone<T> model;
  double final_train_loss = 0.0;
  double final_train_accuracy = 0.0;
  double final_val_accuracy = 0.0;
  std::vector<EpochStats> epochs;
};

/// Trains a fresh backbone with mini-batch gradient descent. Deterministic
/// given (arch, data, cfg.seed): initialization, shuffling, and augmentation
/// all derive from cfg.seed, and per-sample gradients are reduced in sample
/// order regardless of worker count.
template <typename T>
BackboneTrainResult<T> train_backbone(const ArchSpec& arch, const Dataset<T>& data,
                                      const TrainConfig& cfg, std::ostream* log = nullptr,
                                      unsigned workers = 0) {
  cfg.validate();
  if (data.train.empty() || data.val.empty())
    throw std::invalid_argument("train_backbone: train and val splits must be non-empty");

  BackboneTrainResult<T> result;
  result.model =
      make_backbone<T>(arch, data.input_shape, data.n_classes, derive_seed(cfg.seed, "init"));
  Backbone<T>& model = result.model;
  Optimizer<T> opt(cfg.optimizer);

  const std::size_t n_layers = model.layers().size();
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.decay_for_epoch(epoch);
    Pcg32 shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    Pcg32 aug_rng(derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    std::int64_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      // augmentation consumes randomness on the single control stream, in
      // batch order, before the parallel section
      std::vector<Tensor<T>> xs(bsz);
      std::vector<int> labels(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        const auto& ex = data.train[order[start + k]];
        xs[k] = detail::augment_sample(ex.x, cfg.augment, aug_rng);
        labels[k] = ex.label;
      }
      std::vector<std::vector<std::vector<Tensor<T>>>> sample_grads(bsz);
      std::vector<double> sample_loss(bsz);
      parallel_for(
          bsz,
          [&](std::size_t k) {
            sample_grads[k].resize(n_layers);
            sample_loss[k] = detail::backbone_sample_grads(model, xs[k], labels[k], sample_grads[k]);
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
      throw TrainingError("train_backbone: loss diverged (non-finite) at epoch " +
                          std::to_string(epoch));
    const double val_acc = detail::backbone_val_accuracy(
        model, std::span<const LabeledExample<T>>(data.val.data(), data.val.size()), workers);
    if (!std::isfinite(val_acc))
      throw TrainingError("train_backbone: validation accuracy non-finite at epoch " +
                          std::to_string(epoch));
    auto t1 = std::chrono::steady_clock::now();
    EpochStats stats{epoch, train_loss,
                     val_acc, std::chrono::duration<double>(t1 - t0).count()};
    log_epoch(log, stats);
    result.epochs.push_back(stats);
    result.final_train_loss = train_loss;
    result.final_val_accuracy = val_acc;
    (void)correct;
  }
  return result;
}

/// Trains the IC heads on frozen backbone features. The backbone tensors are
/// never touched, so its checksum is bit-identical before and after.
template <typename T>
MultiExitModel<T> train_ics(const MultiExitModel<T>& model, const Dataset<T>& data,
                            const TrainConfig& cfg, std::ostream* log = nullptr,
                            unsigned workers = 0) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train_ics: empty training split");

  MultiExitModel<T> out = model;
  Optimizer<T> opt(cfg.optimizer);
  const std::size_t n_ics = out.ics.size();

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.decay_for_epoch(epoch);
    Pcg32 shuffle_rng(derive_seed(cfg.seed, "ic-shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    Pcg32 aug_rng(derive_seed(cfg.seed, "ic-augment", static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<Tensor<T>> xs(bsz);
      std::vector<int> labels(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        const auto& ex = data.train[order[start + k]];
        xs[k] = detail::augment_sample(ex.x, cfg.augment, aug_rng);
        labels[k] = ex.label;
      }
      // each sample contributes gradients to every head, [ic][param]
      std::vector<std::vector<std::vector<Tensor<T>>>> sample_grads(bsz);
      std::vector<double> sample_loss(bsz);
      parallel_for(
          bsz,
          [&](std::size_t k) {
            sample_grads[k].resize(n_ics);
            auto tape = forward_tape(out, xs[k]);
            double loss = 0.0;
            for (std::size_t j = 0; j < n_ics; ++j) {
              const auto& ic = out.ics[j];
              GlobalAvgPool<T> pool;
              Tensor<T> pooled =
                  pool.forward(tape.acts[static_cast<std::size_t>(ic.attach_index) + 1]);
              Tensor<T> logits = ic.fc.forward(pooled);
              std::vector<T> gl;
              loss += cross_entropy_with_grad(
                  std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel())),
                  labels[k], gl);
              Tensor<T> glt({logits.numel()});
              for (std::int64_t e = 0; e < glt.numel(); ++e) glt[e] = gl[static_cast<std::size_t>(e)];
              ic.fc.backward(pooled, glt, &sample_grads[k][j]);
            }
            sample_loss[k] = loss / static_cast<double>(n_ics);
          },
          workers);

      std::vector<std::vector<Tensor<T>>> acc(n_ics);
      const double scale = 1.0 / static_cast<double>(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        detail::add_grads(acc, sample_grads[k], scale);
        loss_sum += sample_loss[k];
      }
      seen += static_cast<std::int64_t>(bsz);
      auto flat = detail::flatten_grads(acc);
      auto params = out.ic_parameters();
      opt.step(std::span<Tensor<T>* const>(params.data(), params.size()),
               std::span<const Tensor<T>>(flat.data(), flat.size()));
    }

    const double train_loss = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(train_loss))
      throw TrainingError("train_ics: loss diverged (non-finite) at epoch " +
                          std::to_string(epoch));
    double val_acc = 0.0;
    if (!data.val.empty()) {
      // mean over heads of per-head top-1 accuracy
      std::vector<std::int64_t> head_correct(n_ics, 0);
      for (const auto& ex : data.val) {
        auto confs = forward_all_exits(out, ex.x);
        for (std::size_t j = 0; j < n_ics; ++j)
          if (argmax_label(confs[j]) == ex.label) ++head_correct[j];
      }
      for (auto c : head_correct) val_acc += static_cast<double>(c);
      val_acc /= static_cast<double>(n_ics * data.val.size());
    }
    auto t1 = std::chrono::steady_clock::now();
    EpochStats stats{epoch, train_loss, val_acc,
                     std::chrono::duration<double>(t1 - t0).count()};
    log_epoch(log, stats);
  }
  return out;
}

/// Same data, architecture, and hyperparameters; only the seed varies.
template <typename T>
std::vector<MultiExitModel<T>> train_independent_population(
    const ArchSpec& arch, const Dataset<T>& data, const TrainConfig& backbone_cfg,
    const TrainConfig& ic_cfg, const std::vector<std::uint64_t>& seeds, unsigned workers = 0) {
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size())
    throw std::invalid_argument("train_independent_population: duplicate seeds");
  if (seeds.empty()) throw std::invalid_argument("train_independent_population: no seeds");

  std::vector<MultiExitModel<T>> population(seeds.size());
  auto attach = attach_indices_for(arch);
  parallel_for(
      seeds.size(),
      [&](std::size_t i) {
        TrainConfig bc = backbone_cfg;
        bc.seed = seeds[i];
        auto trained = train_backbone<T>(arch, data, bc, nullptr, 1);
        auto me = build_multiexit<T>(trained.model, attach, derive_seed(seeds[i], "ic-init"),
                                     "indep-" + std::to_string(seeds[i]));
        TrainConfig ic = ic_cfg;
        ic.seed = derive_seed(seeds[i], "ic-train");
        population[i] = train_ics<T>(me, data, ic, nullptr, 1);
        population[i].id = me.id;
      },
      workers);
  return population;
}

}  // namespace exitprint
