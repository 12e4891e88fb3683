#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "exitprint/model.hpp"
#include "exitprint/parallel.hpp"
#include "exitprint/rng.hpp"
#include "exitprint/train.hpp"

namespace exitprint {

struct CraftingError : std::runtime_error {
  int step;
  int sample_index;
  CraftingError(const std::string& what, int step_, int sample_ = -1)
      : std::runtime_error(what), step(step_), sample_index(sample_) {}
};

struct FingerprintConfig {
  double c = 10.0;            // stealthiness/effectiveness balance
  int steps = 1000;
  double learning_rate = 0.01;
  int n_samples = 100;        // N

  // Models with many exits need a longer budget: 2000 steps at >= 20 exits,
  // 1000 otherwise.
  static FingerprintConfig defaults_for(int n_exits) {
    FingerprintConfig cfg;
    cfg.steps = n_exits >= 20 ? 2000 : 1000;
    return cfg;
  }

  void validate() const {
    if (!(c > 0.0)) throw std::invalid_argument("fingerprint: c must be positive");
    if (steps < 0) throw std::invalid_argument("fingerprint: steps must be >= 0");
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("fingerprint: learning rate must be positive");
    if (n_samples < 1) throw std::invalid_argument("fingerprint: N must be >= 1");
  }
};

/// KL(p || q) = sum p_i log(p_i / q_i) with 0 log 0 := 0 and q floored at
/// 1e-12. Accumulates in double regardless of T.
template <typename T>
double kl_divergence(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    if (pi <= 0.0) continue;
    const double qi = std::max(static_cast<double>(q[i]), 1e-12);
    s += pi * std::log(pi / qi);
  }
  return s;
}

template <typename T>
double kl_divergence(const std::vector<T>& p, const std::vector<T>& q) {
  return kl_divergence(std::span<const T>(p.data(), p.size()),
                       std::span<const T>(q.data(), q.size()));
}

template <typename T>
std::vector<T> uniform_reference(std::size_t n_classes) {
  return std::vector<T>(n_classes, static_cast<T>(1.0 / static_cast<double>(n_classes)));
}

// KL(p, u) for uniform u reduces to log(n_y) - H(p); used for closed-form
// evaluation from a confidence vector alone.
template <typename T>
double kl_to_uniform(const std::vector<T>& p) {
  return kl_divergence(p, uniform_reference<T>(p.size()));
}

/// Exit-suppression loss: internal exits are pulled toward the uniform
/// confidence vector, the final exit is pushed away from it.
///   L_f(x) = sum_{i<n} KL(f_i(x), u) - KL(f_n(x), u)
template <typename T>
double fingerprint_loss(const MultiExitModel<T>& m, const Tensor<T>& x) {
  auto confs = forward_all_exits(m, x);
  double loss = 0.0;
  for (std::size_t i = 0; i + 1 < confs.size(); ++i) loss += kl_to_uniform(confs[i]);
  loss -= kl_to_uniform(confs.back());
  return loss;
}

namespace detail {

// d KL(softmax(z), u) / dz_j = p_j (log p_j + H(p)). The log(u) part drops
// out because the softmax Jacobian annihilates constants.
template <typename T>
Tensor<T> kl_uniform_logit_grad(const std::vector<T>& p, double sign) {
  Tensor<T> g({static_cast<std::int64_t>(p.size())});
  double entropy = 0.0;
  for (T v : p) {
    const double pv = static_cast<double>(v);
    if (pv > 0.0) entropy -= pv * std::log(pv);
  }
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double pj = static_cast<double>(p[j]);
    const double logp = pj > 0.0 ? std::log(pj) : 0.0;
    g[static_cast<std::int64_t>(j)] = static_cast<T>(sign * pj * (logp + entropy));
  }
  return g;
}

}  // namespace detail

/// L_f and its analytic gradient with respect to the input.
template <typename T>
std::pair<double, Tensor<T>> fingerprint_loss_with_grad(const MultiExitModel<T>& m,
                                                        const Tensor<T>& x) {
  auto tape = forward_tape(m, x);
  auto confs = confidences_from_tape(m, tape);
  double loss = 0.0;
  ExitGradients<T> eg;
  eg.internal.reserve(m.ics.size());
  for (std::size_t i = 0; i < m.ics.size(); ++i) {
    loss += kl_to_uniform(confs[i]);
    eg.internal.push_back(detail::kl_uniform_logit_grad(confs[i], +1.0));
  }
  loss -= kl_to_uniform(confs.back());
  eg.final_exit = detail::kl_uniform_logit_grad(confs.back(), -1.0);
  Tensor<T> gx = multiexit_backward(m, tape, eg);
  return {loss, std::move(gx)};
}

template <typename T>
struct FingerprintSample {
  Tensor<T> x;        // benign seed input
  Tensor<T> x_prime;  // crafted input, clamped to [0,1]
  double l2_distance = 0.0;
  double final_loss = 0.0;
  int exit_index_on_target = 0;
};

/// Minimizes L(x') = ||x - x'||_2 + c * L_f(x') with Adam, starting from
/// x' = x, projecting onto [0,1] after every step, and returning the
/// lowest-loss iterate seen. No perturbation bound is imposed.
template <typename T>
FingerprintSample<T> craft_fingerprint(const MultiExitModel<T>& m, const Tensor<T>& x,
                                       const FingerprintConfig& cfg, const ExitPolicy& policy) {
  cfg.validate();
  if (x.shape() != m.backbone.input_shape())
    throw std::invalid_argument("craft_fingerprint: input shape mismatch");

  auto objective = [&](const Tensor<T>& xp) -> std::pair<double, Tensor<T>> {
    auto [lf, g] = fingerprint_loss_with_grad(m, xp);
    const double dist = l2_distance(x, xp);
    double loss = dist + cfg.c * lf;
    Tensor<T> grad(xp.shape());
    const double inv = dist > 1e-12 ? 1.0 / dist : 0.0;
    for (std::int64_t i = 0; i < grad.numel(); ++i) {
      const double dd = (static_cast<double>(xp[i]) - static_cast<double>(x[i])) * inv;
      grad[i] = static_cast<T>(dd + cfg.c * static_cast<double>(g[i]));
    }
    return {loss, std::move(grad)};
  };

  Tensor<T> xp = x;
  double best_loss = cfg.c * fingerprint_loss(m, x);  // distance term is zero at x' = x
  Tensor<T> best = xp;

  Optimizer<T> adam(OptimizerDesc::adam(cfg.learning_rate));
  for (int step = 1; step <= cfg.steps; ++step) {
    auto [loss, grad] = objective(xp);
    if (!std::isfinite(loss))
      throw CraftingError("craft_fingerprint: non-finite loss at step " + std::to_string(step),
                          step);
    if (loss < best_loss) {
      best_loss = loss;
      best = xp;
    }
    Tensor<T>* pptr = &xp;
    adam.step(std::span<Tensor<T>* const>(&pptr, 1), std::span<const Tensor<T>>(&grad, 1));
    clamp_unit_interval(xp);
  }
  if (cfg.steps > 0) {
    const double last = l2_distance(x, xp) + cfg.c * fingerprint_loss(m, xp);
    if (!std::isfinite(last))
      throw CraftingError("craft_fingerprint: non-finite loss at final iterate", cfg.steps);
    if (last < best_loss) {
      best_loss = last;
      best = xp;
    }
  }

  FingerprintSample<T> s;
  s.x = x;
  s.x_prime = std::move(best);
  s.l2_distance = l2_distance(x, s.x_prime);
  s.final_loss = best_loss;
  s.exit_index_on_target = early_exit_infer(m, s.x_prime, policy).exit_index;
  return s;
}

template <typename T>
struct FingerprintSet {
  std::vector<FingerprintSample<T>> samples;
  std::string target_model_id;
  FingerprintConfig config;
  std::uint64_t seed = 0;
  std::int64_t created_unix = 0;
};

/// Picks cfg.n_samples benign seeds deterministically (seeded shuffle of the
/// candidate list) and crafts each one. Distinct samples are crafted on
/// worker threads; results land in index order either way.
template <typename T>
FingerprintSet<T> generate_fingerprint_set(const MultiExitModel<T>& m,
                                           std::span<const Tensor<T>> benign,
                                           const FingerprintConfig& cfg, std::uint64_t seed,
                                           const ExitPolicy& policy, unsigned workers = 0) {
  cfg.validate();
  if (benign.size() < static_cast<std::size_t>(cfg.n_samples))
    throw std::invalid_argument("generate_fingerprint_set: fewer benign seeds than N");

  std::vector<std::size_t> idx(benign.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Pcg32 rng(derive_seed(seed, "fp-select"));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(cfg.n_samples));

  FingerprintSet<T> out;
  out.samples.resize(idx.size());
  out.target_model_id = m.id;
  out.config = cfg;
  out.seed = seed;
  out.created_unix = static_cast<std::int64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  parallel_for(
      idx.size(),
      [&](std::size_t k) {
        try {
          out.samples[k] = craft_fingerprint(m, benign[idx[k]], cfg, policy);
        } catch (const CraftingError& e) {
          throw CraftingError(std::string(e.what()) + " (sample " + std::to_string(k) + ")",
                              e.step, static_cast<int>(k));
        }
      },
      workers);
  return out;
}

struct BaselineConfig {
  int steps = 500;
  double learning_rate = 0.01;
  int n_samples = 100;
};

template <typename T>
struct BaselineSample {
  Tensor<T> x_adv;
  int expected_label = 0;
};

/// Simplified prediction-based fingerprint: a targeted attack on the final
/// exit's cross-entropy toward a deterministic non-ground-truth label.
/// Serves as the contrast method that adversarial training defeats.
template <typename T>
std::vector<BaselineSample<T>> baseline_ae_fingerprint(const MultiExitModel<T>& m,
                                                       std::span<const LabeledExample<T>> benign,
                                                       const BaselineConfig& cfg,
                                                       std::uint64_t seed, unsigned workers = 0) {
  if (benign.size() < static_cast<std::size_t>(cfg.n_samples))
    throw std::invalid_argument("baseline_ae_fingerprint: fewer benign seeds than N");
  const int n_y = m.backbone.n_classes();

  std::vector<std::size_t> idx(benign.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Pcg32 rng(derive_seed(seed, "ae-select"));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(cfg.n_samples));

  std::vector<int> targets(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto truth = static_cast<std::uint32_t>(benign[idx[k]].label);
    const std::uint32_t offset = 1u + rng.bounded(static_cast<std::uint32_t>(n_y - 1));
    targets[k] = static_cast<int>((truth + offset) % static_cast<std::uint32_t>(n_y));
  }

  std::vector<BaselineSample<T>> out(idx.size());
  parallel_for(
      idx.size(),
      [&](std::size_t k) {
        const Tensor<T>& x0 = benign[idx[k]].x;
        const int target = targets[k];
        Tensor<T> xp = x0;
        double best_loss = std::numeric_limits<double>::infinity();
        Tensor<T> best = xp;
        Optimizer<T> adam(OptimizerDesc::adam(cfg.learning_rate));
        for (int step = 1; step <= cfg.steps; ++step) {
          auto tape = forward_tape(m, xp);
          const Tensor<T>& logits = tape.acts.back();
          std::vector<T> gl;
          double loss = cross_entropy_with_grad(
              std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel())), target,
              gl);
          if (!std::isfinite(loss))
            throw CraftingError("baseline_ae_fingerprint: non-finite loss at step " +
                                    std::to_string(step) + " (sample " + std::to_string(k) + ")",
                                step, static_cast<int>(k));
          if (loss < best_loss) {
            best_loss = loss;
            best = xp;
          }
          ExitGradients<T> eg;
          eg.internal.assign(m.ics.size(), Tensor<T>());
          eg.final_exit = Tensor<T>({static_cast<std::int64_t>(gl.size())});
          for (std::size_t e = 0; e < gl.size(); ++e)
            eg.final_exit[static_cast<std::int64_t>(e)] = gl[e];
          Tensor<T> grad = multiexit_backward(m, tape, eg);
          Tensor<T>* pptr = &xp;
          adam.step(std::span<Tensor<T>* const>(&pptr, 1), std::span<const Tensor<T>>(&grad, 1));
          clamp_unit_interval(xp);
        }
        if (cfg.steps > 0) {
          auto confs = forward_all_exits(m, xp);
          double pl = static_cast<double>(confs.back()[static_cast<std::size_t>(target)]);
          double last = -std::log(std::max(pl, 1e-30));
          if (last < best_loss) best = xp;
        }
        out[k].x_adv = std::move(best);
        out[k].expected_label = target;
      },
      workers);
  return out;
}

}  // namespace exitprint
