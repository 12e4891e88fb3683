#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "exitprint/fingerprint.hpp"
#include "exitprint/model.hpp"

namespace exitprint {

/// How inference cost is measured. cost_model sums the traversed
/// layer_costs and is exactly reproducible; wall_clock times real inference
/// (mean over `repeats` runs after `warmup_runs`) and must run without
/// concurrent load.
struct TimingBackend {
  enum class Kind { wall_clock, cost_model };
  Kind kind = Kind::cost_model;
  int repeats = 10;
  int warmup_runs = 3;

  static TimingBackend cost_model() { return {Kind::cost_model, 10, 3}; }
  static TimingBackend wall_clock(int repeats = 10, int warmup = 3) {
    return {Kind::wall_clock, repeats, warmup};
  }

  std::string name() const {
    return kind == Kind::cost_model ? "cost-model" : "wall-clock";
  }
};

/// Raw per-sample inference cost under the given policy. cost_model returns
/// ExitTrace.cost; wall_clock returns seconds.
template <typename T>
std::vector<double> measure_inference(const MultiExitModel<T>& m,
                                      std::span<const Tensor<T>> samples,
                                      const ExitPolicy& policy, const TimingBackend& backend) {
  if (samples.empty()) throw std::invalid_argument("measure_inference: no samples");
  std::vector<double> out;
  out.reserve(samples.size());
  if (backend.kind == TimingBackend::Kind::cost_model) {
    for (const auto& x : samples) out.push_back(early_exit_infer(m, x, policy).cost);
    return out;
  }
  if (backend.repeats < 1) throw std::invalid_argument("measure_inference: repeats must be >= 1");
  // Serialized on purpose: timings are only meaningful without concurrent load.
  for (const auto& x : samples) {
    for (int w = 0; w < backend.warmup_runs; ++w) (void)early_exit_infer(m, x, policy);
    double total = 0.0;
    for (int r = 0; r < backend.repeats; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      (void)early_exit_infer(m, x, policy);
      auto t1 = std::chrono::steady_clock::now();
      total += std::chrono::duration<double>(t1 - t0).count();
    }
    out.push_back(total / backend.repeats);
  }
  return out;
}

/// Early-exit capacity curve over normalized time: the empirical CDF of
/// t_k = min(raw_k / t_max, 1), stored as the full staircase polyline
/// (both corners of every step) so the trapezoidal integral is exact.
struct EECCurve {
  std::vector<std::pair<double, double>> points;  // (normalized time, fraction)
  double t_max = 0.0;
};

inline EECCurve eec_curve(std::span<const double> raw_costs, double t_max) {
  if (!(t_max > 0.0)) throw std::invalid_argument("eec_curve: t_max must be positive");
  if (raw_costs.empty()) throw std::invalid_argument("eec_curve: no samples");

  std::vector<double> t(raw_costs.size());
  for (std::size_t i = 0; i < raw_costs.size(); ++i)
    t[i] = std::min(raw_costs[i] / t_max, 1.0);
  std::sort(t.begin(), t.end());

  const double n = static_cast<double>(t.size());
  EECCurve curve;
  curve.t_max = t_max;
  auto& pts = curve.points;
  std::size_t i = 0;
  double frac = 0.0;
  if (t.front() > 0.0) pts.emplace_back(0.0, 0.0);
  while (i < t.size()) {
    std::size_t j = i;
    while (j < t.size() && t[j] == t[i]) ++j;
    pts.emplace_back(t[i], frac);  // value approaching from the left
    frac = static_cast<double>(j) / n;
    pts.emplace_back(t[i], frac);  // value at the step
    i = j;
  }
  if (pts.back().first < 1.0) pts.emplace_back(1.0, frac);
  // the curve always closes at (1, 1)
  if (pts.back().second < 1.0) pts.emplace_back(1.0, 1.0);
  return curve;
}

inline EECCurve eec_curve(const std::vector<double>& raw_costs, double t_max) {
  return eec_curve(std::span<const double>(raw_costs.data(), raw_costs.size()), t_max);
}

/// Trapezoidal area under the EEC curve over [0,1]. For the staircase CDF
/// this equals 1 - mean(clamped normalized time) exactly.
inline double eec_auc(const EECCurve& curve) {
  if (curve.points.size() < 2) throw std::invalid_argument("eec_auc: degenerate curve");
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) {
    const auto& [t0, y0] = curve.points[i];
    const auto& [t1, y1] = curve.points[i + 1];
    if (t1 < t0) throw std::invalid_argument("eec_auc: points not sorted");
    area += (t1 - t0) * 0.5 * (y0 + y1);
  }
  return area;
}

enum class Verdict { stolen, independent };

inline std::string verdict_name(Verdict v) {
  return v == Verdict::stolen ? "STOLEN" : "INDEPENDENT";
}

// Pure decision rule: ownership is claimed iff T_N < T_f (strict).
inline Verdict decide(double t_n, double t_f) {
  return t_n < t_f ? Verdict::stolen : Verdict::independent;
}

struct VerificationReport {
  std::string model_id;
  std::string backend;
  double t_n = 0.0;   // EEC AUC of the fingerprint samples
  double t_f = 0.0;   // pre-defined threshold
  Verdict verdict = Verdict::independent;
  double t_max = 0.0;
  std::vector<double> normalized_times;
  EECCurve curve;
};

/// Benign-sample EEC AUC plus the t_max (maximum raw benign cost) that
/// fingerprint verification reuses for normalization.
template <typename T>
std::pair<double, double> benign_eec_auc(const MultiExitModel<T>& m,
                                         std::span<const Tensor<T>> benign,
                                         const ExitPolicy& policy, const TimingBackend& backend) {
  auto costs = measure_inference(m, benign, policy, backend);
  const double t_max = *std::max_element(costs.begin(), costs.end());
  if (!(t_max > 0.0)) throw std::runtime_error("benign_eec_auc: nonpositive t_max");
  return {eec_auc(eec_curve(costs, t_max)), t_max};
}

/// Full verification pipeline: measure the fingerprint samples, normalize by
/// the benign-calibrated t_max, build the EEC curve, compare its AUC to T_f.
template <typename T>
VerificationReport verify_ip(const MultiExitModel<T>& m, const FingerprintSet<T>& fpset,
                             const ExitPolicy& policy, const TimingBackend& backend, double t_f,
                             double t_max) {
  if (!(t_max > 0.0))
    throw std::invalid_argument("verify_ip: missing benign calibration (t_max must be positive)");
  std::vector<Tensor<T>> inputs;
  inputs.reserve(fpset.samples.size());
  for (const auto& s : fpset.samples) inputs.push_back(s.x_prime);
  auto costs = measure_inference(m, std::span<const Tensor<T>>(inputs.data(), inputs.size()),
                                 policy, backend);

  VerificationReport r;
  r.model_id = m.id;
  r.backend = backend.name();
  r.t_max = t_max;
  r.curve = eec_curve(costs, t_max);
  r.t_n = eec_auc(r.curve);
  r.t_f = t_f;
  r.verdict = decide(r.t_n, t_f);
  r.normalized_times.reserve(costs.size());
  for (double c : costs) r.normalized_times.push_back(std::min(c / t_max, 1.0));
  return r;
}

/// Fraction of reports with verdict STOLEN.
inline double ip_verified_rate(std::span<const double> t_n_scores, double t_f) {
  if (t_n_scores.empty()) throw std::invalid_argument("ip_verified_rate: empty score list");
  std::size_t stolen = 0;
  for (double s : t_n_scores)
    if (decide(s, t_f) == Verdict::stolen) ++stolen;
  return static_cast<double>(stolen) / static_cast<double>(t_n_scores.size());
}

inline double ip_verified_rate(const std::vector<double>& scores, double t_f) {
  return ip_verified_rate(std::span<const double>(scores.data(), scores.size()), t_f);
}

/// Mann-Whitney ROC AUC with lower score = more likely stolen: the
/// probability that a random stolen score lies below a random independent
/// score, ties counting one half.
inline double roc_auc(std::span<const double> stolen_scores,
                      std::span<const double> independent_scores) {
  if (stolen_scores.empty() || independent_scores.empty())
    throw std::invalid_argument("roc_auc: empty input");
  // Rank-based: sort the independent list once, then binary-search each
  // stolen score for the count below / tied.
  std::vector<double> indep(independent_scores.begin(), independent_scores.end());
  std::sort(indep.begin(), indep.end());
  double wins = 0.0;
  for (double s : stolen_scores) {
    auto lo = std::lower_bound(indep.begin(), indep.end(), s);
    auto hi = std::upper_bound(indep.begin(), indep.end(), s);
    const double above = static_cast<double>(indep.end() - hi);
    const double tied = static_cast<double>(hi - lo);
    wins += above + 0.5 * tied;
  }
  return wins / (static_cast<double>(stolen_scores.size()) * static_cast<double>(indep.size()));
}

inline double roc_auc(const std::vector<double>& stolen, const std::vector<double>& indep) {
  return roc_auc(std::span<const double>(stolen.data(), stolen.size()),
                 std::span<const double>(indep.data(), indep.size()));
}

struct BaselineReport {
  std::string model_id;
  double match_rate = 0.0;
  double threshold = 0.0;
  Verdict verdict = Verdict::independent;
};

/// Prediction-based verification for the baseline: run early-exit inference
/// on each crafted sample and compare the returned label with the expected
/// one; STOLEN iff the match proportion exceeds the threshold.
template <typename T>
BaselineReport baseline_verify(const MultiExitModel<T>& m,
                               std::span<const BaselineSample<T>> ae_set,
                               const ExitPolicy& policy, double match_threshold) {
  if (ae_set.empty()) throw std::invalid_argument("baseline_verify: empty sample set");
  std::size_t matches = 0;
  for (const auto& s : ae_set)
    if (early_exit_infer(m, s.x_adv, policy).predicted_label == s.expected_label) ++matches;
  BaselineReport r;
  r.model_id = m.id;
  r.match_rate = static_cast<double>(matches) / static_cast<double>(ae_set.size());
  r.threshold = match_threshold;
  r.verdict = r.match_rate > match_threshold ? Verdict::stolen : Verdict::independent;
  return r;
}

/// T_f per (architecture, dataset, RAD level).
class ThresholdTable {
 public:
  void set(const std::string& arch, const std::string& dataset, double rad, double t_f) {
    if (!(t_f >= 0.0 && t_f <= 1.0))
      throw std::invalid_argument("threshold table: T_f must lie in [0,1]");
    table_[key(arch, dataset, rad)] = t_f;
  }

  double get(const std::string& arch, const std::string& dataset, double rad) const {
    auto it = table_.find(key(arch, dataset, rad));
    if (it == table_.end()) throw std::out_of_range("threshold table: no entry");
    return it->second;
  }

  const std::map<std::string, double>& entries() const { return table_; }

  static std::string key(const std::string& arch, const std::string& dataset, double rad) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", rad);
    return arch + "/" + dataset + "/rad=" + buf;
  }

 private:
  std::map<std::string, double> table_;
};

}  // namespace exitprint
