#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitprint/layers.hpp"
#include "exitprint/rng.hpp"
#include "exitprint/tensor.hpp"

namespace exitprint {

template <typename T>
struct LabeledExample {
  Tensor<T> x;
  int label = 0;
};

/// A plain feed-forward classifier: ordered layers ending in a dense head
/// that emits one logit per class.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(std::vector<std::int64_t> input_shape, int n_classes)
      : input_shape_(std::move(input_shape)), n_classes_(n_classes) {}

  Backbone(const Backbone& o) : input_shape_(o.input_shape_), n_classes_(o.n_classes_) {
    layers_.reserve(o.layers_.size());
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Backbone& operator=(const Backbone& o) {
    if (this != &o) {
      Backbone tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  const std::vector<std::int64_t>& input_shape() const { return input_shape_; }
  int n_classes() const { return n_classes_; }
  std::vector<std::unique_ptr<Layer<T>>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer<T>>>& layers() const { return layers_; }

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  // Shape of the feature tensor produced by layer `index`.
  std::vector<std::int64_t> shape_after(std::size_t index) const {
    auto s = input_shape_;
    for (std::size_t i = 0; i <= index; ++i) s = layers_[i]->out_shape(s);
    return s;
  }

  void validate() const {
    if (layers_.empty()) throw std::invalid_argument("backbone: no layers");
    auto s = input_shape_;
    for (const auto& l : layers_) s = l->out_shape(s);
    if (s.size() != 1 || s[0] != n_classes_)
      throw std::invalid_argument("backbone: final layer must emit one logit per class");
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_)
      for (const auto* p : l->params()) out.push_back(p);
    return out;
  }

 private:
  std::vector<std::int64_t> input_shape_;
  int n_classes_ = 0;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Exit head attached after a hidden backbone layer: global average pooling
/// into a single dense layer.
template <typename T>
struct InternalClassifier {
  int attach_index = 0;  // reads the output of backbone layer `attach_index`
  Dense<T> fc;

  InternalClassifier(int attach, std::int64_t feat_ch, std::int64_t n_classes)
      : attach_index(attach), fc(feat_ch, n_classes) {}

  Tensor<T> forward(const Tensor<T>& feature) const {
    GlobalAvgPool<T> pool;
    return fc.forward(pool.forward(feature));
  }

  // Returns the gradient w.r.t. the attach feature; optionally accumulates
  // head parameter gradients (fc weight, fc bias).
  Tensor<T> backward(const Tensor<T>& feature, const Tensor<T>& logit_grad,
                     std::vector<Tensor<T>>* param_grads) const {
    GlobalAvgPool<T> pool;
    Tensor<T> pooled = pool.forward(feature);
    Tensor<T> gp = fc.backward(pooled, logit_grad, param_grads);
    return pool.backward(feature, gp, nullptr);
  }

  std::uint64_t macs(const std::vector<std::int64_t>& feature_shape) const {
    return fc.macs({feature_shape[0]});
  }
};

/// Confidence-threshold exit rule. An empty threshold is the NEVER_EARLY
/// sentinel: internal exits are disabled entirely.
struct ExitPolicy {
  std::optional<double> t_c;
  std::optional<double> rad_target;

  static ExitPolicy never_early(std::optional<double> rad = {}) { return {{}, rad}; }

  static ExitPolicy with_threshold(double t_c, std::optional<double> rad = {}) {
    if (!(t_c > 0.0 && t_c <= 1.0))
      throw std::invalid_argument("exit policy: T_c must lie in (0, 1]");
    return {t_c, rad};
  }

  bool early_exit_enabled() const { return t_c.has_value(); }
};

template <typename T>
struct ExitTrace {
  int exit_index = 0;      // 1-based; exit n is the backbone classifier
  int predicted_label = 0;
  std::vector<std::vector<T>> confidences;  // exits 1..exit_index
  double cost = 0.0;       // summed layer_costs of everything computed
};

/// Backbone plus ordered internal classifiers. Exit i (1-based) for
/// i <= |ics| is ics[i-1]; exit n is the backbone's own classifier.
/// layer_costs holds one entry per backbone layer followed by one entry per
/// IC head; defaults are multiply-accumulate counts.
template <typename T>
struct MultiExitModel {
  std::string id;
  Backbone<T> backbone;
  std::vector<InternalClassifier<T>> ics;
  std::vector<double> layer_costs;

  int n_exits() const { return static_cast<int>(ics.size()) + 1; }

  double backbone_cost(std::size_t layer) const { return layer_costs[layer]; }
  double ic_cost(std::size_t ic) const { return layer_costs[backbone.layers().size() + ic]; }

  void validate() const {
    backbone.validate();
    if (ics.empty()) throw std::invalid_argument("multi-exit model: needs at least 2 exits");
    int prev = -1;
    const int last = static_cast<int>(backbone.layers().size()) - 1;
    for (const auto& ic : ics) {
      if (ic.attach_index <= 0 || ic.attach_index >= last)
        throw std::invalid_argument("multi-exit model: attach index out of range");
      if (ic.attach_index <= prev)
        throw std::invalid_argument("multi-exit model: attach indices must strictly increase");
      prev = ic.attach_index;
    }
    if (layer_costs.size() != backbone.layers().size() + ics.size())
      throw std::invalid_argument("multi-exit model: layer_costs size mismatch");
    for (double c : layer_costs)
      if (!(c >= 0.0)) throw std::invalid_argument("multi-exit model: negative layer cost");
  }

  std::vector<Tensor<T>*> ic_parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& ic : ics)
      for (auto* p : ic.fc.params()) out.push_back(p);
    return out;
  }
  std::vector<const Tensor<T>*> ic_parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& ic : ics)
      for (const auto* p : ic.fc.params()) out.push_back(p);
    return out;
  }
};

// FNV-1a over the raw bits of a parameter set; the freeze/independence
// checks in training and attacks compare these.
template <typename T>
std::uint64_t param_checksum(std::span<const Tensor<T>* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* t : params)
    h = fnv1a64(t->data(), static_cast<std::size_t>(t->numel()) * sizeof(T), h);
  return h;
}

template <typename T>
std::uint64_t backbone_checksum(const Backbone<T>& b) {
  auto params = b.parameters();
  return param_checksum<T>(params);
}

template <typename T>
std::uint64_t ic_checksum(const MultiExitModel<T>& m) {
  auto params = m.ic_parameters();
  return param_checksum<T>(params);
}

template <typename T>
std::uint64_t model_checksum(const MultiExitModel<T>& m) {
  auto params = m.backbone.parameters();
  for (const auto* p : m.ic_parameters()) params.push_back(p);
  return param_checksum<T>(params);
}

// Default per-layer costs in multiply-accumulate units.
template <typename T>
std::vector<double> default_layer_costs(const Backbone<T>& backbone,
                                        const std::vector<InternalClassifier<T>>& ics) {
  std::vector<double> costs;
  auto s = backbone.input_shape();
  std::vector<std::vector<std::int64_t>> shapes_after;
  for (const auto& l : backbone.layers()) {
    costs.push_back(static_cast<double>(l->macs(s)));
    s = l->out_shape(s);
    shapes_after.push_back(s);
  }
  for (const auto& ic : ics)
    costs.push_back(static_cast<double>(ic.macs(shapes_after[static_cast<std::size_t>(ic.attach_index)])));
  return costs;
}

/// SDN-style transform: attach freshly initialized IC heads after the given
/// backbone layers. The backbone parameters are copied unchanged.
template <typename T>
MultiExitModel<T> build_multiexit(const Backbone<T>& backbone,
                                  const std::vector<int>& attach_indices,
                                  std::uint64_t init_seed = 0,
                                  const std::string& id = "") {
  backbone.validate();
  if (attach_indices.empty())
    throw std::invalid_argument("build_multiexit: no attach indices (a single exit is not multi-exit)");
  const int last = static_cast<int>(backbone.layers().size()) - 1;
  int prev = -1;
  for (int a : attach_indices) {
    if (a <= 0 || a >= last)
      throw std::invalid_argument("build_multiexit: attach index " + std::to_string(a) +
                                  " out of range (must be interior)");
    if (a == prev) throw std::invalid_argument("build_multiexit: duplicate attach index");
    if (a < prev) throw std::invalid_argument("build_multiexit: attach indices must increase");
    prev = a;
  }

  MultiExitModel<T> m;
  m.id = id;
  m.backbone = backbone;
  Pcg32 rng(init_seed, /*stream=*/0x1c5);
  for (int a : attach_indices) {
    auto feat = backbone.shape_after(static_cast<std::size_t>(a));
    if (feat.size() != 3)
      throw std::invalid_argument("build_multiexit: attach point must produce a spatial feature");
    InternalClassifier<T> ic(a, feat[0], backbone.n_classes());
    ic.fc.init(rng);
    m.ics.push_back(std::move(ic));
  }
  m.layer_costs = default_layer_costs(m.backbone, m.ics);
  m.validate();
  return m;
}

namespace detail {
template <typename T>
void check_input(const MultiExitModel<T>& m, const Tensor<T>& x) {
  if (x.shape() != m.backbone.input_shape())
    throw std::invalid_argument("input shape mismatch: got " + shape_to_string(x.shape()) +
                                ", want " + shape_to_string(m.backbone.input_shape()));
}
}  // namespace detail

/// Trunk activations recorded during a forward pass: acts[0] is the input,
/// acts[i+1] the output of backbone layer i.
template <typename T>
struct ForwardTape {
  std::vector<Tensor<T>> acts;
};

template <typename T>
ForwardTape<T> forward_tape(const MultiExitModel<T>& m, const Tensor<T>& x) {
  detail::check_input(m, x);
  ForwardTape<T> tape;
  tape.acts.reserve(m.backbone.layers().size() + 1);
  tape.acts.push_back(x);
  for (const auto& l : m.backbone.layers()) tape.acts.push_back(l->forward(tape.acts.back()));
  return tape;
}

template <typename T>
std::vector<std::vector<T>> confidences_from_tape(const MultiExitModel<T>& m,
                                                  const ForwardTape<T>& tape) {
  std::vector<std::vector<T>> out;
  out.reserve(m.ics.size() + 1);
  for (const auto& ic : m.ics) {
    Tensor<T> logits = ic.forward(tape.acts[static_cast<std::size_t>(ic.attach_index) + 1]);
    out.push_back(softmax(std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel()))));
  }
  const Tensor<T>& final_logits = tape.acts.back();
  out.push_back(softmax(std::span<const T>(final_logits.data(),
                                           static_cast<std::size_t>(final_logits.numel()))));
  return out;
}

/// f_1(x)..f_n(x): the softmax confidence vector at every exit.
template <typename T>
std::vector<std::vector<T>> forward_all_exits(const MultiExitModel<T>& m, const Tensor<T>& x) {
  return confidences_from_tape(m, forward_tape(m, x));
}

// Pure exit rule on precomputed confidences: first exit whose max confidence
// reaches T_c (inclusive); the last exit always accepts.
template <typename T>
int exit_decision(const std::vector<std::vector<T>>& confs, const ExitPolicy& policy) {
  const int n = static_cast<int>(confs.size());
  if (policy.early_exit_enabled()) {
    for (int i = 0; i < n - 1; ++i) {
      T mx = *std::max_element(confs[i].begin(), confs[i].end());
      if (static_cast<double>(mx) >= *policy.t_c) return i + 1;
    }
  }
  return n;
}

template <typename T>
int argmax_label(const std::vector<T>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Sequential early-exit inference. Layers are evaluated only up to the exit
/// taken, so the accumulated cost reflects the actual computation. Under
/// NEVER_EARLY the IC heads are never evaluated.
template <typename T>
ExitTrace<T> early_exit_infer(const MultiExitModel<T>& m, const Tensor<T>& x,
                              const ExitPolicy& policy) {
  detail::check_input(m, x);
  ExitTrace<T> trace;
  Tensor<T> act = x;
  std::size_t layer = 0;
  const auto& layers = m.backbone.layers();

  if (policy.early_exit_enabled()) {
    for (std::size_t j = 0; j < m.ics.size(); ++j) {
      const auto& ic = m.ics[j];
      while (layer <= static_cast<std::size_t>(ic.attach_index)) {
        act = layers[layer]->forward(act);
        trace.cost += m.backbone_cost(layer);
        ++layer;
      }
      Tensor<T> logits = ic.forward(act);
      trace.cost += m.ic_cost(j);
      auto conf = softmax(std::span<const T>(logits.data(), static_cast<std::size_t>(logits.numel())));
      T mx = *std::max_element(conf.begin(), conf.end());
      trace.confidences.push_back(std::move(conf));
      if (static_cast<double>(mx) >= *policy.t_c) {
        trace.exit_index = static_cast<int>(j) + 1;
        trace.predicted_label = argmax_label(trace.confidences.back());
        return trace;
      }
    }
  }
  while (layer < layers.size()) {
    act = layers[layer]->forward(act);
    trace.cost += m.backbone_cost(layer);
    ++layer;
  }
  auto conf = softmax(std::span<const T>(act.data(), static_cast<std::size_t>(act.numel())));
  trace.confidences.push_back(std::move(conf));
  trace.exit_index = m.n_exits();
  trace.predicted_label = argmax_label(trace.confidences.back());
  return trace;
}

/// Fraction of examples whose early-exit prediction matches the label.
template <typename T>
double accuracy(const MultiExitModel<T>& m, std::span<const LabeledExample<T>> data,
                const ExitPolicy& policy) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::int64_t correct = 0;
  for (const auto& ex : data)
    if (early_exit_infer(m, ex.x, policy).predicted_label == ex.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// T_c candidates 0.500, 0.505, ..., 1.000. A fixed grid keeps calibration
// reproducible and lets tests re-derive the result exhaustively.
inline std::vector<double> calibration_grid() {
  std::vector<double> g;
  g.reserve(101);
  for (int i = 0; i <= 100; ++i) g.push_back(0.5 + 0.005 * i);
  return g;
}

/// Smallest grid threshold whose relative accuracy drop stays within
/// rad_target; NEVER_EARLY when no grid value qualifies. acc_full is the
/// last-exit-only accuracy on the same validation set.
template <typename T>
ExitPolicy calibrate_threshold(const MultiExitModel<T>& m,
                               std::span<const LabeledExample<T>> val_set, double rad_target) {
  if (val_set.empty()) throw std::invalid_argument("calibrate_threshold: empty validation set");
  if (!(rad_target >= 0.0 && rad_target < 1.0))
    throw std::invalid_argument("calibrate_threshold: rad_target must lie in [0, 1)");

  // One forward pass per sample; the exit rule is then replayed per grid value.
  std::vector<std::vector<std::vector<T>>> confs;
  confs.reserve(val_set.size());
  for (const auto& ex : val_set) confs.push_back(forward_all_exits(m, ex.x));

  std::int64_t full_correct = 0;
  for (std::size_t s = 0; s < val_set.size(); ++s)
    if (argmax_label(confs[s].back()) == val_set[s].label) ++full_correct;
  const double acc_full = static_cast<double>(full_correct) / static_cast<double>(val_set.size());
  if (acc_full == 0.0) return ExitPolicy::never_early(rad_target);

  for (double t_c : calibration_grid()) {
    ExitPolicy cand = ExitPolicy::with_threshold(t_c);
    std::int64_t correct = 0;
    for (std::size_t s = 0; s < val_set.size(); ++s) {
      int exit_idx = exit_decision(confs[s], cand);
      if (argmax_label(confs[s][static_cast<std::size_t>(exit_idx) - 1]) == val_set[s].label)
        ++correct;
    }
    double acc = static_cast<double>(correct) / static_cast<double>(val_set.size());
    double rad = (acc_full - acc) / acc_full;
    if (rad <= rad_target) return ExitPolicy::with_threshold(t_c, rad_target);
  }
  return ExitPolicy::never_early(rad_target);
}

/// Per-exit logit gradients fed into the shared multi-exit backward pass.
/// An empty vector means that exit contributes nothing.
template <typename T>
struct ExitGradients {
  std::vector<Tensor<T>> internal;  // one per IC, possibly empty tensors
  Tensor<T> final_exit;             // possibly empty
};

template <typename T>
struct MultiExitGrads {
  std::vector<std::vector<Tensor<T>>> backbone;  // [layer][param]
  std::vector<std::vector<Tensor<T>>> ic_heads;  // [ic][param]
};

/// Reverse pass through the trunk, injecting each IC head's contribution at
/// its attach point. Returns the gradient w.r.t. the input. Pass
/// want_backbone/want_ics to collect parameter gradients into `grads`.
template <typename T>
Tensor<T> multiexit_backward(const MultiExitModel<T>& m, const ForwardTape<T>& tape,
                             const ExitGradients<T>& exit_grads,
                             MultiExitGrads<T>* grads = nullptr, bool want_backbone = false,
                             bool want_ics = false) {
  const auto& layers = m.backbone.layers();
  const std::size_t n_layers = layers.size();
  if (grads) {
    if (want_backbone && grads->backbone.empty()) grads->backbone.resize(n_layers);
    if (want_ics && grads->ic_heads.empty()) grads->ic_heads.resize(m.ics.size());
  }

  // attach_index -> ic position, for O(1) lookup during the reverse walk
  std::vector<int> ic_at(n_layers, -1);
  for (std::size_t j = 0; j < m.ics.size(); ++j)
    ic_at[static_cast<std::size_t>(m.ics[j].attach_index)] = static_cast<int>(j);

  Tensor<T> g;
  if (exit_grads.final_exit.numel() > 0) {
    g = exit_grads.final_exit;
  } else {
    g = Tensor<T>({static_cast<std::int64_t>(m.backbone.n_classes())});
  }

  for (std::size_t i = n_layers; i-- > 0;) {
    std::vector<Tensor<T>>* pg = nullptr;
    if (grads && want_backbone) pg = &grads->backbone[i];
    g = layers[i]->backward(tape.acts[i], g, pg);
    // g now holds the gradient w.r.t. acts[i]; add head contributions that
    // read acts[i] (ICs attached after layer i-1).
    if (i > 0 && ic_at[i - 1] >= 0 &&
        static_cast<std::size_t>(ic_at[i - 1]) < exit_grads.internal.size()) {
      const int j = ic_at[i - 1];
      const auto& gj = exit_grads.internal[static_cast<std::size_t>(j)];
      if (gj.numel() > 0) {
        std::vector<Tensor<T>>* icg = nullptr;
        if (grads && want_ics) icg = &grads->ic_heads[static_cast<std::size_t>(j)];
        Tensor<T> add = m.ics[static_cast<std::size_t>(j)].backward(tape.acts[i], gj, icg);
        for (std::int64_t k = 0; k < g.numel(); ++k) g[k] += add[k];
      }
    }
  }
  return g;
}

}  // namespace exitprint
