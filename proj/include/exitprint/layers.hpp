#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitprint/rng.hpp"
#include "exitprint/tensor.hpp"

namespace exitprint {

enum class LayerKind { conv3x3, relu, avgpool2, global_avgpool, dense };

inline std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool2: return "avgpool2";
    case LayerKind::global_avgpool: return "global_avgpool";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

// Shape-level layer description, used to rebuild a layer from a container.
struct LayerSpec {
  LayerKind kind;
  std::int64_t in = 0;   // conv: in channels, dense: in features
  std::int64_t out = 0;  // conv: out channels, dense: out features
};

/// Differentiable layer over single samples. forward() is pure;
/// backward(x_in, grad_out) recomputes what it needs from the stored input,
/// optionally accumulates parameter gradients, and returns the input gradient.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual LayerSpec spec() const = 0;
  virtual std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                             std::vector<Tensor<T>>* param_grads) const = 0;
  virtual std::vector<Tensor<T>*> params() = 0;
  virtual std::vector<const Tensor<T>*> params() const = 0;
  // Multiply-accumulate count for one sample with the given input shape.
  virtual std::uint64_t macs(const std::vector<std::int64_t>& in) const = 0;
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
template <typename T>
class Conv3x3 final : public Layer<T> {
 public:
  Conv3x3(std::int64_t in_ch, std::int64_t out_ch)
      : in_ch_(in_ch), out_ch_(out_ch), weight_({out_ch, in_ch, 3, 3}), bias_({out_ch}) {
    if (in_ch < 1 || out_ch < 1) throw std::invalid_argument("conv3x3: bad channel count");
  }

  // He-normal initialization.
  void init(Pcg32& rng) {
    double std_dev = std::sqrt(2.0 / static_cast<double>(in_ch_ * 9));
    for (std::int64_t i = 0; i < weight_.numel(); ++i)
      weight_[i] = static_cast<T>(rng.normal() * std_dev);
    bias_.zero();
  }

  LayerKind kind() const override { return LayerKind::conv3x3; }
  LayerSpec spec() const override { return {LayerKind::conv3x3, in_ch_, out_ch_}; }

  std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const override {
    check_in(in);
    return {out_ch_, in[1], in[2]};
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    check_in(x.shape());
    const std::int64_t h = x.dim(1), w = x.dim(2);
    Tensor<T> y({out_ch_, h, w});
    const T* xp = x.data();
    T* yp = y.data();
    const T* wp = weight_.data();
    for (std::int64_t oc = 0; oc < out_ch_; ++oc) {
      T* yo = yp + oc * h * w;
      const T b = bias_[oc];
      for (std::int64_t i = 0; i < h * w; ++i) yo[i] = b;
      for (std::int64_t ic = 0; ic < in_ch_; ++ic) {
        const T* xi = xp + ic * h * w;
        const T* wk = wp + (oc * in_ch_ + ic) * 9;
        for (std::int64_t ky = 0; ky < 3; ++ky) {
          for (std::int64_t kx = 0; kx < 3; ++kx) {
            const T wv = wk[ky * 3 + kx];
            if (wv == T(0)) continue;
            const std::int64_t dy = ky - 1, dx = kx - 1;
            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
            const std::int64_t y1 = std::min<std::int64_t>(h, h - dy);
            for (std::int64_t yy = y0; yy < y1; ++yy) {
              const T* xrow = xi + (yy + dy) * w;
              T* yrow = yo + yy * w;
              const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
              const std::int64_t x1 = std::min<std::int64_t>(w, w - dx);
              for (std::int64_t xx = x0; xx < x1; ++xx) yrow[xx] += wv * xrow[xx + dx];
            }
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                     std::vector<Tensor<T>>* param_grads) const override {
    const std::int64_t h = x_in.dim(1), w = x_in.dim(2);
    Tensor<T> gx(x_in.shape());
    const T* xp = x_in.data();
    const T* gp = grad_out.data();
    T* gxp = gx.data();
    Tensor<T>* gw = nullptr;
    Tensor<T>* gb = nullptr;
    if (param_grads) {
      ensure_grad_buffers(*param_grads);
      gw = &(*param_grads)[0];
      gb = &(*param_grads)[1];
    }
    for (std::int64_t oc = 0; oc < out_ch_; ++oc) {
      const T* go = gp + oc * h * w;
      if (gb) {
        T s = 0;
        for (std::int64_t i = 0; i < h * w; ++i) s += go[i];
        (*gb)[oc] += s;
      }
      for (std::int64_t ic = 0; ic < in_ch_; ++ic) {
        const T* xi = xp + ic * h * w;
        T* gxi = gxp + ic * h * w;
        const T* wk = weight_.data() + (oc * in_ch_ + ic) * 9;
        T* gwk = gw ? gw->data() + (oc * in_ch_ + ic) * 9 : nullptr;
        for (std::int64_t ky = 0; ky < 3; ++ky) {
          for (std::int64_t kx = 0; kx < 3; ++kx) {
            const std::int64_t dy = ky - 1, dx = kx - 1;
            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
            const std::int64_t y1 = std::min<std::int64_t>(h, h - dy);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
            const std::int64_t x1 = std::min<std::int64_t>(w, w - dx);
            const T wv = wk[ky * 3 + kx];
            T wsum = 0;
            for (std::int64_t yy = y0; yy < y1; ++yy) {
              const T* xrow = xi + (yy + dy) * w;
              T* gxrow = gxi + (yy + dy) * w;
              const T* grow = go + yy * w;
              if (gwk) {
                for (std::int64_t xx = x0; xx < x1; ++xx) wsum += grow[xx] * xrow[xx + dx];
              }
              for (std::int64_t xx = x0; xx < x1; ++xx) gxrow[xx + dx] += wv * grow[xx];
            }
            if (gwk) gwk[ky * 3 + kx] += wsum;
          }
        }
      }
    }
    return gx;
  }

  std::vector<Tensor<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Tensor<T>*> params() const override { return {&weight_, &bias_}; }

  std::uint64_t macs(const std::vector<std::int64_t>& in) const override {
    return static_cast<std::uint64_t>(9 * in_ch_ * out_ch_ * in[1] * in[2]);
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv3x3>(*this); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  void check_in(const std::vector<std::int64_t>& s) const {
    if (s.size() != 3 || s[0] != in_ch_)
      throw std::invalid_argument("conv3x3: input shape mismatch " + shape_to_string(s));
  }
  void ensure_grad_buffers(std::vector<Tensor<T>>& g) const {
    if (g.empty()) {
      g.emplace_back(weight_.shape());
      g.emplace_back(bias_.shape());
    }
  }

  std::int64_t in_ch_, out_ch_;
  Tensor<T> weight_;  // (out, in, 3, 3)
  Tensor<T> bias_;    // (out)
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  LayerSpec spec() const override { return {LayerKind::relu}; }

  std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const override {
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i)
      if (y[i] < T(0)) y[i] = T(0);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                     std::vector<Tensor<T>>*) const override {
    Tensor<T> gx(x_in.shape());
    for (std::int64_t i = 0; i < gx.numel(); ++i)
      gx[i] = x_in[i] > T(0) ? grad_out[i] : T(0);
    return gx;
  }

  std::vector<Tensor<T>*> params() override { return {}; }
  std::vector<const Tensor<T>*> params() const override { return {}; }
  std::uint64_t macs(const std::vector<std::int64_t>&) const override { return 0; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

/// 2x2 average pooling with stride 2. Average (not max) keeps the network
/// smooth, which the finite-difference gradient checks rely on.
template <typename T>
class AvgPool2 final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::avgpool2; }
  LayerSpec spec() const override { return {LayerKind::avgpool2}; }

  std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const override {
    check_in(in);
    return {in[0], in[1] / 2, in[2] / 2};
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    check_in(x.shape());
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> y({c, h / 2, w / 2});
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < h / 2; ++yy)
        for (std::int64_t xx = 0; xx < w / 2; ++xx)
          y.at(ch, yy, xx) =
              (x.at(ch, 2 * yy, 2 * xx) + x.at(ch, 2 * yy, 2 * xx + 1) +
               x.at(ch, 2 * yy + 1, 2 * xx) + x.at(ch, 2 * yy + 1, 2 * xx + 1)) *
              T(0.25);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                     std::vector<Tensor<T>>*) const override {
    const std::int64_t c = x_in.dim(0), h = x_in.dim(1), w = x_in.dim(2);
    Tensor<T> gx(x_in.shape());
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < h / 2; ++yy)
        for (std::int64_t xx = 0; xx < w / 2; ++xx) {
          const T g = grad_out.at(ch, yy, xx) * T(0.25);
          gx.at(ch, 2 * yy, 2 * xx) = g;
          gx.at(ch, 2 * yy, 2 * xx + 1) = g;
          gx.at(ch, 2 * yy + 1, 2 * xx) = g;
          gx.at(ch, 2 * yy + 1, 2 * xx + 1) = g;
        }
    return gx;
  }

  std::vector<Tensor<T>*> params() override { return {}; }
  std::vector<const Tensor<T>*> params() const override { return {}; }
  std::uint64_t macs(const std::vector<std::int64_t>&) const override { return 0; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<AvgPool2>(*this); }

 private:
  void check_in(const std::vector<std::int64_t>& s) const {
    if (s.size() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0)
      throw std::invalid_argument("avgpool2: needs even spatial dims, got " + shape_to_string(s));
  }
};

/// (C,H,W) -> (C) spatial mean.
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::global_avgpool; }
  LayerSpec spec() const override { return {LayerKind::global_avgpool}; }

  std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const override {
    check_in(in);
    return {in[0]};
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    check_in(x.shape());
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<T> y({c});
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T s = 0;
      const T* p = x.data() + ch * hw;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      y[ch] = s * inv;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                     std::vector<Tensor<T>>*) const override {
    const std::int64_t c = x_in.dim(0), hw = x_in.dim(1) * x_in.dim(2);
    Tensor<T> gx(x_in.shape());
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T g = grad_out[ch] * inv;
      T* p = gx.data() + ch * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = g;
    }
    return gx;
  }

  std::vector<Tensor<T>*> params() override { return {}; }
  std::vector<const Tensor<T>*> params() const override { return {}; }
  std::uint64_t macs(const std::vector<std::int64_t>&) const override { return 0; }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<GlobalAvgPool>(*this);
  }

 private:
  void check_in(const std::vector<std::int64_t>& s) const {
    if (s.size() != 3)
      throw std::invalid_argument("global_avgpool: wants rank-3 input, got " + shape_to_string(s));
  }
};

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::int64_t in, std::int64_t out)
      : in_(in), out_(out), weight_({out, in}), bias_({out}) {
    if (in < 1 || out < 1) throw std::invalid_argument("dense: bad dimensions");
  }

  void init(Pcg32& rng) {
    double std_dev = std::sqrt(2.0 / static_cast<double>(in_));
    for (std::int64_t i = 0; i < weight_.numel(); ++i)
      weight_[i] = static_cast<T>(rng.normal() * std_dev);
    bias_.zero();
  }

  LayerKind kind() const override { return LayerKind::dense; }
  LayerSpec spec() const override { return {LayerKind::dense, in_, out_}; }

  std::vector<std::int64_t> out_shape(const std::vector<std::int64_t>& in) const override {
    check_in(in);
    return {out_};
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    check_in(x.shape());
    Tensor<T> y({out_});
    for (std::int64_t o = 0; o < out_; ++o) {
      T s = bias_[o];
      const T* wr = weight_.data() + o * in_;
      for (std::int64_t i = 0; i < in_; ++i) s += wr[i] * x[i];
      y[o] = s;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x_in, const Tensor<T>& grad_out,
                     std::vector<Tensor<T>>* param_grads) const override {
    Tensor<T> gx(x_in.shape());
    Tensor<T>* gw = nullptr;
    Tensor<T>* gb = nullptr;
    if (param_grads) {
      if (param_grads->empty()) {
        param_grads->emplace_back(weight_.shape());
        param_grads->emplace_back(bias_.shape());
      }
      gw = &(*param_grads)[0];
      gb = &(*param_grads)[1];
    }
    for (std::int64_t o = 0; o < out_; ++o) {
      const T g = grad_out[o];
      const T* wr = weight_.data() + o * in_;
      T* gwr = gw ? gw->data() + o * in_ : nullptr;
      for (std::int64_t i = 0; i < in_; ++i) {
        gx[i] += wr[i] * g;
        if (gwr) gwr[i] += x_in[i] * g;
      }
      if (gb) (*gb)[o] += g;
    }
    return gx;
  }

  std::vector<Tensor<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Tensor<T>*> params() const override { return {&weight_, &bias_}; }

  std::uint64_t macs(const std::vector<std::int64_t>&) const override {
    return static_cast<std::uint64_t>(in_ * out_);
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  void check_in(const std::vector<std::int64_t>& s) const {
    if (s.size() != 1 || s[0] != in_)
      throw std::invalid_argument("dense: input shape mismatch " + shape_to_string(s));
  }

  std::int64_t in_, out_;
  Tensor<T> weight_;  // (out, in)
  Tensor<T> bias_;    // (out)
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::conv3x3: return std::make_unique<Conv3x3<T>>(spec.in, spec.out);
    case LayerKind::relu: return std::make_unique<ReLU<T>>();
    case LayerKind::avgpool2: return std::make_unique<AvgPool2<T>>();
    case LayerKind::global_avgpool: return std::make_unique<GlobalAvgPool<T>>();
    case LayerKind::dense: return std::make_unique<Dense<T>>(spec.in, spec.out);
  }
  throw std::invalid_argument("make_layer: unknown kind");
}

// Numerically stable softmax; accumulation in double so float32 confidence
// vectors stay normalized to ~1e-7.
template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double e = std::exp(static_cast<double>(logits[i] - mx));
    out[i] = static_cast<T>(e);
    denom += e;
  }
  const double inv = 1.0 / denom;
  for (auto& v : out) v = static_cast<T>(static_cast<double>(v) * inv);
  return out;
}

// Cross-entropy -log p[label] with the matching logit gradient (p - onehot).
template <typename T>
double cross_entropy_with_grad(std::span<const T> logits, int label, std::vector<T>& grad) {
  std::vector<T> p = softmax(logits);
  grad.assign(p.begin(), p.end());
  grad[static_cast<std::size_t>(label)] -= T(1);
  double pl = static_cast<double>(p[static_cast<std::size_t>(label)]);
  return -std::log(std::max(pl, 1e-30));
}

}  // namespace exitprint
