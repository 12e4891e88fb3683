#pragma once

// Shared helpers for the test suites: tiny model builders, random tensors,
// and an independent finite-difference gradient checker.

#include <cmath>
#include <functional>
#include <vector>

#include "exitprint/arch.hpp"
#include "exitprint/model.hpp"
#include "exitprint/rng.hpp"
#include "exitprint/tensor.hpp"

namespace test_util {

using namespace exitprint;

template <typename T>
Tensor<T> random_tensor(const std::vector<std::int64_t>& shape, Pcg32& rng, double lo = 0.0,
                        double hi = 1.0) {
  Tensor<T> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// A small random multi-exit model: two or three conv blocks on an 8x8 input,
// ICs after every interior block. Weights are random (not trained), which is
// all the rule/gradient tests need.
template <typename T>
MultiExitModel<T> tiny_model(std::uint64_t seed, int n_classes = 4, int blocks = 3,
                             std::int64_t hw = 8) {
  ArchSpec arch;
  arch.channels.clear();
  for (int b = 0; b < blocks; ++b) arch.channels.push_back(4 + 2 * b);
  arch.pool_blocks = {1};
  arch.attach_blocks.clear();
  for (int b = 1; b < blocks; ++b) arch.attach_blocks.push_back(b);
  auto backbone = make_backbone<T>(arch, {3, hw, hw}, n_classes, seed);
  return build_multiexit<T>(backbone, attach_indices_for(arch), seed ^ 0x5eed, "tiny");
}

// Central-difference gradient of a scalar function of a tensor.
template <typename T>
Tensor<T> finite_difference_grad(const std::function<double(const Tensor<T>&)>& f,
                                 const Tensor<T>& x, double h = 1e-4) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(static_cast<double>(orig) + h);
    const double up = f(probe);
    probe[i] = static_cast<T>(static_cast<double>(orig) - h);
    const double down = f(probe);
    probe[i] = orig;
    g[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return g;
}

template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b) {
  double num = 0.0, den = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(a[i]) * static_cast<double>(a[i]) +
           static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

}  // namespace test_util
