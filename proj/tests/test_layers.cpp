#include <catch2/catch_amalgamated.hpp>

#include "exitprint/layers.hpp"
#include "test_util.hpp"

using namespace exitprint;
using test_util::finite_difference_grad;
using test_util::random_tensor;
using test_util::relative_error;

namespace {

// Direct convolution in double, written independently of Conv3x3::forward.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w,
                              const Tensor<double>& b) {
  const std::int64_t in_ch = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const std::int64_t out_ch = w.dim(0);
  Tensor<double> y({out_ch, h, ww});
  for (std::int64_t oc = 0; oc < out_ch; ++oc)
    for (std::int64_t yy = 0; yy < h; ++yy)
      for (std::int64_t xx = 0; xx < ww; ++xx) {
        double s = b[oc];
        for (std::int64_t ic = 0; ic < in_ch; ++ic)
          for (std::int64_t ky = 0; ky < 3; ++ky)
            for (std::int64_t kx = 0; kx < 3; ++kx) {
              const std::int64_t sy = yy + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= h || sx < 0 || sx >= ww) continue;
              s += w[((oc * in_ch + ic) * 3 + ky) * 3 + kx] * x.at(ic, sy, sx);
            }
        y.at(oc, yy, xx) = s;
      }
  return y;
}

double sum_all(const Tensor<double>& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i];
  return s;
}

}  // namespace

TEST_CASE("conv3x3 forward matches a direct reference") {
  Pcg32 rng(11);
  Conv3x3<double> conv(3, 5);
  conv.init(rng);
  auto x = random_tensor<double>({3, 6, 7}, rng, -1.0, 1.0);
  auto y = conv.forward(x);
  auto ref = conv_reference(x, conv.weight(), conv.bias());
  REQUIRE(y.shape() == ref.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i)
    REQUIRE_THAT(y[i], Catch::Matchers::WithinAbs(ref[i], 1e-12));
}

TEST_CASE("conv3x3 rejects mismatched input channels") {
  Conv3x3<float> conv(3, 4);
  Tensor<float> bad({2, 8, 8});
  REQUIRE_THROWS_AS(conv.forward(bad), std::invalid_argument);
}

TEST_CASE("layer input gradients match finite differences") {
  Pcg32 rng(23);

  SECTION("conv3x3") {
    Conv3x3<double> conv(2, 3);
    conv.init(rng);
    auto x = random_tensor<double>({2, 5, 5}, rng, -1.0, 1.0);
    auto f = [&](const Tensor<double>& in) { return sum_all(conv.forward(in)); };
    Tensor<double> ones(conv.out_shape(x.shape()));
    ones.fill(1.0);
    auto analytic = conv.backward(x, ones, nullptr);
    auto numeric = finite_difference_grad<double>(f, x, 1e-5);
    REQUIRE(relative_error(analytic, numeric) < 1e-7);
  }

  SECTION("avgpool2") {
    AvgPool2<double> pool;
    auto x = random_tensor<double>({3, 6, 6}, rng);
    auto f = [&](const Tensor<double>& in) { return sum_all(pool.forward(in)); };
    Tensor<double> ones(pool.out_shape(x.shape()));
    ones.fill(1.0);
    auto analytic = pool.backward(x, ones, nullptr);
    auto numeric = finite_difference_grad<double>(f, x, 1e-5);
    REQUIRE(relative_error(analytic, numeric) < 1e-8);
  }

  SECTION("global_avgpool") {
    GlobalAvgPool<double> gap;
    auto x = random_tensor<double>({4, 3, 3}, rng);
    auto f = [&](const Tensor<double>& in) { return sum_all(gap.forward(in)); };
    Tensor<double> ones(gap.out_shape(x.shape()));
    ones.fill(1.0);
    auto analytic = gap.backward(x, ones, nullptr);
    auto numeric = finite_difference_grad<double>(f, x, 1e-5);
    REQUIRE(relative_error(analytic, numeric) < 1e-8);
  }

  SECTION("dense") {
    Dense<double> fc(6, 4);
    fc.init(rng);
    auto x = random_tensor<double>({6}, rng, -1.0, 1.0);
    auto f = [&](const Tensor<double>& in) { return sum_all(fc.forward(in)); };
    Tensor<double> ones({4});
    ones.fill(1.0);
    auto analytic = fc.backward(x, ones, nullptr);
    auto numeric = finite_difference_grad<double>(f, x, 1e-6);
    REQUIRE(relative_error(analytic, numeric) < 1e-8);
  }
}

TEST_CASE("conv3x3 parameter gradients match finite differences") {
  Pcg32 rng(31);
  Conv3x3<double> conv(2, 2);
  conv.init(rng);
  auto x = random_tensor<double>({2, 4, 4}, rng, -1.0, 1.0);

  std::vector<Tensor<double>> grads;
  Tensor<double> ones(conv.out_shape(x.shape()));
  ones.fill(1.0);
  conv.backward(x, ones, &grads);
  REQUIRE(grads.size() == 2);

  // weight gradient
  for (std::int64_t i = 0; i < conv.weight().numel(); i += 7) {
    const double orig = conv.weight()[i];
    const double h = 1e-6;
    conv.weight()[i] = orig + h;
    const double up = sum_all(conv.forward(x));
    conv.weight()[i] = orig - h;
    const double down = sum_all(conv.forward(x));
    conv.weight()[i] = orig;
    REQUIRE_THAT(grads[0][i], Catch::Matchers::WithinAbs((up - down) / (2 * h), 1e-5));
  }
  // bias gradient equals the number of output positions
  for (std::int64_t i = 0; i < conv.bias().numel(); ++i)
    REQUIRE_THAT(grads[1][i], Catch::Matchers::WithinAbs(16.0, 1e-9));
}

TEST_CASE("relu zeroes negative activations and their gradients") {
  ReLU<float> relu;
  Tensor<float> x({4});
  x[0] = -1.0f; x[1] = 0.0f; x[2] = 0.5f; x[3] = 2.0f;
  auto y = relu.forward(x);
  REQUIRE(y[0] == 0.0f);
  REQUIRE(y[1] == 0.0f);
  REQUIRE(y[2] == 0.5f);
  Tensor<float> g({4});
  g.fill(1.0f);
  auto gx = relu.backward(x, g, nullptr);
  REQUIRE(gx[0] == 0.0f);
  REQUIRE(gx[1] == 0.0f);  // gradient at exactly zero is zero
  REQUIRE(gx[2] == 1.0f);
}

TEST_CASE("softmax normalizes and is stable for large logits") {
  std::vector<float> logits = {1000.0f, 1000.0f, 999.0f};
  auto p = softmax(std::span<const float>(logits.data(), logits.size()));
  double sum = 0.0;
  for (float v : p) {
    REQUIRE(v >= 0.0f);
    sum += v;
  }
  REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
  REQUIRE(p[0] == p[1]);
  REQUIRE(p[2] < p[0]);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  std::vector<double> logits = {0.3, -0.2, 1.1};
  std::vector<double> grad;
  const double loss = cross_entropy_with_grad(
      std::span<const double>(logits.data(), logits.size()), 2, grad);
  auto p = softmax(std::span<const double>(logits.data(), logits.size()));
  REQUIRE_THAT(loss, Catch::Matchers::WithinAbs(-std::log(p[2]), 1e-12));
  REQUIRE_THAT(grad[0], Catch::Matchers::WithinAbs(p[0], 1e-12));
  REQUIRE_THAT(grad[2], Catch::Matchers::WithinAbs(p[2] - 1.0, 1e-12));
}

TEST_CASE("avgpool2 requires even spatial dims") {
  AvgPool2<float> pool;
  Tensor<float> odd({1, 5, 6});
  REQUIRE_THROWS_AS(pool.forward(odd), std::invalid_argument);
}

TEST_CASE("layer macs reflect multiply-accumulate counts") {
  Conv3x3<float> conv(3, 8);
  REQUIRE(conv.macs({3, 32, 32}) == 9ull * 3 * 8 * 32 * 32);
  Dense<float> fc(48, 4);
  REQUIRE(fc.macs({48}) == 48ull * 4);
  ReLU<float> relu;
  REQUIRE(relu.macs({3, 32, 32}) == 0);
}
