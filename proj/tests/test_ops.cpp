#include <doctest.h>

#include <cmath>
#include <vector>

#include "changedet/ops.hpp"
#include "test_support.hpp"

using namespace changedet;

namespace {

// Plain quadruple-loop convolution used as the reference implementation.
ag::Tensor conv2d_oracle(const ag::Tensor& x, const ag::Tensor& w, const ag::Tensor* b,
                         int stride, int pad) {
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  ag::Tensor out({n, cout, oh, ow});
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t co = 0; co < cout; ++co) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          double acc = b ? (*b)[co] : 0.0;
          for (int64_t ci = 0; ci < cin; ++ci) {
            for (int64_t ky = 0; ky < kh; ++ky) {
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * stride + ky - pad;
                const int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.at(ni, ci, iy, ix)) * w.at(co, ci, ky, kx);
              }
            }
          }
          out.at(ni, co, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

void check_close(const ag::Tensor& got, const ag::Tensor& want, double tol) {
  REQUIRE(got.shape() == want.shape());
  for (int64_t i = 0; i < got.numel(); ++i) {
    CHECK(static_cast<double>(got[i]) ==
          doctest::Approx(static_cast<double>(want[i])).epsilon(tol).scale(1.0));
  }
}

// Central-difference check of d(sum of weighted outputs)/d(leaf entries) on
// a sampled subset of coordinates.
void gradcheck(const std::function<ag::Var()>& build, ag::Var leaf, const ag::Tensor& weights,
               Rng& rng, int probes, double h, double tol) {
  leaf.zero_grad();
  ag::Var weighted = ag::mul(build(), ag::Var::leaf(weights));
  ag::Var loss = ag::sum_all(weighted);
  ag::backward(loss);
  ag::Tensor analytic = leaf.grad();

  auto eval = [&]() {
    const ag::Tensor out = build().value();
    double acc = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) acc += static_cast<double>(out[i]) * weights[i];
    return acc;
  };
  for (int probe = 0; probe < probes; ++probe) {
    const int64_t i = rng.uniform_int(leaf.numel());
    const double numeric = testsup::fd_wrt(leaf.value()[i], h, eval);
    CHECK(static_cast<double>(analytic[i]) ==
          doctest::Approx(numeric).epsilon(tol).scale(1.0));
  }
}

}  // namespace

TEST_SUITE("ops") {
  TEST_CASE("conv2d matches the loop oracle across strides and padding") {
    Rng rng(11);
    for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
      ag::Tensor x = testsup::random_tensor({2, 3, 9, 7}, rng);
      ag::Tensor w = testsup::random_tensor({4, 3, 3, 3}, rng);
      ag::Tensor b = testsup::random_tensor({4}, rng);
      ag::Var out = ag::conv2d(ag::Var::leaf(x), ag::Var::leaf(w), ag::Var::leaf(b), stride, pad);
      check_close(out.value(), conv2d_oracle(x, w, &b, stride, pad), 2e-5);
    }
  }

  TEST_CASE("conv2d without bias") {
    Rng rng(12);
    ag::Tensor x = testsup::random_tensor({1, 2, 5, 5}, rng);
    ag::Tensor w = testsup::random_tensor({3, 2, 1, 1}, rng);
    ag::Var out = ag::conv2d(ag::Var::leaf(x), ag::Var::leaf(w), ag::Var(), 1, 0);
    check_close(out.value(), conv2d_oracle(x, w, nullptr, 1, 0), 2e-5);
  }

  TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(13);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({1, 2, 6, 6}, rng), true);
    ag::Var w = ag::Var::leaf(testsup::random_tensor({3, 2, 3, 3}, rng), true);
    ag::Var b = ag::Var::leaf(testsup::random_tensor({3}, rng), true);
    ag::Tensor weights = testsup::random_tensor({1, 3, 6, 6}, rng);
    auto build = [&]() { return ag::conv2d(x, w, b, 1, 1); };
    gradcheck(build, x, weights, rng, 6, 1e-3, 2e-2);
    gradcheck(build, w, weights, rng, 6, 1e-3, 2e-2);
    gradcheck(build, b, weights, rng, 2, 1e-3, 2e-2);
  }

  TEST_CASE("transposed 2x2 convolution doubles the spatial size and matches a manual scatter") {
    Rng rng(14);
    ag::Tensor x = testsup::random_tensor({1, 2, 3, 4}, rng);
    ag::Tensor w = testsup::random_tensor({2, 3, 2, 2}, rng);  // (Cin, Cout, 2, 2)
    ag::Tensor b = testsup::random_tensor({3}, rng);
    ag::Var out = ag::conv_transpose2x2(ag::Var::leaf(x), ag::Var::leaf(w), ag::Var::leaf(b));
    REQUIRE(out.shape() == std::vector<int64_t>{1, 3, 6, 8});

    ag::Tensor want({1, 3, 6, 8});
    for (int64_t co = 0; co < 3; ++co) {
      for (int64_t oy = 0; oy < 6; ++oy) {
        for (int64_t ox = 0; ox < 8; ++ox) {
          double acc = b[co];
          const int64_t iy = oy / 2, ix = ox / 2;
          for (int64_t ci = 0; ci < 2; ++ci) {
            acc += static_cast<double>(x.at(0, ci, iy, ix)) * w.at(ci, co, oy % 2, ox % 2);
          }
          want.at(0, co, oy, ox) = static_cast<float>(acc);
        }
      }
    }
    check_close(out.value(), want, 2e-5);
  }

  TEST_CASE("transposed convolution gradients match finite differences") {
    Rng rng(15);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({1, 2, 3, 3}, rng), true);
    ag::Var w = ag::Var::leaf(testsup::random_tensor({2, 2, 2, 2}, rng), true);
    ag::Var b = ag::Var::leaf(testsup::random_tensor({2}, rng), true);
    ag::Tensor weights = testsup::random_tensor({1, 2, 6, 6}, rng);
    auto build = [&]() { return ag::conv_transpose2x2(x, w, b); };
    gradcheck(build, x, weights, rng, 5, 1e-3, 2e-2);
    gradcheck(build, w, weights, rng, 5, 1e-3, 2e-2);
  }

  TEST_CASE("batch norm in training mode standardizes with batch statistics") {
    Rng rng(16);
    ag::Tensor x = testsup::random_tensor({2, 3, 4, 4}, rng, -2.0f, 5.0f);
    ag::Tensor gamma({3}, std::vector<float>{1.5f, 0.5f, 1.0f});
    ag::Tensor beta({3}, std::vector<float>{0.1f, -0.2f, 0.0f});
    ag::Tensor run_mean({3}, 0.0f), run_var({3}, 1.0f);
    const float momentum = 0.1f, eps = 1e-5f;
    ag::Var out = ag::batch_norm2d(ag::Var::leaf(x), ag::Var::leaf(gamma), ag::Var::leaf(beta),
                                   run_mean, run_var, true, momentum, eps);

    for (int64_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t y = 0; y < 4; ++y)
          for (int64_t xx = 0; xx < 4; ++xx) mean += x.at(n, c, y, xx);
      mean /= 32.0;
      double var = 0.0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t y = 0; y < 4; ++y)
          for (int64_t xx = 0; xx < 4; ++xx) var += std::pow(x.at(n, c, y, xx) - mean, 2);
      var /= 32.0;

      const double want00 = (x.at(0, c, 0, 0) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c];
      CHECK(out.value().at(0, c, 0, 0) == doctest::Approx(want00).epsilon(1e-4));
      // Running buffers blend toward the batch statistics.
      CHECK(run_mean[c] == doctest::Approx(momentum * mean).epsilon(1e-4));
      const double unbiased = var * 32.0 / 31.0;
      CHECK(run_var[c] == doctest::Approx((1 - momentum) * 1.0 + momentum * unbiased).epsilon(1e-4));
    }
  }

  TEST_CASE("batch norm in eval mode uses the running buffers") {
    ag::Tensor x({1, 1, 1, 2}, std::vector<float>{3.0f, 5.0f});
    ag::Tensor gamma({1}, 2.0f), beta({1}, 1.0f);
    ag::Tensor run_mean({1}, 3.0f), run_var({1}, 4.0f);
    ag::Var out = ag::batch_norm2d(ag::Var::leaf(x), ag::Var::leaf(gamma), ag::Var::leaf(beta),
                                   run_mean, run_var, false, 0.1f, 0.0f);
    CHECK(out.value()[0] == doctest::Approx(1.0f));          // (3-3)/2*2+1
    CHECK(out.value()[1] == doctest::Approx(3.0f));          // (5-3)/2*2+1
    CHECK(run_mean[0] == 3.0f);                              // eval mode never updates
    CHECK(run_var[0] == 4.0f);
  }

  TEST_CASE("batch norm gradients match finite differences") {
    Rng rng(17);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({2, 2, 3, 3}, rng), true);
    ag::Var gamma = ag::Var::leaf(testsup::random_tensor({2}, rng, 0.5f, 1.5f), true);
    ag::Var beta = ag::Var::leaf(testsup::random_tensor({2}, rng), true);
    ag::Tensor weights = testsup::random_tensor({2, 2, 3, 3}, rng);
    ag::Tensor rm({2}, 0.0f), rv({2}, 1.0f);
    auto build = [&]() {
      ag::Tensor rm_local = rm, rv_local = rv;
      return ag::batch_norm2d(x, gamma, beta, rm_local, rv_local, true, 0.1f, 1e-5f);
    };
    gradcheck(build, x, weights, rng, 6, 1e-3, 3e-2);
    gradcheck(build, gamma, weights, rng, 2, 1e-3, 3e-2);
    gradcheck(build, beta, weights, rng, 2, 1e-3, 3e-2);
  }

  TEST_CASE("bilinear upsampling is corner-aligned") {
    ag::Tensor x({1, 1, 2, 2}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
    ag::Var out = ag::upsample_bilinear(ag::Var::leaf(x), 5, 5);
    const ag::Tensor& o = out.value();
    // Corners copy exactly.
    CHECK(o.at(0, 0, 0, 0) == 1.0f);
    CHECK(o.at(0, 0, 0, 4) == 2.0f);
    CHECK(o.at(0, 0, 4, 0) == 3.0f);
    CHECK(o.at(0, 0, 4, 4) == 4.0f);
    // Center is the four-point average.
    CHECK(o.at(0, 0, 2, 2) == doctest::Approx(2.5f));
    // Edge midpoints interpolate along one axis only.
    CHECK(o.at(0, 0, 0, 2) == doctest::Approx(1.5f));
    CHECK(o.at(0, 0, 2, 0) == doctest::Approx(2.0f));
  }

  TEST_CASE("bilinear upsampling gradients match finite differences") {
    Rng rng(18);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({1, 2, 3, 3}, rng), true);
    ag::Tensor weights = testsup::random_tensor({1, 2, 7, 7}, rng);
    auto build = [&]() { return ag::upsample_bilinear(x, 7, 7); };
    gradcheck(build, x, weights, rng, 6, 1e-3, 2e-2);
  }

  TEST_CASE("relu and sigmoid behave and differentiate correctly") {
    ag::Var x = ag::Var::leaf(ag::Tensor({1, 1, 1, 3}, std::vector<float>{-1.0f, 0.0f, 2.0f}), true);
    ag::Var r = ag::relu(x);
    CHECK(r.value()[0] == 0.0f);
    CHECK(r.value()[2] == 2.0f);
    ag::Var s = ag::sigmoid(x);
    CHECK(s.value()[1] == doctest::Approx(0.5f));
    CHECK(s.value()[2] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));

    ag::backward(ag::sum_all(s));
    CHECK(x.grad()[1] == doctest::Approx(0.25f));  // sigmoid'(0)
  }

  TEST_CASE("softmax over channels sums to one and matches the closed form") {
    Rng rng(19);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({2, 4, 3, 3}, rng, -3.0f, 3.0f), true);
    ag::Var p = ag::softmax_channels(x);
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t y = 0; y < 3; ++y) {
        for (int64_t xx = 0; xx < 3; ++xx) {
          double sum = 0.0, denom = 0.0;
          for (int64_t c = 0; c < 4; ++c) denom += std::exp(x.value().at(n, c, y, xx));
          for (int64_t c = 0; c < 4; ++c) {
            sum += p.value().at(n, c, y, xx);
            const double want = std::exp(x.value().at(n, c, y, xx)) / denom;
            CHECK(p.value().at(n, c, y, xx) == doctest::Approx(want).epsilon(1e-5));
          }
          CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
      }
    }
    ag::Tensor weights = testsup::random_tensor({2, 4, 3, 3}, rng);
    gradcheck([&]() { return ag::softmax_channels(x); }, x, weights, rng, 6, 1e-3, 2e-2);
  }

  TEST_CASE("concat_channels stacks and routes gradients to each input") {
    Rng rng(20);
    ag::Var a = ag::Var::leaf(testsup::random_tensor({1, 2, 2, 2}, rng), true);
    ag::Var b = ag::Var::leaf(testsup::random_tensor({1, 3, 2, 2}, rng), true);
    ag::Var cat = ag::concat_channels({a, b});
    REQUIRE(cat.shape() == std::vector<int64_t>{1, 5, 2, 2});
    CHECK(cat.value().at(0, 1, 1, 1) == a.value().at(0, 1, 1, 1));
    CHECK(cat.value().at(0, 4, 0, 1) == b.value().at(0, 2, 0, 1));

    ag::Tensor weights = testsup::random_tensor({1, 5, 2, 2}, rng);
    gradcheck([&]() { return ag::concat_channels({a, b}); }, a, weights, rng, 4, 1e-3, 2e-2);
    gradcheck([&]() { return ag::concat_channels({a, b}); }, b, weights, rng, 4, 1e-3, 2e-2);
  }

  TEST_CASE("global average pooling and channel scaling") {
    Rng rng(21);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({2, 3, 4, 4}, rng), true);
    ag::Var pooled = ag::global_avg_pool(x);
    REQUIRE(pooled.shape() == std::vector<int64_t>{2, 3});
    double mean = 0.0;
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t xx = 0; xx < 4; ++xx) mean += x.value().at(1, 2, y, xx);
    CHECK(pooled.value()[5] == doctest::Approx(mean / 16.0).epsilon(1e-5));

    ag::Var gates = ag::Var::leaf(ag::Tensor({2, 3}, std::vector<float>{1, 0.5f, 0, 2, 1, 0.25f}), true);
    ag::Var scaled = ag::channel_scale(x, gates);
    CHECK(scaled.value().at(0, 1, 2, 2) == doctest::Approx(0.5f * x.value().at(0, 1, 2, 2)));
    CHECK(scaled.value().at(0, 2, 1, 1) == 0.0f);

    ag::Tensor weights = testsup::random_tensor({2, 3, 4, 4}, rng);
    gradcheck([&]() { return ag::channel_scale(x, gates); }, x, weights, rng, 4, 1e-3, 2e-2);
    gradcheck([&]() { return ag::channel_scale(x, gates); }, gates, weights, rng, 3, 1e-3, 2e-2);
  }

  TEST_CASE("linear layer matches a dot-product oracle") {
    Rng rng(22);
    ag::Var x = ag::Var::leaf(testsup::random_tensor({2, 4}, rng), true);
    ag::Var w = ag::Var::leaf(testsup::random_tensor({3, 4}, rng), true);
    ag::Var b = ag::Var::leaf(testsup::random_tensor({3}, rng), true);
    ag::Var out = ag::linear(x, w, b);
    REQUIRE(out.shape() == std::vector<int64_t>{2, 3});
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t o = 0; o < 3; ++o) {
        double acc = b.value()[o];
        for (int64_t f = 0; f < 4; ++f) acc += x.value()[n * 4 + f] * w.value()[o * 4 + f];
        CHECK(out.value()[n * 3 + o] == doctest::Approx(acc).epsilon(1e-5));
      }
    }
    ag::Tensor weights = testsup::random_tensor({2, 3}, rng);
    gradcheck([&]() { return ag::linear(x, w, b); }, x, weights, rng, 4, 1e-3, 2e-2);
    gradcheck([&]() { return ag::linear(x, w, b); }, w, weights, rng, 4, 1e-3, 2e-2);
  }

  TEST_CASE("elementwise helpers: add, mul, emax, scale, mul_scalar_var, sub_from") {
    Rng rng(23);
    ag::Var a = ag::Var::leaf(testsup::random_tensor({1, 1, 2, 2}, rng), true);
    ag::Var b = ag::Var::leaf(testsup::random_tensor({1, 1, 2, 2}, rng), true);
    CHECK(ag::add(a, b).value()[0] == doctest::Approx(a.value()[0] + b.value()[0]));
    CHECK(ag::mul(a, b).value()[1] == doctest::Approx(a.value()[1] * b.value()[1]));
    CHECK(ag::emax(a, b).value()[2] == std::max(a.value()[2], b.value()[2]));
    CHECK(ag::scale(a, 3.0f).value()[3] == doctest::Approx(3.0f * a.value()[3]));
    CHECK(ag::sub_from(1.0f, a).value()[0] == doctest::Approx(1.0f - a.value()[0]));

    ag::Var s = ag::Var::leaf(ag::Tensor::scalar(0.75f), true);
    ag::Var scaled = ag::mul_scalar_var(a, s);
    CHECK(scaled.value()[2] == doctest::Approx(0.75f * a.value()[2]));
    ag::backward(ag::sum_all(scaled));
    double sum = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) sum += a.value()[i];
    CHECK(s.grad()[0] == doctest::Approx(sum).epsilon(1e-5));
  }
}
