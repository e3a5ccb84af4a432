#include <doctest.h>

#include "changedet/autograd.hpp"
#include "changedet/ops.hpp"
#include "changedet/tensor.hpp"
#include "test_support.hpp"

using namespace changedet;

TEST_SUITE("tensor") {
  TEST_CASE("shape construction and element access") {
    ag::Tensor t({2, 3, 4, 5});
    CHECK(t.rank() == 4);
    CHECK(t.numel() == 120);
    CHECK(t.dim(2) == 4);
    t.at(1, 2, 3, 4) = 7.5f;
    CHECK(t[119] == doctest::Approx(7.5f));
    CHECK(t.shape_str() == "(2, 3, 4, 5)");
  }

  TEST_CASE("fill and scalar helpers") {
    ag::Tensor t = ag::Tensor::full({3}, 2.0f);
    CHECK(t[0] == 2.0f);
    t.fill(-1.0f);
    CHECK(t[2] == -1.0f);
    CHECK(ag::Tensor::scalar(4.0f).numel() == 1);
  }

  TEST_CASE("all_finite flags NaN and infinity") {
    ag::Tensor t({4}, 1.0f);
    CHECK(t.all_finite());
    t[2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
    t[2] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.all_finite());
  }
}

TEST_SUITE("autograd") {
  TEST_CASE("constant folding drops the backward function when no input needs grad") {
    ag::Var a = ag::Var::leaf(ag::Tensor({2, 2, 2, 2}, 1.0f), false);
    ag::Var b = ag::Var::leaf(ag::Tensor({2, 2, 2, 2}, 2.0f), false);
    ag::Var c = ag::add(a, b);
    CHECK_FALSE(c.requires_grad());
    CHECK(c.node()->inputs.empty());
    CHECK_FALSE(static_cast<bool>(c.node()->backward_fn));
  }

  TEST_CASE("gradients flow through a small chain") {
    ag::Var x = ag::Var::leaf(ag::Tensor({1, 1, 1, 2}, std::vector<float>{3.0f, -2.0f}), true);
    ag::Var y = ag::mul(x, x);            // x^2
    ag::Var z = ag::scale(y, 0.5f);       // x^2 / 2
    ag::Var loss = ag::sum_all(z);
    ag::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(3.0f));   // d(x^2/2)/dx = x
    CHECK(x.grad()[1] == doctest::Approx(-2.0f));
  }

  TEST_CASE("gradients accumulate across shared uses") {
    ag::Var x = ag::Var::leaf(ag::Tensor({1, 1, 1, 1}, 2.0f), true);
    ag::Var y = ag::add(x, x);
    ag::Var loss = ag::sum_all(y);
    ag::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
  }

  TEST_CASE("zero_grad clears accumulated gradients") {
    ag::Var x = ag::Var::leaf(ag::Tensor({1, 1, 1, 1}, 2.0f), true);
    ag::backward(ag::sum_all(ag::mul(x, x)));
    CHECK(x.grad()[0] != 0.0f);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0f);
  }

  TEST_CASE("frozen subtree stays constant while trainable branch learns") {
    Rng rng(5);
    ag::Var frozen = ag::Var::leaf(testsup::random_tensor({1, 1, 2, 2}, rng), false);
    ag::Var live = ag::Var::leaf(testsup::random_tensor({1, 1, 2, 2}, rng), true);
    ag::Var loss = ag::sum_all(ag::mul(frozen, live));
    ag::backward(loss);
    CHECK(live.grad()[0] == doctest::Approx(frozen.value()[0]));
    const ag::Tensor& g = frozen.grad();
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0f);
  }
}
