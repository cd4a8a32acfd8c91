#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "polypseg/ops.hpp"
#include "polypseg/tensor.hpp"

using namespace polypseg;

TEST_CASE("factories and accessors") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.shape() == Shape{2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.at({1, 2}) == 0.0);

    Tensor f = Tensor::full({2, 2}, 1.5);
    CHECK(f.at({0, 1}) == 1.5);

    Tensor d = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(d.at({1, 0}) == 3.0);
    CHECK(d.at({1, 1}) == 4.0);

    Tensor s = Tensor::scalar(7.0);
    CHECK(s.item() == 7.0);
    CHECK_THROWS_AS(d.item(), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("clone and detach are independent") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor c = a.clone();
    c.data()[0] = 9;
    CHECK(a.at({0}) == 1.0);
    CHECK(c.requires_grad());

    Tensor d = a.detach();
    CHECK_FALSE(d.requires_grad());
    d.data()[1] = 5;
    CHECK(a.at({1}) == 2.0);
}

TEST_CASE("backward through a small expression") {
    Tensor a = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor b = Tensor::from_data({3}, {4, 5, 6}, true);
    // f = sum(a*b + a); df/da = b + 1, df/db = a
    Tensor f = ops::sum(ops::add(ops::mul(a, b), a));
    CHECK(f.item() == doctest::Approx(4 + 10 + 18 + 6));
    backward(f);
    CHECK(a.grad()[0] == doctest::Approx(5));
    CHECK(a.grad()[1] == doctest::Approx(6));
    CHECK(a.grad()[2] == doctest::Approx(7));
    CHECK(b.grad()[0] == doctest::Approx(1));
    CHECK(b.grad()[2] == doctest::Approx(3));
}

TEST_CASE("same tensor used twice accumulates its gradient") {
    Tensor a = Tensor::from_data({2}, {3, -2}, true);
    Tensor f = ops::sum(ops::mul(a, a));
    backward(f);
    CHECK(a.grad()[0] == doctest::Approx(6));
    CHECK(a.grad()[1] == doctest::Approx(-4));
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    Tensor a = Tensor::from_data({1}, {2}, true);
    backward(ops::mul(a, a));
    backward(ops::mul(a, a));
    CHECK(a.grad()[0] == doctest::Approx(8));
    a.zero_grad();
    backward(ops::mul(a, a));
    CHECK(a.grad()[0] == doctest::Approx(4));
}

TEST_CASE("no-grad mode detaches results") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    {
        NoGradGuard ng;
        Tensor y = ops::mul(a, a);
        CHECK_FALSE(y.requires_grad());
        CHECK_THROWS(backward(ops::sum(y)));
    }
    Tensor y = ops::mul(a, a);
    CHECK(y.requires_grad());
}

TEST_CASE("backward requires a scalar root") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = ops::mul(a, a);
    CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("deep chain does not overflow the stack") {
    Tensor a = Tensor::from_data({1}, {1.0}, true);
    Tensor y = a;
    for (int i = 0; i < 20000; ++i) y = ops::add_scalar(y, 1.0);
    Tensor f = ops::sum(y);
    CHECK(f.item() == doctest::Approx(20001.0));
    backward(f);
    CHECK(a.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("randn is deterministic per seed") {
    Rng r1(7), r2(7), r3(8);
    Tensor a = Tensor::randn({16}, r1);
    Tensor b = Tensor::randn({16}, r2);
    Tensor c = Tensor::randn({16}, r3);
    CHECK(a.values() == b.values());
    CHECK(a.values() != c.values());
}
