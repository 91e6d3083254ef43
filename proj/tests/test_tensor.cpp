#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "opmatch/tensor.hpp"

using namespace opmatch;
using testutil::fd_max_rel;

TEST_CASE("conv2d: centered dirac with zero padding is identity") {
    Rng rng(1);
    Tensor x = Tensor::randn({1, 1, 5, 5}, rng);
    Tensor k = reshape(Tensor::dirac(3, 3), {1, 1, 3, 3});
    Tensor y = conv2d(x, k, PaddingMode::Zero);
    REQUIRE(y.shape() == x.shape());
    for (int i = 0; i < 25; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d: ones 3x3 with ones 2x2 valid gives all fours") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y = conv2d(x, k, PaddingMode::Valid);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("conv2d: tape gradient w.r.t. kernel matches finite differences") {
    Rng rng(2);
    Tensor x = Tensor::randn({1, 1, 6, 6}, rng);
    Tensor k = Tensor::randn({1, 1, 3, 3}, rng);
    double err = fd_max_rel([&] { return sum(conv2d(x, k, PaddingMode::Zero)); }, k);
    CHECK(err < 1e-6);
}

TEST_CASE("conv2d: gradient w.r.t. input, all padding modes") {
    Rng rng(3);
    for (auto mode : {PaddingMode::Zero, PaddingMode::Replicate,
                      PaddingMode::Circular, PaddingMode::Valid}) {
        Tensor x = Tensor::randn({2, 1, 6, 6}, rng);
        Tensor k = Tensor::randn({2, 1, 3, 3}, rng);
        double err = fd_max_rel([&] { return sum(square(conv2d(x, k, mode))); }, x);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("conv2d: shape mismatch names the offending dimension") {
    Tensor x = Tensor::zeros({1, 2, 5, 5});
    Tensor k = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(x, k, PaddingMode::Zero),
                         doctest::Contains("channel"), TensorError);
}

TEST_CASE("linear: identity weight and zero bias") {
    Rng rng(4);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) w.mutable_data()[i * 4 + i] = 1.0;
    Tensor b = Tensor::zeros({4});
    Tensor y = linear(x, w, b);
    for (int i = 0; i < 12; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("linear: hand-computed 2x2 case") {
    Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0});
    Tensor w = Tensor::from_data({2, 2}, {1.0, 0.0, 1.0, 1.0});
    Tensor b = Tensor::from_data({2}, {0.0, 1.0});
    Tensor y = linear(x, w, b);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(4.0));
}

TEST_CASE("linear: gradients vs finite differences") {
    Rng rng(5);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({2, 4}, rng);
    Tensor b = Tensor::randn({2}, rng);
    auto f = [&] { return sum(square(linear(x, w, b))); };
    CHECK(fd_max_rel(f, x) < 1e-6);
    CHECK(fd_max_rel(f, w) < 1e-6);
    CHECK(fd_max_rel(f, b) < 1e-6);
    CHECK_THROWS_AS(linear(x, Tensor::zeros({2, 5}), b), TensorError);
}

TEST_CASE("elementwise: silu(0)=0 and mean of constant") {
    Tensor z = Tensor::zeros({3});
    CHECK(silu(z).data()[0] == 0.0);
    Tensor c = Tensor::full({7}, 2.5);
    CHECK(mean(c).item() == doctest::Approx(2.5));
}

TEST_CASE("elementwise: every primitive passes FD checks at random points") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = Tensor::randn({2, 3}, rng);
        Tensor b = Tensor::randn({2, 3}, rng);
        CHECK(fd_max_rel([&] { return sum(square(add(a, b))); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(mul(a, b)); }, b) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(silu(a)); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(abs(a)); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(square(a)); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return mean(square(a)); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(sqrt_eps(square(a), 1e-6)); }, a) < 1e-5);
        CHECK(fd_max_rel([&] { return sum(softplus(a)); }, a) < 1e-5);
        Tensor im = Tensor::randn({1, 1, 4, 4}, rng);
        CHECK(fd_max_rel([&] {
                  return sum(square(interpolate_bilinear(im, 7, 7)));
              }, im) < 1e-5);
    }
}

TEST_CASE("elementwise: broadcast incompatibility raises") {
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), TensorError);
}

TEST_CASE("backward: sum gives all-ones gradient") {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 5}, rng);
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: d sum(x^2)/2 = x") {
    Rng rng(8);
    Tensor x = Tensor::randn({4, 4}, rng);
    x.set_requires_grad(true);
    backward(scalar_mul(sum(square(x)), 0.5));
    for (int i = 0; i < 16; ++i)
        CHECK(x.grad()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("backward: composed conv->silu->mean graph matches FD") {
    Rng rng(9);
    Tensor x = Tensor::randn({1, 1, 6, 6}, rng);
    Tensor k = Tensor::randn({1, 1, 3, 3}, rng);
    auto f = [&] { return mean(silu(conv2d(x, k, PaddingMode::Replicate))); };
    CHECK(fd_max_rel(f, k) < 1e-5);
    CHECK(fd_max_rel(f, x) < 1e-5);
}

TEST_CASE("backward: non-scalar loss rejected") {
    Tensor x = Tensor::zeros({3});
    x.set_requires_grad(true);
    CHECK_THROWS_AS(backward(add(x, x)), TensorError);
}

TEST_CASE("backward: second call accumulates") {
    Tensor x = Tensor::full({3}, 2.0);
    x.set_requires_grad(true);
    backward(sum(x));
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward: linearity of a*L1 + b*L2") {
    Rng rng(10);
    Tensor x = Tensor::randn({3, 3}, rng);
    double a = 0.7, b = -1.3;

    x.set_requires_grad(true);
    x.zero_grad();
    backward(add(scalar_mul(sum(square(x)), a), scalar_mul(sum(silu(x)), b)));
    auto combined = x.grad();

    x.zero_grad();
    backward(sum(square(x)));
    auto g1 = x.grad();
    x.zero_grad();
    backward(sum(silu(x)));
    auto g2 = x.grad();

    for (int i = 0; i < 9; ++i)
        CHECK(std::fabs(combined[i] - (a * g1[i] + b * g2[i])) < 1e-12);
}

TEST_CASE("detached tensors never accumulate gradient") {
    Rng rng(11);
    Tensor x = Tensor::randn({3}, rng);
    x.set_requires_grad(true);
    Tensor d = x.detach();
    backward(sum(mul(square(d), square(d))));
    CHECK(d.grad() == std::vector<double>{0.0, 0.0, 0.0});
    CHECK(x.grad() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("determinism: identical seeds give bit-identical forward/backward") {
    auto run = [] {
        Rng rng(42);
        Tensor x = Tensor::randn({2, 1, 8, 8}, rng);
        Tensor k = Tensor::randn({4, 1, 3, 3}, rng);
        k.set_requires_grad(true);
        Tensor loss = mean(square(silu(conv2d(x, k, PaddingMode::Zero))));
        backward(loss);
        auto out = k.grad();
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("structured ops: concat/slice/pad/crop/subsample round trips") {
    Rng rng(12);
    Tensor a = Tensor::randn({2, 2, 3, 3}, rng);
    Tensor b = Tensor::randn({2, 1, 3, 3}, rng);
    Tensor c = concat_channels(a, b);
    CHECK(c.shape() == Shape{2, 3, 3, 3});
    Tensor back = slice_channels(c, 0, 2);
    CHECK(back.data() == a.data());

    CHECK(fd_max_rel([&] { return sum(square(concat_channels(a, b))); }, b) < 1e-6);
    CHECK(fd_max_rel([&] { return sum(square(slice_channels(a, 1, 1))); }, a) < 1e-6);

    Tensor im = Tensor::randn({1, 1, 4, 4}, rng);
    for (auto mode : {PaddingMode::Zero, PaddingMode::Replicate, PaddingMode::Circular})
        CHECK(fd_max_rel([&] {
                  return sum(square(pad2d(im, 2, 2, 1, 1, mode)));
              }, im) < 1e-5);
    CHECK(fd_max_rel([&] { return sum(square(crop2d(im, 1, 1, 2, 2))); }, im) < 1e-6);

    Tensor big = Tensor::randn({1, 1, 6, 6}, rng);
    Tensor ds = subsample2d(big, 2);
    CHECK(ds.shape() == Shape{1, 1, 3, 3});
    CHECK(ds.data()[0] == big.data()[0]);
    CHECK(ds.data()[1] == big.data()[2]);
    CHECK(fd_max_rel([&] { return sum(square(subsample2d(big, 2))); }, big) < 1e-6);
    CHECK_THROWS_AS(subsample2d(big, 4), TensorError);
}

TEST_CASE("structured ops: scale_rows and bias_channels gradients") {
    Rng rng(13);
    Tensor x = Tensor::randn({3, 2, 2, 2}, rng);
    Tensor s = Tensor::randn({3}, rng);
    auto f = [&] { return sum(square(scale_rows(x, s))); };
    CHECK(fd_max_rel(f, x) < 1e-5);
    CHECK(fd_max_rel(f, s) < 1e-5);

    Tensor bc = Tensor::randn({2}, rng);
    Tensor bs = Tensor::randn({3, 2}, rng);
    auto g1 = [&] { return sum(square(bias_channels(x, bc))); };
    auto g2 = [&] { return sum(square(bias_channels(x, bs))); };
    CHECK(fd_max_rel(g1, bc) < 1e-5);
    CHECK(fd_max_rel(g2, bs) < 1e-5);
}

TEST_CASE("depthwise conv: matches per-channel conv and differentiates") {
    Rng rng(14);
    Tensor x = Tensor::randn({2, 3, 5, 5}, rng);
    Tensor k = Tensor::randn({3, 3, 3}, rng);
    Tensor y = conv2d_depthwise(x, k, PaddingMode::Replicate);
    CHECK(y.shape() == x.shape());
    // channel 1 must equal a standalone single-channel conv
    Tensor x1 = slice_channels(x, 1, 1);
    Tensor k1 = reshape(slice_dim0(k, 1, 1), {1, 1, 3, 3});
    Tensor y1 = conv2d(x1, k1, PaddingMode::Replicate);
    Tensor ys = slice_channels(y, 1, 1);
    for (int i = 0; i < y1.numel(); ++i)
        CHECK(ys.data()[i] == doctest::Approx(y1.data()[i]));
    CHECK(fd_max_rel([&] {
              return sum(square(conv2d_depthwise(x, k, PaddingMode::Zero)));
          }, k) < 1e-5);
}

TEST_CASE("div_by_scalar_tensor: normalization gradient") {
    Rng rng(15);
    Tensor k = Tensor::randn({3, 3}, rng);
    auto f = [&] {
        Tensor a = abs(k);
        return sum(square(div_by_scalar_tensor(a, sum(a))));
    };
    CHECK(fd_max_rel(f, k) < 1e-5);
}
