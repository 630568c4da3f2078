#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "emolora/errors.hpp"
#include "emolora/numkern.hpp"
#include "emolora/rng.hpp"
#include "test_support.hpp"

using namespace emolora;
using emolora::testing::random_tensor;
using emolora::testing::relative_error;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = static_cast<float>(s);
        }
    }
    return out;
}

Param make_param(Tensor t, bool trainable = true) { return Param(std::move(t), trainable); }

} // namespace

TEST(Tensor, RejectsInconsistentShapes) {
    EXPECT_THROW(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor(std::vector<std::size_t>{}), ShapeError);
    const Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, BitwiseEqualDistinguishesSignedZero) {
    const Tensor a = Tensor::matrix(1, 1, {0.0f});
    const Tensor b = Tensor::matrix(1, 1, {-0.0f});
    EXPECT_FALSE(a.bitwise_equal(b));
    EXPECT_TRUE(a.bitwise_equal(a));
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        EXPECT_NE(x, c.next_u64());
    }
}

TEST(Rng, StreamDefinitionIsFixed) {
    // Output 1 of seed 0: mix64(mix64(0) + golden).
    const std::uint64_t key = Rng::mix64(0);
    Rng r(0);
    EXPECT_EQ(r.next_u64(), Rng::mix64(key + Rng::kGolden));
    // SplitMix64 finalizer of 1, a published constant of the reference generator.
    EXPECT_EQ(Rng::mix64(0x9E3779B97F4A7C15ULL), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, SplitStreamsDiffer) {
    const Rng root(5);
    Rng a = root.split(0), b = root.split(1), a2 = root.split(0);
    EXPECT_NE(a.key(), b.key());
    EXPECT_EQ(a.next_u64(), a2.next_u64());
}

TEST(Rng, NormalMoments) {
    Rng r(11);
    double s = 0.0, s2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.03);
    EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Matmul, IdentityLeavesMatrix) {
    const Tensor i2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    EXPECT_TRUE(nk::matmul(i2, m).bitwise_equal(m));
}

TEST(Matmul, HandSum) {
    const Tensor out = nk::matmul(Tensor::matrix(1, 2, {1, 1}), Tensor::matrix(2, 1, {2, 3}));
    EXPECT_EQ(out.at(0, 0), 5.0f);
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = random_tensor({3, 4}, rng);
        const Tensor b = random_tensor({4, 2}, rng);
        EXPECT_TRUE(nk::matmul(a, b).bitwise_equal(naive_matmul(a, b)));
    }
    const Tensor a = random_tensor({17, 33}, rng);
    const Tensor b = random_tensor({33, 9}, rng);
    EXPECT_TRUE(nk::matmul(a, b).bitwise_equal(naive_matmul(a, b)));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    try {
        nk::matmul(Tensor({2, 3}), Tensor({4, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(Linear, IdentityWeight) {
    const Tensor out = nk::linear_forward(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(2, 2, {1, 0, 0, 1}),
                                          Tensor({2}));
    EXPECT_TRUE(out.bitwise_equal(Tensor::matrix(1, 2, {1, 0})));
}

TEST(Linear, HandMatrixVector) {
    const Tensor out = nk::linear_forward(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 2, {1, 1, 0, 1}),
                                          Tensor({2}, {1, 1}));
    EXPECT_TRUE(out.bitwise_equal(Tensor::matrix(1, 2, {4, 3})));
}

TEST(Linear, ZeroInputZeroBias) {
    Rng rng(1);
    const Tensor out = nk::linear_forward(Tensor({3, 4}), random_tensor({5, 4}, rng), Tensor({5}));
    EXPECT_TRUE(emolora::testing::all_zero(out));
}

TEST(Linear, ShapeMismatch) {
    EXPECT_THROW(nk::linear_forward(Tensor({1, 3}), Tensor({2, 2}), Tensor({2})), ShapeError);
    EXPECT_THROW(nk::linear_forward(Tensor({1, 2}), Tensor({2, 2}), Tensor({3})), ShapeError);
}

TEST(Linear, HandDerivedMseGradient) {
    // x = [[1, 2], [0, 1]], W = [[1, 0], [1, 1]], b = [0, 1], target = 0.
    // h = [[1, 4], [0, 2]]; L = mean(h^2) = 21/4; dL/dh = h / 2.
    // dL/dW = (dL/dh)^T x = [[0.5, 1], [2, 5]]; dL/db = [0.5, 3].
    const Tensor x = Tensor::matrix(2, 2, {1, 2, 0, 1});
    Param w = make_param(Tensor::matrix(2, 2, {1, 0, 1, 1}));
    Param b = make_param(Tensor({2}, {0, 1}));
    const Tensor h = nk::linear_forward(x, w.value, b.value);
    const Tensor target({2, 2});
    EXPECT_DOUBLE_EQ(nk::mse_loss(h, target), 21.0 / 4.0);
    nk::linear_backward(x, nk::mse_grad(h, target), w, b);
    EXPECT_TRUE(w.grad.bitwise_equal(Tensor::matrix(2, 2, {0.5f, 1.0f, 2.0f, 5.0f})));
    EXPECT_TRUE(b.grad.bitwise_equal(Tensor({2}, {0.5f, 3.0f})));
}

TEST(Linear, FrozenParamsGetNoGradient) {
    Rng rng(2);
    const Tensor x = random_tensor({4, 3}, rng);
    Param w = make_param(random_tensor({2, 3}, rng), false);
    Param b = make_param(random_tensor({2}, rng), false);
    const Tensor gx = nk::linear_backward(x, random_tensor({4, 2}, rng), w, b);
    EXPECT_TRUE(emolora::testing::all_zero(w.grad));
    EXPECT_TRUE(emolora::testing::all_zero(b.grad));
    EXPECT_FALSE(emolora::testing::all_zero(gx));
}

TEST(Conv1d, KernelOneIdentity) {
    Rng rng(4);
    const Tensor x = random_tensor({5, 3}, rng);
    Tensor k({3, 3, 1});
    for (std::size_t i = 0; i < 3; ++i) k[i * 3 + i] = 1.0f;
    EXPECT_TRUE(nk::conv1d_forward(x, k, Tensor({3})).bitwise_equal(x));
}

TEST(Conv1d, HandSlidingWindow) {
    const Tensor x({3, 1}, {1, 2, 3});
    const Tensor k({1, 1, 3}, {1, 1, 1});
    EXPECT_TRUE(nk::conv1d_forward(x, k, Tensor({1})).bitwise_equal(Tensor({3, 1}, {3, 6, 5})));
}

TEST(Conv1d, AsymmetricKernelIsCrossCorrelation) {
    // y[t] = x[t-1]*k0 + x[t]*k1 + x[t+1]*k2
    const Tensor x({3, 1}, {1, 2, 3});
    const Tensor k({1, 1, 3}, {1, 10, 100});
    EXPECT_TRUE(nk::conv1d_forward(x, k, Tensor({1})).bitwise_equal(Tensor({3, 1}, {210, 321, 32})));
}

TEST(Conv1d, ZeroKernelZeroOutput) {
    Rng rng(5);
    EXPECT_TRUE(emolora::testing::all_zero(nk::conv1d_forward(random_tensor({6, 2}, rng), Tensor({3, 2, 3}), Tensor({3}))));
}

TEST(Conv1d, EvenKernelIsConfigError) {
    EXPECT_THROW(nk::conv1d_forward(Tensor({3, 1}), Tensor({1, 1, 2}), Tensor({1})), ConfigError);
}

TEST(Conv1d, Im2colColumnLayoutMatchesKernelFlattening) {
    const Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Tensor cols = nk::im2col(x, 3);
    // row 0: channel 0 -> [pad, x00, x10], channel 1 -> [pad, x01, x11]
    EXPECT_TRUE(cols.bitwise_equal(Tensor::matrix(2, 6, {0, 1, 3, 0, 2, 4, 1, 3, 0, 2, 4, 0})));
}

TEST(Conv1d, Col2imIsAdjointOfIm2col) {
    Rng rng(6);
    const Tensor x = random_tensor({7, 3}, rng);
    const Tensor y = random_tensor({7, 9}, rng);
    const Tensor ux = nk::im2col(x, 3);
    const Tensor aty = nk::col2im(y, 3, 3);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < ux.size(); ++i) lhs += static_cast<double>(ux[i]) * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * aty[i];
    EXPECT_NEAR(lhs, rhs, 1e-5);
}

TEST(Mse, Examples) {
    Rng rng(7);
    const Tensor a = random_tensor({3, 4}, rng);
    EXPECT_EQ(nk::mse_loss(a, a), 0.0);
    EXPECT_EQ(nk::mse_loss(Tensor({1}, {0}), Tensor({1}, {2})), 4.0);
    const Tensor b = random_tensor({3, 4}, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    EXPECT_DOUBLE_EQ(nk::mse_loss(a, b), s / 12.0);
    EXPECT_THROW(nk::mse_loss(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(FiniteDiff, AnalyticExamples) {
    Param p(Tensor({2}, {1, 2}));
    const auto sq = [&] { return static_cast<double>(p.value[0]) * p.value[0] + static_cast<double>(p.value[1]) * p.value[1]; };
    const Tensor g = nk::finite_diff_grad(sq, p);
    EXPECT_NEAR(g[0], 2.0, 1e-6);
    EXPECT_NEAR(g[1], 4.0, 1e-6);

    const Tensor zero = nk::finite_diff_grad([] { return 3.0; }, p);
    EXPECT_TRUE(emolora::testing::all_zero(zero));

    Param c(Tensor({1}, {1}));
    const Tensor g3 = nk::finite_diff_grad([&] { return std::pow(static_cast<double>(c.value[0]), 3); }, c);
    EXPECT_NEAR(g3[0], 3.0, 1e-4);
}

TEST(FiniteDiff, RestoresParamAndRejectsNonFinite) {
    Param p(Tensor({3}, {0.1f, -0.7f, 2.5f}));
    const Tensor before = p.value;
    nk::finite_diff_grad([&] { return static_cast<double>(p.value[1]); }, p);
    EXPECT_TRUE(p.value.bitwise_equal(before));
    EXPECT_THROW(nk::finite_diff_grad([] { return std::numeric_limits<double>::infinity(); }, p), NumericError);
    EXPECT_THROW(nk::finite_diff_grad([] { return 0.0; }, p, 0.0), ConfigError);
}

TEST(Elementwise, BackwardMatchesFiniteDifferences) {
    Rng rng(8);
    for (int seed = 0; seed < 20; ++seed) {
        Param x(random_tensor({3, 5}, rng, -2.0, 2.0));
        const Tensor w = random_tensor({3, 5}, rng);
        auto weighted = [&](const Tensor& y) {
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * w[i];
            return s;
        };
        const Tensor th = nk::tanh(x.value);
        EXPECT_LT(relative_error(nk::tanh_backward(th, w), nk::finite_diff_grad([&] { return weighted(nk::tanh(x.value)); }, x)), 1e-4);
        EXPECT_LT(relative_error(nk::softplus_backward(x.value, w),
                                 nk::finite_diff_grad([&] { return weighted(nk::softplus(x.value)); }, x)),
                  1e-4);
        // keep relu inputs away from the kink
        for (float& v : x.value.data()) {
            if (std::abs(v) < 0.01f) v = 0.5f;
        }
        EXPECT_LT(relative_error(nk::relu_backward(x.value, w), nk::finite_diff_grad([&] { return weighted(nk::relu(x.value)); }, x)), 1e-4);
    }
}

TEST(Elementwise, SoftplusIsStableForLargeInputs) {
    const Tensor y = nk::softplus(Tensor({3}, {-100.0f, 0.0f, 100.0f}));
    EXPECT_TRUE(all_finite(y));
    EXPECT_NEAR(y[1], std::log(2.0), 1e-7);
    EXPECT_NEAR(y[2], 100.0, 1e-4);
}

class KernelGradients : public ::testing::TestWithParam<int> {};

TEST_P(KernelGradients, LinearMatchesFiniteDifferences) {
    Rng rng(static_cast<std::uint64_t>(GetParam()));
    const Tensor x0 = random_tensor({4, 5}, rng);
    Param x(x0);
    Param w(random_tensor({3, 5}, rng));
    Param b(random_tensor({3}, rng));
    const Tensor target = random_tensor({4, 3}, rng);
    auto loss = [&] { return nk::mse_loss(nk::linear_forward(x.value, w.value, b.value), target); };
    const Tensor h = nk::linear_forward(x.value, w.value, b.value);
    const Tensor gx = nk::linear_backward(x.value, nk::mse_grad(h, target), w, b);
    EXPECT_LT(relative_error(w.grad, nk::finite_diff_grad(loss, w)), 1e-4);
    EXPECT_LT(relative_error(b.grad, nk::finite_diff_grad(loss, b)), 1e-4);
    EXPECT_LT(relative_error(gx, nk::finite_diff_grad(loss, x)), 1e-4);
}

TEST_P(KernelGradients, ConvMatchesFiniteDifferences) {
    Rng rng(1000 + static_cast<std::uint64_t>(GetParam()));
    Param x(random_tensor({6, 3}, rng));
    Param k(random_tensor({2, 3, 3}, rng));
    Param b(random_tensor({2}, rng));
    const Tensor target = random_tensor({6, 2}, rng);
    auto loss = [&] { return nk::mse_loss(nk::conv1d_forward(x.value, k.value, b.value), target); };
    const Tensor h = nk::conv1d_forward(x.value, k.value, b.value);
    const Tensor gx = nk::conv1d_backward(x.value, nk::mse_grad(h, target), k, b);
    EXPECT_LT(relative_error(k.grad, nk::finite_diff_grad(loss, k)), 1e-4);
    EXPECT_LT(relative_error(b.grad, nk::finite_diff_grad(loss, b)), 1e-4);
    EXPECT_LT(relative_error(gx, nk::finite_diff_grad(loss, x)), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, KernelGradients, ::testing::Range(0, 20));

TEST(Determinism, ForwardAndBackwardAreBitwiseRepeatable) {
    auto run = [] {
        Rng rng(77);
        const Tensor x = random_tensor({8, 4}, rng);
        Param k(random_tensor({3, 4, 3}, rng));
        Param b(random_tensor({3}, rng));
        const Tensor h = nk::conv1d_forward(x, k.value, b.value);
        const Tensor gx = nk::conv1d_backward(x, h, k, b);
        return std::make_tuple(h, gx, k.grad);
    };
    const auto [h1, g1, k1] = run();
    const auto [h2, g2, k2] = run();
    EXPECT_TRUE(h1.bitwise_equal(h2));
    EXPECT_TRUE(g1.bitwise_equal(g2));
    EXPECT_TRUE(k1.bitwise_equal(k2));
}
