#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "volsynth/tensor/kernels.hpp"
#include "volsynth/tensor/layers.hpp"

namespace vt = volsynth::tensor;
using vt::Shape;
using vt::Tensor;
using volsynth::testing::direct_conv3d;
using volsynth::testing::direct_matmul;
using volsynth::testing::dot;
using volsynth::testing::max_abs_diff;
using volsynth::testing::random_tensor;

TEST(Conv3d, IdentityKernelOnOnes) {
    Tensor<double> x(Shape{1, 1, 3, 3, 3}, 1.0);
    Tensor<double> k(Shape{1, 1, 1, 1, 1}, 1.0);
    Tensor<double> b(Shape{1}, 0.0);
    auto y = vt::conv3d(x, k, b, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3, 3}));
    for (double v : y.data()) EXPECT_EQ(v, 1.0);
}

TEST(Conv3d, StrideTwoHalvesExtent) {
    auto x = random_tensor(Shape{1, 1, 8, 8, 8}, 1);
    auto k = random_tensor(Shape{2, 1, 4, 4, 4}, 2);
    auto y = vt::conv3d(x, k, Tensor<double>(Shape{2}), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 4, 4, 4}));
}

TEST(Conv3d, MatchesDirectLoopOracle) {
    auto x = random_tensor(Shape{2, 3, 5, 6, 7}, 11);
    auto k = random_tensor(Shape{4, 3, 3, 3, 3}, 12);
    auto b = random_tensor(Shape{4}, 13);
    auto y = vt::conv3d(x, k, b, 1, 1);
    auto ref = direct_conv3d(x, k, b, 1, 1);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE(max_abs_diff(y, ref), 1e-10);
}

TEST(Conv3d, MatchesOracleStrided) {
    auto x = random_tensor(Shape{2, 2, 9, 8, 7}, 21);
    auto k = random_tensor(Shape{3, 2, 4, 4, 4}, 22);
    auto b = random_tensor(Shape{3}, 23);
    auto y = vt::conv3d(x, k, b, 2, 1);
    auto ref = direct_conv3d(x, k, b, 2, 1);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LE(max_abs_diff(y, ref), 1e-10);
}

TEST(Conv3d, ChannelMismatchNamesBothShapes) {
    Tensor<double> x(Shape{1, 2, 4, 4, 4});
    Tensor<double> k(Shape{1, 3, 3, 3, 3});
    try {
        vt::conv3d(x, k, Tensor<double>(Shape{1}), 1, 1);
        FAIL() << "expected DimensionError";
    } catch (const volsynth::DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[1,2,4,4,4]"), std::string::npos);
        EXPECT_NE(msg.find("[1,3,3,3,3]"), std::string::npos);
    }
}

TEST(Conv3d, KernelLargerThanPaddedInputRejected) {
    Tensor<double> x(Shape{1, 1, 2, 2, 2});
    Tensor<double> k(Shape{1, 1, 5, 5, 5});
    EXPECT_THROW(vt::conv3d(x, k, Tensor<double>(Shape{1}), 1, 1), volsynth::DimensionError);
}

TEST(Conv3dTranspose, ScalarKernelScalesInput) {
    auto x = random_tensor(Shape{2, 1, 3, 4, 5}, 5);
    Tensor<double> k(Shape{1, 1, 1, 1, 1}, 2.5);
    auto y = vt::conv3d_transpose(x, k, Tensor<double>(Shape{1}), 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 2.5 * x[i]);
}

TEST(Conv3dTranspose, StrideTwoDoublesExtent) {
    auto x = random_tensor(Shape{1, 2, 8, 8, 8}, 6);
    auto k = random_tensor(Shape{2, 3, 4, 4, 4}, 7);
    auto y = vt::conv3d_transpose(x, k, Tensor<double>(Shape{3}), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 16, 16, 16}));
}

struct AdjointCase {
    Shape x;
    Shape k;
    vt::ConvGeometry geom;
};

// <conv3d(x,K), y> == <x, conv3d_transpose(y,K)> for every geometry the models use.
TEST(Conv3dTranspose, AdjointIdentityAcrossGeometries) {
    const std::vector<AdjointCase> cases = {
        {{2, 2, 16, 16, 16}, {3, 2, 4, 4, 4}, vt::ConvGeometry::uniform(2, 1)},
        {{2, 3, 8, 8, 8}, {4, 3, 4, 4, 4}, vt::ConvGeometry::uniform(2, 1)},
        {{2, 2, 1, 1, 1}, {3, 2, 3, 3, 3}, vt::ConvGeometry::uniform(1, 1)},
        {{1, 2, 7, 9, 5}, {2, 2, 4, 4, 4}, vt::ConvGeometry::uniform(2, 1)},
        {{1, 1, 6, 2, 1}, {2, 1, 4, 4, 3}, vt::ConvGeometry{{2, 2, 1}, {1, 1, 1}}},
        {{2, 3, 5, 6, 7}, {4, 3, 3, 3, 3}, vt::ConvGeometry::uniform(1, 1)},
    };
    std::uint64_t seed = 100;
    for (const auto& c : cases) {
        auto x = random_tensor(c.x, seed++);
        auto k = random_tensor(c.k, seed++);
        auto cx = vt::conv3d_forward(x, k, c.geom);
        auto y = random_tensor(cx.shape(), seed++);
        auto ty = vt::conv3d_transpose_forward(y, k, c.geom, vt::spatial_of(x.shape()));
        ASSERT_EQ(ty.shape(), x.shape());
        const double lhs = dot(cx, y);
        const double rhs = dot(x, ty);
        EXPECT_LE(std::abs(lhs - rhs), 1e-9 * std::max(std::abs(lhs), 1.0)) << vt::to_string(c.x);
    }
}

TEST(Conv3dKernelGrad, IsAdjointInKernel) {
    const auto geom = vt::ConvGeometry::uniform(2, 1);
    auto x = random_tensor(Shape{2, 2, 8, 6, 8}, 41);
    auto k = random_tensor(Shape{3, 2, 4, 4, 4}, 42);
    auto cx = vt::conv3d_forward(x, k, geom);
    auto g = random_tensor(cx.shape(), 43);
    auto kg = vt::conv3d_kernel_grad(x, g, geom, vt::spatial_of(k.shape()));
    EXPECT_NEAR(dot(cx, g), dot(k, kg), 1e-9 * std::abs(dot(cx, g)));
}

TEST(Dense, IdentityWeight) {
    auto x = random_tensor(Shape{3, 4}, 1);
    Tensor<double> w(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
    auto y = vt::dense(x, w, Tensor<double>(Shape{4}));
    EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Dense, HandArithmetic) {
    Tensor<double> x(Shape{1, 2}, std::vector<double>{1, 2});
    Tensor<double> w(Shape{2, 2}, std::vector<double>{3, 0, 0, 3});
    Tensor<double> b(Shape{2}, std::vector<double>{1, 1});
    auto y = vt::dense(x, w, b);
    EXPECT_DOUBLE_EQ(y[0], 4.0);
    EXPECT_DOUBLE_EQ(y[1], 7.0);
}

TEST(Dense, MatchesLoopOracle) {
    auto x = random_tensor(Shape{5, 7}, 3);
    auto w = random_tensor(Shape{7, 6}, 4);
    auto b = random_tensor(Shape{6}, 5);
    auto y = vt::dense(x, w, b);
    auto ref = direct_matmul(x, w);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) ref[i * 6 + j] += b[j];
    EXPECT_LE(max_abs_diff(y, ref), 1e-12);
}

TEST(Dense, MismatchNamesShapes) {
    try {
        vt::dense(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{4, 2}), Tensor<double>(Shape{2}));
        FAIL();
    } catch (const volsynth::DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
    }
}

TEST(Activation, Definitions) {
    Tensor<double> x(Shape{2}, std::vector<double>{-2, 3});
    auto r = vt::activation(x, vt::Activation::relu());
    EXPECT_EQ(r[0], 0.0);
    EXPECT_EQ(r[1], 3.0);
    Tensor<double> zero(Shape{1}, 0.0);
    EXPECT_EQ(vt::activation(zero, vt::Activation::sigmoid())[0], 0.5);
    EXPECT_EQ(vt::activation(zero, vt::Activation::tanh())[0], 0.0);
    Tensor<double> m1(Shape{1}, -1.0);
    EXPECT_DOUBLE_EQ(vt::activation(m1, vt::Activation::leaky_relu(0.2))[0], -0.2);
}

TEST(Activation, SigmoidStaysInsideOpenInterval) {
    Tensor<double> x(Shape{4}, std::vector<double>{-30, -5, 5, 30});
    auto s = vt::activation(x, vt::Activation::sigmoid());
    for (double v : s.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(ConcatChannels, OrderingAndEmpty) {
    Tensor<double> a(Shape{1, 1, 2, 2, 2}, 1.0);
    Tensor<double> b(Shape{1, 1, 2, 2, 2}, 2.0);
    auto c = vt::concat_channels(a, b);
    ASSERT_EQ(c.shape(), (Shape{1, 2, 2, 2, 2}));
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(c[i], 1.0);
        EXPECT_EQ(c[8 + i], 2.0);
    }
    Tensor<double> empty(Shape{1, 0, 2, 2, 2});
    auto same = vt::concat_channels(a, empty);
    EXPECT_EQ(same.shape(), a.shape());
    EXPECT_EQ(max_abs_diff(same, a), 0.0);
}

TEST(ConcatChannels, SpatialMismatch) {
    EXPECT_THROW(vt::concat_channels(Tensor<double>(Shape{1, 1, 2, 2, 2}), Tensor<double>(Shape{1, 1, 2, 2, 3})),
                 volsynth::DimensionError);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
    auto x = random_tensor(Shape{4, 3, 3, 3, 3}, 9, -10.0, 10.0);
    vt::BatchNormState<double> state(3);
    auto y = vt::batchnorm3d(x, Tensor<double>(Shape{3}, 1.0), Tensor<double>(Shape{3}, 0.0), state,
                             vt::Mode::training);
    const std::size_t inner = 27;
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, sq = 0;
        std::size_t n = 0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < inner; ++i, ++n) mean += y[(b * 3 + c) * inner + i];
        mean /= static_cast<double>(n);
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < inner; ++i) sq += std::pow(y[(b * 3 + c) * inner + i] - mean, 2);
        EXPECT_LE(std::abs(mean), 1e-7);
        EXPECT_NEAR(sq / static_cast<double>(n), 1.0, 1e-6);
    }
}

TEST(BatchNorm, ConstantChannelGivesZeros) {
    Tensor<double> x(Shape{2, 1, 2, 2, 2}, 3.5);
    vt::BatchNormState<double> state(1);
    auto y = vt::batchnorm3d(x, Tensor<double>(Shape{1}, 1.0), Tensor<double>(Shape{1}, 0.0), state,
                             vt::Mode::training);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, RunningStatsMatchEmaOracle) {
    vt::BatchNormState<double> state(2);
    const double momentum = 0.9;
    std::vector<double> rm{0, 0}, rv{1, 1};
    for (int step = 0; step < 2; ++step) {
        auto x = random_tensor(Shape{3, 2, 2, 2, 2}, 70 + step, -2.0, 3.0);
        vt::batchnorm3d(x, Tensor<double>(Shape{2}, 1.0), Tensor<double>(Shape{2}, 0.0), state, vt::Mode::training);
        for (std::size_t c = 0; c < 2; ++c) {
            double mean = 0, var = 0;
            for (std::size_t b = 0; b < 3; ++b)
                for (std::size_t i = 0; i < 8; ++i) mean += x[(b * 2 + c) * 8 + i];
            mean /= 24.0;
            for (std::size_t b = 0; b < 3; ++b)
                for (std::size_t i = 0; i < 8; ++i) var += std::pow(x[(b * 2 + c) * 8 + i] - mean, 2);
            var /= 24.0;
            rm[c] = momentum * rm[c] + (1 - momentum) * mean;
            rv[c] = momentum * rv[c] + (1 - momentum) * var;
        }
    }
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(state.running_mean[c], rm[c], 1e-12);
        EXPECT_NEAR(state.running_var[c], rv[c], 1e-12);
    }
}

TEST(BatchNorm, InferenceIsFixedAffineAndPure) {
    vt::BatchNormState<double> state(2);
    state.running_mean = Tensor<double>(Shape{2}, std::vector<double>{0.5, -1.0});
    state.running_var = Tensor<double>(Shape{2}, std::vector<double>{2.0, 0.25});
    const auto before_mean = state.running_mean;
    auto x = random_tensor(Shape{1, 2, 2, 2, 2}, 3);
    Tensor<double> gamma(Shape{2}, std::vector<double>{1.5, 0.5});
    Tensor<double> beta(Shape{2}, std::vector<double>{0.1, 0.2});
    auto y1 = vt::batchnorm3d(x, gamma, beta, state, vt::Mode::inference);
    auto y2 = vt::batchnorm3d(x, gamma, beta, state, vt::Mode::inference);
    EXPECT_EQ(max_abs_diff(y1, y2), 0.0);
    EXPECT_EQ(max_abs_diff(state.running_mean, before_mean), 0.0);
    // Inference on a single element is fine; training is not.
    EXPECT_NO_THROW(vt::batchnorm3d(Tensor<double>(Shape{1, 2, 1, 1, 1}), gamma, beta, state, vt::Mode::inference));
}

TEST(BatchNorm, DegenerateTrainingBatchRejected) {
    vt::BatchNormState<double> state(1);
    EXPECT_THROW(vt::batchnorm3d(Tensor<double>(Shape{1, 1, 1, 1, 1}), Tensor<double>(Shape{1}, 1.0),
                                 Tensor<double>(Shape{1}), state, vt::Mode::training),
                 volsynth::DegenerateBatchError);
}

TEST(Tensor, NonFiniteRejectedAtOpBoundary) {
    vt::Graph<double> g;
    auto x = g.constant(Tensor<double>(Shape{1}, -1.0));
    EXPECT_THROW(vt::ops::log(x), volsynth::NonFiniteError);
    EXPECT_THROW(g.constant(Tensor<double>(Shape{1}, std::nan(""))), volsynth::NonFiniteError);
}
