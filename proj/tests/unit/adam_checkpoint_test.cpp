#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support/oracles.hpp"
#include "volsynth/tensor/adam.hpp"
#include "volsynth/tensor/checkpoint.hpp"

namespace vt = volsynth::tensor;
using vt::ParameterSet;
using vt::Shape;
using vt::Tensor;
using volsynth::testing::random_tensor;

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParameterSet<double> p;
    p.add("w", random_tensor({3}, 1));
    const auto before = p.at("w");
    vt::AdamState<double> st;
    vt::Gradients<double> g{{"w", Tensor<double>(Shape{3})}};
    vt::adam_step(p, g, st);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.at("w")[i], before[i]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParameterSet<double> p;
    p.add("w", Tensor<double>(Shape{2}, std::vector<double>{1.0, -1.0}));
    vt::AdamState<double> st(vt::AdamConfig{0.01, 0.9, 0.999, 1e-8});
    vt::Gradients<double> g{{"w", Tensor<double>(Shape{2}, std::vector<double>{0.3, -7.0})}};
    vt::adam_step(p, g, st);
    EXPECT_NEAR(p.at("w")[0], 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(p.at("w")[1], -1.0 + 0.01, 1e-9);
}

// Scalar recurrence written out by hand.
TEST(Adam, TenStepsMatchScalarRecurrence) {
    const double lr = 0.05, b1 = 0.5, b2 = 0.9, eps = 1e-8;
    ParameterSet<double> p;
    p.add("w", Tensor<double>::scalar(2.0));
    vt::AdamState<double> st(vt::AdamConfig{lr, b1, b2, eps});
    double w = 2.0, m = 0, v = 0;
    for (int t = 1; t <= 10; ++t) {
        const double grad = 2 * w - 1;  // d/dw (w^2 - w)
        vt::Gradients<double> g{{"w", Tensor<double>::scalar(2 * p.at("w")[0] - 1)}};
        vt::adam_step(p, g, st);
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        w -= lr * mh / (std::sqrt(vh) + eps);
        EXPECT_NEAR(p.at("w")[0], w, 1e-12) << "step " << t;
    }
}

TEST(Adam, PoisonedGradientNamesParameter) {
    ParameterSet<double> p;
    p.add("good", Tensor<double>(Shape{1}, 1.0));
    p.add("bad", Tensor<double>(Shape{1}, 1.0));
    vt::AdamState<double> st;
    vt::Gradients<double> g{{"good", Tensor<double>(Shape{1}, 1.0)},
                            {"bad", Tensor<double>(Shape{1}, std::nan(""))}};
    try {
        vt::adam_step(p, g, st);
        FAIL();
    } catch (const volsynth::PoisonedGradientError& e) {
        EXPECT_EQ(e.parameter(), "bad");
    }
    // Nothing was updated.
    EXPECT_EQ(p.at("good")[0], 1.0);
}

TEST(Adam, MissingGradientRejected) {
    ParameterSet<double> p;
    p.add("w", Tensor<double>(Shape{1}, 1.0));
    vt::AdamState<double> st;
    EXPECT_THROW(vt::adam_step(p, vt::Gradients<double>{}, st), volsynth::ContractError);
}

class CheckpointTest : public ::testing::Test {
protected:
    std::filesystem::path dir = std::filesystem::temp_directory_path() / "volsynth_ckpt_test";
    void SetUp() override { std::filesystem::create_directories(dir); }
    void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
    ParameterSet<float> p;
    p.add("conv.k", random_tensor({2, 1, 3, 3, 3}, 1).cast<float>());
    p.add("bn.running_var", Tensor<float>(Shape{2}, 1.0f));
    const auto path = dir / "m.ckpt";
    vt::write_checkpoint(path, p, {{"kind", "test"}});
    auto ck = vt::read_checkpoint(path);
    EXPECT_EQ(ck.precision, vt::Precision::f32);
    EXPECT_EQ(ck.meta.at("kind"), "test");
    ASSERT_EQ(ck.params.size(), 2u);
    auto back = ck.params.cast<float>();
    for (const auto& [name, t] : p) {
        ASSERT_EQ(back.at(name).shape(), t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back.at(name)[i], t[i]);
    }
}

TEST_F(CheckpointTest, CorruptFilesRejected) {
    ParameterSet<double> p;
    p.add("w", random_tensor({8}, 2));
    const auto path = dir / "m.ckpt";
    vt::write_checkpoint(path, p);
    const auto full = std::filesystem::file_size(path);

    std::filesystem::resize_file(path, full - 3);
    EXPECT_THROW(vt::read_checkpoint(path), volsynth::TruncatedError);

    vt::write_checkpoint(path, p);
    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out << "xx";
    }
    EXPECT_THROW(vt::read_checkpoint(path), volsynth::LengthMismatchError);

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "{\"format\":\"other\"}\n";
    }
    EXPECT_THROW(vt::read_checkpoint(path), volsynth::BadMagicError);
}
