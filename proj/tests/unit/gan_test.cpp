#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "support/oracles.hpp"
#include "volsynth/gan/icwgan.hpp"
#include "volsynth/tensor/grad_check.hpp"

namespace vg = volsynth::gan;
namespace vd = volsynth::data;
namespace vt = volsynth::tensor;
namespace ops = vt::ops;
using vt::Graph;
using vt::Shape;
using vt::Tensor;
using vt::Var;
using volsynth::testing::random_tensor;

namespace {

vg::GANConfig small_config() {
    vg::GANConfig c;
    c.z_dim = 4;
    c.channels = {2, 3, 4, 5};
    c.batch_size = 4;
    c.critic_iters = 2;
    c.epochs = 2;
    c.seed = 3;
    return c;
}

Tensor<double> one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
    return vd::one_hot<double>(labels, classes);
}

// Critic that ignores y and returns scale * sum over each sample's voxels.
vg::Critic<double> sum_critic(double scale) {
    return [scale](Var<double> x, Var<double>) { return ops::scale(ops::sample_sum(x), scale); };
}

}  // namespace

TEST(ProjectLabel, ZeroWeightsGiveZeroVolume) {
    vt::ParameterSet<double> params;
    params.add("lab.w", Tensor<double>(Shape{3, 24}));
    params.add("lab.b", Tensor<double>(Shape{24}));
    Graph<double> g(vt::Mode::inference);
    vt::BoundParams<double> p(g, params);
    auto v = volsynth::models::project_label(p, "lab", g.constant(one_hot({0, 2}, 3)), vt::Spatial{2, 3, 4});
    EXPECT_EQ(v.shape(), (Shape{2, 1, 2, 3, 4}));
    for (double x : v.value().data()) EXPECT_EQ(x, 0.0);
    EXPECT_THROW(volsynth::models::project_label(p, "lab", g.constant(one_hot({0}, 3)), vt::Spatial{2, 2, 2}),
                 volsynth::DimensionError);
}

TEST(ProjectLabel, ShapesPerLayerAndRange) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 3);
    auto gen = vg::init_generator<double>(arch, 1);
    auto disc = vg::init_discriminator<double>(arch, 2);
    Graph<double> g(vt::Mode::inference);
    vt::BoundParams<double> pg(g, gen), pd(g, disc);
    auto y = g.constant(one_hot({1, 2}, 3));
    for (std::size_t l = 0; l < 4; ++l) {
        const auto src = 3 - l;
        auto vgen = volsynth::models::project_label(pg, "gen.label" + std::to_string(l), y, arch.plan.spatial[src + 1]);
        EXPECT_EQ(vgen.shape(), volsynth::models::batch_shape(2, 1, arch.plan.spatial[src + 1]));
        auto vdis = volsynth::models::project_label(pd, "disc.label" + std::to_string(l), y, arch.plan.spatial[l]);
        EXPECT_EQ(vdis.shape(), volsynth::models::batch_shape(2, 1, arch.plan.spatial[l]));
        for (double x : vdis.value().data()) {
            EXPECT_GT(x, -1.0);
            EXPECT_LT(x, 1.0);
        }
    }
}

TEST(ProjectLabel, GradientMatchesFiniteDifferences) {
    vt::ParameterSet<double> params;
    params.add("lab.w", random_tensor({3, 8}, 1));
    params.add("lab.b", random_tensor({8}, 2));
    const auto y = one_hot({0, 2, 1}, 3);
    const auto w = random_tensor({3, 1, 2, 2, 2}, 3);
    auto report = vt::grad_check(
        [&](Graph<double>& g, const vt::BoundParams<double>& p) {
            auto v = volsynth::models::project_label(p, "lab", g.constant(y), vt::Spatial{2, 2, 2});
            return ops::sum(ops::mul(v, g.constant(w)));
        },
        params, 1e-4);
    EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Generator, ShapeRangeAndDeterminism) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto params = vg::init_generator<double>(arch, 4);
    auto bn = vg::init_generator_bn<double>(arch);
    auto run = [&] {
        Graph<double> g(vt::Mode::inference);
        vt::BoundParams<double> p(g, params);
        return vg::generator_forward(arch, p, bn, g.constant(random_tensor({3, 4}, 5)), g.constant(one_hot({0, 1, 1}, 2)))
            .value();
    };
    auto a = run();
    EXPECT_EQ(a.shape(), (Shape{3, 1, 8, 8, 8}));
    EXPECT_EQ(a.storage(), run().storage());
    for (double v : a.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Generator, OddVolumeDims) {
    vg::Architecture arch(small_config(), vd::Dims{7, 5, 3}, 2);
    auto params = vg::init_generator<double>(arch, 4);
    auto bn = vg::init_generator_bn<double>(arch);
    Graph<double> g(vt::Mode::training);
    vt::BoundParams<double> p(g, params);
    auto x = vg::generator_forward(arch, p, bn, g.constant(random_tensor({2, 4}, 5)), g.constant(one_hot({0, 1}, 2)));
    EXPECT_EQ(x.shape(), (Shape{2, 1, 7, 5, 3}));
}

TEST(Generator, DimensionMismatch) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto params = vg::init_generator<double>(arch, 4);
    auto bn = vg::init_generator_bn<double>(arch);
    Graph<double> g(vt::Mode::inference);
    vt::BoundParams<double> p(g, params);
    EXPECT_THROW(vg::generator_forward(arch, p, bn, g.constant(random_tensor({2, 3}, 5)), g.constant(one_hot({0, 1}, 2))),
                 volsynth::DimensionError);
}

TEST(Discriminator, ShapeAndZeroNetwork) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto params = vg::init_discriminator<double>(arch, 4);
    {
        Graph<double> g(vt::Mode::inference);
        vt::BoundParams<double> p(g, params);
        auto d = vg::discriminator_forward(arch, p, g.constant(random_tensor({3, 1, 8, 8, 8}, 1, 0, 1)),
                                           g.constant(one_hot({0, 1, 0}, 2)));
        EXPECT_EQ(d.shape(), (Shape{3, 1}));
    }
    volsynth::models::zero_parameters(params);
    Graph<double> g(vt::Mode::inference);
    vt::BoundParams<double> p(g, params);
    auto d = vg::discriminator_forward(arch, p, g.constant(random_tensor({3, 1, 8, 8, 8}, 1, 0, 1)),
                                       g.constant(one_hot({0, 1, 0}, 2)));
    for (double v : d.value().data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(vg::discriminator_forward(arch, p, g.constant(random_tensor({3, 1, 8, 8, 7}, 1)),
                                           g.constant(one_hot({0, 1, 0}, 2))),
                 volsynth::DimensionError);
}

TEST(Discriminator, FullGraphMatchesFiniteDifferences) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto params = vg::init_discriminator<double>(arch, 6);
    const auto x = random_tensor({2, 1, 8, 8, 8}, 7, 0, 1);
    const auto y = one_hot({1, 0}, 2);
    auto report = vt::grad_check(
        [&](Graph<double>& g, const vt::BoundParams<double>& p) {
            return ops::sum(vg::discriminator_forward(arch, p, g.constant(x), g.constant(y)));
        },
        params, 1e-4);
    EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Generator, FullGraphMatchesFiniteDifferences) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto params = vg::init_generator<double>(arch, 8);
    const auto z = random_tensor({3, 4}, 9);
    const auto y = one_hot({1, 0, 1}, 2);
    const auto w = random_tensor({3, 1, 8, 8, 8}, 10);
    auto report = vt::grad_check(
        [&](Graph<double>& g, const vt::BoundParams<double>& p) {
            auto bn = vg::init_generator_bn<double>(arch);
            auto x = vg::generator_forward(arch, p, bn, g.constant(z), g.constant(y));
            return ops::sum(ops::mul(x, g.constant(w)));
        },
        params, 1e-4);
    EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Interpolate, EndpointsMidpointAndEnvelope) {
    auto real = random_tensor({3, 1, 2, 2, 2}, 1, 0, 1);
    auto fake = random_tensor({3, 1, 2, 2, 2}, 2, 0, 1);
    const std::vector<double> eps{1.0, 0.0, 0.5};
    auto x = vg::interpolate<double>(real, fake, eps);
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(x[i], real[i]);
        EXPECT_EQ(x[8 + i], fake[8 + i]);
        EXPECT_EQ(x[16 + i], 0.5 * real[16 + i] + 0.5 * fake[16 + i]);
    }
    const std::vector<double> any{0.3, 0.9, 0.1};
    auto y = vg::interpolate<double>(real, fake, any);
    for (std::size_t i = 0; i < y.size(); ++i) {
        EXPECT_GE(y[i], std::min(real[i], fake[i]));
        EXPECT_LE(y[i], std::max(real[i], fake[i]));
    }
    const std::vector<double> bad{0.3, 1.2, 0.1};
    EXPECT_THROW(vg::interpolate<double>(real, fake, bad), volsynth::ContractError);
}

TEST(GradientPenalty, UnitNormLinearCriticIsZero) {
    const auto w = random_tensor({1, 1, 4, 4, 4}, 3);
    double norm = 0;
    for (double v : w.data()) norm += v * v;
    norm = std::sqrt(norm);
    Tensor<double> unit(Shape{2, 1, 4, 4, 4});
    for (std::size_t i = 0; i < w.size(); ++i) unit[i] = unit[w.size() + i] = w[i] / norm;
    Graph<double> g(vt::Mode::training);
    auto wv = g.constant(unit);
    vg::Critic<double> critic = [&](Var<double> x, Var<double>) { return ops::sample_sum(ops::mul(x, wv)); };
    auto x_hat = g.variable(random_tensor({2, 1, 4, 4, 4}, 4));
    auto penalty = vg::gradient_penalty(critic, x_hat, g.constant(one_hot({0, 0}, 1)));
    EXPECT_LE(std::abs(penalty.value().item()), 1e-10);
}

TEST(GradientPenalty, ConstantGradientCritic) {
    Graph<double> g(vt::Mode::training);
    const double V = 4 * 3 * 2;
    auto x_hat = g.variable(random_tensor({3, 1, 4, 3, 2}, 4));
    auto penalty = vg::gradient_penalty(sum_critic(2.0), x_hat, g.constant(one_hot({0, 0, 0}, 1)));
    const double expected = (2 * std::sqrt(V) - 1) * (2 * std::sqrt(V) - 1);
    EXPECT_NEAR(penalty.value().item(), expected, 1e-12 * expected);
}

TEST(GradientPenalty, RequiresTrainingGraphAndVariable) {
    {
        Graph<double> g(vt::Mode::inference);
        auto x = g.variable(random_tensor({2, 1, 2, 2, 2}, 1));
        EXPECT_THROW(vg::gradient_penalty(sum_critic(1.0), x, g.constant(one_hot({0, 0}, 1))), volsynth::ContractError);
    }
    Graph<double> g(vt::Mode::training);
    auto x = g.constant(random_tensor({2, 1, 2, 2, 2}, 1));
    EXPECT_THROW(vg::gradient_penalty(sum_critic(1.0), x, g.constant(one_hot({0, 0}, 1))), volsynth::ContractError);
}

TEST(GradientPenalty, CriticInputGradientMatchesFiniteDifferences) {
    vg::Architecture arch(small_config(), vd::Dims{4, 4, 4}, 2);
    auto disc = vg::init_discriminator<double>(arch, 12);
    vt::ParameterSet<double> xs;
    xs.add("x", random_tensor({2, 1, 4, 4, 4}, 13, 0, 1));
    const auto y = one_hot({0, 1}, 2);
    auto report = vt::grad_check(
        [&](Graph<double>& g, const vt::BoundParams<double>& b) {
            vt::BoundParams<double> p(g, disc);
            return ops::sum(vg::discriminator_forward(arch, p, b["x"], g.constant(y)));
        },
        xs, 1e-4);
    EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(GradientPenalty, DifferentiableInCriticParameters) {
    vg::Architecture arch(small_config(), vd::Dims{4, 4, 4}, 2);
    auto disc = vg::init_discriminator<double>(arch, 12);
    const auto x = random_tensor({2, 1, 4, 4, 4}, 13, 0, 1);
    const auto y = one_hot({0, 1}, 2);
    vt::GradCheckOptions opts;
    opts.max_elements_per_param = 16;
    auto report = vt::grad_check(
        [&](Graph<double>& g, const vt::BoundParams<double>& p) {
            vg::Critic<double> critic = [&](Var<double> xv, Var<double> yv) {
                return vg::discriminator_forward(arch, p, xv, yv);
            };
            return vg::gradient_penalty(critic, g.variable(x), g.constant(y));
        },
        disc, 1e-4, opts);
    EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(CriticLoss, ZeroCriticGivesLambda) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto disc = vg::init_discriminator<double>(arch, 1);
    volsynth::models::zero_parameters(disc);
    Graph<double> g(vt::Mode::training);
    vt::BoundParams<double> p(g, disc);
    vg::Critic<double> critic = [&](Var<double> x, Var<double> y) { return vg::discriminator_forward(arch, p, x, y); };
    const std::vector<double> eps{0.2, 0.7};
    auto real = random_tensor({2, 1, 8, 8, 8}, 2, 0, 1), fake = random_tensor({2, 1, 8, 8, 8}, 3, 0, 1);
    auto loss = vg::critic_loss<double>(critic, real, fake, one_hot({0, 1}, 2), eps, 10.0, g);
    EXPECT_EQ(loss.total.value().item(), 10.0);
    auto gen = vg::generator_loss(critic, g.constant(fake), g.constant(one_hot({0, 1}, 2)));
    EXPECT_EQ(gen.value().item(), 0.0);
}

TEST(CriticLoss, ConstantCriticWithoutPenaltyIsZero) {
    Graph<double> g(vt::Mode::training);
    vg::Critic<double> critic = [](Var<double> x, Var<double>) {
        return ops::add_scalar(ops::scale(ops::sample_sum(x), 0.0), 3.5);
    };
    const std::vector<double> eps{0.5, 0.5};
    auto loss = vg::critic_loss<double>(critic, random_tensor({2, 1, 2, 2, 2}, 1, 0, 1),
                                        random_tensor({2, 1, 2, 2, 2}, 2, 0, 1), one_hot({0, 0}, 1), eps, 0.0, g);
    EXPECT_EQ(loss.total.value().item(), 0.0);
}

TEST(CriticLoss, MatchesTermByTermAssembly) {
    vg::Architecture arch(small_config(), vd::Dims{8, 8, 8}, 2);
    auto disc = vg::init_discriminator<double>(arch, 21);
    const auto real = random_tensor({3, 1, 8, 8, 8}, 22, 0, 1);
    const auto fake = random_tensor({3, 1, 8, 8, 8}, 23, 0, 1);
    const auto y = one_hot({1, 0, 1}, 2);
    const std::vector<double> eps{0.1, 0.6, 0.9};
    const double lambda = 7.5;

    Graph<double> g(vt::Mode::training);
    vt::BoundParams<double> p(g, disc);
    vg::Critic<double> critic = [&](Var<double> x, Var<double> yy) { return vg::discriminator_forward(arch, p, x, yy); };
    auto loss = vg::critic_loss<double>(critic, real, fake, y, eps, lambda, g);

    // Each expectation in its own graph; the penalty from an explicit
    // per-sample gradient norm.
    auto mean_score = [&](const Tensor<double>& x) {
        Graph<double> h(vt::Mode::inference);
        vt::BoundParams<double> q(h, disc);
        auto d = vg::discriminator_forward(arch, q, h.constant(x), h.constant(y));
        double s = 0;
        for (double v : d.value().data()) s += v;
        return s / 3.0;
    };
    double penalty = 0;
    {
        Graph<double> h(vt::Mode::training);
        vt::BoundParams<double> q(h, disc);
        auto xh = h.variable(vg::interpolate<double>(real, fake, eps));
        auto d = vg::discriminator_forward(arch, q, xh, h.constant(y));
        const std::array<Var<double>, 1> wrt{xh};
        const auto grad = h.grad(ops::sum(d), wrt)[0].value();
        for (std::size_t n = 0; n < 3; ++n) {
            double sq = 0;
            for (std::size_t i = 0; i < 512; ++i) sq += grad[n * 512 + i] * grad[n * 512 + i];
            penalty += (std::sqrt(sq) - 1) * (std::sqrt(sq) - 1) / 3.0;
        }
    }
    const double expected = mean_score(fake) - mean_score(real) + lambda * penalty;
    EXPECT_NEAR(loss.total.value().item(), expected, 1e-10);
    EXPECT_NEAR(loss.penalty.value().item(), penalty, 1e-10);
    EXPECT_GE(loss.penalty.value().item(), 0.0);
}

TEST(TrainingLog, CsvFormat) {
    std::vector<vg::StepLog> log{{0, vg::StepLog::Role::critic, 1.5, 0.25}, {1, vg::StepLog::Role::gen, -0.5, 0}};
    std::ostringstream os;
    vg::write_training_log(os, log);
    EXPECT_EQ(os.str(), "step,role,loss,penalty_term\n0,critic,1.5,0.25\n1,gen,-0.5,0\n");
}

class GanTraining : public ::testing::Test {
protected:
    vd::VolumeDataset ds = vd::make_blob_dataset(2, 6, vd::Dims{8, 8, 8}, 4);
};

TEST_F(GanTraining, AlternationBookkeepingAndDeterminism) {
    auto cfg = small_config();
    auto a = vg::ICWGAN::train(ds, nullptr, cfg);
    auto b = vg::ICWGAN::train(ds, nullptr, cfg);
    std::size_t critic = 0, gen = 0, run = 0;
    for (std::size_t i = 0; i < a.log().size(); ++i) {
        EXPECT_EQ(a.log()[i].step, i);
        if (a.log()[i].role == vg::StepLog::Role::critic) {
            ++critic;
            ++run;
        } else {
            ++gen;
            EXPECT_EQ(run, cfg.critic_iters);
            run = 0;
        }
        EXPECT_EQ(a.log()[i].loss, b.log()[i].loss);
        EXPECT_EQ(a.log()[i].penalty_term, b.log()[i].penalty_term);
    }
    EXPECT_GT(gen, 0u);
    EXPECT_EQ(critic, cfg.critic_iters * gen);
    EXPECT_EQ(a.sample(1, 3, 2), b.sample(1, 3, 2));
}

TEST_F(GanTraining, BatchLargerThanDatasetRejected) {
    auto cfg = small_config();
    cfg.batch_size = 13;
    EXPECT_THROW(vg::ICWGAN::train(ds, nullptr, cfg), volsynth::ContractError);
}

TEST_F(GanTraining, ValidationTracksEveryEpochAndKeepsTheLast) {
    auto cfg = small_config();
    cfg.epochs = 3;
    auto m = vg::ICWGAN::train(ds, &ds, cfg);
    auto plain = vg::ICWGAN::train(ds, nullptr, cfg);
    EXPECT_EQ(m.selected_epoch(), 2u);
    ASSERT_EQ(m.validation_wasserstein().size(), 3u);
    EXPECT_TRUE(plain.validation_wasserstein().empty());
    EXPECT_EQ(m.validation_wasserstein().back(), m.wasserstein_estimate(ds, volsynth::derive_seed(cfg.seed, {6})));
    EXPECT_EQ(m.sample(0, 2, 4), plain.sample(0, 2, 4));
}

TEST_F(GanTraining, SamplingContract) {
    auto m = vg::ICWGAN::train(ds, nullptr, small_config());
    auto vols = m.sample(0, 100, 1);
    ASSERT_EQ(vols.size(), 100u);
    for (const auto& v : vols) {
        EXPECT_EQ(v.dims, (vd::Dims{8, 8, 8}));
        for (double x : v.voxels) {
            EXPECT_GT(x, 0.0);
            EXPECT_LT(x, 1.0);
        }
    }
    EXPECT_EQ(m.sample(0, 100, 1), vols);
    EXPECT_THROW(m.sample(5, 1, 1), volsynth::UnknownClassError);
}

TEST_F(GanTraining, ConditioningChangesOutput) {
    auto m = vg::ICWGAN::train(ds, nullptr, small_config());
    auto a = m.sample(0, 1, 9)[0], b = m.sample(1, 1, 9)[0];
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a.voxels[i] - b.voxels[i]) * (a.voxels[i] - b.voxels[i]);
    EXPECT_GT(diff, 0.0);
}

TEST_F(GanTraining, CheckpointRoundTrip) {
    auto m = vg::ICWGAN::train(ds, nullptr, small_config());
    const auto path = std::filesystem::temp_directory_path() / "volsynth_gan_test.ckpt";
    m.save(path);
    auto back = vg::ICWGAN::load(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.sample(1, 4, 3), m.sample(1, 4, 3));
    EXPECT_EQ(back.wasserstein_estimate(ds, 5), m.wasserstein_estimate(ds, 5));
}

TEST(GanConfig, JsonRoundTripAndValidation) {
    auto c = small_config();
    EXPECT_EQ(vg::GANConfig::from_json(c.to_json()).to_json(), c.to_json());
    EXPECT_THROW(vg::GANConfig::from_json({{"critic_iters", 0}}), volsynth::ContractError);
    EXPECT_THROW(vg::GANConfig::from_json({{"lambda_gp", -1.0}}), volsynth::ContractError);
    EXPECT_THROW(vg::GANConfig::from_json({{"lambda", 10.0}}), volsynth::ContractError);
}
