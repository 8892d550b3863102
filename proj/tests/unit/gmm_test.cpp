#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "volsynth/gmm/gmm.hpp"

namespace vg = volsynth::gmm;
namespace vd = volsynth::data;

namespace {

std::vector<std::vector<double>> gaussian_points(std::size_t n, const std::vector<double>& center, double sigma,
                                                 std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, sigma);
    std::vector<std::vector<double>> out(n, center);
    for (auto& p : out)
        for (auto& v : p) v += g(rng);
    return out;
}

}  // namespace

TEST(GmmLogLikelihood, StandardNormal) {
    vg::GaussianMixture m{{1.0}, {{0.0}}, {{1.0}}};
    std::vector<double> x{0.0};
    EXPECT_NEAR(vg::log_likelihood(m, x), -0.5 * std::log(2 * M_PI), 1e-15);
    EXPECT_NEAR(vg::log_likelihood(m, x), -0.9189385, 1e-7);
}

TEST(GmmLogLikelihood, IdenticalComponentsCollapse) {
    vg::GaussianMixture one{{1.0}, {{0.3, -1.0}}, {{2.0, 0.5}}};
    vg::GaussianMixture two{{0.5, 0.5}, {{0.3, -1.0}, {0.3, -1.0}}, {{2.0, 0.5}, {2.0, 0.5}}};
    std::vector<double> x{1.0, 2.0};
    EXPECT_NEAR(vg::log_likelihood(one, x), vg::log_likelihood(two, x), 1e-14);
}

TEST(GmmLogLikelihood, MatchesDirectSum) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1, 1), pos(0.3, 2.0);
    vg::GaussianMixture m;
    for (int k = 0; k < 3; ++k) {
        m.weights.push_back(pos(rng));
        m.means.emplace_back();
        m.variances.emplace_back();
        for (int d = 0; d < 5; ++d) {
            m.means.back().push_back(u(rng));
            m.variances.back().push_back(pos(rng));
        }
    }
    double wsum = 0;
    for (double w : m.weights) wsum += w;
    for (double& w : m.weights) w /= wsum;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(5);
        for (auto& v : x) v = u(rng);
        double direct = 0;
        for (int k = 0; k < 3; ++k) {
            double dens = m.weights[k];
            for (int d = 0; d < 5; ++d) {
                const double var = m.variances[k][d];
                dens *= std::exp(-(x[d] - m.means[k][d]) * (x[d] - m.means[k][d]) / (2 * var)) /
                        std::sqrt(2 * M_PI * var);
            }
            direct += dens;
        }
        const double got = vg::log_likelihood(m, x);
        EXPECT_LE(std::abs(got - std::log(direct)) / std::abs(std::log(direct)), 1e-9);
        auto r = vg::responsibilities(m, x);
        double s = 0;
        for (double v : r) s += v;
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(GmmLogLikelihood, HighDimensionStaysFinite) {
    vg::GaussianMixture m{{0.5, 0.5}, {std::vector<double>(5000, 0.0), std::vector<double>(5000, 1.0)},
                          {std::vector<double>(5000, 1e-6), std::vector<double>(5000, 1e-6)}};
    std::vector<double> x(5000, 0.5);
    EXPECT_TRUE(std::isfinite(vg::log_likelihood(m, x)));
}

TEST(EmFit, SingleComponentIsClosedForm) {
    std::mt19937_64 rng(1);
    auto x = gaussian_points(57, {1.0, -2.0, 0.5, 3.0}, 0.7, rng);
    auto fit = vg::em_fit(x, {});
    const auto& g = fit.mixture;
    for (std::size_t d = 0; d < 4; ++d) {
        double mean = 0;
        for (const auto& p : x) mean += p[d];
        mean /= 57.0;
        double var = 0;
        for (const auto& p : x) var += (p[d] - mean) * (p[d] - mean);
        var /= 57.0;
        EXPECT_NEAR(g.means[0][d], mean, 1e-12);
        EXPECT_NEAR(g.variances[0][d], var, 1e-12);
    }
    EXPECT_EQ(g.weights[0], 1.0);
}

TEST(EmFit, MonotoneOnRandomDatasets) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        std::mt19937_64 rng(s);
        std::uniform_int_distribution<int> kd(1, 4), dd(1, 6), nd(20, 80);
        const int D = dd(rng);
        std::vector<std::vector<double>> x;
        for (int c = 0; c < kd(rng); ++c) {
            std::vector<double> center(D);
            for (auto& v : center) v = std::uniform_real_distribution<double>(-5, 5)(rng);
            auto pts = gaussian_points(nd(rng), center, std::uniform_real_distribution<double>(0.2, 2)(rng), rng);
            x.insert(x.end(), pts.begin(), pts.end());
        }
        vg::EMConfig cfg;
        cfg.components = 3;
        cfg.max_iters = 60;
        cfg.tolerance = 1e-10;
        cfg.seed = s;
        auto fit = vg::em_fit(x, cfg);
        const auto& h = fit.log_likelihood_history;
        for (std::size_t i = 1; i < h.size(); ++i) ASSERT_GE(h[i] - h[i - 1], -1e-9) << "dataset " << s << " iter " << i;
        double wsum = 0;
        for (double w : fit.mixture.weights) wsum += w;
        EXPECT_NEAR(wsum, 1.0, 1e-12);
    }
}

TEST(EmFit, RecoversSeparatedClusters) {
    std::mt19937_64 rng(9);
    const double sigma = 1.0;
    std::vector<double> a{0, 0, 0}, b{10 * sigma, 0, 0};
    auto x = gaussian_points(3000, a, sigma, rng);
    auto xb = gaussian_points(3000, b, sigma, rng);
    x.insert(x.end(), xb.begin(), xb.end());
    vg::EMConfig cfg;
    cfg.components = 2;
    cfg.seed = 4;
    auto fit = vg::em_fit(x, cfg);
    const auto& g = fit.mixture;
    const std::size_t ia = g.means[0][0] < g.means[1][0] ? 0 : 1;
    for (std::size_t d = 0; d < 3; ++d) {
        EXPECT_NEAR(g.means[ia][d], a[d], 0.1 * sigma);
        EXPECT_NEAR(g.means[1 - ia][d], b[d], 0.1 * sigma);
    }
    EXPECT_NEAR(g.weights[0], 0.5, 0.05);
}

TEST(EmFit, TooFewSamplesRejected) {
    vg::EMConfig cfg;
    cfg.components = 3;
    EXPECT_THROW(vg::em_fit({{1.0}, {2.0}}, cfg), volsynth::ContractError);
}

TEST(EmFit, IdenticalSamplesHitFloor) {
    std::vector<std::vector<double>> x(5, {0.25, 0.75});
    auto fit = vg::em_fit(x, {});
    EXPECT_EQ(fit.mixture.variances[0][0], 1e-6);
    EXPECT_TRUE(std::isfinite(fit.log_likelihood_history.back()));
}

TEST(Sampling, MeanWithinThreeStandardErrors) {
    vg::GaussianMixture m{{1.0}, {{0.2, 0.5, 0.9}}, {{1e-6, 1e-6, 1e-6}}};
    auto s = vg::sample_mixture(m, 1000, 5);
    const double se = std::sqrt(1e-6 / 1000.0);
    for (std::size_t d = 0; d < 3; ++d) {
        double mean = 0;
        for (const auto& v : s) mean += v[d];
        mean /= 1000.0;
        EXPECT_LE(std::abs(mean - m.means[0][d]), 3 * se);
    }
}

class ClassGmmTest : public ::testing::Test {
protected:
    vd::VolumeDataset ds = vd::make_blob_dataset(3, 12, vd::Dims{6, 6, 6}, 2);
    vd::Mask mask;
    void SetUp() override {
        std::vector<std::uint8_t> bits(216, 1);
        for (std::size_t i = 0; i < 216; i += 5) bits[i] = 0;
        mask = vd::Mask(vd::Dims{6, 6, 6}, bits);
    }
};

TEST_F(ClassGmmTest, SamplesRespectMaskAndRange) {
    auto model = vg::ClassGMM::fit(ds, mask, {});
    auto vols = model.sample(1, 4, 7);
    ASSERT_EQ(vols.size(), 4u);
    for (const auto& v : vols)
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!mask.bits[i]) EXPECT_EQ(v.voxels[i], 0.0);
            EXPECT_GE(v.voxels[i], 0.0);
            EXPECT_LE(v.voxels[i], 1.0);
        }
    EXPECT_EQ(model.sample(1, 4, 7), vols);
    EXPECT_THROW(model.sample(1, 0, 7), volsynth::ContractError);
}

TEST_F(ClassGmmTest, UnknownClassListsTrained) {
    auto sub_idx = std::vector<std::size_t>{0, 1, 2, 24, 25, 26};
    auto model = vg::ClassGMM::fit(ds.subset(sub_idx), mask, {});
    try {
        model.sample(1, 1, 0);
        FAIL();
    } catch (const volsynth::UnknownClassError& e) {
        EXPECT_NE(std::string(e.what()).find("[0,2]"), std::string::npos) << e.what();
    }
}

TEST_F(ClassGmmTest, CheckpointRoundTrip) {
    vg::EMConfig cfg;
    cfg.components = 2;
    auto model = vg::ClassGMM::fit(ds, mask, cfg);
    const auto path = std::filesystem::temp_directory_path() / "volsynth_gmm_test.ckpt";
    model.save(path);
    auto back = vg::ClassGMM::load(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.trained_classes(), model.trained_classes());
    EXPECT_EQ(back.mask().bits, mask.bits);
    for (auto c : model.trained_classes()) {
        EXPECT_EQ(back.mixture(c).means, model.mixture(c).means);
        EXPECT_EQ(back.mixture(c).variances, model.mixture(c).variances);
        EXPECT_EQ(back.mixture(c).weights, model.mixture(c).weights);
    }
    EXPECT_EQ(back.sample(2, 3, 1), model.sample(2, 3, 1));
}
