#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "volsynth/experiment/harness.hpp"

namespace ve = volsynth::experiment;
namespace vd = volsynth::data;
using volsynth::ContractError;

namespace {

// Small, fast settings for whole-pipeline runs.
ve::ExperimentConfig tiny_config() {
    ve::ExperimentConfig c;
    c.dataset.blob_classes = 3;
    c.dataset.blob_per_class = 12;
    c.dataset.blob_dims = {6, 6, 6};
    c.dataset.blob_seed = 1;
    c.folds = 3;
    c.repeats = 2;
    c.synth_per_class = 4;
    c.noise_per_class = 4;
    c.svm.epochs = 5;
    c.dnn.channels = {2, 2, 4, 4};
    c.dnn.batch_size = 4;
    c.dnn.epochs = 1;
    c.cvae.channels = {2, 2, 4, 4};
    c.cvae.latent_dim = 4;
    c.cvae.batch_size = 4;
    c.cvae.epochs = 1;
    c.gan.channels = {2, 2, 4, 4};
    c.gan.z_dim = 4;
    c.gan.batch_size = 4;
    c.gan.critic_iters = 2;
    c.gan.epochs = 1;
    c.gmm.max_iters = 5;
    return c;
}

vd::VolumeDataset sized_classes(const std::vector<std::size_t>& sizes) {
    vd::VolumeDataset ds;
    std::uint64_t id = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
        ds.class_table.push_back("c" + std::to_string(c));
        for (std::size_t i = 0; i < sizes[c]; ++i) ds.add(vd::Volume({2, 2, 2}, 0.1 * double(c)), c, vd::Provenance::real, id++);
    }
    return ds;
}

std::vector<std::size_t> per_class(const vd::VolumeDataset& ds, std::span<const std::size_t> idx) {
    std::vector<std::size_t> n(ds.num_classes(), 0);
    for (auto i : idx) ++n[ds.labels[i]];
    return n;
}

}  // namespace

TEST(Aggregate, FoldAccuraciesHandArithmetic) {
    // mean 0.9; deviations -0.1, 0, 0.1 -> (0.01 + 0 + 0.01) / 3.
    std::vector<ve::MetricValues> v{{0.8, 0.5, 0.5, 0.5}, {0.9, 0.5, 0.5, 0.5}, {1.0, 0.5, 0.5, 0.5}};
    const auto a = ve::aggregate(v);
    EXPECT_NEAR(a.mean.accuracy, 0.9, 1e-15);
    EXPECT_NEAR(a.variance.accuracy, 0.02 / 3.0, 1e-15);
    EXPECT_NEAR(a.variance.accuracy, 0.006667, 1e-6);
    EXPECT_EQ(a.variance.macro_f1, 0.0);
    EXPECT_EQ(a.count, 3u);
}

TEST(Aggregate, IdenticalAndSingle) {
    const ve::MetricValues m{0.7, 0.6, 0.65, 0.62};
    std::vector<ve::MetricValues> three(3, m);
    const auto a = ve::aggregate(three);
    EXPECT_EQ(a.variance, (ve::MetricValues{0, 0, 0, 0}));
    std::vector<ve::MetricValues> one{m};
    const auto b = ve::aggregate(one);
    EXPECT_EQ(b.mean, m);
    EXPECT_EQ(b.variance, (ve::MetricValues{0, 0, 0, 0}));
    EXPECT_THROW(ve::aggregate(std::span<const ve::MetricValues>{}), ContractError);
}

TEST(ExperimentConfig, DefaultRowsFollowTableLayout) {
    const ve::ExperimentConfig c;
    const auto rows = c.runs();
    ASSERT_EQ(rows.size(), 10u);
    EXPECT_EQ(rows[0].key(), "Real,-,SVM");
    EXPECT_EQ(rows[1].key(), "Real,-,DNN");
    EXPECT_EQ(rows[2].key(), "Real+noise(0.01),-,SVM");
    EXPECT_EQ(rows[9].key(), "Real+Synth,ICW-GAN,DNN");
    for (const auto& r : rows) EXPECT_NO_THROW(r.validate());
    EXPECT_EQ(rows[5].synth_per_class, 100u);
}

TEST(ExperimentConfig, NoiseSweepAddsRows) {
    ve::ExperimentConfig c;
    c.regimes = {ve::Regime::real_noise};
    c.noise_variances = {0.01, 0.05, 0.1, 0.3};
    c.classifiers = {ve::ClassifierKind::svm};
    const auto rows = c.runs();
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[3].noise_variance, 0.3);
}

TEST(ExperimentConfig, JsonRoundTripAndStrictKeys) {
    auto c = tiny_config();
    c.single_model = true;
    const auto j = c.to_json();
    EXPECT_EQ(ve::ExperimentConfig::from_json(j).to_json(), j);
    auto bad = j;
    bad["bogus"] = 1;
    EXPECT_THROW(ve::ExperimentConfig::from_json(bad), ContractError);
    bad = j;
    bad["gan"]["unknown"] = 2;
    EXPECT_THROW(ve::ExperimentConfig::from_json(bad), ContractError);
    bad = j;
    bad["regimes"] = {"Real", "Sideways"};
    EXPECT_THROW(ve::ExperimentConfig::from_json(bad), ContractError);
    bad = j;
    bad["dataset"] = {{"manifest", "a.csv"}, {"blob", nlohmann::json::object()}};
    EXPECT_THROW(ve::ExperimentConfig::from_json(bad), ContractError);
}

TEST(RunSpec, RegimeInvariants) {
    ve::RunSpec s{ve::Regime::real_synth, ve::GeneratorKind::gmm, ve::ClassifierKind::svm, 100, 0};
    EXPECT_NO_THROW(s.validate());
    s.synth_per_class = 0;
    EXPECT_THROW(s.validate(), ContractError);
    ve::RunSpec real{ve::Regime::real, ve::GeneratorKind::none, ve::ClassifierKind::dnn, 5, 0};
    EXPECT_THROW(real.validate(), ContractError);
    ve::RunSpec noise{ve::Regime::real_noise, ve::GeneratorKind::none, ve::ClassifierKind::dnn, 0, 0};
    EXPECT_THROW(noise.validate(), ContractError);
    noise.noise_variance = 0.01;
    EXPECT_NO_THROW(noise.validate());
    noise.generator = ve::GeneratorKind::cvae;
    EXPECT_THROW(noise.validate(), ContractError);
}

TEST(Splits, KFoldIsStratifiedDisjointAndCovering) {
    auto c = tiny_config();
    const auto ds = vd::make_blob_dataset(3, 14, {4, 4, 4}, 2);
    const auto splits = ve::make_splits(ds, c);
    ASSERT_EQ(splits.size(), 3u);
    std::vector<std::size_t> all_test;
    for (const auto& s : splits) {
        std::set<std::size_t> seen;
        for (const auto* part : {&s.train, &s.validation, &s.test})
            for (auto i : *part) EXPECT_TRUE(seen.insert(i).second) << "index " << i << " in two parts";
        EXPECT_EQ(seen.size(), ds.size());
        EXPECT_FALSE(s.validation.empty());
        all_test.insert(all_test.end(), s.test.begin(), s.test.end());
    }
    std::sort(all_test.begin(), all_test.end());
    for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(all_test[i], i);
    for (std::size_t cls = 0; cls < 3; ++cls) {
        std::vector<std::size_t> counts;
        for (const auto& s : splits) counts.push_back(per_class(ds, s.test)[cls]);
        EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1u);
    }
}

TEST(Splits, HoldoutRatiosAfterDroppingSmallClasses) {
    std::vector<std::string> dropped;
    const auto ds = ve::drop_small_classes(sized_classes({100, 29, 60}), &dropped);
    ASSERT_EQ(dropped, std::vector<std::string>{"c1"});
    ASSERT_EQ(ds.class_table, (std::vector<std::string>{"c0", "c2"}));
    auto c = tiny_config();
    c.protocol = ve::Protocol::holdout;
    const auto s = ve::make_splits(ds, c);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(per_class(ds, s[0].train), (std::vector<std::size_t>{70, 30}));
    EXPECT_EQ(per_class(ds, s[0].validation), (std::vector<std::size_t>{10, 10}));
    EXPECT_EQ(per_class(ds, s[0].test), (std::vector<std::size_t>{20, 20}));
    EXPECT_THROW(ve::drop_small_classes(sized_classes({40, 10})), ContractError);
}

TEST(Augmentation, SyntheticCountsIdsAndProvenance) {
    auto c = tiny_config();
    const auto train = vd::make_blob_dataset(3, 10, {6, 6, 6}, 3);
    const auto gen = ve::Generator::train(ve::GeneratorKind::gmm, train, nullptr, c, 5, c.mask_strategy);
    const auto aug = ve::augment_synthetic(train, gen, 100, 9, ve::next_free_id(train));
    ASSERT_EQ(aug.size(), train.size() + 100 * 3);
    std::set<std::uint64_t> ids(aug.ids.begin(), aug.ids.end());
    EXPECT_EQ(ids.size(), aug.size());
    for (std::size_t i = train.size(); i < aug.size(); ++i) EXPECT_EQ(aug.provenance[i], vd::Provenance::synthetic);
    EXPECT_EQ(aug.class_counts(), (std::vector<std::size_t>{110, 110, 110}));
    EXPECT_EQ(ve::augment_synthetic(train, gen, 100, 9, ve::next_free_id(train)).volumes, aug.volumes);
}

TEST(Augmentation, NoiseCopies) {
    const auto train = vd::make_blob_dataset(2, 5, {4, 4, 4}, 3);
    const auto aug = ve::augment_noise(train, 20, 0.01, 4, 1000);
    ASSERT_EQ(aug.size(), train.size() + 40);
    for (std::size_t i = train.size(); i < aug.size(); ++i) {
        EXPECT_EQ(aug.provenance[i], vd::Provenance::noisy);
        for (double v : aug.volumes[i].voxels) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
    EXPECT_EQ(aug.class_counts(), (std::vector<std::size_t>{25, 25}));
    EXPECT_EQ(aug.ids[train.size()], 1000u);
}

TEST(LeakGuard, RejectsNonRealOrSharedIds) {
    auto train = vd::make_blob_dataset(2, 4, {2, 2, 2}, 1);
    auto test = train.subset(std::vector<std::size_t>{0, 5});
    vd::VolumeDataset empty;
    empty.class_table = train.class_table;
    EXPECT_NO_THROW(ve::check_no_leak(train, empty, test));
    train.add(train.volumes[0], 0, vd::Provenance::synthetic, 100);
    EXPECT_NO_THROW(ve::check_no_leak(train, empty, test));
    auto shared = test;
    shared.ids[0] = 100;
    EXPECT_THROW(ve::check_no_leak(train, empty, shared), ve::LeakError);
    auto noisy = test;
    noisy.provenance[1] = vd::Provenance::noisy;
    EXPECT_THROW(ve::check_no_leak(train, noisy, test), ve::LeakError);
}

TEST(RunRegime, BookkeepingAndDeterminism) {
    auto c = tiny_config();
    const auto ds = c.dataset.load();
    const ve::RunSpec spec{ve::Regime::real_synth, ve::GeneratorKind::gmm, ve::ClassifierKind::svm, 4, 0};
    const auto a = ve::run_regime(spec, ds, c);
    ASSERT_EQ(a.cells.size(), 6u);
    ASSERT_EQ(a.fold_means.size(), 3u);
    std::size_t test_total = 0;
    for (const auto& cell : a.cells) {
        EXPECT_EQ(cell.train_added, 4u * 3u);
        if (cell.repeat == 0) test_total += cell.test;
    }
    EXPECT_EQ(test_total, ds.size());
    // Equal repeats per fold: mean of fold means == mean of cells.
    EXPECT_NEAR(a.summary.mean.accuracy, a.cell_mean.accuracy, 1e-12);
    EXPECT_NEAR(a.summary.mean.macro_f1, a.cell_mean.macro_f1, 1e-12);
    const auto b = ve::run_regime(spec, ds, c);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(RunRegime, RejectsNonRealInput) {
    auto c = tiny_config();
    auto ds = c.dataset.load();
    ds.provenance[0] = vd::Provenance::synthetic;
    const ve::RunSpec spec{ve::Regime::real, ve::GeneratorKind::none, ve::ClassifierKind::svm, 0, 0};
    EXPECT_THROW(ve::run_regime(spec, ds, c), ContractError);
}

TEST(RunSweep, AllGeneratorsTablesAndReport) {
    auto c = tiny_config();
    c.repeats = 1;
    const auto ds = c.dataset.load();
    const auto runs = ve::run_sweep(ds, c);
    ASSERT_EQ(runs.size(), 10u);

    std::ostringstream table;
    ve::write_table(table, runs);
    std::istringstream lines(table.str());
    std::string line;
    std::getline(lines, line);
    EXPECT_EQ(line, "input,gen_model,classifier,accuracy,macro_f1,precision,recall");
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
    }
    EXPECT_EQ(rows, 10u);

    const auto doc = ve::runs_document(c, runs);
    const auto back = ve::read_runs_document(nlohmann::json::parse(doc.dump()));
    ASSERT_EQ(back.size(), runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) EXPECT_EQ(back[i].to_json(), runs[i].to_json());

    const auto combined = ve::combine_runs({back, back, back});
    ASSERT_EQ(combined.size(), 10u);
    for (const auto& r : combined) {
        EXPECT_EQ(r.runs, 3u);
        EXPECT_EQ(r.between.variance, (ve::MetricValues{0, 0, 0, 0}));
    }
    std::ostringstream rep;
    ve::write_report(rep, combined);
    EXPECT_NE(rep.str().find("# variance over folds"), std::string::npos);
}

TEST(RunSweep, SingleModelMode) {
    auto c = tiny_config();
    c.repeats = 1;
    c.single_model = true;
    c.regimes = {ve::Regime::real_synth};
    c.generators = {ve::GeneratorKind::gmm};
    c.classifiers = {ve::ClassifierKind::svm};
    const auto runs = ve::run_sweep(c.dataset.load(), c);
    ASSERT_EQ(runs.size(), 1u);
    EXPECT_EQ(runs[0].cells.size(), 3u);
}

TEST(RunRegime, AugmentedSizeProfiles) {
    auto c = tiny_config();
    c.repeats = 1;
    c.noise_per_class = 20;
    const auto ds = c.dataset.load();
    for (std::size_t per : {100u, 20u}) {
        const ve::RunSpec spec{ve::Regime::real_synth, ve::GeneratorKind::gmm, ve::ClassifierKind::svm, per, 0};
        const auto r = ve::run_regime(spec, ds, c);
        for (const auto& cell : r.cells) EXPECT_EQ(cell.train_added, per * 3);
    }
    const ve::RunSpec noise{ve::Regime::real_noise, ve::GeneratorKind::none, ve::ClassifierKind::svm, 0, 0.01};
    for (const auto& cell : ve::run_regime(noise, ds, c).cells) EXPECT_EQ(cell.train_added, 20u * 3);
}
