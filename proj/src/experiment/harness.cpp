#include "volsynth/experiment/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "volsynth/util/json_config.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::experiment {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string lower(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

std::string format(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

void write_metric_row(std::ostream& os, const std::string& key, const MetricValues& m, const char* fmt) {
    os << key << ',' << format(fmt, m.accuracy) << ',' << format(fmt, m.macro_f1) << ','
       << format(fmt, m.precision) << ',' << format(fmt, m.recall) << '\n';
}

nlohmann::json metrics_to_json(const classify::MetricsReport& r) {
    return {{"accuracy", r.accuracy},
            {"macro_f1", r.macro_f1},
            {"precision", r.precision},
            {"recall", r.recall},
            {"confusion", r.confusion},
            {"class_precision", r.class_precision},
            {"class_recall", r.class_recall},
            {"class_f1", r.class_f1},
            {"warnings", r.warnings}};
}

classify::MetricsReport metrics_from_json(const nlohmann::json& j) {
    classify::MetricsReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.class_precision = j.value("class_precision", std::vector<double>{});
    r.class_recall = j.value("class_recall", std::vector<double>{});
    r.class_f1 = j.value("class_f1", std::vector<double>{});
    r.warnings = j.value("warnings", std::vector<std::string>{});
    return r;
}

// Everything a fold needs besides the row-specific augmentation.
struct FoldData {
    data::VolumeDataset train;
    data::VolumeDataset validation;
    data::VolumeDataset test;
};

MetricValues mean_of(std::span<const MetricValues> v) { return aggregate(v).mean; }

}  // namespace

std::string to_string(Regime r) {
    switch (r) {
        case Regime::real: return "Real";
        case Regime::real_noise: return "Real+noise";
        case Regime::real_synth: return "Real+Synth";
    }
    return "?";
}

std::string to_string(GeneratorKind g) {
    switch (g) {
        case GeneratorKind::none: return "-";
        case GeneratorKind::gmm: return "GMM";
        case GeneratorKind::cvae: return "CVAE";
        case GeneratorKind::icwgan: return "ICW-GAN";
    }
    return "?";
}

std::string to_string(ClassifierKind c) { return c == ClassifierKind::svm ? "SVM" : "DNN"; }
std::string to_string(Protocol p) { return p == Protocol::kfold ? "kfold" : "holdout"; }

Regime parse_regime(const std::string& s) {
    const auto l = lower(s);
    if (l == "real") return Regime::real;
    if (l == "real+noise" || l == "real_noise" || l == "noise") return Regime::real_noise;
    if (l == "real+synth" || l == "real_synth" || l == "synth") return Regime::real_synth;
    throw ContractError("unknown regime '" + s + "'");
}

GeneratorKind parse_generator(const std::string& s) {
    const auto l = lower(s);
    if (l == "-" || l == "none") return GeneratorKind::none;
    if (l == "gmm") return GeneratorKind::gmm;
    if (l == "cvae") return GeneratorKind::cvae;
    if (l == "icw-gan" || l == "icwgan" || l == "gan") return GeneratorKind::icwgan;
    throw ContractError("unknown generator '" + s + "'");
}

ClassifierKind parse_classifier(const std::string& s) {
    const auto l = lower(s);
    if (l == "svm") return ClassifierKind::svm;
    if (l == "dnn") return ClassifierKind::dnn;
    throw ContractError("unknown classifier '" + s + "'");
}

Protocol parse_protocol(const std::string& s) {
    const auto l = lower(s);
    if (l == "kfold") return Protocol::kfold;
    if (l == "holdout") return Protocol::holdout;
    throw ContractError("unknown protocol '" + s + "'");
}

data::VolumeDataset DatasetSource::load() const {
    if (is_blob()) return data::make_blob_dataset(blob_classes, blob_per_class, blob_dims, blob_seed);
    return data::read_manifest(manifest, classes.empty() ? manifest.parent_path() / "classes.txt" : classes);
}

nlohmann::json DatasetSource::to_json() const {
    if (!is_blob()) return {{"manifest", manifest.string()}, {"classes", classes.string()}};
    return {{"blob", {{"classes", blob_classes}, {"per_class", blob_per_class}, {"dims", blob_dims}, {"seed", blob_seed}}}};
}

DatasetSource DatasetSource::from_json(const nlohmann::json& j) {
    const std::string where = "dataset";
    reject_unknown_keys(j, {"manifest", "classes", "blob"}, where);
    DatasetSource d;
    if (j.contains("blob") == j.contains("manifest")) {
        throw ContractError("dataset: give exactly one of 'manifest' or 'blob'");
    }
    if (j.contains("manifest")) {
        std::string m, c;
        read_field(j, "manifest", m, where);
        read_field(j, "classes", c, where);
        if (m.empty()) throw ContractError("dataset: empty manifest path");
        d.manifest = m;
        d.classes = c;
        return d;
    }
    if (j.contains("classes")) throw ContractError("dataset: 'classes' only applies to a manifest");
    const auto& b = j.at("blob");
    reject_unknown_keys(b, {"classes", "per_class", "dims", "seed"}, "dataset.blob");
    read_field(b, "classes", d.blob_classes, "dataset.blob");
    read_field(b, "per_class", d.blob_per_class, "dataset.blob");
    read_field(b, "dims", d.blob_dims, "dataset.blob");
    read_field(b, "seed", d.blob_seed, "dataset.blob");
    if (d.blob_classes < 2) throw ContractError("dataset.blob: need at least 2 classes");
    if (d.blob_per_class == 0 || data::voxel_count(d.blob_dims) == 0) {
        throw ContractError("dataset.blob: per_class and dims must be positive");
    }
    return d;
}

void RunSpec::validate() const {
    const bool synth = regime == Regime::real_synth;
    if ((synth_per_class > 0) != synth) {
        throw ContractError("synth_per_class must be > 0 exactly for the Real+Synth regime (" + key() + ")");
    }
    if ((noise_variance > 0) != (regime == Regime::real_noise)) {
        throw ContractError("noise_variance must be > 0 exactly for the Real+noise regime (" + key() + ")");
    }
    if ((generator != GeneratorKind::none) != synth) {
        throw ContractError("a generator is required exactly for the Real+Synth regime (" + key() + ")");
    }
}

std::string RunSpec::key() const {
    std::string input = to_string(regime);
    if (regime == Regime::real_noise) input += "(" + format("%g", noise_variance) + ")";
    return input + "," + to_string(generator) + "," + to_string(classifier);
}

nlohmann::json RunSpec::to_json() const {
    return {{"regime", to_string(regime)},
            {"generator", to_string(generator)},
            {"classifier", to_string(classifier)},
            {"synth_per_class", synth_per_class},
            {"noise_variance", noise_variance}};
}

void ExperimentConfig::validate() const {
    if (protocol == Protocol::kfold && folds < 2) throw ContractError("kfold protocol needs folds >= 2");
    if (repeats < 1) throw ContractError("repeats must be >= 1");
    if (!(validation_fraction > 0 && validation_fraction < 1)) {
        throw ContractError("validation_fraction must be in (0,1)");
    }
    if (regimes.empty() || classifiers.empty()) throw ContractError("need at least one regime and one classifier");
    const bool synth = std::find(regimes.begin(), regimes.end(), Regime::real_synth) != regimes.end();
    const bool noise = std::find(regimes.begin(), regimes.end(), Regime::real_noise) != regimes.end();
    if (synth && (generators.empty() || synth_per_class == 0)) {
        throw ContractError("Real+Synth needs generators and synth_per_class > 0");
    }
    if (std::find(generators.begin(), generators.end(), GeneratorKind::none) != generators.end()) {
        throw ContractError("generators list may not contain 'none'");
    }
    if (noise) {
        if (noise_per_class == 0 || noise_variances.empty()) {
            throw ContractError("Real+noise needs noise_per_class > 0 and at least one variance");
        }
        for (double v : noise_variances)
            if (!(v > 0)) throw ContractError("noise variances must be > 0");
    }
    gmm.validate();
    cvae.validate();
    gan.validate();
    svm.validate();
    dnn.validate();
    for (const auto& r : runs()) r.validate();
}

std::vector<RunSpec> ExperimentConfig::runs() const {
    std::vector<RunSpec> out;
    for (auto reg : regimes) {
        std::vector<RunSpec> base;
        if (reg == Regime::real) {
            base.push_back({reg, GeneratorKind::none, ClassifierKind::svm, 0, 0});
        } else if (reg == Regime::real_noise) {
            for (double v : noise_variances) base.push_back({reg, GeneratorKind::none, ClassifierKind::svm, 0, v});
        } else {
            for (auto g : generators) base.push_back({reg, g, ClassifierKind::svm, synth_per_class, 0});
        }
        for (const auto& b : base)
            for (auto c : classifiers) {
                auto r = b;
                r.classifier = c;
                out.push_back(r);
            }
    }
    return out;
}

nlohmann::json ExperimentConfig::to_json() const {
    std::vector<std::string> reg, gen, clf;
    for (auto r : regimes) reg.push_back(to_string(r));
    for (auto g : generators) gen.push_back(to_string(g));
    for (auto c : classifiers) clf.push_back(to_string(c));
    return {{"dataset", dataset.to_json()},
            {"protocol", to_string(protocol)},
            {"folds", folds},
            {"repeats", repeats},
            {"seed", seed},
            {"validation_fraction", validation_fraction},
            {"synth_per_class", synth_per_class},
            {"noise_per_class", noise_per_class},
            {"noise_variances", noise_variances},
            {"single_model", single_model},
            {"mask_strategy", data::to_string(mask_strategy)},
            {"regimes", reg},
            {"generators", gen},
            {"classifiers", clf},
            {"gmm", gmm.to_json()},
            {"cvae", cvae.to_json()},
            {"gan", gan.to_json()},
            {"svm", svm.to_json()},
            {"dnn", dnn.to_json()},
            {"output_dir", output_dir.string()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    const std::string where = "experiment config";
    reject_unknown_keys(j,
                        {"dataset", "protocol", "folds", "repeats", "seed", "validation_fraction", "synth_per_class",
                         "noise_per_class", "noise_variances", "single_model", "mask_strategy", "regimes",
                         "generators", "classifiers", "gmm", "cvae", "gan", "svm", "dnn", "output_dir"},
                        where);
    ExperimentConfig c;
    if (j.contains("dataset")) c.dataset = DatasetSource::from_json(j.at("dataset"));
    std::string s;
    if (j.contains("protocol")) {
        read_field(j, "protocol", s, where);
        c.protocol = parse_protocol(s);
    }
    read_field(j, "folds", c.folds, where);
    read_field(j, "repeats", c.repeats, where);
    read_field(j, "seed", c.seed, where);
    read_field(j, "validation_fraction", c.validation_fraction, where);
    read_field(j, "synth_per_class", c.synth_per_class, where);
    read_field(j, "noise_per_class", c.noise_per_class, where);
    read_field(j, "noise_variances", c.noise_variances, where);
    read_field(j, "single_model", c.single_model, where);
    if (j.contains("mask_strategy")) {
        read_field(j, "mask_strategy", s, where);
        c.mask_strategy = data::parse_mask_strategy(s);
    }
    std::vector<std::string> names;
    if (j.contains("regimes")) {
        read_field(j, "regimes", names, where);
        c.regimes.clear();
        for (const auto& n : names) c.regimes.push_back(parse_regime(n));
    }
    if (j.contains("generators")) {
        read_field(j, "generators", names, where);
        c.generators.clear();
        for (const auto& n : names) c.generators.push_back(parse_generator(n));
    }
    if (j.contains("classifiers")) {
        read_field(j, "classifiers", names, where);
        c.classifiers.clear();
        for (const auto& n : names) c.classifiers.push_back(parse_classifier(n));
    }
    if (j.contains("gmm")) c.gmm = gmm::EMConfig::from_json(j.at("gmm"));
    if (j.contains("cvae")) c.cvae = cvae::CVAEConfig::from_json(j.at("cvae"));
    if (j.contains("gan")) c.gan = gan::GANConfig::from_json(j.at("gan"));
    if (j.contains("svm")) c.svm = classify::SVMConfig::from_json(j.at("svm"));
    if (j.contains("dnn")) c.dnn = classify::DNNConfig::from_json(j.at("dnn"));
    if (j.contains("output_dir")) {
        read_field(j, "output_dir", s, where);
        c.output_dir = s;
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

MetricValues MetricValues::from(const classify::MetricsReport& r) {
    return {r.accuracy, r.macro_f1, r.precision, r.recall};
}

nlohmann::json MetricValues::to_json() const {
    return {{"accuracy", accuracy}, {"macro_f1", macro_f1}, {"precision", precision}, {"recall", recall}};
}

MetricValues MetricValues::from_json(const nlohmann::json& j) {
    return {j.at("accuracy").get<double>(), j.at("macro_f1").get<double>(), j.at("precision").get<double>(),
            j.at("recall").get<double>()};
}

Aggregate aggregate(std::span<const MetricValues> values) {
    if (values.empty()) throw ContractError("aggregate needs at least one report");
    Aggregate a;
    a.count = values.size();
    const double n = static_cast<double>(values.size());
    auto field = [&](double MetricValues::*f) {
        double mean = 0;
        for (const auto& v : values) mean += v.*f;
        mean /= n;
        double var = 0;
        for (const auto& v : values) var += (v.*f - mean) * (v.*f - mean);
        const auto [lo, hi] = std::minmax_element(values.begin(), values.end(),
                                                  [&](const auto& x, const auto& y) { return x.*f < y.*f; });
        if ((*lo).*f == (*hi).*f) {
            // Exact for constant inputs, where sum / n can be off by an ulp.
            mean = (*lo).*f;
            var = 0;
        }
        a.mean.*f = mean;
        a.variance.*f = var / n;
    };
    field(&MetricValues::accuracy);
    field(&MetricValues::macro_f1);
    field(&MetricValues::precision);
    field(&MetricValues::recall);
    return a;
}

data::VolumeDataset drop_small_classes(const data::VolumeDataset& ds, std::vector<std::string>* dropped) {
    const auto counts = ds.class_counts();
    std::vector<std::size_t> remap(counts.size(), SIZE_MAX);
    data::VolumeDataset out;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] >= 30) {
            remap[c] = out.class_table.size();
            out.class_table.push_back(ds.class_table[c]);
        } else if (dropped) {
            dropped->push_back(ds.class_table[c]);
        }
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (remap[ds.labels[i]] == SIZE_MAX) continue;
        out.add(ds.volumes[i], remap[ds.labels[i]], ds.provenance[i], ds.ids[i]);
    }
    if (out.num_classes() < 2) throw ContractError("fewer than 2 classes have at least 30 samples");
    return out;
}

std::vector<FoldSplit> make_splits(const data::VolumeDataset& ds, const ExperimentConfig& config) {
    std::vector<FoldSplit> out;
    const auto seed = derive_seed(config.seed, {10});
    if (config.protocol == Protocol::holdout) {
        auto s = data::split_by_class_size(ds, seed);
        if (!s.dropped_classes.empty()) throw ContractError("holdout split dropped classes; filter them first");
        out.push_back({std::move(s.train), std::move(s.validation), std::move(s.test)});
        return out;
    }
    const auto folds = data::stratified_kfold(ds, config.folds, seed);
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<std::size_t> rest;
        for (std::size_t g = 0; g < folds.size(); ++g)
            if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());
        std::sort(rest.begin(), rest.end());
        auto [train, val] = data::stratified_holdout(rest, ds.labels, config.validation_fraction, derive_seed(seed, {f}));
        out.push_back({std::move(train), std::move(val), folds[f]});
    }
    return out;
}

Generator Generator::train(GeneratorKind kind, const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                           const ExperimentConfig& config, std::uint64_t seed, data::MaskStrategy mask_strategy) {
    Generator g;
    g.kind_ = kind;
    switch (kind) {
        case GeneratorKind::none: throw ContractError("no generator to train");
        case GeneratorKind::gmm: {
            auto cfg = config.gmm;
            cfg.seed = seed;
            g.gmm_ = gmm::ClassGMM::fit(train_set, data::compute_mask(train_set.volumes, mask_strategy), cfg);
            break;
        }
        case GeneratorKind::cvae: {
            auto cfg = config.cvae;
            cfg.seed = seed;
            g.cvae_ = cvae::CVAE::train(train_set, validation, cfg);
            break;
        }
        case GeneratorKind::icwgan: {
            auto cfg = config.gan;
            cfg.seed = seed;
            g.gan_ = gan::ICWGAN::train(train_set, validation, cfg);
            break;
        }
    }
    return g;
}

std::vector<data::Volume> Generator::sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const {
    if (gmm_) return gmm_->sample(class_index, n, seed);
    if (cvae_) return cvae_->sample(class_index, n, seed);
    if (gan_) return gan_->sample(class_index, n, seed);
    throw ContractError("generator was not trained");
}

std::uint64_t next_free_id(const data::VolumeDataset& ds) {
    std::uint64_t m = 0;
    for (auto id : ds.ids) m = std::max(m, id + 1);
    return m;
}

data::VolumeDataset augment_synthetic(const data::VolumeDataset& train_set, const Generator& generator,
                                      std::size_t per_class, std::uint64_t seed, std::uint64_t first_id) {
    auto out = train_set;
    std::uint64_t next = first_id;
    for (std::size_t c = 0; c < train_set.num_classes(); ++c) {
        for (auto& v : generator.sample(c, per_class, derive_seed(seed, {c}))) {
            out.add(std::move(v), c, data::Provenance::synthetic, next++);
        }
    }
    return out;
}

data::VolumeDataset augment_noise(const data::VolumeDataset& train_set, std::size_t per_class, double variance,
                                  std::uint64_t seed, std::uint64_t first_id) {
    auto out = train_set;
    std::uint64_t next = first_id;
    std::vector<std::vector<std::size_t>> by_class(train_set.num_classes());
    for (std::size_t i = 0; i < train_set.size(); ++i)
        if (train_set.provenance[i] == data::Provenance::real) by_class[train_set.labels[i]].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        if (idx.empty()) throw ContractError("noise augmentation: class '" + train_set.class_table[c] + "' has no real samples");
        Rng rng(derive_seed(seed, {c}));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < per_class; ++k) {
            const auto src = idx[k % idx.size()];
            out.add(data::add_gaussian_noise(train_set.volumes[src], variance, derive_seed(seed, {c, k})), c,
                    data::Provenance::noisy, next++);
        }
    }
    return out;
}

void check_no_leak(const data::VolumeDataset& train, const data::VolumeDataset& validation,
                   const data::VolumeDataset& test) {
    std::set<std::uint64_t> added;
    for (std::size_t i = 0; i < train.size(); ++i)
        if (train.provenance[i] != data::Provenance::real) added.insert(train.ids[i]);
    auto check = [&](const data::VolumeDataset& ds, const char* name) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (ds.provenance[i] != data::Provenance::real) {
                throw LeakError(std::string(name) + " sample " + std::to_string(ds.ids[i]) + " is " +
                                data::to_string(ds.provenance[i]));
            }
            if (added.count(ds.ids[i])) {
                throw LeakError(std::string(name) + " shares id " + std::to_string(ds.ids[i]) +
                                " with an augmented training sample");
            }
        }
    };
    check(validation, "validation");
    check(test, "test");
}

nlohmann::json RunReport::to_json() const {
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& c : cells) {
        cj.push_back({{"fold", c.fold},
                      {"repeat", c.repeat},
                      {"train_real", c.train_real},
                      {"train_added", c.train_added},
                      {"validation", c.validation},
                      {"test", c.test},
                      {"metrics", metrics_to_json(c.metrics)}});
    }
    nlohmann::json fm = nlohmann::json::array();
    for (const auto& m : fold_means) fm.push_back(m.to_json());
    return {{"spec", spec.to_json()},
            {"key", spec.key()},
            {"cells", cj},
            {"fold_means", fm},
            {"mean", summary.mean.to_json()},
            {"fold_variance", summary.variance.to_json()},
            {"cell_mean", cell_mean.to_json()}};
}

RunReport RunReport::from_json(const nlohmann::json& j) {
    RunReport r;
    const auto& s = j.at("spec");
    r.spec.regime = parse_regime(s.at("regime").get<std::string>());
    r.spec.generator = parse_generator(s.at("generator").get<std::string>());
    r.spec.classifier = parse_classifier(s.at("classifier").get<std::string>());
    r.spec.synth_per_class = s.at("synth_per_class").get<std::size_t>();
    r.spec.noise_variance = s.at("noise_variance").get<double>();
    for (const auto& c : j.at("cells")) {
        CellReport cell;
        cell.fold = c.at("fold").get<std::size_t>();
        cell.repeat = c.at("repeat").get<std::size_t>();
        cell.train_real = c.at("train_real").get<std::size_t>();
        cell.train_added = c.at("train_added").get<std::size_t>();
        cell.validation = c.at("validation").get<std::size_t>();
        cell.test = c.at("test").get<std::size_t>();
        cell.metrics = metrics_from_json(c.at("metrics"));
        r.cells.push_back(std::move(cell));
    }
    for (const auto& m : j.at("fold_means")) r.fold_means.push_back(MetricValues::from_json(m));
    if (r.fold_means.empty()) throw FormatError("run '" + r.spec.key() + "' has no fold means");
    r.summary = aggregate(r.fold_means);
    std::vector<MetricValues> per_cell;
    for (const auto& c : r.cells) per_cell.push_back(MetricValues::from(c.metrics));
    r.cell_mean = per_cell.empty() ? r.summary.mean : mean_of(per_cell);
    return r;
}

namespace {

std::vector<RunReport> run_rows(const std::vector<RunSpec>& rows, const data::VolumeDataset& input,
                                const ExperimentConfig& config, const ProgressFn& progress) {
    for (const auto& r : rows) r.validate();
    input.validate();
    for (auto p : input.provenance)
        if (p != data::Provenance::real) throw ContractError("input dataset must hold real samples only");
    const auto ds = config.protocol == Protocol::holdout ? drop_small_classes(input) : input;
    const auto splits = make_splits(ds, config);
    const std::size_t C = ds.num_classes();
    const std::uint64_t first_new_id = next_free_id(ds);
    auto say = [&](const std::string& m) {
        if (progress) progress(m);
    };

    std::vector<RunReport> reports(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) reports[r].spec = rows[r];

    std::set<GeneratorKind> needed;
    for (const auto& r : rows)
        if (r.generator != GeneratorKind::none) needed.insert(r.generator);
    const auto gen_index = [](GeneratorKind g) { return static_cast<std::uint64_t>(g); };

    // Fidelity mode: one generator per kind on the whole dataset.
    std::map<GeneratorKind, Generator> shared;
    std::map<GeneratorKind, double> shared_seconds;
    if (config.single_model) {
        for (auto g : needed) {
            say("training " + to_string(g) + " on the full dataset");
            const auto t0 = Clock::now();
            shared.emplace(g, Generator::train(g, ds, nullptr, config, derive_seed(config.seed, {21, gen_index(g)}),
                                               config.mask_strategy));
            shared_seconds[g] = seconds_since(t0);
        }
    }

    for (std::size_t f = 0; f < splits.size(); ++f) {
        FoldData fd{ds.subset(splits[f].train), ds.subset(splits[f].validation), ds.subset(splits[f].test)};
        const auto mask = data::compute_mask(fd.train.volumes, config.mask_strategy);

        std::map<GeneratorKind, Generator> fold_gens;
        std::map<GeneratorKind, double> fold_seconds;
        for (auto g : needed) {
            if (config.single_model) continue;
            say("fold " + std::to_string(f) + ": training " + to_string(g));
            const auto t0 = Clock::now();
            fold_gens.emplace(g, Generator::train(g, fd.train, &fd.validation, config,
                                                  derive_seed(config.seed, {20, f, gen_index(g)}), config.mask_strategy));
            fold_seconds[g] = seconds_since(t0);
        }
        const auto& gens = config.single_model ? shared : fold_gens;
        const auto& gen_seconds = config.single_model ? shared_seconds : fold_seconds;

        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& spec = rows[r];
            auto& report = reports[r];
            if (spec.generator != GeneratorKind::none) report.times.generator_seconds += gen_seconds.at(spec.generator);
            std::vector<MetricValues> repeats;
            for (std::size_t rep = 0; rep < config.repeats; ++rep) {
                say("fold " + std::to_string(f) + " repeat " + std::to_string(rep) + ": " + spec.key());
                auto t0 = Clock::now();
                data::VolumeDataset train;
                if (spec.regime == Regime::real) {
                    train = fd.train;
                } else if (spec.regime == Regime::real_noise) {
                    train = augment_noise(fd.train, config.noise_per_class, spec.noise_variance,
                                          derive_seed(config.seed, {31, f, rep}), first_new_id);
                } else {
                    train = augment_synthetic(fd.train, gens.at(spec.generator), spec.synth_per_class,
                                              derive_seed(config.seed, {30, f, rep, gen_index(spec.generator)}), first_new_id);
                }
                check_no_leak(train, fd.validation, fd.test);
                report.times.augment_seconds += seconds_since(t0);

                t0 = Clock::now();
                const auto clf_seed = derive_seed(config.seed, {40, f, rep, static_cast<std::uint64_t>(spec.classifier)});
                std::vector<std::size_t> preds;
                if (spec.classifier == ClassifierKind::svm) {
                    auto cfg = config.svm;
                    cfg.seed = clf_seed;
                    const auto svm = classify::LinearSVM::train(train, mask, cfg);
                    report.times.classifier_seconds += seconds_since(t0);
                    t0 = Clock::now();
                    preds = svm.predict(fd.test);
                } else {
                    auto cfg = config.dnn;
                    cfg.seed = clf_seed;
                    const auto dnn = classify::DNNClassifier::train(train, &fd.validation, cfg);
                    report.times.classifier_seconds += seconds_since(t0);
                    t0 = Clock::now();
                    preds = dnn.predict(fd.test);
                }
                CellReport cell;
                cell.fold = f;
                cell.repeat = rep;
                cell.metrics = classify::evaluate(preds, fd.test.labels, C);
                cell.train_real = fd.train.size();
                cell.train_added = train.size() - fd.train.size();
                cell.validation = fd.validation.size();
                cell.test = fd.test.size();
                report.times.evaluate_seconds += seconds_since(t0);
                repeats.push_back(MetricValues::from(cell.metrics));
                report.cells.push_back(std::move(cell));
            }
            report.fold_means.push_back(mean_of(repeats));
        }
    }
    for (auto& report : reports) {
        report.summary = aggregate(report.fold_means);
        std::vector<MetricValues> per_cell;
        for (const auto& c : report.cells) per_cell.push_back(MetricValues::from(c.metrics));
        report.cell_mean = mean_of(per_cell);
    }
    return reports;
}

}  // namespace

RunReport run_regime(const RunSpec& spec, const data::VolumeDataset& dataset, const ExperimentConfig& config,
                     const ProgressFn& progress) {
    return run_rows({spec}, dataset, config, progress).front();
}

std::vector<RunReport> run_sweep(const data::VolumeDataset& dataset, const ExperimentConfig& config,
                                 const ProgressFn& progress) {
    config.validate();
    return run_rows(config.runs(), dataset, config, progress);
}

void write_table(std::ostream& os, const std::vector<RunReport>& runs) {
    os << kTableHeader << '\n';
    for (const auto& r : runs) write_metric_row(os, r.spec.key(), r.summary.mean, "%.4f");
}

void write_variance_table(std::ostream& os, const std::vector<RunReport>& runs) {
    os << kTableHeader << '\n';
    for (const auto& r : runs) write_metric_row(os, r.spec.key(), r.summary.variance, "%.3e");
}

nlohmann::json runs_document(const ExperimentConfig& config, const std::vector<RunReport>& runs) {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : runs) rj.push_back(r.to_json());
    // Where the report was written is not part of the experiment.
    auto cj = config.to_json();
    cj.erase("output_dir");
    return {{"config", cj}, {"runs", rj}};
}

std::vector<RunReport> read_runs_document(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("runs")) throw FormatError("runs document has no 'runs' array");
    std::vector<RunReport> out;
    try {
        for (const auto& r : doc.at("runs")) out.push_back(RunReport::from_json(r));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed runs document: ") + e.what());
    }
    return out;
}

std::vector<CombinedRow> combine_runs(const std::vector<std::vector<RunReport>>& documents) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunReport*>> by_key;
    for (const auto& doc : documents)
        for (const auto& r : doc) {
            const auto key = r.spec.key();
            if (!by_key.count(key)) order.push_back(key);
            by_key[key].push_back(&r);
        }
    std::vector<CombinedRow> out;
    for (const auto& key : order) {
        const auto& reps = by_key[key];
        const std::size_t k = reps.front()->fold_means.size();
        for (const auto* r : reps)
            if (r->fold_means.size() != k) throw ContractError("runs of '" + key + "' have different fold counts");
        std::vector<MetricValues> folds(k);
        for (std::size_t f = 0; f < k; ++f) {
            std::vector<MetricValues> at_f;
            for (const auto* r : reps) at_f.push_back(r->fold_means[f]);
            folds[f] = mean_of(at_f);
        }
        std::vector<MetricValues> means;
        for (const auto* r : reps) means.push_back(r->summary.mean);
        out.push_back({key, reps.size(), aggregate(folds), aggregate(means)});
    }
    return out;
}

void write_report(std::ostream& os, const std::vector<CombinedRow>& rows) {
    os << "# mean\n" << kTableHeader << '\n';
    for (const auto& r : rows) write_metric_row(os, r.key, r.folds.mean, "%.4f");
    os << "\n# variance over folds\n" << kTableHeader << '\n';
    for (const auto& r : rows) write_metric_row(os, r.key, r.folds.variance, "%.3e");
    os << "\n# variance over runs\n" << kTableHeader << ",runs\n";
    for (const auto& r : rows) {
        std::ostringstream line;
        write_metric_row(line, r.key, r.between.variance, "%.3e");
        auto s = line.str();
        s.pop_back();
        os << s << ',' << r.runs << '\n';
    }
}

}  // namespace volsynth::experiment
