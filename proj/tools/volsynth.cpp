#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "volsynth/classify/classifiers.hpp"
#include "volsynth/classify/metrics.hpp"
#include "volsynth/cvae/cvae.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/data/mask.hpp"
#include "volsynth/experiment/harness.hpp"
#include "volsynth/gan/icwgan.hpp"
#include "volsynth/gmm/gmm.hpp"
#include "volsynth/tensor/checkpoint.hpp"
#include "volsynth/util/random.hpp"

namespace fs = std::filesystem;
using namespace volsynth;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

const std::vector<std::string> kSubcommands{"synth-data", "convert",   "train-gmm",    "train-cvae", "train-gan",
                                            "sample",     "train-clf", "augment-eval", "report"};

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(path.string() + " is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot write " + path.string());
    out << text;
}

data::Dims parse_dims(const std::string& s) {
    data::Dims d{};
    std::stringstream ss(s);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i == 3) throw ContractError("dims need exactly three values: " + s);
        try {
            std::size_t used = 0;
            const long v = std::stol(part, &used);
            if (used != part.size() || v <= 0) throw std::invalid_argument(part);
            d[i++] = static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
            throw ContractError("bad dims value '" + part + "' in " + s);
        }
    }
    if (i != 3) throw ContractError("dims need exactly three values: " + s);
    return d;
}

data::VolumeDataset load_data(const fs::path& manifest, const std::string& classes) {
    return data::read_manifest(manifest, classes.empty() ? manifest.parent_path() / "classes.txt" : fs::path(classes));
}

std::size_t resolve_class(const std::vector<std::string>& table, const std::string& name) {
    for (std::size_t i = 0; i < table.size(); ++i)
        if (table[i] == name) return i;
    try {
        std::size_t used = 0;
        const auto v = std::stoul(name, &used);
        if (used == name.size() && v < table.size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UnknownClassError("unknown class '" + name + "'");
}

template <typename Raw>
std::vector<double> read_raw_values(std::istream& in, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsigned char buf[sizeof(Raw)];
        if (!in.read(reinterpret_cast<char*>(buf), sizeof buf)) throw TruncatedError("raw file ends early");
        std::uint64_t bits = 0;
        for (std::size_t b = 0; b < sizeof(Raw); ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        Raw v;
        if constexpr (sizeof(Raw) == 8) {
            std::memcpy(&v, &bits, 8);
        } else if constexpr (sizeof(Raw) == 4) {
            const auto b32 = static_cast<std::uint32_t>(bits);
            std::memcpy(&v, &b32, 4);
        } else if constexpr (sizeof(Raw) == 2) {
            const auto b16 = static_cast<std::uint16_t>(bits);
            std::memcpy(&v, &b16, 2);
        } else {
            v = static_cast<Raw>(bits);
        }
        out[i] = static_cast<double>(v);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw LengthMismatchError("raw file is longer than its dims");
    return out;
}


std::string checkpoint_model(const fs::path& path) {
    const auto header = tensor::read_checkpoint_header(path);
    return header.value("meta", nlohmann::json::object()).value("model", "");
}

void write_samples(const std::vector<std::vector<data::Volume>>& per_class, const std::vector<std::size_t>& classes,
                   const std::vector<std::string>& table, const fs::path& out) {
    data::VolumeDataset ds;
    ds.class_table = table;
    std::uint64_t id = 0;
    for (std::size_t k = 0; k < classes.size(); ++k)
        for (const auto& v : per_class[k]) ds.add(v, classes[k], data::Provenance::synthetic, id++);
    data::write_dataset(ds, out);
}

std::string metrics_row(const std::string& key, const classify::MetricsReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.4f,%.4f,%.4f,%.4f\n", r.accuracy, r.macro_f1, r.precision, r.recall);
    return key + buf;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Class-conditional volume synthesis and augmentation experiments"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "Write a blob fixture dataset as VVOL files plus a manifest");
    std::size_t s_classes = 4, s_per_class = 30;
    std::string s_dims = "16,16,16", s_out;
    std::uint64_t s_seed = 0;
    synth->add_option("--classes", s_classes, "Number of classes")->check(CLI::PositiveNumber);
    synth->add_option("--per-class", s_per_class, "Samples per class")->check(CLI::PositiveNumber);
    synth->add_option("--dims", s_dims, "Volume size d,h,w");
    synth->add_option("--seed", s_seed, "Seed");
    synth->add_option("--out", s_out, "Output directory")->required();

    // convert
    auto* convert = app.add_subcommand("convert", "Convert a raw little-endian volume to VVOL");
    std::string c_in, c_out, c_dims, c_dtype = "float32", c_target;
    bool c_no_normalize = false;
    convert->add_option("--in", c_in, "Raw input file")->required();
    convert->add_option("--out", c_out, "VVOL output file")->required();
    convert->add_option("--dims", c_dims, "Raw volume size d,h,w")->required();
    convert->add_option("--dtype", c_dtype, "uint8|int16|uint16|float32|float64")
        ->check(CLI::IsMember({"uint8", "int16", "uint16", "float32", "float64"}));
    convert->add_option("--target", c_target, "Downsample to d,h,w (box averaging)");
    convert->add_flag("--no-normalize", c_no_normalize, "Skip min-max normalization");

    // train-gmm / train-cvae / train-gan share data options
    std::string t_data, t_classes, t_val, t_config, t_out, t_log, t_mask = "nonconstant";
    std::uint64_t t_seed = 0;
    bool t_seed_set = false;
    auto add_train_options = [&](CLI::App* sub, bool with_validation) {
        sub->add_option("--data", t_data, "Training manifest")->required();
        sub->add_option("--classes", t_classes, "Classes file (default: classes.txt next to the manifest)");
        if (with_validation) sub->add_option("--validation", t_val, "Validation manifest (same classes file)");
        sub->add_option("--config", t_config, "JSON config block for the model");
        sub->add_option("--seed", t_seed, "Seed (overrides the config)")->each([&](const std::string&) { t_seed_set = true; });
        sub->add_option("--out", t_out, "Checkpoint path")->required();
    };
    auto* train_gmm = app.add_subcommand("train-gmm", "Fit per-class Gaussian mixtures over masked voxels");
    add_train_options(train_gmm, false);
    train_gmm->add_option("--mask", t_mask, "nonconstant|background_border");
    auto* train_cvae = app.add_subcommand("train-cvae", "Train the conditional VAE");
    add_train_options(train_cvae, true);
    train_cvae->add_option("--history", t_log, "Write per-epoch losses as CSV");
    auto* train_gan = app.add_subcommand("train-gan", "Train the conditional Wasserstein GAN");
    add_train_options(train_gan, true);
    train_gan->add_option("--log", t_log, "Write the step log as CSV");

    // sample
    auto* sample = app.add_subcommand("sample", "Draw class-conditional samples from a generator checkpoint");
    std::string p_model, p_out;
    std::vector<std::string> p_classes;
    std::size_t p_n = 10;
    std::uint64_t p_seed = 0;
    sample->add_option("--model", p_model, "Generator checkpoint (gmm, cvae or icwgan)")->required();
    sample->add_option("--class", p_classes, "Class name or index (repeatable; default all)");
    sample->add_option("--n", p_n, "Samples per class")->check(CLI::PositiveNumber);
    sample->add_option("--seed", p_seed, "Seed");
    sample->add_option("--out", p_out, "Output directory")->required();

    // train-clf
    auto* train_clf = app.add_subcommand("train-clf", "Train an SVM or DNN classifier");
    std::string k_kind = "svm", k_test, k_report;
    train_clf->add_option("--kind", k_kind, "svm|dnn")->check(CLI::IsMember({"svm", "dnn"}));
    add_train_options(train_clf, true);
    train_clf->add_option("--mask", t_mask, "SVM mask strategy: nonconstant|background_border");
    train_clf->add_option("--test", k_test, "Test manifest to evaluate on");
    train_clf->add_option("--report", k_report, "Write the test metrics row as CSV");

    // augment-eval
    auto* augment = app.add_subcommand("augment-eval", "Run the augmentation comparison sweep");
    std::string a_config, a_out;
    bool a_single = false, a_quiet = false;
    augment->add_option("--config", a_config, "Experiment config (JSON)")->required();
    augment->add_option("--out", a_out, "Output directory (overrides output_dir)");
    augment->add_flag("--single-model", a_single, "Train one generator per kind on the full dataset");
    augment->add_flag("--quiet", a_quiet, "No progress output");

    // report
    auto* report = app.add_subcommand("report", "Aggregate stored runs into mean and variance tables");
    std::vector<std::string> r_runs;
    std::string r_out;
    report->add_option("--runs", r_runs, "runs.json files (one per invocation)")->required();
    report->add_option("--out", r_out, "Write the report here instead of stdout");

    if (argc < 2 || std::find(kSubcommands.begin(), kSubcommands.end(), argv[1]) == kSubcommands.end()) {
        const bool help = argc >= 2 && (std::strcmp(argv[1], "--help") == 0 || std::strcmp(argv[1], "-h") == 0);
        if (!help && argc >= 2) std::cerr << "unknown subcommand '" << argv[1] << "'\n\n";
        std::cerr << app.help();
        return help ? kExitOk : kExitUsage;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitFailure;
    }

    try {
        if (*synth) {
            const auto ds = data::make_blob_dataset(s_classes, s_per_class, parse_dims(s_dims), s_seed);
            data::write_dataset(ds, s_out);
            std::cout << "wrote " << ds.size() << " volumes to " << s_out << "\n";
        } else if (*convert) {
            const auto dims = parse_dims(c_dims);
            std::ifstream in(c_in, std::ios::binary);
            if (!in) throw ContractError("cannot open " + c_in);
            const auto n = data::voxel_count(dims);
            std::vector<double> v;
            if (c_dtype == "uint8") v = read_raw_values<std::uint8_t>(in, n);
            else if (c_dtype == "int16") v = read_raw_values<std::int16_t>(in, n);
            else if (c_dtype == "uint16") v = read_raw_values<std::uint16_t>(in, n);
            else if (c_dtype == "float32") v = read_raw_values<float>(in, n);
            else v = read_raw_values<double>(in, n);
            data::Volume vol(dims, std::move(v));
            if (!c_target.empty()) vol = data::downsample(vol, parse_dims(c_target));
            if (!c_no_normalize) vol = data::normalize_minmax(vol);
            if (fs::path(c_out).has_parent_path()) fs::create_directories(fs::path(c_out).parent_path());
            data::write_volume(vol, c_out);
        } else if (*train_gmm) {
            const auto ds = load_data(t_data, t_classes);
            auto cfg = t_config.empty() ? gmm::EMConfig{} : gmm::EMConfig::from_json(read_json(t_config));
            if (t_seed_set) cfg.seed = t_seed;
            const auto mask = data::compute_mask(ds.volumes, data::parse_mask_strategy(t_mask));
            const auto model = gmm::ClassGMM::fit(ds, mask, cfg);
            model.save(t_out);
            for (auto c : model.trained_classes()) {
                const auto& fr = model.fit_result(c);
                std::cout << ds.class_table[c] << ": " << fr.iterations << " iterations, mean log-likelihood "
                          << fr.log_likelihood_history.back() << "\n";
            }
        } else if (*train_cvae) {
            const auto ds = load_data(t_data, t_classes);
            auto cfg = t_config.empty() ? cvae::CVAEConfig{} : cvae::CVAEConfig::from_json(read_json(t_config));
            if (t_seed_set) cfg.seed = t_seed;
            data::VolumeDataset val;
            if (!t_val.empty()) val = load_data(t_val, t_classes);
            const auto model = cvae::CVAE::train(ds, t_val.empty() ? nullptr : &val, cfg);
            model.save(t_out);
            if (!t_log.empty()) {
                std::ostringstream os;
                os << std::setprecision(10) << "epoch,train_total,train_reconstruction,train_kl,validation_total\n";
                for (std::size_t e = 0; e < model.history().size(); ++e) {
                    const auto& h = model.history()[e];
                    os << e << ',' << h.train.total << ',' << h.train.reconstruction << ',' << h.train.kl << ',';
                    if (h.has_validation) os << h.validation.total;
                    os << '\n';
                }
                write_text(t_log, os.str());
            }
            std::cout << "selected epoch " << model.best_epoch() << "\n";
        } else if (*train_gan) {
            const auto ds = load_data(t_data, t_classes);
            auto cfg = t_config.empty() ? gan::GANConfig{} : gan::GANConfig::from_json(read_json(t_config));
            if (t_seed_set) cfg.seed = t_seed;
            data::VolumeDataset val;
            if (!t_val.empty()) val = load_data(t_val, t_classes);
            const auto model = gan::ICWGAN::train(ds, t_val.empty() ? nullptr : &val, cfg);
            model.save(t_out);
            if (!t_log.empty()) {
                std::ostringstream os;
                gan::write_training_log(os, model.log());
                write_text(t_log, os.str());
            }
            std::cout << "trained " << cfg.epochs << " epochs, " << model.log().size() << " steps\n";
        } else if (*sample) {
            const auto kind = checkpoint_model(p_model);
            std::vector<std::string> table;
            std::function<std::vector<data::Volume>(std::size_t, std::size_t, std::uint64_t)> draw;
            std::optional<gmm::ClassGMM> g;
            std::optional<cvae::CVAE> v;
            std::optional<gan::ICWGAN> w;
            if (kind == "gmm") {
                g = gmm::ClassGMM::load(p_model);
                table = g->class_table();
                draw = [&](std::size_t c, std::size_t n, std::uint64_t s) { return g->sample(c, n, s); };
            } else if (kind == "cvae") {
                v = cvae::CVAE::load(p_model);
                table = v->class_table();
                draw = [&](std::size_t c, std::size_t n, std::uint64_t s) { return v->sample(c, n, s); };
            } else if (kind == "icwgan") {
                w = gan::ICWGAN::load(p_model);
                table = w->class_table();
                draw = [&](std::size_t c, std::size_t n, std::uint64_t s) { return w->sample(c, n, s); };
            } else {
                throw FormatError(p_model + " is not a generator checkpoint (model '" + kind + "')");
            }
            std::vector<std::size_t> classes;
            if (p_classes.empty())
                for (std::size_t c = 0; c < table.size(); ++c) classes.push_back(c);
            for (const auto& name : p_classes) classes.push_back(resolve_class(table, name));
            std::vector<std::vector<data::Volume>> out;
            for (auto c : classes) out.push_back(draw(c, p_n, derive_seed(p_seed, {c})));
            write_samples(out, classes, table, p_out);
            std::cout << "wrote " << p_n * classes.size() << " samples to " << p_out << "\n";
        } else if (*train_clf) {
            const auto ds = load_data(t_data, t_classes);
            data::VolumeDataset val, test;
            if (!t_val.empty()) val = load_data(t_val, t_classes);
            if (!k_test.empty()) test = load_data(k_test, t_classes);
            std::vector<std::size_t> preds;
            if (k_kind == "svm") {
                auto cfg = t_config.empty() ? classify::SVMConfig{} : classify::SVMConfig::from_json(read_json(t_config));
                if (t_seed_set) cfg.seed = t_seed;
                const auto mask = data::compute_mask(ds.volumes, data::parse_mask_strategy(t_mask));
                const auto svm = classify::LinearSVM::train(ds, mask, cfg);
                svm.save(t_out);
                if (!k_test.empty()) preds = svm.predict(test);
            } else {
                auto cfg = t_config.empty() ? classify::DNNConfig{} : classify::DNNConfig::from_json(read_json(t_config));
                if (t_seed_set) cfg.seed = t_seed;
                const auto dnn = classify::DNNClassifier::train(ds, t_val.empty() ? nullptr : &val, cfg);
                dnn.save(t_out);
                if (!k_test.empty()) preds = dnn.predict(test);
            }
            if (!k_test.empty()) {
                const auto r = classify::evaluate(preds, test.labels, ds.num_classes());
                for (const auto& w8 : r.warnings) std::cerr << "warning: " << w8 << "\n";
                const std::string row =
                    metrics_row("Real,-," + std::string(k_kind == "svm" ? "SVM" : "DNN"), r);
                std::cout << experiment::kTableHeader << "\n" << row;
                if (!k_report.empty()) write_text(k_report, std::string(experiment::kTableHeader) + "\n" + row);
            }
        } else if (*augment) {
            auto cfg = experiment::ExperimentConfig::load(a_config);
            if (a_single) cfg.single_model = true;
            if (!a_out.empty()) cfg.output_dir = a_out;
            const auto ds = cfg.dataset.load();
            experiment::ProgressFn progress;
            if (!a_quiet) progress = [](const std::string& m) { std::cerr << m << "\n"; };
            const auto runs = experiment::run_sweep(ds, cfg, progress);
            fs::create_directories(cfg.output_dir);
            write_text(cfg.output_dir / "runs.json", experiment::runs_document(cfg, runs).dump(2) + "\n");
            std::ostringstream table, variance;
            experiment::write_table(table, runs);
            experiment::write_variance_table(variance, runs);
            write_text(cfg.output_dir / "table.csv", table.str());
            write_text(cfg.output_dir / "variance.csv", variance.str());
            // Wall-clock times vary between runs, so they stay out of the reports.
            nlohmann::json times = nlohmann::json::array();
            for (const auto& r : runs) {
                times.push_back({{"key", r.spec.key()},
                                 {"generator_seconds", r.times.generator_seconds},
                                 {"augment_seconds", r.times.augment_seconds},
                                 {"classifier_seconds", r.times.classifier_seconds},
                                 {"evaluate_seconds", r.times.evaluate_seconds}});
            }
            write_text(cfg.output_dir / "timings.json", times.dump(2) + "\n");
            std::cout << table.str();
        } else if (*report) {
            std::vector<std::vector<experiment::RunReport>> docs;
            for (const auto& p : r_runs) docs.push_back(experiment::read_runs_document(read_json(p)));
            std::ostringstream os;
            experiment::write_report(os, experiment::combine_runs(docs));
            if (r_out.empty()) std::cout << os.str();
            else write_text(r_out, os.str());
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
