#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "volsynth/classify/classifiers.hpp"
#include "volsynth/classify/metrics.hpp"
#include "volsynth/cvae/cvae.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/data/mask.hpp"
#include "volsynth/gan/icwgan.hpp"
#include "volsynth/gmm/gmm.hpp"

namespace volsynth::experiment {

enum class Regime { real, real_noise, real_synth };
enum class GeneratorKind { none, gmm, cvae, icwgan };
enum class ClassifierKind { svm, dnn };
enum class Protocol { kfold, holdout };

// Table labels: "Real", "Real+noise", "Real+Synth"; "-", "GMM", "CVAE",
// "ICW-GAN"; "SVM", "DNN". Parsing also accepts lower-case config names.
std::string to_string(Regime r);
std::string to_string(GeneratorKind g);
std::string to_string(ClassifierKind c);
std::string to_string(Protocol p);
Regime parse_regime(const std::string& s);
GeneratorKind parse_generator(const std::string& s);
ClassifierKind parse_classifier(const std::string& s);
Protocol parse_protocol(const std::string& s);

// Either a manifest on disk or a generated blob fixture.
struct DatasetSource {
    std::filesystem::path manifest;
    std::filesystem::path classes;  // defaults to classes.txt next to the manifest
    std::size_t blob_classes = 4;
    std::size_t blob_per_class = 30;
    data::Dims blob_dims{16, 16, 16};
    std::uint64_t blob_seed = 0;

    bool is_blob() const { return manifest.empty(); }
    data::VolumeDataset load() const;
    nlohmann::json to_json() const;
    static DatasetSource from_json(const nlohmann::json& j);
};

// One row of the comparison table.
struct RunSpec {
    Regime regime = Regime::real;
    GeneratorKind generator = GeneratorKind::none;
    ClassifierKind classifier = ClassifierKind::svm;
    std::size_t synth_per_class = 0;  // > 0 iff regime is real_synth
    double noise_variance = 0;        // > 0 iff regime is real_noise

    // Also checks that the generator is set iff the regime is real_synth.
    void validate() const;
    std::string key() const;  // "input,gen_model,classifier"
    nlohmann::json to_json() const;
};

struct ExperimentConfig {
    DatasetSource dataset;
    Protocol protocol = Protocol::kfold;
    std::size_t folds = 3;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;  // of each k-fold training split
    std::size_t synth_per_class = 100;
    std::size_t noise_per_class = 100;
    std::vector<double> noise_variances{0.01};  // one Real+noise row per value
    bool single_model = false;
    data::MaskStrategy mask_strategy = data::MaskStrategy::nonconstant;
    std::vector<Regime> regimes{Regime::real, Regime::real_noise, Regime::real_synth};
    std::vector<GeneratorKind> generators{GeneratorKind::gmm, GeneratorKind::cvae, GeneratorKind::icwgan};
    std::vector<ClassifierKind> classifiers{ClassifierKind::svm, ClassifierKind::dnn};
    gmm::EMConfig gmm;
    cvae::CVAEConfig cvae;
    gan::GANConfig gan;
    classify::SVMConfig svm;
    classify::DNNConfig dnn;
    std::filesystem::path output_dir = "results";

    void validate() const;
    // Rows in table order: regime, then generator, then classifier.
    std::vector<RunSpec> runs() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);  // unknown keys rejected
    static ExperimentConfig load(const std::filesystem::path& path);
};

struct MetricValues {
    double accuracy = 0;
    double macro_f1 = 0;
    double precision = 0;
    double recall = 0;

    static MetricValues from(const classify::MetricsReport& r);
    nlohmann::json to_json() const;
    static MetricValues from_json(const nlohmann::json& j);
    bool operator==(const MetricValues&) const = default;
};

struct Aggregate {
    MetricValues mean;
    MetricValues variance;  // population (divide by count)
    std::size_t count = 0;
};

// Arithmetic mean and population variance per metric. Throws on an empty input.
Aggregate aggregate(std::span<const MetricValues> values);

// Train/validation/test indices into the (possibly class-filtered) dataset.
struct FoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

// kfold: fold f is the test set and a stratified validation_fraction of the
// rest is held out. holdout: a single split by class size; classes that would
// be dropped must already be removed (see drop_small_classes).
std::vector<FoldSplit> make_splits(const data::VolumeDataset& ds, const ExperimentConfig& config);

// Removes classes with fewer than 30 samples and renumbers the rest.
data::VolumeDataset drop_small_classes(const data::VolumeDataset& ds, std::vector<std::string>* dropped = nullptr);

// A trained class-conditional generator of any kind.
class Generator {
public:
    static Generator train(GeneratorKind kind, const data::VolumeDataset& train_set,
                           const data::VolumeDataset* validation, const ExperimentConfig& config,
                           std::uint64_t seed, data::MaskStrategy mask_strategy);
    GeneratorKind kind() const noexcept { return kind_; }
    std::vector<data::Volume> sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const;

private:
    GeneratorKind kind_ = GeneratorKind::none;
    std::optional<gmm::ClassGMM> gmm_;
    std::optional<cvae::CVAE> cvae_;
    std::optional<gan::ICWGAN> gan_;
};

// Appends `per_class` synthetic volumes per class with ids first_id, first_id+1,
// ... The caller picks first_id above every id of the full dataset.
data::VolumeDataset augment_synthetic(const data::VolumeDataset& train_set, const Generator& generator,
                                      std::size_t per_class, std::uint64_t seed, std::uint64_t first_id);
// Appends `per_class` noisy copies per class of real training volumes, cycling
// through them in a seeded order. Ids as for augment_synthetic.
data::VolumeDataset augment_noise(const data::VolumeDataset& train_set, std::size_t per_class, double variance,
                                  std::uint64_t seed, std::uint64_t first_id);

// One past the largest id in the dataset.
std::uint64_t next_free_id(const data::VolumeDataset& ds);

// Throws LeakError if the validation or test set holds a non-real sample or
// shares an id with a non-real training sample.
void check_no_leak(const data::VolumeDataset& train, const data::VolumeDataset& validation,
                   const data::VolumeDataset& test);

class LeakError : public ContractError {
public:
    using ContractError::ContractError;
};

struct CellReport {
    std::size_t fold = 0;
    std::size_t repeat = 0;
    classify::MetricsReport metrics;
    std::size_t train_real = 0;
    std::size_t train_added = 0;
    std::size_t validation = 0;
    std::size_t test = 0;
};

struct PhaseTimes {
    double generator_seconds = 0;
    double augment_seconds = 0;
    double classifier_seconds = 0;
    double evaluate_seconds = 0;
};

struct RunReport {
    RunSpec spec;
    std::vector<CellReport> cells;           // fold-major, repeats inner
    std::vector<MetricValues> fold_means;    // averaged over repeats
    Aggregate summary;                       // over fold_means
    MetricValues cell_mean;                  // plain mean over cells
    PhaseTimes times;                        // wall clock, not part of to_json

    nlohmann::json to_json() const;
    static RunReport from_json(const nlohmann::json& j);
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains one table row over every fold and repeat.
RunReport run_regime(const RunSpec& spec, const data::VolumeDataset& dataset, const ExperimentConfig& config,
                     const ProgressFn& progress = {});

// All rows. Generators are trained once per fold (or once overall with
// single_model) and shared by the classifiers and repeats of that fold.
std::vector<RunReport> run_sweep(const data::VolumeDataset& dataset, const ExperimentConfig& config,
                                 const ProgressFn& progress = {});

inline constexpr const char* kTableHeader = "input,gen_model,classifier,accuracy,macro_f1,precision,recall";

// Mean table, one row per run.
void write_table(std::ostream& os, const std::vector<RunReport>& runs);
// Variance block: population variance across fold means per row.
void write_variance_table(std::ostream& os, const std::vector<RunReport>& runs);

// runs.json: {"config": ..., "runs": [...]}.
nlohmann::json runs_document(const ExperimentConfig& config, const std::vector<RunReport>& runs);
std::vector<RunReport> read_runs_document(const nlohmann::json& doc);

// Combines stored runs of the same row (e.g. repeated invocations): fold means
// are averaged fold by fold, and the run-level means give a second variance.
struct CombinedRow {
    std::string key;
    std::size_t runs = 0;
    Aggregate folds;    // over fold means averaged across runs
    Aggregate between;  // over the per-run means
};
std::vector<CombinedRow> combine_runs(const std::vector<std::vector<RunReport>>& documents);
void write_report(std::ostream& os, const std::vector<CombinedRow>& rows);

}  // namespace volsynth::experiment
