#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "json.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/data/mask.hpp"

namespace volsynth::gmm {

struct EMConfig {
    std::size_t components = 1;
    std::size_t max_iters = 100;
    double tolerance = 1e-6;  // on the mean per-sample log-likelihood
    double variance_floor = 1e-6;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static EMConfig from_json(const nlohmann::json& j);  // unknown keys rejected
};

// Diagonal-covariance mixture over feature vectors.
struct GaussianMixture {
    std::vector<double> weights;                 // [K]
    std::vector<std::vector<double>> means;      // [K][D]
    std::vector<std::vector<double>> variances;  // [K][D]

    std::size_t components() const noexcept { return weights.size(); }
    std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
};

// log sum_k pi_k N(x; mu_k, diag var_k), evaluated with log-sum-exp.
double log_likelihood(const GaussianMixture& m, std::span<const double> x);
// Posterior component probabilities of x.
std::vector<double> responsibilities(const GaussianMixture& m, std::span<const double> x);

struct FitResult {
    GaussianMixture mixture;
    // Mean per-sample log-likelihood before each M-step, plus the final one.
    std::vector<double> log_likelihood_history;
    std::size_t iterations = 0;
    bool converged = false;
};

// EM from a k-means++ initialization. Non-decreasing history (up to rounding).
FitResult em_fit(const std::vector<std::vector<double>>& features, const EMConfig& config);

// Draw n feature vectors.
std::vector<std::vector<double>> sample_mixture(const GaussianMixture& m, std::size_t n, std::uint64_t seed);

// One mixture per class over masked voxels.
class ClassGMM {
public:
    ClassGMM() = default;

    // Fits every class present in `train`; the mask must come from training data.
    static ClassGMM fit(const data::VolumeDataset& train, const data::Mask& mask, const EMConfig& config);

    const data::Mask& mask() const noexcept { return mask_; }
    const EMConfig& config() const noexcept { return config_; }
    const std::vector<std::string>& class_table() const noexcept { return class_table_; }
    std::vector<std::size_t> trained_classes() const;
    const GaussianMixture& mixture(std::size_t class_index) const;
    const FitResult& fit_result(std::size_t class_index) const;

    double log_likelihood(std::size_t class_index, std::span<const double> x) const;

    // Samples scattered into volumes (0 outside the mask) and clamped to [0,1].
    std::vector<data::Volume> sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const;

    void save(const std::filesystem::path& path) const;
    static ClassGMM load(const std::filesystem::path& path);

private:
    data::Mask mask_;
    EMConfig config_;
    std::vector<std::string> class_table_;
    std::map<std::size_t, FitResult> fits_;
};

}  // namespace volsynth::gmm
