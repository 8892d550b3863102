#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/models/architecture.hpp"

namespace volsynth::cvae {

using tensor::BoundParams;
using tensor::ParameterSet;
using tensor::Tensor;
using tensor::Var;

enum class Reconstruction { bernoulli, mse };

struct CVAEConfig {
    std::size_t latent_dim = 128;
    std::size_t batch_size = 50;
    double learning_rate = 1e-4;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    std::vector<std::size_t> channels{16, 32, 64, 128};  // encoder widths, layer 1..4
    Reconstruction reconstruction = Reconstruction::bernoulli;

    void validate() const;
    nlohmann::json to_json() const;
    static CVAEConfig from_json(const nlohmann::json& j);  // unknown keys rejected
};

// Shapes shared by the parameter layout and the forward functions.
struct Architecture {
    CVAEConfig config;
    data::Dims dims{};
    std::size_t num_classes = 0;
    models::ConvPlan plan;

    Architecture(const CVAEConfig& cfg, const data::Dims& volume_dims, std::size_t classes);
    std::size_t flat_features() const;
};

template <typename T>
ParameterSet<T> init_parameters(const Architecture& arch, std::uint64_t seed);
template <typename T>
std::vector<tensor::BatchNormState<T>> init_bn_states(const Architecture& arch);

template <typename T>
struct Encoded {
    Var<T> mu;
    Var<T> logvar;
};

// x [N,1,d,h,w], y [N,classes] -> mu, logvar [N,latent].
template <typename T>
Encoded<T> encode(const Architecture& arch, const BoundParams<T>& p, Var<T> x, Var<T> y);

// mu + exp(0.5 * logvar) * eps.
template <typename T>
Var<T> reparameterize(Var<T> mu, Var<T> logvar, const Tensor<T>& eps);

// Pre-sigmoid decoder output [N,1,d,h,w].
template <typename T>
Var<T> decode_logits(const Architecture& arch, const BoundParams<T>& p, std::vector<tensor::BatchNormState<T>>& bn,
                     Var<T> z, Var<T> y);

template <typename T>
Var<T> decode(const Architecture& arch, const BoundParams<T>& p, std::vector<tensor::BatchNormState<T>>& bn, Var<T> z,
              Var<T> y);

// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar), summed over latent dims and
// averaged over the batch.
template <typename T>
Var<T> kl_divergence(Var<T> mu, Var<T> logvar);

// Bernoulli: sum over voxels of BCE(x, sigmoid(logits)) - H(x), averaged over
// the batch. Subtracting the data entropy H(x) makes the term the Bernoulli
// KL divergence: zero at a perfect fit, same gradients as plain BCE.
// MSE: sum of squared errors of sigmoid(logits), averaged over the batch.
template <typename T>
Var<T> reconstruction_loss(const Tensor<T>& x, Var<T> logits, Reconstruction kind);

template <typename T>
struct LossVars {
    Var<T> reconstruction;
    Var<T> kl;
    Var<T> total;
};

// Negative ELBO. Throws ContractError if x leaves [0,1].
template <typename T>
LossVars<T> elbo_loss(const Tensor<T>& x, Var<T> logits, Var<T> mu, Var<T> logvar, Reconstruction kind);

struct LossParts {
    double reconstruction = 0;
    double kl = 0;
    double total = 0;
};

struct EpochStats {
    LossParts train;
    bool has_validation = false;
    LossParts validation;
};

class CVAE {
public:
    CVAE(const CVAEConfig& config, const data::Dims& dims, std::vector<std::string> class_table);

    // Trains with Adam; the returned model holds the parameters of the epoch
    // with the lowest validation loss (last epoch if no validation set).
    static CVAE train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                      const CVAEConfig& config);

    const Architecture& architecture() const noexcept { return arch_; }
    const ParameterSet<float>& parameters() const noexcept { return params_; }
    ParameterSet<float>& parameters() noexcept { return params_; }
    const std::vector<std::string>& class_table() const noexcept { return class_table_; }
    const std::vector<EpochStats>& history() const noexcept { return history_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }

    // Loss on a dataset in inference mode with the given noise seed.
    LossParts evaluate(const data::VolumeDataset& ds, std::uint64_t seed) const;

    // z ~ N(0, I), decoded in inference mode.
    std::vector<data::Volume> sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const;

    void save(const std::filesystem::path& path) const;
    static CVAE load(const std::filesystem::path& path);

private:
    Architecture arch_;
    std::vector<std::string> class_table_;
    ParameterSet<float> params_;
    std::vector<tensor::BatchNormState<float>> bn_;
    std::vector<EpochStats> history_;
    std::size_t best_epoch_ = 0;
};

}  // namespace volsynth::cvae
