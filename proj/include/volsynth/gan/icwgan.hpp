#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/models/architecture.hpp"

namespace volsynth::gan {

using tensor::BoundParams;
using tensor::ParameterSet;
using tensor::Tensor;
using tensor::Var;

struct GANConfig {
    std::size_t z_dim = 128;
    double lambda_gp = 10.0;
    std::size_t critic_iters = 5;
    std::size_t batch_size = 50;
    double learning_rate = 1e-4;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    std::vector<std::size_t> channels{16, 32, 64, 128};  // discriminator widths, layer 1..4

    void validate() const;
    nlohmann::json to_json() const;
    static GANConfig from_json(const nlohmann::json& j);  // unknown keys rejected
};

struct Architecture {
    GANConfig config;
    data::Dims dims{};
    std::size_t num_classes = 0;
    models::ConvPlan plan;

    Architecture(const GANConfig& cfg, const data::Dims& volume_dims, std::size_t classes);
};

// Generator: gen.fc, gen.label{l}, gen.deconv{l}, gen.bn{l} (l < 3).
// Discriminator: disc.label{l}, disc.conv{l}, disc.out.
template <typename T>
ParameterSet<T> init_generator(const Architecture& arch, std::uint64_t seed);
template <typename T>
ParameterSet<T> init_discriminator(const Architecture& arch, std::uint64_t seed);
template <typename T>
std::vector<tensor::BatchNormState<T>> init_generator_bn(const Architecture& arch);

// [z;y] -> dense -> ReLU seed volume, then per layer: concat projected label
// channel, transposed conv, and BN + ReLU on all but the last layer, whose
// output goes through the sigmoid. Output [N,1,d,h,w] in (0,1).
template <typename T>
Var<T> generator_forward(const Architecture& arch, const BoundParams<T>& p,
                         std::vector<tensor::BatchNormState<T>>& bn, Var<T> z, Var<T> y);

// Per layer: concat projected label channel, conv, leaky ReLU(0.2). The
// flattened features are joined with y and mapped to one linear score [N,1].
template <typename T>
Var<T> discriminator_forward(const Architecture& arch, const BoundParams<T>& p, Var<T> x, Var<T> y);

// eps * real + (1 - eps) * fake per sample; eps has one entry per sample.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& real, const Tensor<T>& fake, std::span<const T> eps);

template <typename T>
using Critic = std::function<Var<T>(Var<T> x, Var<T> y)>;

// mean over samples of (||grad_x D(x_hat|y)||_2 - 1)^2. The result stays
// differentiable w.r.t. the critic's parameters. x_hat must be a graph variable.
template <typename T>
Var<T> gradient_penalty(const Critic<T>& critic, Var<T> x_hat, Var<T> y);

template <typename T>
struct CriticLoss {
    Var<T> fake_term;  // E[D(fake)]
    Var<T> real_term;  // E[D(real)]
    Var<T> penalty;    // E[(||grad|| - 1)^2], before lambda
    Var<T> total;      // fake - real + lambda * penalty
};

template <typename T>
CriticLoss<T> critic_loss(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                          const Tensor<T>& labels, std::span<const T> eps, double lambda, tensor::Graph<T>& g);

// -E[D(fake)].
template <typename T>
Var<T> generator_loss(const Critic<T>& critic, Var<T> fake, Var<T> y);

struct StepLog {
    std::size_t step = 0;
    enum class Role { critic, gen } role = Role::critic;
    double loss = 0;
    double penalty_term = 0;  // lambda * penalty for critic steps, 0 for generator steps
};

// `step,role,loss,penalty_term` with a header line.
void write_training_log(std::ostream& os, const std::vector<StepLog>& log);

class ICWGAN {
public:
    ICWGAN(const GANConfig& config, const data::Dims& dims, std::vector<std::string> class_table);

    // Alternating training; the returned generator is the last epoch's. With a
    // validation set, the Wasserstein estimate on it is recorded per epoch.
    static ICWGAN train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                        const GANConfig& config);

    const Architecture& architecture() const noexcept { return arch_; }
    const ParameterSet<float>& generator() const noexcept { return gen_; }
    const ParameterSet<float>& discriminator() const noexcept { return disc_; }
    const std::vector<std::string>& class_table() const noexcept { return class_table_; }
    const std::vector<StepLog>& log() const noexcept { return log_; }
    std::size_t selected_epoch() const noexcept { return selected_epoch_; }
    const std::vector<double>& validation_wasserstein() const noexcept { return validation_w_; }

    // E[D(real)] - E[D(G(z))] in inference mode, fakes conditioned on the
    // real labels, z drawn from `seed`.
    double wasserstein_estimate(const data::VolumeDataset& ds, std::uint64_t seed) const;

    std::vector<data::Volume> sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const;

    void save(const std::filesystem::path& path) const;
    static ICWGAN load(const std::filesystem::path& path);

private:
    Architecture arch_;
    std::vector<std::string> class_table_;
    ParameterSet<float> gen_;
    ParameterSet<float> disc_;
    std::vector<tensor::BatchNormState<float>> bn_;
    std::vector<StepLog> log_;
    std::size_t selected_epoch_ = 0;
    std::vector<double> validation_w_;
};

}  // namespace volsynth::gan
