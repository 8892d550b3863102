#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "volsynth/data/dataset.hpp"
#include "volsynth/data/mask.hpp"
#include "volsynth/models/architecture.hpp"

namespace volsynth::classify {

// Index of the largest score; an exact tie goes to the lowest index.
std::size_t argmax(std::span<const double> scores);

struct SVMConfig {
    double C = 1.0;  // lambda = 1 / (C * n) in the primal objective
    std::size_t epochs = 50;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SVMConfig from_json(const nlohmann::json& j);
};

// One-vs-rest linear SVM trained by Pegasos-style subgradient steps
// (step 1 / (lambda * t), samples visited in a seeded order each epoch).
// The bias is an extra weight on a constant-1 feature.
class LinearSVM {
public:
    static LinearSVM train(const std::vector<std::vector<double>>& features, std::span<const std::size_t> labels,
                           std::size_t num_classes, const SVMConfig& config);
    // Masks every volume and trains on the valid voxels.
    static LinearSVM train(const data::VolumeDataset& ds, const data::Mask& mask, const SVMConfig& config);

    std::size_t num_classes() const noexcept { return weights_.size(); }
    std::size_t feature_dim() const noexcept { return weights_.empty() ? 0 : weights_[0].size(); }
    const std::vector<std::vector<double>>& weights() const noexcept { return weights_; }
    const std::vector<double>& biases() const noexcept { return biases_; }
    const data::Mask* mask() const noexcept { return has_mask_ ? &mask_ : nullptr; }

    std::vector<double> scores(std::span<const double> features) const;
    std::size_t predict(std::span<const double> features) const;
    std::vector<std::size_t> predict(const data::VolumeDataset& ds) const;  // needs a mask

    void save(const std::filesystem::path& path) const;
    static LinearSVM load(const std::filesystem::path& path);

private:
    std::vector<std::vector<double>> weights_;
    std::vector<double> biases_;
    data::Mask mask_;
    bool has_mask_ = false;
    SVMConfig config_;
};

struct DNNConfig {
    std::vector<std::size_t> channels{16, 32, 64, 128};
    std::size_t batch_size = 50;
    double learning_rate = 1e-3;
    std::size_t epochs = 30;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static DNNConfig from_json(const nlohmann::json& j);
};

struct DNNEpoch {
    double train_loss = 0;
    bool has_validation = false;
    double validation_loss = 0;
    double validation_accuracy = 0;
};

// 4 conv + leaky ReLU(0.2) layers on the discriminator's geometry, no label
// inputs, flatten, dense to class logits. Parameter names clf.conv{l}, clf.out.
template <typename T>
tensor::ParameterSet<T> init_dnn_parameters(const models::ConvPlan& plan, const DNNConfig& config,
                                            std::size_t num_classes, std::uint64_t seed);
template <typename T>
tensor::Var<T> dnn_logits(const models::ConvPlan& plan, const DNNConfig& config,
                          const tensor::BoundParams<T>& p, tensor::Var<T> x);

class DNNClassifier {
public:
    DNNClassifier(const DNNConfig& config, const data::Dims& dims, std::vector<std::string> class_table);

    // Softmax cross-entropy with Adam. With a validation set the epoch with the
    // lowest validation loss is kept; otherwise the last epoch.
    static DNNClassifier train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                               const DNNConfig& config);

    const std::vector<DNNEpoch>& history() const noexcept { return history_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    const std::vector<std::string>& class_table() const noexcept { return class_table_; }
    const tensor::ParameterSet<float>& parameters() const noexcept { return params_; }

    // Mean cross-entropy and argmax predictions in inference mode.
    double loss(const data::VolumeDataset& ds) const;
    std::vector<std::size_t> predict(const data::VolumeDataset& ds) const;
    std::vector<std::size_t> predict(std::span<const data::Volume> volumes) const;

    void save(const std::filesystem::path& path) const;
    static DNNClassifier load(const std::filesystem::path& path);

private:
    tensor::Tensor<float> logits(const tensor::Tensor<float>& batch) const;

    DNNConfig config_;
    data::Dims dims_{};
    std::vector<std::string> class_table_;
    models::ConvPlan plan_;
    tensor::ParameterSet<float> params_;
    std::vector<DNNEpoch> history_;
    std::size_t best_epoch_ = 0;
};

}  // namespace volsynth::classify
