#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "volsynth/tensor/params.hpp"

namespace volsynth::tensor {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    // Betas used for adversarial training.
    static AdamConfig gan(double lr = 1e-4) { return {lr, 0.5, 0.9, 1e-8}; }
};

template <typename T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step_count = 0;
    std::map<std::string, Tensor<T>> first_moment;
    std::map<std::string, Tensor<T>> second_moment;

    AdamState() = default;
    explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

// One bias-corrected Adam update of every parameter in `params`. Moments are
// created lazily on the first step. Throws PoisonedGradientError naming the
// parameter if its gradient holds NaN/Inf.
template <typename T>
void adam_step(ParameterSet<T>& params, const Gradients<T>& grads, AdamState<T>& state);

extern template void adam_step(ParameterSet<float>&, const Gradients<float>&, AdamState<float>&);
extern template void adam_step(ParameterSet<double>&, const Gradients<double>&, AdamState<double>&);

}  // namespace volsynth::tensor
