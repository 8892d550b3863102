#include "volsynth/tensor/adam.hpp"

#include <cmath>

namespace volsynth::tensor {

template <typename T>
void adam_step(ParameterSet<T>& params, const Gradients<T>& grads, AdamState<T>& state) {
    const AdamConfig& cfg = state.config;
    if (!(cfg.learning_rate > 0.0) || !(cfg.beta1 > 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 > 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.epsilon > 0.0)) {
        throw ContractError("invalid Adam hyperparameters");
    }
    // Validate everything before touching any parameter.
    for (const auto& [name, value] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ContractError("missing gradient for parameter '" + name + "'");
        if (it->second.shape() != value.shape()) {
            throw DimensionError("gradient shape " + to_string(it->second.shape()) + " does not match parameter '" +
                                 name + "' " + to_string(value.shape()));
        }
        if (!it->second.all_finite()) throw PoisonedGradientError(name);
    }

    const std::uint64_t t = state.step_count + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, value] : params) {
        const Tensor<T>& g = grads.at(name);
        auto& m = state.first_moment.try_emplace(name, value.shape()).first->second;
        auto& v = state.second_moment.try_emplace(name, value.shape()).first->second;
        if (m.shape() != value.shape() || v.shape() != value.shape()) {
            throw DimensionError("Adam moments do not match parameter '" + name + "'");
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double step = cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon);
            value[i] = static_cast<T>(static_cast<double>(value[i]) - step);
        }
    }
    state.step_count = t;
}

template void adam_step(ParameterSet<float>&, const Gradients<float>&, AdamState<float>&);
template void adam_step(ParameterSet<double>&, const Gradients<double>&, AdamState<double>&);

}  // namespace volsynth::tensor
