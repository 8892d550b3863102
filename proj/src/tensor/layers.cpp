#include "volsynth/tensor/layers.hpp"

#include <cmath>

namespace volsynth::tensor {
namespace nn {

template <typename T>
Var<T> activation(Var<T> x, const Activation& act) {
    switch (act.kind) {
        case ActivationKind::relu: return ops::relu(x);
        case ActivationKind::leaky_relu: return ops::leaky_relu(x, static_cast<T>(act.alpha));
        case ActivationKind::tanh: return ops::tanh(x);
        case ActivationKind::sigmoid: return ops::sigmoid(x);
    }
    throw ContractError("unknown activation");
}

template <typename T>
Var<T> mean(Var<T> x) {
    if (x.value().size() == 0) throw ContractError("mean of an empty tensor");
    return ops::scale(ops::sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> flatten(Var<T> x) {
    const std::size_t N = x.shape().at(0);
    return ops::reshape(x, Shape{N, N == 0 ? 0 : x.value().size() / N});
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias) {
    return ops::bias_add(ops::matmul(x, weight), bias);
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> kernel, Var<T> bias, const ConvGeometry& geom) {
    return ops::bias_add(ops::conv3d(x, kernel, geom), bias);
}

template <typename T>
Var<T> conv3d_transpose(Var<T> x, Var<T> kernel, Var<T> bias, const ConvGeometry& geom, const Spatial& out_spatial) {
    return ops::bias_add(ops::conv3d_transpose(x, kernel, geom, out_spatial), bias);
}

template <typename T>
Var<T> batchnorm3d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state) {
    const Shape s = x.shape();
    if (s.size() < 2) throw DimensionError("batchnorm3d needs rank >= 2, got " + to_string(s));
    const std::size_t C = s[1];
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || state.running_mean.shape() != Shape{C}) {
        throw DimensionError("batchnorm3d parameter mismatch for input " + to_string(s));
    }
    Graph<T>& g = x.graph();
    const T eps = static_cast<T>(state.epsilon);

    if (!g.training()) {
        Tensor<T> inv_std(Shape{C});
        for (std::size_t c = 0; c < C; ++c) inv_std[c] = T{1} / std::sqrt(state.running_var[c] + eps);
        Var<T> centered = ops::sub(x, ops::channel_broadcast(g.constant(state.running_mean), s));
        Var<T> scale = ops::mul(g.constant(std::move(inv_std)), gamma);
        return ops::add(ops::mul(centered, ops::channel_broadcast(scale, s)), ops::channel_broadcast(beta, s));
    }

    const std::size_t per_channel = x.value().size() / C;
    if (per_channel < 2) {
        throw DegenerateBatchError("batchnorm3d in training mode needs >= 2 elements per channel, input " +
                                   to_string(s));
    }
    const T inv_m = T{1} / static_cast<T>(per_channel);
    Var<T> mu = ops::scale(ops::channel_sum(x), inv_m);
    Var<T> centered = ops::sub(x, ops::channel_broadcast(mu, s));
    Var<T> var = ops::scale(ops::channel_sum(ops::mul(centered, centered)), inv_m);
    Var<T> inv_std = ops::pow_scalar(ops::add_scalar(var, eps), T{-0.5});
    Var<T> y = ops::mul(centered, ops::channel_broadcast(ops::mul(inv_std, gamma), s));

    const T m = static_cast<T>(state.momentum);
    for (std::size_t c = 0; c < C; ++c) {
        state.running_mean[c] = m * state.running_mean[c] + (T{1} - m) * mu.value()[c];
        state.running_var[c] = m * state.running_var[c] + (T{1} - m) * var.value()[c];
    }
    return ops::add(y, ops::channel_broadcast(beta, s));
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& one_hot) {
    if (logits.shape() != one_hot.shape() || logits.shape().size() != 2) {
        throw DimensionError("softmax_cross_entropy mismatch: logits " + to_string(logits.shape()) + " vs labels " +
                             to_string(one_hot.shape()));
    }
    Graph<T>& g = logits.graph();
    Var<T> log_probs = ops::sub(logits, ops::sample_broadcast(ops::logsumexp_rows(logits), logits.shape()));
    Var<T> picked = ops::sum(ops::mul(log_probs, g.constant(one_hot)));
    return ops::scale(picked, T{-1} / static_cast<T>(logits.shape()[0]));
}

}  // namespace nn

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
    Graph<T> g(Mode::inference);
    return nn::conv3d(g.constant(input), g.constant(kernel), g.constant(bias), ConvGeometry::uniform(stride, pad))
        .value();
}

template <typename T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                           std::size_t pad) {
    if (input.rank() != 5 || kernel.rank() != 5) {
        throw DimensionError("conv3d_transpose needs rank-5 input and kernel, got " + to_string(input.shape()) +
                             " and " + to_string(kernel.shape()));
    }
    const ConvGeometry geom = ConvGeometry::uniform(stride, pad);
    const Spatial out = conv_transpose_out_spatial(spatial_of(input.shape()), spatial_of(kernel.shape()), geom);
    Graph<T> g(Mode::inference);
    return nn::conv3d_transpose(g.constant(input), g.constant(kernel), g.constant(bias), geom, out).value();
}

template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      Mode mode) {
    Graph<T> g(mode);
    return nn::batchnorm3d(g.constant(input), g.constant(gamma), g.constant(beta), state).value();
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, const Activation& act) {
    Graph<T> g(Mode::inference);
    return nn::activation(g.constant(input), act).value();
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    Graph<T> g(Mode::inference);
    return nn::dense(g.constant(input), g.constant(weight), g.constant(bias)).value();
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T> g(Mode::inference);
    return ops::concat_channels(g.constant(a), g.constant(b)).value();
}

#define VOLSYNTH_INSTANTIATE_LAYERS(T)                                                                         \
    template Var<T> nn::activation(Var<T>, const Activation&);                                                 \
    template Var<T> nn::mean(Var<T>);                                                                          \
    template Var<T> nn::flatten(Var<T>);                                                                       \
    template Var<T> nn::dense(Var<T>, Var<T>, Var<T>);                                                         \
    template Var<T> nn::conv3d(Var<T>, Var<T>, Var<T>, const ConvGeometry&);                                   \
    template Var<T> nn::conv3d_transpose(Var<T>, Var<T>, Var<T>, const ConvGeometry&, const Spatial&);         \
    template Var<T> nn::batchnorm3d(Var<T>, Var<T>, Var<T>, BatchNormState<T>&);                               \
    template Var<T> nn::softmax_cross_entropy(Var<T>, const Tensor<T>&);                                       \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
    template Tensor<T> conv3d_transpose(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                        std::size_t);                                                          \
    template Tensor<T> batchnorm3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,   \
                                   Mode);                                                                      \
    template Tensor<T> activation(const Tensor<T>&, const Activation&);                                        \
    template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);

VOLSYNTH_INSTANTIATE_LAYERS(float)
VOLSYNTH_INSTANTIATE_LAYERS(double)
#undef VOLSYNTH_INSTANTIATE_LAYERS

}  // namespace volsynth::tensor
