#pragma once

#include "volsynth/tensor/graph.hpp"

namespace volsynth::tensor {

enum class ActivationKind { relu, leaky_relu, tanh, sigmoid };

struct Activation {
    ActivationKind kind = ActivationKind::relu;
    double alpha = 0.2;  // leaky_relu slope

    static Activation relu() { return {ActivationKind::relu}; }
    static Activation leaky_relu(double alpha = 0.2) { return {ActivationKind::leaky_relu, alpha}; }
    static Activation tanh() { return {ActivationKind::tanh}; }
    static Activation sigmoid() { return {ActivationKind::sigmoid}; }
};

// Running statistics of one batch-norm layer. running <- momentum * running
// + (1 - momentum) * batch; the variance used everywhere is the biased one.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels)
        : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

// Graph-level building blocks composed from the primitives in ops.
namespace nn {

template <typename T> Var<T> activation(Var<T> x, const Activation& act);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> flatten(Var<T> x);  // [N, ...] -> [N, rest]
template <typename T> Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias);
template <typename T> Var<T> conv3d(Var<T> x, Var<T> kernel, Var<T> bias, const ConvGeometry& geom);
template <typename T>
Var<T> conv3d_transpose(Var<T> x, Var<T> kernel, Var<T> bias, const ConvGeometry& geom, const Spatial& out_spatial);

// Training graphs normalize with batch statistics and update `state`;
// inference graphs apply the running statistics and leave `state` untouched.
template <typename T>
Var<T> batchnorm3d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state);

// Mean over the batch of -log softmax(logits)[label]. `one_hot` is [N, classes].
template <typename T> Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& one_hot);

}  // namespace nn

// Eager tensor-level forms of the same layers.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad);
template <typename T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                           std::size_t pad);
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      Mode mode);
template <typename T> Tensor<T> activation(const Tensor<T>& input, const Activation& act);
template <typename T> Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace volsynth::tensor
