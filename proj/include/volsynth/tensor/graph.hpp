#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "volsynth/tensor/kernels.hpp"
#include "volsynth/tensor/tensor.hpp"

namespace volsynth::tensor {

enum class Mode { training, inference };

enum class OpKind : std::uint8_t {
    constant,
    variable,
    parameter,
    add,
    sub,
    mul,
    div,
    scale,
    add_scalar,
    pow_scalar,
    exp,
    log,
    sqrt,
    half_inv_safe,
    sigmoid,
    tanh,
    softplus,
    relu,
    leaky_relu,
    matmul,
    transpose,
    bias_add,
    channel_sum,
    channel_broadcast,
    sample_sum,
    sample_broadcast,
    sum,
    broadcast_scalar,
    reshape,
    concat_channels,
    slice_channels,
    embed_channels,
    conv3d,
    conv3d_transpose,
    conv3d_kernel_grad,
    logsumexp_rows,
    custom,
};

const char* op_name(OpKind kind);

using NodeId = std::size_t;

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

    bool valid() const noexcept { return graph_ != nullptr; }
    NodeId id() const noexcept { return id_; }
    Graph<T>& graph() const { return *graph_; }
    const Tensor<T>& value() const;
    Shape shape() const { return value().shape(); }  // by value: node storage may move

private:
    Graph<T>* graph_ = nullptr;
    NodeId id_ = 0;
};

// User-defined op with a hand-written backward rule. The backward receives the
// input, the op's output and the upstream gradient, and must build the input
// gradient out of differentiable ops so higher-order gradients keep working.
template <typename T>
struct CustomOp {
    std::string name;
    std::function<Tensor<T>(const Tensor<T>&)> forward;
    std::function<Var<T>(Var<T> input, Var<T> output, Var<T> grad)> backward;
};

template <typename T>
struct OpAttrs {
    T scalar{0};
    std::size_t offset = 0;
    std::size_t count = 0;
    Shape shape;
    ConvGeometry geom;
    Spatial spatial{};
    std::shared_ptr<const CustomOp<T>> custom;
};

template <typename T>
struct Node {
    OpKind kind = OpKind::constant;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    OpAttrs<T> attrs;
    bool requires_grad = false;
    std::string name;  // parameters only
};

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

// Tape of tensor operations. Nodes are appended in evaluation order, so every
// node's inputs have strictly smaller ids. Gradient rules are themselves built
// from recorded ops, which makes gradients differentiable (needed by the
// gradient penalty). Single owner; not safe for concurrent mutation.
template <typename T>
class Graph {
public:
    explicit Graph(Mode mode = Mode::training) : mode_(mode) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Mode mode() const noexcept { return mode_; }
    bool training() const noexcept { return mode_ == Mode::training; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const Node<T>& node(NodeId id) const { return nodes_.at(id); }

    Var<T> constant(Tensor<T> value);
    // Differentiable leaf that is not a trainable parameter (e.g. an interpolate).
    Var<T> variable(Tensor<T> value);
    Var<T> parameter(std::string name, Tensor<T> value);

    // Gradients of a scalar `loss` with respect to `wrt`. With create_graph the
    // returned gradients are ordinary nodes that can be differentiated again.
    std::vector<Var<T>> grad(Var<T> loss, std::span<const Var<T>> wrt, bool create_graph = false);

    // Gradient of a scalar loss for every parameter node, keyed by name.
    // Parameters the loss does not depend on get zeros. Nodes created while
    // differentiating are discarded afterwards.
    Gradients<T> backward(Var<T> loss);

    Var<T> record(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, OpAttrs<T> attrs = {});

private:
    std::vector<Var<T>> differentiate(NodeId loss, const std::vector<bool>& is_target);
    std::vector<Var<T>> backward_rule(NodeId id, Var<T> grad, const std::vector<bool>& need);

    Mode mode_;
    std::vector<Node<T>> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

// ---------------------------------------------------------------------------
// Differentiable primitives.
// ---------------------------------------------------------------------------
namespace ops {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> pow_scalar(Var<T> a, T exponent);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
// Gradient at 0 is taken as 0 (subgradient), so a zero norm stays finite.
template <typename T> Var<T> sqrt(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> softplus(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> leaky_relu(Var<T> a, T alpha);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);

// x [N,C,...] + b[c] broadcast over every axis but 1.
template <typename T> Var<T> bias_add(Var<T> x, Var<T> bias);
// [N,C,...] -> [C]
template <typename T> Var<T> channel_sum(Var<T> x);
template <typename T> Var<T> channel_broadcast(Var<T> c, const Shape& shape);
// [N,...] -> [N,1]
template <typename T> Var<T> sample_sum(Var<T> x);
template <typename T> Var<T> sample_broadcast(Var<T> s, const Shape& shape);
// [...] -> [1]
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> broadcast_scalar(Var<T> s, const Shape& shape);

template <typename T> Var<T> reshape(Var<T> x, const Shape& shape);
template <typename T> Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T> Var<T> slice_channels(Var<T> x, std::size_t offset, std::size_t count);
// Inverse of slice_channels: place x at `offset` inside zero channels.
template <typename T> Var<T> embed_channels(Var<T> x, std::size_t offset, std::size_t total);

template <typename T> Var<T> conv3d(Var<T> input, Var<T> kernel, const ConvGeometry& geom);
template <typename T>
Var<T> conv3d_transpose(Var<T> input, Var<T> kernel, const ConvGeometry& geom, const Spatial& out_spatial);
template <typename T>
Var<T> conv3d_kernel_grad(Var<T> input, Var<T> grad_out, const ConvGeometry& geom, const Spatial& kernel_spatial);

// Row-wise log-sum-exp: [N,M] -> [N,1].
template <typename T> Var<T> logsumexp_rows(Var<T> x);

template <typename T> Var<T> custom(Var<T> x, std::shared_ptr<const CustomOp<T>> op);

}  // namespace ops

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return ops::add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return ops::sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return ops::mul(a, b); }
template <typename T> Var<T> operator*(T c, Var<T> a) { return ops::scale(a, c); }

}  // namespace volsynth::tensor
