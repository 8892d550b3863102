#include "volsynth/tensor/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace volsynth::tensor {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::constant: return "constant";
        case OpKind::variable: return "variable";
        case OpKind::parameter: return "parameter";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::scale: return "scale";
        case OpKind::add_scalar: return "add_scalar";
        case OpKind::pow_scalar: return "pow_scalar";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::sqrt: return "sqrt";
        case OpKind::half_inv_safe: return "half_inv_safe";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::tanh: return "tanh";
        case OpKind::softplus: return "softplus";
        case OpKind::relu: return "relu";
        case OpKind::leaky_relu: return "leaky_relu";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::bias_add: return "bias_add";
        case OpKind::channel_sum: return "channel_sum";
        case OpKind::channel_broadcast: return "channel_broadcast";
        case OpKind::sample_sum: return "sample_sum";
        case OpKind::sample_broadcast: return "sample_broadcast";
        case OpKind::sum: return "sum";
        case OpKind::broadcast_scalar: return "broadcast_scalar";
        case OpKind::reshape: return "reshape";
        case OpKind::concat_channels: return "concat_channels";
        case OpKind::slice_channels: return "slice_channels";
        case OpKind::embed_channels: return "embed_channels";
        case OpKind::conv3d: return "conv3d";
        case OpKind::conv3d_transpose: return "conv3d_transpose";
        case OpKind::conv3d_kernel_grad: return "conv3d_kernel_grad";
        case OpKind::logsumexp_rows: return "logsumexp_rows";
        case OpKind::custom: return "custom";
    }
    return "unknown";
}

namespace {

// Wider accumulator for reductions, so long sums round once at the end.
template <typename T>
using Accum = std::conditional_t<std::is_same_v<T, float>, double, long double>;

bool is_leaf(OpKind kind) {
    return kind == OpKind::constant || kind == OpKind::variable || kind == OpKind::parameter;
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + " shape mismatch: " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

// [N, C, inner...] decomposition used by the channel ops.
struct ChannelLayout {
    std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Shape& s, const char* what) {
    if (s.size() < 2) {
        throw DimensionError(std::string(what) + " needs rank >= 2, got " + to_string(s));
    }
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
    return {s[0], s[1], inner};
}

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b) {
    if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
    return a.graph();
}

}  // namespace

template <typename T>
const Tensor<T>& Var<T>::value() const {
    if (!graph_) throw ContractError("use of an empty Var");
    return graph_->node(id_).value;
}

template class Var<float>;
template class Var<double>;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::record(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, OpAttrs<T> attrs) {
    if (!value.all_finite()) {
        throw NonFiniteError(std::string("non-finite values at ") + op_name(kind) + " output of shape " +
                             to_string(value.shape()));
    }
    Node<T> node;
    node.kind = kind;
    node.inputs = std::move(inputs);
    node.value = std::move(value);
    node.attrs = std::move(attrs);
    if (kind == OpKind::variable || kind == OpKind::parameter) {
        node.requires_grad = true;
    } else {
        for (NodeId in : node.inputs) {
            if (in >= nodes_.size()) throw ContractError("op input refers to a later node");
            node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
        }
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    return record(OpKind::constant, {}, std::move(value));
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
    return record(OpKind::variable, {}, std::move(value));
}

template <typename T>
Var<T> Graph<T>::parameter(std::string name, Tensor<T> value) {
    Var<T> v = record(OpKind::parameter, {}, std::move(value));
    nodes_.back().name = std::move(name);
    return v;
}

template <typename T>
std::vector<Var<T>> Graph<T>::differentiate(NodeId loss, const std::vector<bool>& is_target) {
    if (mode_ != Mode::training) {
        throw ContractError("gradient unavailable: graph built in inference mode");
    }
    if (loss >= nodes_.size()) throw ContractError("loss node does not belong to this graph");
    if (nodes_[loss].value.size() != 1) {
        throw ContractError("loss must be scalar, got shape " + to_string(nodes_[loss].value.shape()));
    }
    const std::size_t n = loss + 1;
    // need[i]: node i depends on some target, so gradient must flow through it.
    std::vector<bool> need(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        if (is_target[i]) {
            need[i] = true;
            continue;
        }
        if (!nodes_[i].requires_grad) continue;
        for (NodeId in : nodes_[i].inputs) {
            if (need[in]) {
                need[i] = true;
                break;
            }
        }
    }

    std::vector<std::optional<NodeId>> grads(n);
    if (need[loss]) {
        grads[loss] = constant(Tensor<T>(nodes_[loss].value.shape(), T{1})).id();
    }
    for (std::size_t step = 0; step < n; ++step) {
        const NodeId i = loss - step;
        if (!grads[i] || !need[i] || is_leaf(nodes_[i].kind)) continue;
        const std::vector<NodeId> inputs = nodes_[i].inputs;
        std::vector<bool> input_need(inputs.size());
        for (std::size_t j = 0; j < inputs.size(); ++j) input_need[j] = need[inputs[j]];
        std::vector<Var<T>> gin = backward_rule(i, Var<T>(this, *grads[i]), input_need);
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            if (!input_need[j] || !gin[j].valid()) continue;
            const NodeId target = inputs[j];
            if (grads[target]) {
                grads[target] = ops::add(Var<T>(this, *grads[target]), gin[j]).id();
            } else {
                grads[target] = gin[j].id();
            }
        }
    }
    std::vector<Var<T>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (is_target[i] && grads[i]) out[i] = Var<T>(this, *grads[i]);
    }
    return out;
}

template <typename T>
std::vector<Var<T>> Graph<T>::grad(Var<T> loss, std::span<const Var<T>> wrt, bool create_graph) {
    if (&loss.graph() != this) throw ContractError("loss node does not belong to this graph");
    const std::size_t original = nodes_.size();
    std::vector<bool> is_target(loss.id() + 1, false);
    for (const Var<T>& w : wrt) {
        if (&w.graph() != this) throw ContractError("gradient target does not belong to this graph");
        if (w.id() <= loss.id()) is_target[w.id()] = true;
    }
    std::vector<Var<T>> all = differentiate(loss.id(), is_target);

    std::vector<Tensor<T>> detached;
    std::vector<Var<T>> result;
    result.reserve(wrt.size());
    for (const Var<T>& w : wrt) {
        const bool have = w.id() <= loss.id() && all[w.id()].valid();
        if (create_graph) {
            result.push_back(have ? all[w.id()] : constant(Tensor<T>(w.shape())));
        } else {
            detached.push_back(have ? all[w.id()].value() : Tensor<T>(w.shape()));
        }
    }
    if (!create_graph) {
        nodes_.resize(original);
        for (Tensor<T>& t : detached) result.push_back(constant(std::move(t)));
    }
    return result;
}

template <typename T>
Gradients<T> Graph<T>::backward(Var<T> loss) {
    if (&loss.graph() != this) throw ContractError("loss node does not belong to this graph");
    const std::size_t original = nodes_.size();
    std::vector<bool> is_target(loss.id() + 1, false);
    for (NodeId i = 0; i <= loss.id(); ++i) is_target[i] = nodes_[i].kind == OpKind::parameter;
    std::vector<Var<T>> all = differentiate(loss.id(), is_target);

    Gradients<T> out;
    for (NodeId i = 0; i < original; ++i) {
        const Node<T>& node = nodes_[i];
        if (node.kind != OpKind::parameter) continue;
        const bool have = i <= loss.id() && all[i].valid();
        auto it = out.find(node.name);
        if (it == out.end()) {
            out.emplace(node.name, have ? all[i].value() : Tensor<T>(node.value.shape()));
        } else if (have) {
            const Tensor<T>& g = all[i].value();
            for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
        }
    }
    nodes_.resize(original);
    return out;
}

template <typename T>
std::vector<Var<T>> Graph<T>::backward_rule(NodeId id, Var<T> g, const std::vector<bool>& need) {
    // Copy what we need: recording new nodes may reallocate nodes_.
    const OpKind kind = nodes_[id].kind;
    const std::vector<NodeId> in = nodes_[id].inputs;
    const OpAttrs<T> attrs = nodes_[id].attrs;
    const Var<T> out(this, id);
    auto input = [&](std::size_t j) { return Var<T>(this, in[j]); };
    std::vector<Var<T>> r(in.size());

    switch (kind) {
        case OpKind::add:
            r[0] = g;
            r[1] = g;
            break;
        case OpKind::sub:
            r[0] = g;
            if (need[1]) r[1] = ops::scale(g, T{-1});
            break;
        case OpKind::mul:
            if (need[0]) r[0] = ops::mul(g, input(1));
            if (need[1]) r[1] = ops::mul(g, input(0));
            break;
        case OpKind::div:
            if (need[0]) r[0] = ops::div(g, input(1));
            if (need[1]) r[1] = ops::scale(ops::div(ops::mul(g, out), input(1)), T{-1});
            break;
        case OpKind::scale:
            r[0] = ops::scale(g, attrs.scalar);
            break;
        case OpKind::add_scalar:
            r[0] = g;
            break;
        case OpKind::pow_scalar:
            r[0] = ops::mul(g, ops::scale(ops::pow_scalar(input(0), attrs.scalar - T{1}), attrs.scalar));
            break;
        case OpKind::exp:
            r[0] = ops::mul(g, out);
            break;
        case OpKind::log:
            r[0] = ops::div(g, input(0));
            break;
        case OpKind::sqrt: {
            Tensor<T> v = map_unary(out.value(), [](T o) { return o > T{0} ? T{0.5} / o : T{0}; });
            Var<T> half_inv = record(OpKind::half_inv_safe, {id}, std::move(v));
            r[0] = ops::mul(g, half_inv);
            break;
        }
        case OpKind::half_inv_safe:
            r[0] = ops::mul(g, ops::scale(ops::mul(out, out), T{-2}));
            break;
        case OpKind::sigmoid:
            r[0] = ops::mul(g, ops::mul(out, ops::add_scalar(ops::scale(out, T{-1}), T{1})));
            break;
        case OpKind::tanh:
            r[0] = ops::mul(g, ops::add_scalar(ops::scale(ops::mul(out, out), T{-1}), T{1}));
            break;
        case OpKind::softplus:
            r[0] = ops::mul(g, ops::sigmoid(input(0)));
            break;
        case OpKind::relu: {
            Tensor<T> mask = map_unary(input(0).value(), [](T x) { return x > T{0} ? T{1} : T{0}; });
            r[0] = ops::mul(g, constant(std::move(mask)));
            break;
        }
        case OpKind::leaky_relu: {
            const T alpha = attrs.scalar;
            Tensor<T> slope = map_unary(input(0).value(), [alpha](T x) { return x > T{0} ? T{1} : alpha; });
            r[0] = ops::mul(g, constant(std::move(slope)));
            break;
        }
        case OpKind::matmul:
            if (need[0]) r[0] = ops::matmul(g, ops::transpose(input(1)));
            if (need[1]) r[1] = ops::matmul(ops::transpose(input(0)), g);
            break;
        case OpKind::transpose:
            r[0] = ops::transpose(g);
            break;
        case OpKind::bias_add:
            r[0] = g;
            if (need[1]) r[1] = ops::channel_sum(g);
            break;
        case OpKind::channel_sum:
            r[0] = ops::channel_broadcast(g, input(0).shape());
            break;
        case OpKind::channel_broadcast:
            r[0] = ops::channel_sum(g);
            break;
        case OpKind::sample_sum:
            r[0] = ops::sample_broadcast(g, input(0).shape());
            break;
        case OpKind::sample_broadcast:
            r[0] = ops::sample_sum(g);
            break;
        case OpKind::sum:
            r[0] = ops::broadcast_scalar(g, input(0).shape());
            break;
        case OpKind::broadcast_scalar:
            r[0] = ops::sum(g);
            break;
        case OpKind::reshape:
            r[0] = ops::reshape(g, input(0).shape());
            break;
        case OpKind::concat_channels: {
            const std::size_t ca = input(0).shape()[1];
            const std::size_t cb = input(1).shape()[1];
            if (need[0]) r[0] = ops::slice_channels(g, 0, ca);
            if (need[1]) r[1] = ops::slice_channels(g, ca, cb);
            break;
        }
        case OpKind::slice_channels:
            r[0] = ops::embed_channels(g, attrs.offset, input(0).shape()[1]);
            break;
        case OpKind::embed_channels:
            r[0] = ops::slice_channels(g, attrs.offset, input(0).shape()[1]);
            break;
        case OpKind::conv3d:
            if (need[0]) r[0] = ops::conv3d_transpose(g, input(1), attrs.geom, spatial_of(input(0).shape()));
            if (need[1]) r[1] = ops::conv3d_kernel_grad(input(0), g, attrs.geom, spatial_of(input(1).shape()));
            break;
        case OpKind::conv3d_transpose:
            if (need[0]) r[0] = ops::conv3d(g, input(1), attrs.geom);
            if (need[1]) r[1] = ops::conv3d_kernel_grad(g, input(0), attrs.geom, spatial_of(input(1).shape()));
            break;
        case OpKind::conv3d_kernel_grad:
            if (need[0]) r[0] = ops::conv3d_transpose(input(1), g, attrs.geom, spatial_of(input(0).shape()));
            if (need[1]) r[1] = ops::conv3d(input(0), g, attrs.geom);
            break;
        case OpKind::logsumexp_rows: {
            const Shape s = input(0).shape();
            r[0] = ops::mul(ops::sample_broadcast(g, s), ops::exp(ops::sub(input(0), ops::sample_broadcast(out, s))));
            break;
        }
        case OpKind::custom:
            r[0] = attrs.custom->backward(input(0), out, g);
            break;
        case OpKind::constant:
        case OpKind::variable:
        case OpKind::parameter:
            break;
    }
    return r;
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------
namespace ops {

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    return g.record(OpKind::add, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::plus<T>{}, "add"));
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    return g.record(OpKind::sub, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::minus<T>{}, "sub"));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    return g.record(OpKind::mul, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::multiplies<T>{}, "mul"));
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    return g.record(OpKind::div, {a.id(), b.id()}, map_binary(a.value(), b.value(), std::divides<T>{}, "div"));
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    OpAttrs<T> attrs;
    attrs.scalar = factor;
    return a.graph().record(OpKind::scale, {a.id()}, map_unary(a.value(), [factor](T x) { return x * factor; }),
                            std::move(attrs));
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
    OpAttrs<T> attrs;
    attrs.scalar = offset;
    return a.graph().record(OpKind::add_scalar, {a.id()},
                            map_unary(a.value(), [offset](T x) { return x + offset; }), std::move(attrs));
}

template <typename T>
Var<T> pow_scalar(Var<T> a, T exponent) {
    OpAttrs<T> attrs;
    attrs.scalar = exponent;
    return a.graph().record(OpKind::pow_scalar, {a.id()},
                            map_unary(a.value(), [exponent](T x) { return std::pow(x, exponent); }),
                            std::move(attrs));
}

template <typename T>
Var<T> exp(Var<T> a) {
    return a.graph().record(OpKind::exp, {a.id()}, map_unary(a.value(), [](T x) { return std::exp(x); }));
}

template <typename T>
Var<T> log(Var<T> a) {
    return a.graph().record(OpKind::log, {a.id()}, map_unary(a.value(), [](T x) { return std::log(x); }));
}

template <typename T>
Var<T> sqrt(Var<T> a) {
    return a.graph().record(OpKind::sqrt, {a.id()}, map_unary(a.value(), [](T x) { return std::sqrt(x); }));
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return a.graph().record(OpKind::sigmoid, {a.id()}, map_unary(a.value(), [](T x) {
                                if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
                                const T e = std::exp(x);
                                return e / (T{1} + e);
                            }));
}

template <typename T>
Var<T> tanh(Var<T> a) {
    return a.graph().record(OpKind::tanh, {a.id()}, map_unary(a.value(), [](T x) { return std::tanh(x); }));
}

template <typename T>
Var<T> softplus(Var<T> a) {
    return a.graph().record(OpKind::softplus, {a.id()}, map_unary(a.value(), [](T x) {
                                return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
                            }));
}

template <typename T>
Var<T> relu(Var<T> a) {
    return a.graph().record(OpKind::relu, {a.id()}, map_unary(a.value(), [](T x) { return x > T{0} ? x : T{0}; }));
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T alpha) {
    if (!(alpha > T{0} && alpha < T{1})) throw ContractError("leaky_relu alpha must lie in (0,1)");
    OpAttrs<T> attrs;
    attrs.scalar = alpha;
    return a.graph().record(OpKind::leaky_relu, {a.id()},
                            map_unary(a.value(), [alpha](T x) { return x > T{0} ? x : alpha * x; }),
                            std::move(attrs));
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    return g.record(OpKind::matmul, {a.id(), b.id()}, tensor::matmul(a.value(), b.value()));
}

template <typename T>
Var<T> transpose(Var<T> a) {
    return a.graph().record(OpKind::transpose, {a.id()}, transpose2d(a.value()));
}

template <typename T>
Var<T> bias_add(Var<T> x, Var<T> bias) {
    auto& g = same_graph(x, bias);
    const auto L = channel_layout(x.shape(), "bias_add");
    if (bias.shape() != Shape{L.channels}) {
        throw DimensionError("bias_add mismatch: input " + to_string(x.shape()) + " vs bias " +
                             to_string(bias.shape()));
    }
    Tensor<T> out = x.value();
    const auto& b = bias.value();
    for (std::size_t n = 0; n < L.outer; ++n)
        for (std::size_t c = 0; c < L.channels; ++c) {
            T* p = out.data().data() + (n * L.channels + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) p[i] += b[c];
        }
    return g.record(OpKind::bias_add, {x.id(), bias.id()}, std::move(out));
}

template <typename T>
Var<T> channel_sum(Var<T> x) {
    const auto L = channel_layout(x.shape(), "channel_sum");
    Tensor<T> out(Shape{L.channels});
    const auto& v = x.value();
    for (std::size_t n = 0; n < L.outer; ++n)
        for (std::size_t c = 0; c < L.channels; ++c) {
            const T* p = v.data().data() + (n * L.channels + c) * L.inner;
            Accum<T> acc{0};
            for (std::size_t i = 0; i < L.inner; ++i) acc += p[i];
            out[c] += static_cast<T>(acc);
        }
    return x.graph().record(OpKind::channel_sum, {x.id()}, std::move(out));
}

template <typename T>
Var<T> channel_broadcast(Var<T> c, const Shape& shape) {
    const auto L = channel_layout(shape, "channel_broadcast");
    if (c.shape() != Shape{L.channels}) {
        throw DimensionError("channel_broadcast mismatch: " + to_string(c.shape()) + " into " + to_string(shape));
    }
    Tensor<T> out(shape);
    for (std::size_t n = 0; n < L.outer; ++n)
        for (std::size_t ch = 0; ch < L.channels; ++ch) {
            T* p = out.data().data() + (n * L.channels + ch) * L.inner;
            std::fill(p, p + L.inner, c.value()[ch]);
        }
    OpAttrs<T> attrs;
    attrs.shape = shape;
    return c.graph().record(OpKind::channel_broadcast, {c.id()}, std::move(out), std::move(attrs));
}

template <typename T>
Var<T> sample_sum(Var<T> x) {
    if (x.shape().empty()) throw DimensionError("sample_sum needs rank >= 1");
    const std::size_t N = x.shape()[0];
    const std::size_t inner = N == 0 ? 0 : x.value().size() / N;
    Tensor<T> out(Shape{N, 1});
    for (std::size_t n = 0; n < N; ++n) {
        Accum<T> acc{0};
        for (std::size_t i = 0; i < inner; ++i) acc += x.value()[n * inner + i];
        out[n] = static_cast<T>(acc);
    }
    return x.graph().record(OpKind::sample_sum, {x.id()}, std::move(out));
}

template <typename T>
Var<T> sample_broadcast(Var<T> s, const Shape& shape) {
    if (shape.empty() || s.shape() != Shape{shape[0], 1}) {
        throw DimensionError("sample_broadcast mismatch: " + to_string(s.shape()) + " into " + to_string(shape));
    }
    Tensor<T> out(shape);
    const std::size_t N = shape[0];
    const std::size_t inner = N == 0 ? 0 : out.size() / N;
    for (std::size_t n = 0; n < N; ++n)
        std::fill(out.data().begin() + static_cast<std::ptrdiff_t>(n * inner),
                  out.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * inner), s.value()[n]);
    OpAttrs<T> attrs;
    attrs.shape = shape;
    return s.graph().record(OpKind::sample_broadcast, {s.id()}, std::move(out), std::move(attrs));
}

template <typename T>
Var<T> sum(Var<T> x) {
    Accum<T> acc{0};
    for (T v : x.value().data()) acc += v;
    return x.graph().record(OpKind::sum, {x.id()}, Tensor<T>::scalar(static_cast<T>(acc)));
}

template <typename T>
Var<T> broadcast_scalar(Var<T> s, const Shape& shape) {
    if (s.value().size() != 1) throw DimensionError("broadcast_scalar needs a scalar, got " + to_string(s.shape()));
    OpAttrs<T> attrs;
    attrs.shape = shape;
    return s.graph().record(OpKind::broadcast_scalar, {s.id()}, Tensor<T>(shape, s.value()[0]), std::move(attrs));
}

template <typename T>
Var<T> reshape(Var<T> x, const Shape& shape) {
    OpAttrs<T> attrs;
    attrs.shape = shape;
    return x.graph().record(OpKind::reshape, {x.id()}, x.value().reshaped(shape), std::move(attrs));
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    auto& g = same_graph(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0];
    for (std::size_t i = 2; ok && i < sa.size(); ++i) ok = sa[i] == sb[i];
    if (!ok) {
        throw DimensionError("concat_channels spatial mismatch: " + to_string(sa) + " vs " + to_string(sb));
    }
    const auto La = channel_layout(sa, "concat_channels");
    const std::size_t cb = sb[1];
    Shape so = sa;
    so[1] = La.channels + cb;
    Tensor<T> out(so);
    const std::size_t block_a = La.channels * La.inner;
    const std::size_t block_b = cb * La.inner;
    for (std::size_t n = 0; n < La.outer; ++n) {
        T* dst = out.data().data() + n * (block_a + block_b);
        std::copy_n(a.value().data().data() + n * block_a, block_a, dst);
        std::copy_n(b.value().data().data() + n * block_b, block_b, dst + block_a);
    }
    return g.record(OpKind::concat_channels, {a.id(), b.id()}, std::move(out));
}

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t offset, std::size_t count) {
    const auto L = channel_layout(x.shape(), "slice_channels");
    if (offset + count > L.channels) {
        throw DimensionError("slice_channels range exceeds " + to_string(x.shape()));
    }
    Shape so = x.shape();
    so[1] = count;
    Tensor<T> out(so);
    for (std::size_t n = 0; n < L.outer; ++n)
        std::copy_n(x.value().data().data() + (n * L.channels + offset) * L.inner, count * L.inner,
                    out.data().data() + n * count * L.inner);
    OpAttrs<T> attrs;
    attrs.offset = offset;
    attrs.count = count;
    return x.graph().record(OpKind::slice_channels, {x.id()}, std::move(out), std::move(attrs));
}

template <typename T>
Var<T> embed_channels(Var<T> x, std::size_t offset, std::size_t total) {
    const auto L = channel_layout(x.shape(), "embed_channels");
    if (offset + L.channels > total) {
        throw DimensionError("embed_channels range exceeds " + std::to_string(total) + " channels");
    }
    Shape so = x.shape();
    so[1] = total;
    Tensor<T> out(so);
    for (std::size_t n = 0; n < L.outer; ++n)
        std::copy_n(x.value().data().data() + n * L.channels * L.inner, L.channels * L.inner,
                    out.data().data() + (n * total + offset) * L.inner);
    OpAttrs<T> attrs;
    attrs.offset = offset;
    attrs.count = total;
    return x.graph().record(OpKind::embed_channels, {x.id()}, std::move(out), std::move(attrs));
}

template <typename T>
Var<T> conv3d(Var<T> input, Var<T> kernel, const ConvGeometry& geom) {
    auto& g = same_graph(input, kernel);
    OpAttrs<T> attrs;
    attrs.geom = geom;
    return g.record(OpKind::conv3d, {input.id(), kernel.id()}, conv3d_forward(input.value(), kernel.value(), geom),
                    std::move(attrs));
}

template <typename T>
Var<T> conv3d_transpose(Var<T> input, Var<T> kernel, const ConvGeometry& geom, const Spatial& out_spatial) {
    auto& g = same_graph(input, kernel);
    OpAttrs<T> attrs;
    attrs.geom = geom;
    attrs.spatial = out_spatial;
    return g.record(OpKind::conv3d_transpose, {input.id(), kernel.id()},
                    conv3d_transpose_forward(input.value(), kernel.value(), geom, out_spatial), std::move(attrs));
}

template <typename T>
Var<T> conv3d_kernel_grad(Var<T> input, Var<T> grad_out, const ConvGeometry& geom, const Spatial& kernel_spatial) {
    auto& g = same_graph(input, grad_out);
    OpAttrs<T> attrs;
    attrs.geom = geom;
    attrs.spatial = kernel_spatial;
    return g.record(OpKind::conv3d_kernel_grad, {input.id(), grad_out.id()},
                    tensor::conv3d_kernel_grad(input.value(), grad_out.value(), geom, kernel_spatial),
                    std::move(attrs));
}

template <typename T>
Var<T> logsumexp_rows(Var<T> x) {
    if (x.shape().size() != 2) throw DimensionError("logsumexp_rows needs [N,M], got " + to_string(x.shape()));
    const std::size_t N = x.shape()[0], M = x.shape()[1];
    Tensor<T> out(Shape{N, 1});
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = x.value().data().data() + n * M;
        const T mx = *std::max_element(row, row + M);
        T acc{0};
        for (std::size_t m = 0; m < M; ++m) acc += std::exp(row[m] - mx);
        out[n] = mx + std::log(acc);
    }
    return x.graph().record(OpKind::logsumexp_rows, {x.id()}, std::move(out));
}

template <typename T>
Var<T> custom(Var<T> x, std::shared_ptr<const CustomOp<T>> op) {
    if (!op || !op->forward || !op->backward) throw ContractError("custom op needs forward and backward");
    OpAttrs<T> attrs;
    Tensor<T> value = op->forward(x.value());
    attrs.custom = std::move(op);
    return x.graph().record(OpKind::custom, {x.id()}, std::move(value), std::move(attrs));
}

#define VOLSYNTH_INSTANTIATE_OPS(T)                                                                      \
    template Var<T> add(Var<T>, Var<T>);                                                                 \
    template Var<T> sub(Var<T>, Var<T>);                                                                 \
    template Var<T> mul(Var<T>, Var<T>);                                                                 \
    template Var<T> div(Var<T>, Var<T>);                                                                 \
    template Var<T> scale(Var<T>, T);                                                                    \
    template Var<T> add_scalar(Var<T>, T);                                                               \
    template Var<T> pow_scalar(Var<T>, T);                                                               \
    template Var<T> exp(Var<T>);                                                                         \
    template Var<T> log(Var<T>);                                                                         \
    template Var<T> sqrt(Var<T>);                                                                        \
    template Var<T> sigmoid(Var<T>);                                                                     \
    template Var<T> tanh(Var<T>);                                                                        \
    template Var<T> softplus(Var<T>);                                                                    \
    template Var<T> relu(Var<T>);                                                                        \
    template Var<T> leaky_relu(Var<T>, T);                                                               \
    template Var<T> matmul(Var<T>, Var<T>);                                                              \
    template Var<T> transpose(Var<T>);                                                                   \
    template Var<T> bias_add(Var<T>, Var<T>);                                                            \
    template Var<T> channel_sum(Var<T>);                                                                 \
    template Var<T> channel_broadcast(Var<T>, const Shape&);                                             \
    template Var<T> sample_sum(Var<T>);                                                                  \
    template Var<T> sample_broadcast(Var<T>, const Shape&);                                              \
    template Var<T> sum(Var<T>);                                                                         \
    template Var<T> broadcast_scalar(Var<T>, const Shape&);                                              \
    template Var<T> reshape(Var<T>, const Shape&);                                                       \
    template Var<T> concat_channels(Var<T>, Var<T>);                                                     \
    template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                                    \
    template Var<T> embed_channels(Var<T>, std::size_t, std::size_t);                                    \
    template Var<T> conv3d(Var<T>, Var<T>, const ConvGeometry&);                                         \
    template Var<T> conv3d_transpose(Var<T>, Var<T>, const ConvGeometry&, const Spatial&);               \
    template Var<T> conv3d_kernel_grad(Var<T>, Var<T>, const ConvGeometry&, const Spatial&);             \
    template Var<T> logsumexp_rows(Var<T>);                                                              \
    template Var<T> custom(Var<T>, std::shared_ptr<const CustomOp<T>>);

VOLSYNTH_INSTANTIATE_OPS(float)
VOLSYNTH_INSTANTIATE_OPS(double)
#undef VOLSYNTH_INSTANTIATE_OPS

}  // namespace ops
}  // namespace volsynth::tensor
