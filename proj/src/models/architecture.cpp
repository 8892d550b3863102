#include "volsynth/models/architecture.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace volsynth::models {

using tensor::ParameterSet;
using tensor::Shape;
using tensor::Tensor;
using tensor::Var;
namespace ops = tensor::ops;

ConvPlan ConvPlan::make(const data::Dims& volume, std::size_t layers) {
    ConvPlan plan;
    Spatial s{volume[0], volume[1], volume[2]};
    for (std::size_t a = 0; a < 3; ++a)
        if (s[a] == 0) throw ContractError("conv plan needs positive volume extents");
    plan.spatial.push_back(s);
    for (std::size_t l = 0; l < layers; ++l) {
        Spatial k{}, out{};
        ConvGeometry g;
        for (std::size_t a = 0; a < 3; ++a) {
            if (s[a] >= 2) {
                k[a] = 4;
                g.stride[a] = 2;
                g.pad[a] = 1;
            } else {
                k[a] = 3;
                g.stride[a] = 1;
                g.pad[a] = 1;
            }
            out[a] = tensor::conv_out_extent(s[a], k[a], g.stride[a], g.pad[a]);
        }
        plan.kernel.push_back(k);
        plan.geom.push_back(g);
        plan.spatial.push_back(out);
        s = out;
    }
    return plan;
}

std::size_t voxels(const Spatial& s) { return s[0] * s[1] * s[2]; }

Shape batch_shape(std::size_t n, std::size_t channels, const Spatial& s) { return Shape{n, channels, s[0], s[1], s[2]}; }

template <typename T>
void add_conv(ParameterSet<T>& p, const std::string& name, std::size_t out_ch, std::size_t in_ch, const Spatial& k,
              Rng& rng) {
    const double fan_in = static_cast<double>(in_ch * voxels(k));
    p.add(name + ".k", tensor::gaussian_tensor<T>(Shape{out_ch, in_ch, k[0], k[1], k[2]}, std::sqrt(2.0 / fan_in), rng));
    p.add(name + ".b", Tensor<T>(Shape{out_ch}));
}

template <typename T>
void add_conv_transpose(ParameterSet<T>& p, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                        const Spatial& k, Rng& rng) {
    // Each output voxel of a stride-2 transposed conv sees about in_ch * |k| / 8 taps.
    const double fan_in = std::max(1.0, static_cast<double>(in_ch * voxels(k)) / 8.0);
    p.add(name + ".k", tensor::gaussian_tensor<T>(Shape{in_ch, out_ch, k[0], k[1], k[2]}, std::sqrt(2.0 / fan_in), rng));
    p.add(name + ".b", Tensor<T>(Shape{out_ch}));
}

template <typename T>
void add_dense(ParameterSet<T>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    p.add(name + ".w", tensor::gaussian_tensor<T>(Shape{in, out}, std::sqrt(1.0 / static_cast<double>(in)), rng));
    p.add(name + ".b", Tensor<T>(Shape{out}));
}

template <typename T>
void add_batchnorm(ParameterSet<T>& p, const std::string& name, std::size_t channels) {
    p.add(name + ".gamma", Tensor<T>(Shape{channels}, T{1}));
    p.add(name + ".beta", Tensor<T>(Shape{channels}));
}

template <typename T>
Var<T> project_label(const tensor::BoundParams<T>& p, const std::string& name, Var<T> y, const Spatial& target) {
    Var<T> w = p[name + ".w"];
    if (w.shape().at(1) != voxels(target)) {
        throw DimensionError("label projection '" + name + "' produces " + std::to_string(w.shape().at(1)) +
                             " voxels, target needs " + std::to_string(voxels(target)));
    }
    Var<T> v = ops::tanh(tensor::nn::dense(y, w, p[name + ".b"]));
    return ops::reshape(v, batch_shape(y.shape().at(0), 1, target));
}

template <typename T>
void zero_parameters(ParameterSet<T>& p) {
    for (auto& [_, t] : p)
        for (auto& v : t.data()) v = T{0};
}

template <typename T>
void export_bn_states(const std::vector<tensor::BatchNormState<T>>& states, const std::string& prefix,
                      ParameterSet<T>& out) {
    for (std::size_t i = 0; i < states.size(); ++i) {
        out.add(prefix + std::to_string(i) + ".running_mean", states[i].running_mean);
        out.add(prefix + std::to_string(i) + ".running_var", states[i].running_var);
    }
}

template <typename T>
void import_bn_states(std::vector<tensor::BatchNormState<T>>& states, const std::string& prefix,
                      const ParameterSet<T>& in) {
    for (std::size_t i = 0; i < states.size(); ++i) {
        const auto& m = in.at(prefix + std::to_string(i) + ".running_mean");
        const auto& v = in.at(prefix + std::to_string(i) + ".running_var");
        if (m.shape() != states[i].running_mean.shape() || v.shape() != states[i].running_var.shape()) {
            throw FormatError("batch-norm statistics '" + prefix + std::to_string(i) + "' have the wrong shape");
        }
        states[i].running_mean = m;
        states[i].running_var = v;
    }
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   std::size_t min_batch) {
    if (batch_size == 0) throw ContractError("batch size must be >= 1");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    if (batches.size() > 1 && batches.back().size() < min_batch) {
        auto tail = std::move(batches.back());
        batches.pop_back();
        batches.back().insert(batches.back().end(), tail.begin(), tail.end());
    }
    return batches;
}

#define VOLSYNTH_INSTANTIATE_ARCH(T)                                                                               \
    template void add_conv(ParameterSet<T>&, const std::string&, std::size_t, std::size_t, const Spatial&, Rng&);  \
    template void add_conv_transpose(ParameterSet<T>&, const std::string&, std::size_t, std::size_t,               \
                                     const Spatial&, Rng&);                                                        \
    template void add_dense(ParameterSet<T>&, const std::string&, std::size_t, std::size_t, Rng&);                 \
    template void add_batchnorm(ParameterSet<T>&, const std::string&, std::size_t);                                \
    template Var<T> project_label(const tensor::BoundParams<T>&, const std::string&, Var<T>, const Spatial&);      \
    template void zero_parameters(ParameterSet<T>&);                                                               \
    template void export_bn_states(const std::vector<tensor::BatchNormState<T>>&, const std::string&,              \
                                   ParameterSet<T>&);                                                              \
    template void import_bn_states(std::vector<tensor::BatchNormState<T>>&, const std::string&,                    \
                                   const ParameterSet<T>&);

VOLSYNTH_INSTANTIATE_ARCH(float)
VOLSYNTH_INSTANTIATE_ARCH(double)
#undef VOLSYNTH_INSTANTIATE_ARCH

}  // namespace volsynth::models
