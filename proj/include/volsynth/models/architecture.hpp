#pragma once

#include <string>
#include <vector>

#include "volsynth/data/volume.hpp"
#include "volsynth/tensor/layers.hpp"
#include "volsynth/tensor/params.hpp"

namespace volsynth::models {

using tensor::ConvGeometry;
using tensor::Spatial;

inline constexpr std::size_t kConvLayers = 4;

// Spatial plan of a downsampling conv stack. Per axis and layer: extent >= 2
// uses kernel 4, stride 2, pad 1 (halving); extent 1 uses kernel 3, stride 1,
// pad 1 (keeping 1). The transposed stacks walk the same plan backwards.
struct ConvPlan {
    std::vector<Spatial> spatial;  // layers + 1 entries; spatial[0] is the volume
    std::vector<Spatial> kernel;
    std::vector<ConvGeometry> geom;

    static ConvPlan make(const data::Dims& volume, std::size_t layers = kConvLayers);
    std::size_t layers() const noexcept { return kernel.size(); }
};

std::size_t voxels(const Spatial& s);
tensor::Shape batch_shape(std::size_t n, std::size_t channels, const Spatial& s);

// Initializers: He-normal for conv/dense weights feeding (leaky) ReLUs.
template <typename T>
void add_conv(tensor::ParameterSet<T>& p, const std::string& name, std::size_t out_ch, std::size_t in_ch,
              const Spatial& k, Rng& rng);
template <typename T>
void add_conv_transpose(tensor::ParameterSet<T>& p, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                        const Spatial& k, Rng& rng);
template <typename T>
void add_dense(tensor::ParameterSet<T>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
template <typename T>
void add_batchnorm(tensor::ParameterSet<T>& p, const std::string& name, std::size_t channels);

// dense(y) -> tanh -> [N,1,d,h,w]; parameters `<name>.w` [classes, voxels] and
// `<name>.b` [voxels].
template <typename T>
tensor::Var<T> project_label(const tensor::BoundParams<T>& p, const std::string& name, tensor::Var<T> y,
                             const Spatial& target);

// Every parameter multiplied by zero, for the constant-network identities.
template <typename T>
void zero_parameters(tensor::ParameterSet<T>& p);

// Batch-norm running statistics as named tensors (`<name>.running_mean`, ...),
// stored alongside parameters in checkpoints.
template <typename T>
void export_bn_states(const std::vector<tensor::BatchNormState<T>>& states, const std::string& prefix,
                      tensor::ParameterSet<T>& out);
template <typename T>
void import_bn_states(std::vector<tensor::BatchNormState<T>>& states, const std::string& prefix,
                      const tensor::ParameterSet<T>& in);

// Contiguous mini-batches over a seeded permutation. A trailing batch with
// fewer than `min_batch` samples is merged into the previous one.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   std::size_t min_batch = 2);

}  // namespace volsynth::models
