#pragma once

#include <array>
#include <cstddef>

#include "volsynth/tensor/tensor.hpp"

namespace volsynth::tensor {

using Spatial = std::array<std::size_t, 3>;

// Per-axis stride and zero padding of a 3D convolution.
struct ConvGeometry {
    Spatial stride{1, 1, 1};
    Spatial pad{0, 0, 0};

    static ConvGeometry uniform(std::size_t stride, std::size_t pad) {
        return ConvGeometry{{stride, stride, stride}, {pad, pad, pad}};
    }
    bool operator==(const ConvGeometry&) const = default;
};

Spatial spatial_of(const Shape& shape);  // trailing three extents of a rank-5 shape
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);
Spatial conv_out_spatial(const Spatial& in, const Spatial& kernel, const ConvGeometry& geom);
// (in - 1) * stride - 2 * pad + kernel per axis; output padding is always zero.
Spatial conv_transpose_out_spatial(const Spatial& in, const Spatial& kernel, const ConvGeometry& geom);

// Cross-correlation without bias.
// input [N,C,D,H,W], kernel [F,C,kd,kh,kw] -> [N,F,D',H',W'].
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvGeometry& geom);

// Linear adjoint of conv3d_forward. input [N,C,d,h,w], kernel [C,F,kd,kh,kw].
// out_spatial is the spatial extent of the conv3d input this adjoint maps back
// onto; conv_out_spatial(out_spatial) must equal the input spatial extent.
template <typename T>
Tensor<T> conv3d_transpose_forward(const Tensor<T>& input, const Tensor<T>& kernel,
                                   const ConvGeometry& geom, const Spatial& out_spatial);

// d<grad_out, conv3d_forward(input, K)>/dK. input [N,C,D,H,W], grad_out [N,F,D',H',W']
// -> [F,C,kd,kh,kw].
template <typename T>
Tensor<T> conv3d_kernel_grad(const Tensor<T>& input, const Tensor<T>& grad_out,
                             const ConvGeometry& geom, const Spatial& kernel_spatial);

// a [N,K] x b [K,M] -> [N,M]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

}  // namespace volsynth::tensor
