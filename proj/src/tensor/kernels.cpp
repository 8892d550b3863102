#include "volsynth/tensor/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>

#include <string>
#include <vector>

namespace volsynth::tensor {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* what) {
    if (s.size() != rank) {
        throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                             to_string(s));
    }
}

std::size_t prod(const Spatial& s) { return s[0] * s[1] * s[2]; }

// Patch layout shared by im2col/col2im: row = ((c*kd + a)*kh + b)*kw + e,
// column = flattened output position.
template <typename T>
void im2col(const T* vol, std::size_t channels, const Spatial& in, const Spatial& k, const Spatial& out,
            const ConvGeometry& g, T* cols) {
    const std::size_t P = prod(out);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* src = vol + c * prod(in);
        for (std::size_t a = 0; a < k[0]; ++a) {
            for (std::size_t b = 0; b < k[1]; ++b) {
                for (std::size_t e = 0; e < k[2]; ++e, ++row) {
                    T* dst = cols + row * P;
                    for (std::size_t od = 0; od < out[0]; ++od) {
                        const long id = static_cast<long>(od * g.stride[0] + a) - static_cast<long>(g.pad[0]);
                        for (std::size_t oh = 0; oh < out[1]; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
                            T* line = dst + (od * out[1] + oh) * out[2];
                            if (id < 0 || id >= static_cast<long>(in[0]) || ih < 0 ||
                                ih >= static_cast<long>(in[1])) {
                                std::fill(line, line + out[2], T{0});
                                continue;
                            }
                            const T* srow = src + (static_cast<std::size_t>(id) * in[1] + static_cast<std::size_t>(ih)) * in[2];
                            for (std::size_t ow = 0; ow < out[2]; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride[2] + e) - static_cast<long>(g.pad[2]);
                                line[ow] = (iw < 0 || iw >= static_cast<long>(in[2])) ? T{0} : srow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, const Spatial& in, const Spatial& k, const Spatial& out,
            const ConvGeometry& g, T* vol) {
    const std::size_t P = prod(out);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        T* dst = vol + c * prod(in);
        for (std::size_t a = 0; a < k[0]; ++a) {
            for (std::size_t b = 0; b < k[1]; ++b) {
                for (std::size_t e = 0; e < k[2]; ++e, ++row) {
                    const T* src = cols + row * P;
                    for (std::size_t od = 0; od < out[0]; ++od) {
                        const long id = static_cast<long>(od * g.stride[0] + a) - static_cast<long>(g.pad[0]);
                        if (id < 0 || id >= static_cast<long>(in[0])) continue;
                        for (std::size_t oh = 0; oh < out[1]; ++oh) {
                            const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
                            if (ih < 0 || ih >= static_cast<long>(in[1])) continue;
                            const T* line = src + (od * out[1] + oh) * out[2];
                            T* drow = dst + (static_cast<std::size_t>(id) * in[1] + static_cast<std::size_t>(ih)) * in[2];
                            for (std::size_t ow = 0; ow < out[2]; ++ow) {
                                const long iw = static_cast<long>(ow * g.stride[2] + e) - static_cast<long>(g.pad[2]);
                                if (iw < 0 || iw >= static_cast<long>(in[2])) continue;
                                drow[iw] += line[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Spatial spatial_of(const Shape& shape) {
    require_rank(shape, 5, "volume tensor");
    return {shape[2], shape[3], shape[4]};
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (stride == 0) throw ContractError("convolution stride must be >= 1");
    if (kernel == 0 || kernel > in + 2 * pad) {
        throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded extent " +
                             std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - kernel) / stride + 1;
}

Spatial conv_out_spatial(const Spatial& in, const Spatial& kernel, const ConvGeometry& geom) {
    Spatial out{};
    for (std::size_t i = 0; i < 3; ++i) out[i] = conv_out_extent(in[i], kernel[i], geom.stride[i], geom.pad[i]);
    return out;
}

Spatial conv_transpose_out_spatial(const Spatial& in, const Spatial& kernel, const ConvGeometry& geom) {
    Spatial out{};
    for (std::size_t i = 0; i < 3; ++i) {
        if (geom.stride[i] == 0) throw ContractError("convolution stride must be >= 1");
        const long v = static_cast<long>((in[i] - 1) * geom.stride[i] + kernel[i]) - 2 * static_cast<long>(geom.pad[i]);
        if (in[i] == 0 || v <= 0) {
            throw DimensionError("transposed convolution produces empty output along axis " + std::to_string(i));
        }
        out[i] = static_cast<std::size_t>(v);
    }
    return out;
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvGeometry& geom) {
    require_rank(input.shape(), 5, "conv3d input");
    require_rank(kernel.shape(), 5, "conv3d kernel");
    if (input.dim(1) != kernel.dim(1)) {
        throw DimensionError("conv3d channel mismatch: input " + to_string(input.shape()) + " vs kernel " +
                             to_string(kernel.shape()));
    }
    const std::size_t N = input.dim(0), C = input.dim(1), F = kernel.dim(0);
    const Spatial in = spatial_of(input.shape());
    const Spatial k = spatial_of(kernel.shape());
    const Spatial out = conv_out_spatial(in, k, geom);
    const std::size_t R = C * prod(k), P = prod(out);

    Tensor<T> result(Shape{N, F, out[0], out[1], out[2]});
    std::vector<T> cols(R * P);
    ConstMapMat<T> K(kernel.data().data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(R));
    for (std::size_t n = 0; n < N; ++n) {
        im2col(input.data().data() + n * C * prod(in), C, in, k, out, geom, cols.data());
        ConstMapMat<T> X(cols.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        MapMat<T> Y(result.data().data() + n * F * P, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(P));
        Y.noalias() = K * X;
    }
    return result;
}

template <typename T>
Tensor<T> conv3d_transpose_forward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvGeometry& geom,
                                   const Spatial& out_spatial) {
    require_rank(input.shape(), 5, "conv3d_transpose input");
    require_rank(kernel.shape(), 5, "conv3d_transpose kernel");
    if (input.dim(1) != kernel.dim(0)) {
        throw DimensionError("conv3d_transpose channel mismatch: input " + to_string(input.shape()) +
                             " vs kernel " + to_string(kernel.shape()));
    }
    const std::size_t N = input.dim(0), C = input.dim(1), F = kernel.dim(1);
    const Spatial small = spatial_of(input.shape());
    const Spatial k = spatial_of(kernel.shape());
    if (conv_out_spatial(out_spatial, k, geom) != small) {
        throw DimensionError("conv3d_transpose output extent inconsistent with input " + to_string(input.shape()));
    }
    const std::size_t R = F * prod(k), P = prod(small);

    Tensor<T> result(Shape{N, F, out_spatial[0], out_spatial[1], out_spatial[2]});
    std::vector<T> cols(R * P);
    ConstMapMat<T> K(kernel.data().data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(R));
    for (std::size_t n = 0; n < N; ++n) {
        ConstMapMat<T> Yn(input.data().data() + n * C * P, static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(P));
        MapMat<T> X(cols.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        X.noalias() = K.transpose() * Yn;
        col2im(cols.data(), F, out_spatial, k, small, geom, result.data().data() + n * F * prod(out_spatial));
    }
    return result;
}

template <typename T>
Tensor<T> conv3d_kernel_grad(const Tensor<T>& input, const Tensor<T>& grad_out, const ConvGeometry& geom,
                             const Spatial& kernel_spatial) {
    require_rank(input.shape(), 5, "conv3d_kernel_grad input");
    require_rank(grad_out.shape(), 5, "conv3d_kernel_grad grad_out");
    if (input.dim(0) != grad_out.dim(0)) {
        throw DimensionError("conv3d_kernel_grad batch mismatch: " + to_string(input.shape()) + " vs " +
                             to_string(grad_out.shape()));
    }
    const std::size_t N = input.dim(0), C = input.dim(1), F = grad_out.dim(1);
    const Spatial in = spatial_of(input.shape());
    const Spatial out = conv_out_spatial(in, kernel_spatial, geom);
    if (out != spatial_of(grad_out.shape())) {
        throw DimensionError("conv3d_kernel_grad geometry mismatch: " + to_string(input.shape()) + " vs " +
                             to_string(grad_out.shape()));
    }
    const std::size_t R = C * prod(kernel_spatial), P = prod(out);

    Tensor<T> result(Shape{F, C, kernel_spatial[0], kernel_spatial[1], kernel_spatial[2]});
    MapMat<T> G(result.data().data(), static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(R));
    std::vector<T> cols(R * P);
    for (std::size_t n = 0; n < N; ++n) {
        im2col(input.data().data() + n * C * prod(in), C, in, kernel_spatial, out, geom, cols.data());
        ConstMapMat<T> X(cols.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        ConstMapMat<T> Gn(grad_out.data().data() + n * F * P, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(P));
        G.noalias() += Gn * X.transpose();
    }
    return result;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const auto N = static_cast<Eigen::Index>(a.dim(0));
    const auto K = static_cast<Eigen::Index>(a.dim(1));
    const auto M = static_cast<Eigen::Index>(b.dim(1));
    Tensor<T> out(Shape{a.dim(0), b.dim(1)});
    MapMat<T>(out.data().data(), N, M).noalias() =
        ConstMapMat<T>(a.data().data(), N, K) * ConstMapMat<T>(b.data().data(), K, M);
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    require_rank(a.shape(), 2, "transpose input");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

#define VOLSYNTH_INSTANTIATE(T)                                                                          \
    template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&);          \
    template Tensor<T> conv3d_transpose_forward(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&, \
                                                const Spatial&);                                        \
    template Tensor<T> conv3d_kernel_grad(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&,       \
                                          const Spatial&);                                              \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> transpose2d(const Tensor<T>&);

VOLSYNTH_INSTANTIATE(float)
VOLSYNTH_INSTANTIATE(double)
#undef VOLSYNTH_INSTANTIATE

}  // namespace volsynth::tensor
