#pragma once

// Reference implementations used only by tests. Deliberately naive: direct
// loops straight from the definitions, sharing no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "volsynth/tensor/tensor.hpp"

namespace volsynth::testing {

using tensor::Shape;
using tensor::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

// Six nested loops (plus batch/channel) direct cross-correlation.
// Per-axis stride and padding (d, h, w).
inline Tensor<double> direct_conv3d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& bias,
                                    const std::array<std::size_t, 3>& st, const std::array<std::size_t, 3>& pd) {
    const std::size_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::size_t F = k.dim(0), KD = k.dim(2), KH = k.dim(3), KW = k.dim(4);
    const std::size_t OD = (D + 2 * pd[0] - KD) / st[0] + 1;
    const std::size_t OH = (H + 2 * pd[1] - KH) / st[1] + 1;
    const std::size_t OW = (W + 2 * pd[2] - KW) / st[2] + 1;
    Tensor<double> out(Shape{N, F, OD, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t od = 0; od < OD; ++od)
                for (std::size_t oh = 0; oh < OH; ++oh)
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        double acc = bias.size() ? bias[f] : 0.0;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t a = 0; a < KD; ++a)
                                for (std::size_t b = 0; b < KH; ++b)
                                    for (std::size_t e = 0; e < KW; ++e) {
                                        const long id = static_cast<long>(od * st[0] + a) - static_cast<long>(pd[0]);
                                        const long ih = static_cast<long>(oh * st[1] + b) - static_cast<long>(pd[1]);
                                        const long iw = static_cast<long>(ow * st[2] + e) - static_cast<long>(pd[2]);
                                        if (id < 0 || ih < 0 || iw < 0 || id >= static_cast<long>(D) ||
                                            ih >= static_cast<long>(H) || iw >= static_cast<long>(W))
                                            continue;
                                        acc += x[(((n * C + c) * D + id) * H + ih) * W + iw] *
                                               k[(((f * C + c) * KD + a) * KH + b) * KW + e];
                                    }
                        out[(((n * F + f) * OD + od) * OH + oh) * OW + ow] = acc;
                    }
    return out;
}

inline Tensor<double> direct_conv3d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& bias,
                                    std::size_t stride, std::size_t pad) {
    return direct_conv3d(x, k, bias, {stride, stride, stride}, {pad, pad, pad});
}

inline Tensor<double> direct_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t N = a.dim(0), K = a.dim(1), M = b.dim(1);
    Tensor<double> out(Shape{N, M});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < M; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += a[i * K + k] * b[k * M + j];
            out[i * M + j] = acc;
        }
    return out;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    long double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<long double>(a[i]) * b[i];
    return static_cast<double>(acc);
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace volsynth::testing
