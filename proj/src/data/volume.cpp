#include "volsynth/data/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "volsynth/util/binary_io.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::data {

namespace {

constexpr char kMagic[4] = {'V', 'V', 'O', 'L'};
constexpr std::size_t kHeaderBytes = 4 + 1 + 3 * 4;

// Overlap weights of source cells [j, j+1) with the footprint of each output
// cell, normalized so every row sums to 1.
struct AxisWeights {
    std::vector<std::size_t> first;  // first source index per output
    std::vector<std::vector<double>> w;
};

AxisWeights box_weights(std::size_t src, std::size_t dst) {
    AxisWeights a;
    const double ratio = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const double lo = static_cast<double>(i) * ratio;
        const double hi = static_cast<double>(i + 1) * ratio;
        const auto j0 = static_cast<std::size_t>(std::floor(lo));
        const auto j1 = std::min(src, static_cast<std::size_t>(std::ceil(hi)));
        std::vector<double> row;
        for (std::size_t j = j0; j < j1; ++j) {
            const double overlap =
                std::max(0.0, std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j)));
            row.push_back(overlap / ratio);
        }
        a.first.push_back(j0);
        a.w.push_back(std::move(row));
    }
    return a;
}

AxisWeights nearest_weights(std::size_t src, std::size_t dst) {
    AxisWeights a;
    const double ratio = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const auto j = std::min(src - 1, static_cast<std::size_t>(std::floor((static_cast<double>(i) + 0.5) * ratio)));
        a.first.push_back(j);
        a.w.push_back({1.0});
    }
    return a;
}

}  // namespace

std::string to_string(const Dims& dims) {
    return std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]);
}

std::size_t voxel_count(const Dims& dims) { return dims[0] * dims[1] * dims[2]; }

Volume::Volume(Dims d, double fill) : dims(d), voxels(voxel_count(d), fill) {}

Volume::Volume(Dims d, std::vector<double> v) : dims(d), voxels(std::move(v)) {
    if (voxels.size() != voxel_count(dims)) {
        throw DimensionError("volume " + to_string(dims) + " needs " + std::to_string(voxel_count(dims)) +
                             " voxels, got " + std::to_string(voxels.size()));
    }
}

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open volume " + path.string());
    char magic[4] = {};
    if (!in.read(magic, 4)) throw TruncatedError(path.string() + ": header truncated");
    if (!std::equal(magic, magic + 4, kMagic)) throw BadMagicError(path.string() + ": missing VVOL magic");
    std::uint8_t version = 0;
    if (!read_le(in, version)) throw TruncatedError(path.string() + ": header truncated");
    if (version != kVvolVersion) throw FormatError(path.string() + ": unsupported VVOL version " + std::to_string(version));
    std::uint32_t d = 0, h = 0, w = 0;
    if (!read_le(in, d) || !read_le(in, h) || !read_le(in, w)) throw TruncatedError(path.string() + ": header truncated");
    if (d == 0 || h == 0 || w == 0) throw FormatError(path.string() + ": zero extent in header");

    const auto file_size = std::filesystem::file_size(path);
    const auto payload = file_size - kHeaderBytes;
    if (payload % sizeof(float) != 0) {
        throw TruncatedError(path.string() + ": payload of " + std::to_string(payload) + " bytes is not whole floats");
    }
    const Dims dims{d, h, w};
    if (payload / sizeof(float) != voxel_count(dims)) {
        throw LengthMismatchError(path.string() + ": header says " + to_string(dims) + " (" +
                                  std::to_string(voxel_count(dims)) + " voxels) but payload holds " +
                                  std::to_string(payload / sizeof(float)));
    }
    Volume v(dims);
    for (auto& x : v.voxels) {
        float f = 0;
        if (!read_le(in, f)) throw TruncatedError(path.string() + ": payload truncated");
        x = f;
    }
    return v;
}

void write_volume(const Volume& volume, const std::filesystem::path& path) {
    if (volume.size() != voxel_count(volume.dims)) throw DimensionError("volume voxel count does not match dims");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(kMagic, 4);
    write_le(out, kVvolVersion);
    for (std::size_t e : volume.dims) write_le(out, static_cast<std::uint32_t>(e));
    for (double x : volume.voxels) write_le(out, static_cast<float>(x));
    if (!out) throw Error("failed writing " + path.string());
}

Volume normalize_minmax(const Volume& volume) {
    Volume out(volume.dims);
    if (volume.voxels.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(volume.voxels.begin(), volume.voxels.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw NonFiniteError("normalize_minmax: non-finite voxel");
    if (hi == lo) return out;
    const double span = hi - lo;
    for (std::size_t i = 0; i < volume.size(); ++i) out.voxels[i] = (volume.voxels[i] - lo) / span;
    return out;
}

Volume downsample(const Volume& volume, const Dims& target, ResampleMethod method) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (target[a] == 0) throw ContractError("downsample target " + to_string(target) + " has a zero extent");
        if (target[a] > volume.dims[a]) {
            throw UnsupportedUpsampleError("cannot resample " + to_string(volume.dims) + " up to " + to_string(target));
        }
    }
    if (target == volume.dims) return volume;
    std::array<AxisWeights, 3> ax;
    for (std::size_t a = 0; a < 3; ++a) {
        ax[a] = method == ResampleMethod::box ? box_weights(volume.dims[a], target[a])
                                              : nearest_weights(volume.dims[a], target[a]);
    }
    // Separable: resample w, then h, then d.
    const auto [D, H, W] = volume.dims;
    const auto [td, th, tw] = target;
    std::vector<double> s1(D * H * tw, 0.0);
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t i = 0; i < tw; ++i) {
                double acc = 0;
                for (std::size_t k = 0; k < ax[2].w[i].size(); ++k)
                    acc += ax[2].w[i][k] * volume.voxels[(z * H + y) * W + ax[2].first[i] + k];
                s1[(z * H + y) * tw + i] = acc;
            }
    std::vector<double> s2(D * th * tw, 0.0);
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t i = 0; i < th; ++i)
            for (std::size_t x = 0; x < tw; ++x) {
                double acc = 0;
                for (std::size_t k = 0; k < ax[1].w[i].size(); ++k)
                    acc += ax[1].w[i][k] * s1[(z * H + ax[1].first[i] + k) * tw + x];
                s2[(z * th + i) * tw + x] = acc;
            }
    Volume out(target);
    for (std::size_t i = 0; i < td; ++i)
        for (std::size_t y = 0; y < th; ++y)
            for (std::size_t x = 0; x < tw; ++x) {
                double acc = 0;
                for (std::size_t k = 0; k < ax[0].w[i].size(); ++k)
                    acc += ax[0].w[i][k] * s2[((ax[0].first[i] + k) * th + y) * tw + x];
                out.voxels[(i * th + y) * tw + x] = acc;
            }
    return out;
}

Volume add_gaussian_noise(const Volume& volume, double variance, std::uint64_t seed) {
    if (!(variance >= 0.0)) throw ContractError("noise variance must be >= 0, got " + std::to_string(variance));
    if (variance == 0.0) return volume;
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(variance));
    Volume out = volume;
    for (auto& v : out.voxels) v = std::clamp(v + dist(rng), 0.0, 1.0);
    return out;
}

}  // namespace volsynth::data
