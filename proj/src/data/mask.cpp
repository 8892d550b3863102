#include "volsynth/data/mask.hpp"

#include <algorithm>
#include <string>

namespace volsynth::data {

const char* to_string(MaskStrategy s) {
    return s == MaskStrategy::nonconstant ? "nonconstant" : "background_border";
}

MaskStrategy parse_mask_strategy(const std::string& name) {
    if (name == "nonconstant") return MaskStrategy::nonconstant;
    if (name == "background_border") return MaskStrategy::background_border;
    throw ContractError("unknown mask strategy '" + name + "' (expected nonconstant or background_border)");
}

Mask::Mask(Dims d, std::vector<std::uint8_t> b) : dims(d), bits(std::move(b)) {
    if (bits.size() != voxel_count(dims)) throw DimensionError("mask bits do not match dims " + to_string(dims));
    valid_count = static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

Mask Mask::full(Dims d) { return Mask(d, std::vector<std::uint8_t>(voxel_count(d), 1)); }
Mask Mask::empty(Dims d) { return Mask(d, std::vector<std::uint8_t>(voxel_count(d), 0)); }

Mask compute_mask(std::span<const Volume> train_volumes, MaskStrategy strategy, double threshold) {
    if (train_volumes.empty()) throw ContractError("compute_mask needs at least one training volume");
    const Dims dims = train_volumes.front().dims;
    for (const auto& v : train_volumes) {
        if (v.dims != dims) {
            throw DimensionError("compute_mask: volume " + to_string(v.dims) + " vs " + to_string(dims));
        }
    }
    const std::size_t n = voxel_count(dims);
    std::vector<std::uint8_t> bits(n, 0);

    if (strategy == MaskStrategy::nonconstant) {
        const auto& first = train_volumes.front().voxels;
        for (const auto& v : train_volumes)
            for (std::size_t i = 0; i < n; ++i)
                if (v.voxels[i] != first[i]) bits[i] = 1;
        return Mask(dims, std::move(bits));
    }

    std::vector<double> vmax = train_volumes.front().voxels;
    for (const auto& v : train_volumes)
        for (std::size_t i = 0; i < n; ++i) vmax[i] = std::max(vmax[i], v.voxels[i]);

    const auto [D, H, W] = dims;
    std::vector<std::uint8_t> background(n, 0);
    std::vector<std::size_t> stack;
    auto visit = [&](std::size_t idx) {
        if (!background[idx] && vmax[idx] <= threshold) {
            background[idx] = 1;
            stack.push_back(idx);
        }
    };
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (z == 0 || y == 0 || x == 0 || z + 1 == D || y + 1 == H || x + 1 == W) visit((z * H + y) * W + x);
    while (!stack.empty()) {
        const std::size_t idx = stack.back();
        stack.pop_back();
        const std::size_t x = idx % W, y = (idx / W) % H, z = idx / (W * H);
        if (x > 0) visit(idx - 1);
        if (x + 1 < W) visit(idx + 1);
        if (y > 0) visit(idx - W);
        if (y + 1 < H) visit(idx + W);
        if (z > 0) visit(idx - W * H);
        if (z + 1 < D) visit(idx + W * H);
    }
    for (std::size_t i = 0; i < n; ++i) bits[i] = background[i] ? 0 : 1;
    return Mask(dims, std::move(bits));
}

std::vector<double> apply_mask(const Volume& volume, const Mask& mask) {
    if (volume.dims != mask.dims) {
        throw DimensionError("apply_mask: volume " + to_string(volume.dims) + " vs mask " + to_string(mask.dims));
    }
    std::vector<double> out;
    out.reserve(mask.valid_count);
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
        if (mask.bits[i]) out.push_back(volume.voxels[i]);
    return out;
}

Volume scatter(std::span<const double> features, const Mask& mask) {
    if (features.size() != mask.valid_count) {
        throw DimensionError("scatter: " + std::to_string(features.size()) + " features for a mask with " +
                             std::to_string(mask.valid_count) + " valid voxels");
    }
    Volume out(mask.dims);
    std::size_t k = 0;
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
        if (mask.bits[i]) out.voxels[i] = features[k++];
    return out;
}

}  // namespace volsynth::data
