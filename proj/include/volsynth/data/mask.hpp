#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "volsynth/data/volume.hpp"

namespace volsynth::data {

enum class MaskStrategy { nonconstant, background_border };

const char* to_string(MaskStrategy s);
MaskStrategy parse_mask_strategy(const std::string& name);

struct Mask {
    Dims dims{0, 0, 0};
    std::vector<std::uint8_t> bits;  // 1 = valid voxel
    std::size_t valid_count = 0;

    Mask() = default;
    Mask(Dims d, std::vector<std::uint8_t> b);
    static Mask full(Dims d);
    static Mask empty(Dims d);
};

// nonconstant: valid iff the voxel varies across the volumes.
// background_border: voxels whose maximum over all volumes is <= threshold and
// that connect (6-neighbourhood) to the grid border are background.
Mask compute_mask(std::span<const Volume> train_volumes, MaskStrategy strategy = MaskStrategy::nonconstant,
                  double threshold = 0.0);

// Valid voxels in row-major order.
std::vector<double> apply_mask(const Volume& volume, const Mask& mask);

// Inverse of apply_mask on the mask support; invalid voxels are 0.
Volume scatter(std::span<const double> features, const Mask& mask);

}  // namespace volsynth::data
