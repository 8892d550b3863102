#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "volsynth/error.hpp"

namespace volsynth::data {

using Dims = std::array<std::size_t, 3>;  // (d, h, w)

std::string to_string(const Dims& dims);
std::size_t voxel_count(const Dims& dims);

// Dense 3D grid, row-major (w fastest). Voxels are held in double; the VVOL
// payload is float32, so writing rounds every voxel to the nearest float.
struct Volume {
    Dims dims{0, 0, 0};
    std::vector<double> voxels;

    Volume() = default;
    explicit Volume(Dims d, double fill = 0.0);
    Volume(Dims d, std::vector<double> v);

    std::size_t size() const noexcept { return voxels.size(); }
    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
    double& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
    double at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }

    bool operator==(const Volume&) const = default;
};

// VVOL: "VVOL", version byte 0x01, d/h/w as u32 LE, then d*h*w float32 LE.
inline constexpr std::uint8_t kVvolVersion = 1;

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

// (v - min) / (max - min); a constant volume becomes all zeros.
Volume normalize_minmax(const Volume& volume);

enum class ResampleMethod { box, nearest };

// Box averaging weights every source voxel by its overlap with the output
// voxel's footprint, so the result stays inside the input range and keeps the
// global mean. Throws UnsupportedUpsampleError if any target extent is larger.
Volume downsample(const Volume& volume, const Dims& target, ResampleMethod method = ResampleMethod::box);

// voxel + N(0, variance), clamped to [0,1].
Volume add_gaussian_noise(const Volume& volume, double variance, std::uint64_t seed);

}  // namespace volsynth::data
