#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "volsynth/tensor/params.hpp"

namespace volsynth::tensor {

enum class Precision { f32, f64 };

const char* to_string(Precision p);

// On-disk layout: one header line of compact JSON
//   {"format":"volsynth-checkpoint","version":1,"precision":"f32",
//    "params":[{"name":...,"shape":[...]},...],"meta":{...}}
// terminated by '\n', then every parameter as raw little-endian values in
// header order. `meta` carries model-specific structure (config, class table).
struct Checkpoint {
    Precision precision = Precision::f64;
    nlohmann::json meta = nlohmann::json::object();
    ParameterSet<double> params;
};

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                      const nlohmann::json& meta = nlohmann::json::object());

Checkpoint read_checkpoint(const std::filesystem::path& path);

// Header only, without reading the payload.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace volsynth::tensor
