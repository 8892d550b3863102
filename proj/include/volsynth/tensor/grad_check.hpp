#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "volsynth/tensor/params.hpp"

namespace volsynth::tensor {

struct GradCheckOptions {
    double step = 1e-5;  // central-difference half step
    // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
    // the floor keeps exactly-zero gradients from dividing by zero.
    double denominator_floor = 1e-6;
    // Also raise the floor to the resolution of the difference quotient
    // (one ulp of the loss per evaluation, divided by the step and the
    // tolerance). Gradients that cancel exactly, such as a bias feeding batch
    // norm, otherwise fail on rounding noise alone.
    bool resolution_floor = true;
    // Elements probed per parameter; 0 probes every element. Probed indices
    // are chosen from `seed`, so reports are reproducible.
    std::size_t max_elements_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string parameter;
    std::size_t worst_index = 0;
    double max_rel_error = 0.0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<GradCheckEntry> entries;

    bool passed() const;
    double max_rel_error() const;
    // One line per failing parameter with its worst element, or "ok".
    std::string summary() const;
};

// Builds a scalar loss from freshly bound parameters. Called once for the
// analytic gradient and twice per probed element.
using LossBuilder = std::function<Var<double>(Graph<double>&, const BoundParams<double>&)>;

GradCheckReport grad_check(const LossBuilder& build, ParameterSet<double>& params, double tolerance,
                           const GradCheckOptions& options = {});

}  // namespace volsynth::tensor
