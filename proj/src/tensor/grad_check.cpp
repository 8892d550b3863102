#include "volsynth/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace volsynth::tensor {

bool GradCheckReport::passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed; });
}

double GradCheckReport::max_rel_error() const {
    double worst = 0.0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    bool any = false;
    for (const auto& e : entries) {
        if (e.passed) continue;
        any = true;
        os << e.parameter << "[" << e.worst_index << "]: rel err " << e.max_rel_error << " (analytic " << e.analytic
           << ", numeric " << e.numeric << ")\n";
    }
    if (!any) os << "ok (max rel err " << max_rel_error() << ")";
    return os.str();
}

GradCheckReport grad_check(const LossBuilder& build, ParameterSet<double>& params, double tolerance,
                           const GradCheckOptions& options) {
    auto evaluate = [&]() {
        Graph<double> g(Mode::training);
        BoundParams<double> bound(g, params);
        return build(g, bound).value().item();
    };

    Gradients<double> analytic;
    {
        Graph<double> g(Mode::training);
        BoundParams<double> bound(g, params);
        Var<double> loss = build(g, bound);
        analytic = g.backward(loss);
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    Rng rng(options.seed);
    for (auto& [name, value] : params) {
        std::vector<std::size_t> probe(value.size());
        std::iota(probe.begin(), probe.end(), std::size_t{0});
        if (options.max_elements_per_param != 0 && probe.size() > options.max_elements_per_param) {
            std::shuffle(probe.begin(), probe.end(), rng);
            probe.resize(options.max_elements_per_param);
            std::sort(probe.begin(), probe.end());
        }
        GradCheckEntry entry;
        entry.parameter = name;
        const Tensor<double>& grad = analytic.at(name);
        for (std::size_t idx : probe) {
            const double original = value[idx];
            value[idx] = original + options.step;
            const double up = evaluate();
            value[idx] = original - options.step;
            const double down = evaluate();
            value[idx] = original;
            const double numeric = (up - down) / (2.0 * options.step);
            const double a = grad[idx];
            double floor = options.denominator_floor;
            if (options.resolution_floor && tolerance > 0) {
                // One rounding of each loss value, seen through the difference quotient.
                const double ulp = std::nextafter(std::max(std::abs(up), std::abs(down)), INFINITY) -
                                   std::max(std::abs(up), std::abs(down));
                floor = std::max(floor, ulp / options.step / tolerance);
            }
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel >= entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entry.passed = entry.max_rel_error <= tolerance;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace volsynth::tensor
