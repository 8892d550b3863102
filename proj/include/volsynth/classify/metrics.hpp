#pragma once

#include <span>
#include <string>
#include <vector>

namespace volsynth::classify {

struct MetricsReport {
    double accuracy = 0;
    double macro_f1 = 0;
    double precision = 0;  // macro average
    double recall = 0;     // macro average
    std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
    std::vector<double> class_precision;
    std::vector<double> class_recall;
    std::vector<double> class_f1;
    std::vector<std::string> warnings;
};

// Zero denominators (a class never predicted, or absent from the truths) give
// 0 for that class; absent classes are also listed in `warnings`.
MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truths,
                       std::size_t num_classes);

}  // namespace volsynth::classify
