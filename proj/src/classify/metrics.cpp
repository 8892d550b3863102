#include "volsynth/classify/metrics.hpp"

#include "volsynth/error.hpp"

namespace volsynth::classify {

namespace {

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truths,
                       std::size_t num_classes) {
    if (predictions.size() != truths.size()) {
        throw DimensionError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                             std::to_string(truths.size()) + " truths");
    }
    if (num_classes == 0) throw ContractError("evaluate needs at least one class");
    MetricsReport r;
    r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (truths[i] >= num_classes || predictions[i] >= num_classes) {
            throw UnknownClassError("evaluate: class index " + std::to_string(std::max(truths[i], predictions[i])) +
                                    " >= " + std::to_string(num_classes));
        }
        ++r.confusion[truths[i]][predictions[i]];
    }
    std::size_t correct = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t row = 0, col = 0;
        for (std::size_t k = 0; k < num_classes; ++k) {
            row += r.confusion[c][k];
            col += r.confusion[k][c];
        }
        const std::size_t tp = r.confusion[c][c];
        correct += tp;
        if (row == 0) r.warnings.push_back("class " + std::to_string(c) + " has no samples in the truths");
        const double p = ratio(tp, col), rec = ratio(tp, row);
        r.class_precision.push_back(p);
        r.class_recall.push_back(rec);
        r.class_f1.push_back(p + rec == 0 ? 0.0 : 2 * p * rec / (p + rec));
    }
    const double C = static_cast<double>(num_classes);
    r.accuracy = ratio(correct, truths.size());
    for (std::size_t c = 0; c < num_classes; ++c) {
        r.precision += r.class_precision[c] / C;
        r.recall += r.class_recall[c] / C;
        r.macro_f1 += r.class_f1[c] / C;
    }
    return r;
}

}  // namespace volsynth::classify
