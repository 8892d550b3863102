#include "volsynth/classify/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "volsynth/tensor/adam.hpp"
#include "volsynth/tensor/checkpoint.hpp"
#include "volsynth/util/json_config.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::classify {

namespace ops = tensor::ops;
namespace nn = tensor::nn;
using tensor::Graph;
using tensor::ParameterSet;
using tensor::Shape;
using tensor::Tensor;
using tensor::Var;

std::size_t argmax(std::span<const double> scores) {
    if (scores.empty()) throw ContractError("argmax of an empty score vector");
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c)
        if (scores[c] > scores[best]) best = c;
    return best;
}

namespace {

tensor::Tensor<double> mask_tensor(const data::Mask& m) {
    Tensor<double> t(Shape{m.dims[0], m.dims[1], m.dims[2]});
    for (std::size_t i = 0; i < m.bits.size(); ++i) t[i] = m.bits[i];
    return t;
}

data::Mask mask_from_tensor(const Tensor<double>& t) {
    if (t.rank() != 3) throw FormatError("mask tensor must have rank 3");
    std::vector<std::uint8_t> bits(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) bits[i] = t[i] != 0.0;
    return data::Mask(data::Dims{t.shape()[0], t.shape()[1], t.shape()[2]}, std::move(bits));
}

}  // namespace

void SVMConfig::validate() const {
    if (!(C > 0)) throw ContractError("SVM C must be > 0");
    if (epochs < 1) throw ContractError("SVM epochs must be >= 1");
}

nlohmann::json SVMConfig::to_json() const { return {{"C", C}, {"epochs", epochs}, {"seed", seed}}; }

SVMConfig SVMConfig::from_json(const nlohmann::json& j) {
    const std::string where = "svm config";
    reject_unknown_keys(j, {"C", "epochs", "seed"}, where);
    SVMConfig c;
    read_field(j, "C", c.C, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

LinearSVM LinearSVM::train(const std::vector<std::vector<double>>& features, std::span<const std::size_t> labels,
                           std::size_t num_classes, const SVMConfig& config) {
    config.validate();
    if (features.size() != labels.size()) throw DimensionError("SVM: features and labels differ in length");
    if (features.empty()) throw ContractError("SVM training set is empty");
    const std::size_t D = features[0].size();
    for (const auto& f : features)
        if (f.size() != D) throw DimensionError("SVM: feature vectors differ in length");
    std::vector<bool> seen(num_classes, false);
    std::size_t distinct = 0;
    for (auto l : labels) {
        if (l >= num_classes) throw UnknownClassError("SVM: label " + std::to_string(l) + " >= " + std::to_string(num_classes));
        if (!seen[l]) ++distinct;
        seen[l] = true;
    }
    if (distinct < 2) throw ContractError("SVM needs samples of at least 2 classes");

    const std::size_t n = features.size();
    const double lambda = 1.0 / (config.C * static_cast<double>(n));
    const double radius = 1.0 / std::sqrt(lambda);
    LinearSVM model;
    model.config_ = config;
    model.weights_.assign(num_classes, std::vector<double>(D, 0.0));
    model.biases_.assign(num_classes, 0.0);
    std::vector<std::size_t> order(n);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& w = model.weights_[c];
        double& b = model.biases_[c];
        Rng rng(derive_seed(config.seed, {c}));
        std::size_t t = 0;
        for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t i : order) {
                ++t;
                const double eta = 1.0 / (lambda * static_cast<double>(t));
                const double y = labels[i] == c ? 1.0 : -1.0;
                const auto& x = features[i];
                double margin = b;
                for (std::size_t d = 0; d < D; ++d) margin += w[d] * x[d];
                margin *= y;
                const double shrink = 1.0 - eta * lambda;
                for (double& v : w) v *= shrink;
                b *= shrink;
                if (margin < 1.0) {
                    for (std::size_t d = 0; d < D; ++d) w[d] += eta * y * x[d];
                    b += eta * y;
                }
                double norm2 = b * b;
                for (double v : w) norm2 += v * v;
                const double norm = std::sqrt(norm2);
                if (norm > radius) {
                    const double s = radius / norm;
                    for (double& v : w) v *= s;
                    b *= s;
                }
            }
        }
    }
    return model;
}

LinearSVM LinearSVM::train(const data::VolumeDataset& ds, const data::Mask& mask, const SVMConfig& config) {
    if (ds.size() > 0 && ds.dims() != mask.dims) {
        throw DimensionError("SVM mask " + data::to_string(mask.dims) + " vs volumes " + data::to_string(ds.dims()));
    }
    std::vector<std::vector<double>> features;
    features.reserve(ds.size());
    for (const auto& v : ds.volumes) features.push_back(data::apply_mask(v, mask));
    auto model = train(features, ds.labels, ds.num_classes(), config);
    model.mask_ = mask;
    model.has_mask_ = true;
    return model;
}

std::vector<double> LinearSVM::scores(std::span<const double> features) const {
    if (features.size() != feature_dim()) {
        throw DimensionError("SVM expects " + std::to_string(feature_dim()) + " features, got " +
                             std::to_string(features.size()));
    }
    std::vector<double> s(num_classes());
    for (std::size_t c = 0; c < num_classes(); ++c) {
        double acc = biases_[c];
        for (std::size_t d = 0; d < features.size(); ++d) acc += weights_[c][d] * features[d];
        s[c] = acc;
    }
    return s;
}

std::size_t LinearSVM::predict(std::span<const double> features) const { return argmax(scores(features)); }

std::vector<std::size_t> LinearSVM::predict(const data::VolumeDataset& ds) const {
    if (!has_mask_) throw ContractError("SVM was trained on raw features; predict volumes needs a mask");
    std::vector<std::size_t> out;
    out.reserve(ds.size());
    for (const auto& v : ds.volumes) out.push_back(predict(data::apply_mask(v, mask_)));
    return out;
}

void LinearSVM::save(const std::filesystem::path& path) const {
    ParameterSet<double> p;
    Tensor<double> w(Shape{num_classes(), feature_dim()});
    for (std::size_t c = 0; c < num_classes(); ++c)
        std::copy(weights_[c].begin(), weights_[c].end(), w.data().begin() + static_cast<std::ptrdiff_t>(c * feature_dim()));
    p.add("svm.weights", std::move(w));
    p.add("svm.biases", Tensor<double>(Shape{num_classes()}, biases_));
    if (has_mask_) p.add("mask", mask_tensor(mask_));
    tensor::write_checkpoint(path, p, {{"model", "svm"}, {"config", config_.to_json()}});
}

LinearSVM LinearSVM::load(const std::filesystem::path& path) {
    auto ck = tensor::read_checkpoint(path);
    if (ck.meta.value("model", "") != "svm") throw FormatError(path.string() + " is not an SVM checkpoint");
    LinearSVM m;
    m.config_ = SVMConfig::from_json(ck.meta.at("config"));
    const auto& w = ck.params.at("svm.weights");
    const auto& b = ck.params.at("svm.biases");
    if (w.rank() != 2 || b.shape() != Shape{w.shape()[0]}) throw FormatError("SVM checkpoint shapes are inconsistent");
    const std::size_t C = w.shape()[0], D = w.shape()[1];
    for (std::size_t c = 0; c < C; ++c) {
        m.weights_.emplace_back(w.data().begin() + static_cast<std::ptrdiff_t>(c * D),
                                w.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * D));
        m.biases_.push_back(b[c]);
    }
    if (ck.params.contains("mask")) {
        m.mask_ = mask_from_tensor(ck.params.at("mask"));
        m.has_mask_ = true;
        if (m.mask_.valid_count != D) throw FormatError("SVM weight length does not match the mask");
    }
    return m;
}

void DNNConfig::validate() const {
    if (channels.size() != models::kConvLayers) throw ContractError("DNN classifier needs exactly 4 channel widths");
    for (auto c : channels)
        if (c == 0) throw ContractError("DNN channel widths must be positive");
    if (batch_size < 2) throw DegenerateBatchError("DNN batch_size must be >= 2");
    if (!(learning_rate > 0)) throw ContractError("DNN learning_rate must be > 0");
}

nlohmann::json DNNConfig::to_json() const {
    return {{"channels", channels},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"epochs", epochs},
            {"seed", seed}};
}

DNNConfig DNNConfig::from_json(const nlohmann::json& j) {
    const std::string where = "dnn config";
    reject_unknown_keys(j, {"channels", "batch_size", "learning_rate", "epochs", "seed"}, where);
    DNNConfig c;
    read_field(j, "channels", c.channels, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

template <typename T>
ParameterSet<T> init_dnn_parameters(const models::ConvPlan& plan, const DNNConfig& config, std::size_t num_classes,
                                    std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<T> p;
    for (std::size_t l = 0; l < plan.layers(); ++l) {
        const std::size_t in = l == 0 ? 1 : config.channels[l - 1];
        models::add_conv(p, "clf.conv" + std::to_string(l), config.channels[l], in, plan.kernel[l], rng);
    }
    models::add_dense(p, "clf.out", config.channels.back() * models::voxels(plan.spatial.back()), num_classes, rng);
    return p;
}

template <typename T>
Var<T> dnn_logits(const models::ConvPlan& plan, const DNNConfig& config, const tensor::BoundParams<T>& p, Var<T> x) {
    (void)config;
    const std::size_t N = x.shape().at(0);
    if (x.shape() != models::batch_shape(N, 1, plan.spatial[0])) {
        throw DimensionError("classifier expects " + tensor::to_string(models::batch_shape(N, 1, plan.spatial[0])) +
                             ", got " + tensor::to_string(x.shape()));
    }
    Var<T> h = x;
    for (std::size_t l = 0; l < plan.layers(); ++l) {
        const std::string name = "clf.conv" + std::to_string(l);
        h = ops::leaky_relu(nn::conv3d(h, p[name + ".k"], p[name + ".b"], plan.geom[l]), T(0.2));
    }
    return nn::dense(nn::flatten(h), p["clf.out.w"], p["clf.out.b"]);
}

DNNClassifier::DNNClassifier(const DNNConfig& config, const data::Dims& dims, std::vector<std::string> class_table)
    : config_(config), dims_(dims), class_table_(std::move(class_table)), plan_(models::ConvPlan::make(dims)) {
    config_.validate();
    if (class_table_.size() < 2) throw ContractError("DNN classifier needs at least 2 classes");
    params_ = init_dnn_parameters<float>(plan_, config_, class_table_.size(), derive_seed(config.seed, {0}));
}

DNNClassifier DNNClassifier::train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                                   const DNNConfig& config) {
    config.validate();
    if (train_set.size() == 0) throw ContractError("DNN training set is empty");
    if (train_set.size() < 2) throw DegenerateBatchError("DNN training needs at least 2 samples");
    DNNClassifier model(config, train_set.dims(), train_set.class_table);
    tensor::AdamState<float> adam(tensor::AdamConfig{config.learning_rate});
    const std::size_t C = train_set.num_classes();
    const bool select = validation != nullptr && validation->size() > 0;
    ParameterSet<float> best = model.params_;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        DNNEpoch stats;
        double weight = 0;
        for (const auto& idx :
             models::make_batches(train_set.size(), config.batch_size, derive_seed(config.seed, {1, epoch}))) {
            std::vector<std::size_t> labels;
            for (auto i : idx) labels.push_back(train_set.labels[i]);
            Graph<float> g(tensor::Mode::training);
            tensor::BoundParams<float> p(g, model.params_);
            auto logits = dnn_logits(model.plan_, config, p, g.constant(data::volumes_to_tensor<float>(train_set, idx)));
            auto loss = nn::softmax_cross_entropy(logits, data::one_hot<float>(labels, C));
            stats.train_loss += loss.value().item() * static_cast<double>(idx.size());
            weight += static_cast<double>(idx.size());
            tensor::adam_step(model.params_, g.backward(loss), adam);
        }
        stats.train_loss /= weight;
        if (select) {
            stats.has_validation = true;
            stats.validation_loss = model.loss(*validation);
            const auto pred = model.predict(*validation);
            std::size_t ok = 0;
            for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == validation->labels[i];
            stats.validation_accuracy = static_cast<double>(ok) / static_cast<double>(pred.size());
            if (stats.validation_loss < best_loss) {
                best_loss = stats.validation_loss;
                best = model.params_;
                model.best_epoch_ = epoch;
            }
        }
        model.history_.push_back(stats);
    }
    if (select) {
        model.params_ = best;
    } else {
        model.best_epoch_ = config.epochs == 0 ? 0 : config.epochs - 1;
    }
    return model;
}

Tensor<float> DNNClassifier::logits(const Tensor<float>& batch) const {
    Graph<float> g(tensor::Mode::inference);
    tensor::BoundParams<float> p(g, params_);
    return dnn_logits(plan_, config_, p, g.constant(batch)).value();
}

double DNNClassifier::loss(const data::VolumeDataset& ds) const {
    if (ds.size() == 0) throw ContractError("loss of an empty dataset");
    double total = 0;
    for (std::size_t start = 0; start < ds.size(); start += config_.batch_size) {
        std::vector<std::size_t> idx, labels;
        for (std::size_t i = start; i < std::min(ds.size(), start + config_.batch_size); ++i) {
            idx.push_back(i);
            labels.push_back(ds.labels[i]);
        }
        Graph<float> g(tensor::Mode::inference);
        tensor::BoundParams<float> p(g, params_);
        auto l = nn::softmax_cross_entropy(dnn_logits(plan_, config_, p, g.constant(data::volumes_to_tensor<float>(ds, idx))),
                                           data::one_hot<float>(labels, class_table_.size()));
        total += l.value().item() * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(ds.size());
}

std::vector<std::size_t> DNNClassifier::predict(std::span<const data::Volume> volumes) const {
    std::vector<std::size_t> out;
    const std::size_t C = class_table_.size();
    for (std::size_t start = 0; start < volumes.size(); start += config_.batch_size) {
        const std::size_t n = std::min(volumes.size(), start + config_.batch_size) - start;
        Tensor<float> batch(models::batch_shape(n, 1, plan_.spatial[0]));
        const std::size_t V = models::voxels(plan_.spatial[0]);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& v = volumes[start + i];
            if (v.dims != dims_) {
                throw DimensionError("classifier expects volumes of " + data::to_string(dims_) + ", got " +
                                     data::to_string(v.dims));
            }
            for (std::size_t k = 0; k < V; ++k) batch[i * V + k] = static_cast<float>(v.voxels[k]);
        }
        const auto l = logits(batch);
        std::vector<double> row(C);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < C; ++c) row[c] = l[i * C + c];
            out.push_back(argmax(row));
        }
    }
    return out;
}

std::vector<std::size_t> DNNClassifier::predict(const data::VolumeDataset& ds) const { return predict(ds.volumes); }

void DNNClassifier::save(const std::filesystem::path& path) const {
    tensor::write_checkpoint(path, params_,
                             {{"model", "dnn"},
                              {"config", config_.to_json()},
                              {"dims", dims_},
                              {"class_table", class_table_},
                              {"best_epoch", best_epoch_}});
}

DNNClassifier DNNClassifier::load(const std::filesystem::path& path) {
    auto ck = tensor::read_checkpoint(path);
    if (ck.meta.value("model", "") != "dnn") throw FormatError(path.string() + " is not a DNN classifier checkpoint");
    DNNClassifier m(DNNConfig::from_json(ck.meta.at("config")), ck.meta.at("dims").get<data::Dims>(),
                    ck.meta.at("class_table").get<std::vector<std::string>>());
    const auto all = ck.params.cast<float>();
    for (auto& [name, t] : m.params_) {
        const auto& src = all.at(name);
        if (src.shape() != t.shape()) throw FormatError("classifier parameter '" + name + "' has the wrong shape");
        t = src;
    }
    m.best_epoch_ = ck.meta.value("best_epoch", std::size_t{0});
    return m;
}

template ParameterSet<float> init_dnn_parameters<float>(const models::ConvPlan&, const DNNConfig&, std::size_t,
                                                        std::uint64_t);
template ParameterSet<double> init_dnn_parameters<double>(const models::ConvPlan&, const DNNConfig&, std::size_t,
                                                          std::uint64_t);
template Var<float> dnn_logits(const models::ConvPlan&, const DNNConfig&, const tensor::BoundParams<float>&,
                               Var<float>);
template Var<double> dnn_logits(const models::ConvPlan&, const DNNConfig&, const tensor::BoundParams<double>&,
                                Var<double>);

}  // namespace volsynth::classify
