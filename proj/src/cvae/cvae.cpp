#include "volsynth/cvae/cvae.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "volsynth/tensor/adam.hpp"
#include "volsynth/tensor/checkpoint.hpp"
#include "volsynth/util/json_config.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::cvae {

namespace ops = tensor::ops;
namespace nn = tensor::nn;
using models::batch_shape;
using models::voxels;
using tensor::Graph;
using tensor::Shape;

namespace {

constexpr std::size_t L = models::kConvLayers;

template <typename T>
Tensor<T> standard_normal(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(g(rng));
    return t;
}

template <typename T>
LossParts to_parts(const LossVars<T>& l) {
    return {static_cast<double>(l.reconstruction.value().item()), static_cast<double>(l.kl.value().item()),
            static_cast<double>(l.total.value().item())};
}

}  // namespace

void CVAEConfig::validate() const {
    if (latent_dim < 1) throw ContractError("CVAE latent_dim must be >= 1");
    if (batch_size < 2) throw DegenerateBatchError("CVAE batch_size must be >= 2 for batch normalization");
    if (!(learning_rate > 0)) throw ContractError("CVAE learning_rate must be > 0");
    if (channels.size() != L) throw ContractError("CVAE needs exactly 4 channel widths");
    for (auto c : channels)
        if (c == 0) throw ContractError("CVAE channel widths must be positive");
}

nlohmann::json CVAEConfig::to_json() const {
    return {{"latent_dim", latent_dim},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"epochs", epochs},
            {"seed", seed},
            {"channels", channels},
            {"reconstruction", reconstruction == Reconstruction::bernoulli ? "bernoulli" : "mse"}};
}

CVAEConfig CVAEConfig::from_json(const nlohmann::json& j) {
    const std::string where = "cvae config";
    reject_unknown_keys(j, {"latent_dim", "batch_size", "learning_rate", "epochs", "seed", "channels", "reconstruction"},
                        where);
    CVAEConfig c;
    read_field(j, "latent_dim", c.latent_dim, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "seed", c.seed, where);
    read_field(j, "channels", c.channels, where);
    std::string rec = "bernoulli";
    read_field(j, "reconstruction", rec, where);
    if (rec == "bernoulli") {
        c.reconstruction = Reconstruction::bernoulli;
    } else if (rec == "mse") {
        c.reconstruction = Reconstruction::mse;
    } else {
        throw ContractError(where + ": reconstruction must be 'bernoulli' or 'mse'");
    }
    c.validate();
    return c;
}

Architecture::Architecture(const CVAEConfig& cfg, const data::Dims& volume_dims, std::size_t classes)
    : config(cfg), dims(volume_dims), num_classes(classes), plan(models::ConvPlan::make(volume_dims)) {
    config.validate();
    if (classes == 0) throw ContractError("CVAE needs at least one class");
}

std::size_t Architecture::flat_features() const { return config.channels[L - 1] * voxels(plan.spatial[L]); }

template <typename T>
ParameterSet<T> init_parameters(const Architecture& a, std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<T> p;
    const auto& ch = a.config.channels;
    models::add_dense(p, "enc.label", a.num_classes, voxels(a.plan.spatial[0]), rng);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t in = l == 0 ? 2 : ch[l - 1];
        models::add_conv(p, "enc.conv" + std::to_string(l), ch[l], in, a.plan.kernel[l], rng);
    }
    models::add_dense(p, "enc.mu", a.flat_features(), a.config.latent_dim, rng);
    models::add_dense(p, "enc.logvar", a.flat_features(), a.config.latent_dim, rng);
    // Start the posterior close to the prior.
    for (auto& v : p.at("enc.logvar.w").data()) v = static_cast<T>(v * T(0.1));

    models::add_dense(p, "dec.fc", a.config.latent_dim + a.num_classes, a.flat_features(), rng);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t src = L - 1 - l;  // mirrors encoder layer src
        const std::size_t in = ch[src];
        const std::size_t out = src == 0 ? 1 : ch[src - 1];
        models::add_conv_transpose(p, "dec.deconv" + std::to_string(l), in, out, a.plan.kernel[src], rng);
        if (l + 1 < L) models::add_batchnorm(p, "dec.bn" + std::to_string(l), out);
    }
    return p;
}

template <typename T>
std::vector<tensor::BatchNormState<T>> init_bn_states(const Architecture& a) {
    std::vector<tensor::BatchNormState<T>> s;
    for (std::size_t l = 0; l + 1 < L; ++l) s.emplace_back(a.config.channels[L - 2 - l]);
    return s;
}

template <typename T>
Encoded<T> encode(const Architecture& a, const BoundParams<T>& p, Var<T> x, Var<T> y) {
    const std::size_t N = x.shape().at(0);
    if (x.shape() != batch_shape(N, 1, a.plan.spatial[0])) {
        throw DimensionError("CVAE encoder expects " + tensor::to_string(batch_shape(N, 1, a.plan.spatial[0])) +
                             ", got " + tensor::to_string(x.shape()));
    }
    if (y.shape() != Shape{N, a.num_classes}) {
        throw DimensionError("CVAE label batch " + tensor::to_string(y.shape()) + " does not match input " +
                             tensor::to_string(x.shape()));
    }
    Var<T> h = ops::concat_channels(x, models::project_label(p, "enc.label", y, a.plan.spatial[0]));
    for (std::size_t l = 0; l < L; ++l) {
        const std::string name = "enc.conv" + std::to_string(l);
        h = ops::leaky_relu(nn::conv3d(h, p[name + ".k"], p[name + ".b"], a.plan.geom[l]), T(0.2));
    }
    Var<T> flat = nn::flatten(h);
    return {nn::dense(flat, p["enc.mu.w"], p["enc.mu.b"]), nn::dense(flat, p["enc.logvar.w"], p["enc.logvar.b"])};
}

template <typename T>
Var<T> reparameterize(Var<T> mu, Var<T> logvar, const Tensor<T>& eps) {
    if (mu.shape() != logvar.shape() || mu.shape() != eps.shape()) {
        throw DimensionError("reparameterize shapes: mu " + tensor::to_string(mu.shape()) + ", logvar " +
                             tensor::to_string(logvar.shape()) + ", eps " + tensor::to_string(eps.shape()));
    }
    Var<T> sigma = ops::exp(ops::scale(logvar, T(0.5)));
    return ops::add(mu, ops::mul(sigma, mu.graph().constant(eps)));
}

template <typename T>
Var<T> decode_logits(const Architecture& a, const BoundParams<T>& p, std::vector<tensor::BatchNormState<T>>& bn,
                     Var<T> z, Var<T> y) {
    const std::size_t N = z.shape().at(0);
    if (z.shape() != Shape{N, a.config.latent_dim} || y.shape() != Shape{N, a.num_classes}) {
        throw DimensionError("CVAE decoder expects z [N," + std::to_string(a.config.latent_dim) + "] and y [N," +
                             std::to_string(a.num_classes) + "], got " + tensor::to_string(z.shape()) + " and " +
                             tensor::to_string(y.shape()));
    }
    if (bn.size() != L - 1) throw ContractError("CVAE decoder needs 3 batch-norm states");
    const auto& ch = a.config.channels;
    Var<T> h = nn::dense(ops::concat_channels(z, y), p["dec.fc.w"], p["dec.fc.b"]);
    h = ops::relu(ops::reshape(h, batch_shape(N, ch[L - 1], a.plan.spatial[L])));
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t src = L - 1 - l;
        const std::string name = "dec.deconv" + std::to_string(l);
        h = nn::conv3d_transpose(h, p[name + ".k"], p[name + ".b"], a.plan.geom[src], a.plan.spatial[src]);
        if (l + 1 < L) {
            const std::string bn_name = "dec.bn" + std::to_string(l);
            h = ops::relu(nn::batchnorm3d(h, p[bn_name + ".gamma"], p[bn_name + ".beta"], bn[l]));
        }
    }
    return h;
}

template <typename T>
Var<T> decode(const Architecture& a, const BoundParams<T>& p, std::vector<tensor::BatchNormState<T>>& bn, Var<T> z,
              Var<T> y) {
    return ops::sigmoid(decode_logits(a, p, bn, z, y));
}

template <typename T>
Var<T> kl_divergence(Var<T> mu, Var<T> logvar) {
    const std::size_t N = mu.shape().at(0);
    Var<T> terms = ops::sub(ops::add(ops::exp(logvar), ops::mul(mu, mu)), ops::add_scalar(logvar, T(1)));
    return ops::scale(ops::sum(terms), T(0.5) / static_cast<T>(N));
}

template <typename T>
Var<T> reconstruction_loss(const Tensor<T>& x, Var<T> logits, Reconstruction kind) {
    if (x.shape() != logits.shape()) {
        throw DimensionError("reconstruction target " + tensor::to_string(x.shape()) + " vs output " +
                             tensor::to_string(logits.shape()));
    }
    Graph<T>& g = logits.graph();
    const std::size_t N = x.shape().at(0);
    if (kind == Reconstruction::mse) {
        Var<T> diff = ops::sub(ops::sigmoid(logits), g.constant(x));
        return ops::scale(ops::sum(ops::mul(diff, diff)), T(1) / static_cast<T>(N));
    }
    // BCE from logits: softplus(l) - x*l, minus the entropy of x per voxel.
    // Subtracting before the sum keeps the summands small near a good fit.
    Tensor<T> neg_entropy(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double p = static_cast<double>(x.data()[i]);
        if (p > 0 && p < 1) neg_entropy.data()[i] = static_cast<T>(p * std::log(p) + (1 - p) * std::log1p(-p));
    }
    Var<T> bce = ops::sub(ops::softplus(logits), ops::mul(g.constant(x), logits));
    return ops::scale(ops::sum(ops::add(bce, g.constant(neg_entropy))), T(1) / static_cast<T>(N));
}

template <typename T>
LossVars<T> elbo_loss(const Tensor<T>& x, Var<T> logits, Var<T> mu, Var<T> logvar, Reconstruction kind) {
    for (T v : x.data()) {
        if (!(v >= T(0) && v <= T(1))) throw ContractError("CVAE targets must lie in [0,1]");
    }
    LossVars<T> out;
    out.reconstruction = reconstruction_loss(x, logits, kind);
    out.kl = kl_divergence(mu, logvar);
    out.total = ops::add(out.reconstruction, out.kl);
    return out;
}

CVAE::CVAE(const CVAEConfig& config, const data::Dims& dims, std::vector<std::string> class_table)
    : arch_(config, dims, class_table.size()),
      class_table_(std::move(class_table)),
      params_(init_parameters<float>(arch_, derive_seed(config.seed, {0}))),
      bn_(init_bn_states<float>(arch_)) {}

CVAE CVAE::train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                 const CVAEConfig& config) {
    config.validate();
    if (train_set.size() == 0) throw ContractError("CVAE training set is empty");
    if (train_set.size() < 2) throw DegenerateBatchError("CVAE training needs at least 2 samples for batch norm");
    CVAE model(config, train_set.dims(), train_set.class_table);
    tensor::AdamState<float> adam(tensor::AdamConfig{config.learning_rate});

    CVAE best = model;
    double best_val = std::numeric_limits<double>::infinity();
    const std::size_t C = train_set.num_classes();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        EpochStats stats;
        double weight = 0;
        const auto batches =
            models::make_batches(train_set.size(), config.batch_size, derive_seed(config.seed, {1, epoch}));
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            std::vector<std::size_t> labels;
            for (auto i : idx) labels.push_back(train_set.labels[i]);
            const auto x = data::volumes_to_tensor<float>(train_set, idx);
            Graph<float> g(tensor::Mode::training);
            BoundParams<float> p(g, model.params_);
            auto y = g.constant(data::one_hot<float>(labels, C));
            auto enc = encode(model.arch_, p, g.constant(x), y);
            auto eps = standard_normal<float>(enc.mu.shape(), derive_seed(config.seed, {2, epoch, b}));
            auto z = reparameterize(enc.mu, enc.logvar, eps);
            auto logits = decode_logits(model.arch_, p, model.bn_, z, y);
            auto loss = elbo_loss(x, logits, enc.mu, enc.logvar, config.reconstruction);
            const auto parts = to_parts(loss);
            const double w = static_cast<double>(idx.size());
            stats.train.reconstruction += w * parts.reconstruction;
            stats.train.kl += w * parts.kl;
            stats.train.total += w * parts.total;
            weight += w;
            auto grads = g.backward(loss.total);
            tensor::adam_step(model.params_, grads, adam);
        }
        stats.train.reconstruction /= weight;
        stats.train.kl /= weight;
        stats.train.total /= weight;
        if (validation != nullptr && validation->size() > 0) {
            stats.has_validation = true;
            stats.validation = model.evaluate(*validation, derive_seed(config.seed, {3}));
        }
        model.history_.push_back(stats);
        const double score = stats.has_validation ? stats.validation.total : -static_cast<double>(epoch);
        if (score <= best_val || !stats.has_validation) {
            best_val = score;
            best.params_ = model.params_;
            best.bn_ = model.bn_;
            best.best_epoch_ = epoch;
        }
    }
    best.history_ = model.history_;
    return best;
}

LossParts CVAE::evaluate(const data::VolumeDataset& ds, std::uint64_t seed) const {
    LossParts sum;
    const std::size_t C = arch_.num_classes;
    const std::size_t B = arch_.config.batch_size;
    for (std::size_t start = 0, b = 0; start < ds.size(); start += B, ++b) {
        std::vector<std::size_t> idx, labels;
        for (std::size_t i = start; i < std::min(ds.size(), start + B); ++i) {
            idx.push_back(i);
            labels.push_back(ds.labels[i]);
        }
        const auto x = data::volumes_to_tensor<float>(ds, idx);
        Graph<float> g(tensor::Mode::inference);
        BoundParams<float> p(g, params_);
        auto bn = bn_;
        auto y = g.constant(data::one_hot<float>(labels, C));
        auto enc = encode(arch_, p, g.constant(x), y);
        auto z = reparameterize(enc.mu, enc.logvar, standard_normal<float>(enc.mu.shape(), derive_seed(seed, {b})));
        auto loss = elbo_loss(x, decode_logits(arch_, p, bn, z, y), enc.mu, enc.logvar, arch_.config.reconstruction);
        const auto parts = to_parts(loss);
        const double w = static_cast<double>(idx.size());
        sum.reconstruction += w * parts.reconstruction;
        sum.kl += w * parts.kl;
        sum.total += w * parts.total;
    }
    const double n = static_cast<double>(ds.size());
    return {sum.reconstruction / n, sum.kl / n, sum.total / n};
}

std::vector<data::Volume> CVAE::sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const {
    if (class_index >= arch_.num_classes) {
        throw UnknownClassError("CVAE was trained on " + std::to_string(arch_.num_classes) + " classes, asked for " +
                                std::to_string(class_index));
    }
    if (n == 0) throw ContractError("sample count must be >= 1");
    Graph<float> g(tensor::Mode::inference);
    BoundParams<float> p(g, params_);
    auto bn = bn_;
    std::vector<std::size_t> labels(n, class_index);
    auto z = g.constant(standard_normal<float>(Shape{n, arch_.config.latent_dim}, seed));
    auto x = decode(arch_, p, bn, z, g.constant(data::one_hot<float>(labels, arch_.num_classes)));
    std::vector<data::Volume> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(data::tensor_to_volume(x.value(), i));
    return out;
}

void CVAE::save(const std::filesystem::path& path) const {
    ParameterSet<float> all = params_;
    models::export_bn_states(bn_, "dec.bn_state", all);
    nlohmann::json meta = {{"model", "cvae"},
                           {"config", arch_.config.to_json()},
                           {"dims", arch_.dims},
                           {"class_table", class_table_},
                           {"best_epoch", best_epoch_}};
    tensor::write_checkpoint(path, all, meta);
}

CVAE CVAE::load(const std::filesystem::path& path) {
    auto ck = tensor::read_checkpoint(path);
    if (ck.meta.value("model", "") != "cvae") throw FormatError(path.string() + " is not a CVAE checkpoint");
    CVAE m(CVAEConfig::from_json(ck.meta.at("config")), ck.meta.at("dims").get<data::Dims>(),
           ck.meta.at("class_table").get<std::vector<std::string>>());
    const auto all = ck.params.cast<float>();
    for (auto& [name, t] : m.params_) {
        const auto& src = all.at(name);
        if (src.shape() != t.shape()) throw FormatError("CVAE parameter '" + name + "' has the wrong shape");
        t = src;
    }
    models::import_bn_states(m.bn_, "dec.bn_state", all);
    m.best_epoch_ = ck.meta.value("best_epoch", std::size_t{0});
    return m;
}

#define VOLSYNTH_INSTANTIATE_CVAE(T)                                                                             \
    template ParameterSet<T> init_parameters<T>(const Architecture&, std::uint64_t);                             \
    template std::vector<tensor::BatchNormState<T>> init_bn_states<T>(const Architecture&);                      \
    template Encoded<T> encode(const Architecture&, const BoundParams<T>&, Var<T>, Var<T>);                      \
    template Var<T> reparameterize(Var<T>, Var<T>, const Tensor<T>&);                                            \
    template Var<T> decode_logits(const Architecture&, const BoundParams<T>&,                                    \
                                  std::vector<tensor::BatchNormState<T>>&, Var<T>, Var<T>);                      \
    template Var<T> decode(const Architecture&, const BoundParams<T>&, std::vector<tensor::BatchNormState<T>>&, \
                           Var<T>, Var<T>);                                                                      \
    template Var<T> kl_divergence(Var<T>, Var<T>);                                                               \
    template Var<T> reconstruction_loss(const Tensor<T>&, Var<T>, Reconstruction);                               \
    template LossVars<T> elbo_loss(const Tensor<T>&, Var<T>, Var<T>, Var<T>, Reconstruction);

VOLSYNTH_INSTANTIATE_CVAE(float)
VOLSYNTH_INSTANTIATE_CVAE(double)
#undef VOLSYNTH_INSTANTIATE_CVAE

}  // namespace volsynth::cvae
