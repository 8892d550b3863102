#include "volsynth/gan/icwgan.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include "volsynth/tensor/adam.hpp"
#include "volsynth/tensor/checkpoint.hpp"
#include "volsynth/util/json_config.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::gan {

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

std::vector<float> uniform01(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<float> out(n);
    for (auto& v : out) v = static_cast<float>(u(rng));
    return out;
}

std::size_t generator_out_channels(const Architecture& a, std::size_t src) {
    return src == 0 ? 1 : a.config.channels[src - 1];
}

}  // namespace

void GANConfig::validate() const {
    if (z_dim < 1) throw ContractError("GAN z_dim must be >= 1");
    if (!(lambda_gp >= 0)) throw ContractError("GAN lambda_gp must be >= 0");
    if (critic_iters < 1) throw ContractError("GAN critic_iters must be >= 1");
    if (batch_size < 2) throw DegenerateBatchError("GAN batch_size must be >= 2 for batch normalization");
    if (!(learning_rate > 0)) throw ContractError("GAN learning_rate must be > 0");
    if (channels.size() != L) throw ContractError("GAN needs exactly 4 channel widths");
    for (auto c : channels)
        if (c == 0) throw ContractError("GAN channel widths must be positive");
}

nlohmann::json GANConfig::to_json() const {
    return {{"z_dim", z_dim},           {"lambda_gp", lambda_gp}, {"critic_iters", critic_iters},
            {"batch_size", batch_size}, {"learning_rate", learning_rate}, {"epochs", epochs},
            {"seed", seed},             {"channels", channels}};
}

GANConfig GANConfig::from_json(const nlohmann::json& j) {
    const std::string where = "gan config";
    reject_unknown_keys(
        j, {"z_dim", "lambda_gp", "critic_iters", "batch_size", "learning_rate", "epochs", "seed", "channels"}, where);
    GANConfig c;
    read_field(j, "z_dim", c.z_dim, where);
    read_field(j, "lambda_gp", c.lambda_gp, where);
    read_field(j, "critic_iters", c.critic_iters, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "learning_rate", c.learning_rate, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "seed", c.seed, where);
    read_field(j, "channels", c.channels, where);
    c.validate();
    return c;
}

Architecture::Architecture(const GANConfig& cfg, const data::Dims& volume_dims, std::size_t classes)
    : config(cfg), dims(volume_dims), num_classes(classes), plan(models::ConvPlan::make(volume_dims)) {
    config.validate();
    if (classes == 0) throw ContractError("GAN needs at least one class");
}

template <typename T>
ParameterSet<T> init_generator(const Architecture& a, std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<T> p;
    const auto& ch = a.config.channels;
    models::add_dense(p, "gen.fc", a.config.z_dim + a.num_classes, ch[L - 1] * voxels(a.plan.spatial[L]), rng);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t src = L - 1 - l;
        models::add_dense(p, "gen.label" + std::to_string(l), a.num_classes, voxels(a.plan.spatial[src + 1]), rng);
        const std::size_t out = generator_out_channels(a, src);
        models::add_conv_transpose(p, "gen.deconv" + std::to_string(l), ch[src] + 1, out, a.plan.kernel[src], rng);
        if (l + 1 < L) models::add_batchnorm(p, "gen.bn" + std::to_string(l), out);
    }
    return p;
}

template <typename T>
ParameterSet<T> init_discriminator(const Architecture& a, std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<T> p;
    const auto& ch = a.config.channels;
    for (std::size_t l = 0; l < L; ++l) {
        models::add_dense(p, "disc.label" + std::to_string(l), a.num_classes, voxels(a.plan.spatial[l]), rng);
        const std::size_t in = (l == 0 ? 1 : ch[l - 1]) + 1;
        models::add_conv(p, "disc.conv" + std::to_string(l), ch[l], in, a.plan.kernel[l], rng);
    }
    models::add_dense(p, "disc.out", ch[L - 1] * voxels(a.plan.spatial[L]) + a.num_classes, 1, rng);
    return p;
}

template <typename T>
std::vector<tensor::BatchNormState<T>> init_generator_bn(const Architecture& a) {
    std::vector<tensor::BatchNormState<T>> s;
    for (std::size_t l = 0; l + 1 < L; ++l) s.emplace_back(generator_out_channels(a, L - 1 - l));
    return s;
}

template <typename T>
Var<T> generator_forward(const Architecture& a, const BoundParams<T>& p, std::vector<tensor::BatchNormState<T>>& bn,
                         Var<T> z, Var<T> y) {
    const std::size_t N = z.shape().at(0);
    if (z.shape() != Shape{N, a.config.z_dim} || y.shape() != Shape{N, a.num_classes}) {
        throw DimensionError("generator expects z [N," + std::to_string(a.config.z_dim) + "] and y [N," +
                             std::to_string(a.num_classes) + "], got " + tensor::to_string(z.shape()) + " and " +
                             tensor::to_string(y.shape()));
    }
    if (bn.size() != L - 1) throw ContractError("generator needs 3 batch-norm states");
    const auto& ch = a.config.channels;
    Var<T> h = nn::dense(ops::concat_channels(z, y), p["gen.fc.w"], p["gen.fc.b"]);
    h = ops::relu(ops::reshape(h, batch_shape(N, ch[L - 1], a.plan.spatial[L])));
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t src = L - 1 - l;
        const std::string id = std::to_string(l);
        h = ops::concat_channels(h, models::project_label(p, "gen.label" + id, y, a.plan.spatial[src + 1]));
        h = nn::conv3d_transpose(h, p["gen.deconv" + id + ".k"], p["gen.deconv" + id + ".b"], a.plan.geom[src],
                                 a.plan.spatial[src]);
        if (l + 1 < L) h = ops::relu(nn::batchnorm3d(h, p["gen.bn" + id + ".gamma"], p["gen.bn" + id + ".beta"], bn[l]));
    }
    return ops::sigmoid(h);
}

template <typename T>
Var<T> discriminator_forward(const Architecture& a, const BoundParams<T>& p, Var<T> x, Var<T> y) {
    const std::size_t N = x.shape().at(0);
    if (x.shape() != batch_shape(N, 1, a.plan.spatial[0])) {
        throw DimensionError("discriminator expects " + tensor::to_string(batch_shape(N, 1, a.plan.spatial[0])) +
                             ", got " + tensor::to_string(x.shape()));
    }
    if (y.shape() != Shape{N, a.num_classes}) {
        throw DimensionError("discriminator label batch " + tensor::to_string(y.shape()) + " does not match input " +
                             tensor::to_string(x.shape()));
    }
    Var<T> h = x;
    for (std::size_t l = 0; l < L; ++l) {
        const std::string id = std::to_string(l);
        h = ops::concat_channels(h, models::project_label(p, "disc.label" + id, y, a.plan.spatial[l]));
        h = ops::leaky_relu(nn::conv3d(h, p["disc.conv" + id + ".k"], p["disc.conv" + id + ".b"], a.plan.geom[l]),
                            T(0.2));
    }
    return nn::dense(ops::concat_channels(nn::flatten(h), y), p["disc.out.w"], p["disc.out.b"]);
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& real, const Tensor<T>& fake, std::span<const T> eps) {
    if (real.shape() != fake.shape()) {
        throw DimensionError("interpolate shapes " + tensor::to_string(real.shape()) + " and " +
                             tensor::to_string(fake.shape()));
    }
    const std::size_t N = real.shape().at(0);
    if (eps.size() != N) throw DimensionError("interpolate needs one eps per sample");
    Tensor<T> out(real.shape());
    const std::size_t inner = N == 0 ? 0 : real.size() / N;
    for (std::size_t n = 0; n < N; ++n) {
        const T e = eps[n];
        if (!(e >= T(0) && e <= T(1))) throw ContractError("interpolation eps must lie in [0,1]");
        for (std::size_t i = n * inner; i < (n + 1) * inner; ++i) {
            out.data()[i] = e * real.data()[i] + (T(1) - e) * fake.data()[i];
        }
    }
    return out;
}

template <typename T>
Var<T> gradient_penalty(const Critic<T>& critic, Var<T> x_hat, Var<T> y) {
    Graph<T>& g = x_hat.graph();
    if (!g.training()) throw ContractError("gradient unavailable: graph built in inference mode");
    if (!g.node(x_hat.id()).requires_grad) throw ContractError("gradient penalty needs x_hat to be a graph variable");
    const std::size_t N = x_hat.shape().at(0);
    if (N == 0) throw ContractError("gradient penalty of an empty batch");
    Var<T> score = critic(x_hat, y);
    const std::array<Var<T>, 1> wrt{x_hat};
    Var<T> grad = g.grad(ops::sum(score), wrt, true)[0];
    Var<T> norm = ops::sqrt(ops::sample_sum(ops::mul(grad, grad)));
    Var<T> gap = ops::add_scalar(norm, T(-1));
    return ops::scale(ops::sum(ops::mul(gap, gap)), T(1) / static_cast<T>(N));
}

template <typename T>
CriticLoss<T> critic_loss(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                          const Tensor<T>& labels, std::span<const T> eps, double lambda, Graph<T>& g) {
    if (real.rank() == 0 || real.shape()[0] == 0) throw ContractError("critic loss of an empty batch");
    Var<T> y = g.constant(labels);
    CriticLoss<T> out;
    out.fake_term = nn::mean(critic(g.constant(fake), y));
    out.real_term = nn::mean(critic(g.constant(real), y));
    out.penalty = gradient_penalty(critic, g.variable(interpolate(real, fake, eps)), y);
    out.total = ops::add(ops::sub(out.fake_term, out.real_term), ops::scale(out.penalty, static_cast<T>(lambda)));
    return out;
}

template <typename T>
Var<T> generator_loss(const Critic<T>& critic, Var<T> fake, Var<T> y) {
    if (fake.shape().at(0) == 0) throw ContractError("generator loss of an empty batch");
    return ops::scale(nn::mean(critic(fake, y)), T(-1));
}

void write_training_log(std::ostream& os, const std::vector<StepLog>& log) {
    os << "step,role,loss,penalty_term\n";
    const auto old = os.precision(10);
    for (const auto& e : log) {
        os << e.step << ',' << (e.role == StepLog::Role::critic ? "critic" : "gen") << ',' << e.loss << ','
           << e.penalty_term << '\n';
    }
    os.precision(old);
}

ICWGAN::ICWGAN(const GANConfig& config, const data::Dims& dims, std::vector<std::string> class_table)
    : arch_(config, dims, class_table.size()),
      class_table_(std::move(class_table)),
      gen_(init_generator<float>(arch_, derive_seed(config.seed, {0}))),
      disc_(init_discriminator<float>(arch_, derive_seed(config.seed, {1}))),
      bn_(init_generator_bn<float>(arch_)) {}

ICWGAN ICWGAN::train(const data::VolumeDataset& train_set, const data::VolumeDataset* validation,
                     const GANConfig& config) {
    config.validate();
    if (train_set.size() == 0) throw ContractError("GAN training set is empty");
    if (config.batch_size > train_set.size()) {
        throw ContractError("GAN batch_size " + std::to_string(config.batch_size) + " exceeds dataset size " +
                            std::to_string(train_set.size()));
    }
    const auto counts = train_set.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) throw ContractError("GAN training set has no samples of class '" + train_set.class_table[c] + "'");
    }
    ICWGAN model(config, train_set.dims(), train_set.class_table);
    tensor::AdamState<float> adam_g(tensor::AdamConfig::gan(config.learning_rate));
    tensor::AdamState<float> adam_d(tensor::AdamConfig::gan(config.learning_rate));
    const std::size_t C = train_set.num_classes();
    const std::size_t Z = config.z_dim;
    const bool track = validation != nullptr && validation->size() > 0;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = models::make_batches(train_set.size(), config.batch_size, derive_seed(config.seed, {2, epoch}));
        const std::size_t gen_steps = std::max<std::size_t>(1, batches.size() / config.critic_iters);
        std::size_t next_batch = 0;
        for (std::size_t gs = 0; gs < gen_steps; ++gs) {
            std::vector<std::size_t> labels;
            for (std::size_t ci = 0; ci < config.critic_iters; ++ci, ++step) {
                const auto& idx = batches[next_batch++ % batches.size()];
                labels.clear();
                for (auto i : idx) labels.push_back(train_set.labels[i]);
                const std::size_t N = idx.size();
                const auto y = data::one_hot<float>(labels, C);
                Tensor<float> fake;
                {
                    // Fakes come from the training-mode generator; its batch-norm
                    // statistics are updated only on generator steps.
                    Graph<float> gg(tensor::Mode::training);
                    BoundParams<float> gp(gg, model.gen_);
                    auto bn = model.bn_;
                    fake = generator_forward(model.arch_, gp, bn, gg.constant(standard_normal<float>(
                                                                      Shape{N, Z}, derive_seed(config.seed, {3, step}))),
                                             gg.constant(y))
                               .value();
                }
                Graph<float> g(tensor::Mode::training);
                BoundParams<float> dp(g, model.disc_);
                const Critic<float> critic = [&](Var<float> x, Var<float> yy) {
                    return discriminator_forward(model.arch_, dp, x, yy);
                };
                const auto eps = uniform01(N, derive_seed(config.seed, {4, step}));
                auto loss = critic_loss<float>(critic, data::volumes_to_tensor<float>(train_set, idx), fake, y, eps,
                                               config.lambda_gp, g);
                model.log_.push_back({step, StepLog::Role::critic, loss.total.value().item(),
                                      config.lambda_gp * loss.penalty.value().item()});
                tensor::adam_step(model.disc_, g.backward(loss.total), adam_d);
            }
            // Generator step, conditioned on the labels of the last real batch.
            const std::size_t N = labels.size();
            Graph<float> g(tensor::Mode::training);
            BoundParams<float> gp(g, model.gen_);
            BoundParams<float> dp(g, model.disc_);
            auto yv = g.constant(data::one_hot<float>(labels, C));
            auto fake = generator_forward(
                model.arch_, gp, model.bn_, g.constant(standard_normal<float>(Shape{N, Z}, derive_seed(config.seed, {5, step}))),
                yv);
            const Critic<float> critic = [&](Var<float> x, Var<float> yy) {
                return discriminator_forward(model.arch_, dp, x, yy);
            };
            auto loss = generator_loss(critic, fake, yv);
            model.log_.push_back({step, StepLog::Role::gen, loss.value().item(), 0.0});
            ++step;
            tensor::adam_step(model.gen_, g.backward(loss), adam_g);
        }
        if (track) model.validation_w_.push_back(model.wasserstein_estimate(*validation, derive_seed(config.seed, {6})));
    }
    model.selected_epoch_ = config.epochs == 0 ? 0 : config.epochs - 1;
    return model;
}

double ICWGAN::wasserstein_estimate(const data::VolumeDataset& ds, std::uint64_t seed) const {
    if (ds.size() == 0) throw ContractError("Wasserstein estimate of an empty dataset");
    const std::size_t B = arch_.config.batch_size;
    double real_sum = 0, fake_sum = 0;
    for (std::size_t start = 0, b = 0; start < ds.size(); start += B, ++b) {
        std::vector<std::size_t> idx, labels;
        for (std::size_t i = start; i < std::min(ds.size(), start + B); ++i) {
            idx.push_back(i);
            labels.push_back(ds.labels[i]);
        }
        Graph<float> g(tensor::Mode::inference);
        BoundParams<float> gp(g, gen_);
        BoundParams<float> dp(g, disc_);
        auto bn = bn_;
        auto y = g.constant(data::one_hot<float>(labels, arch_.num_classes));
        auto z = g.constant(standard_normal<float>(Shape{idx.size(), arch_.config.z_dim}, derive_seed(seed, {b})));
        auto fake = generator_forward(arch_, gp, bn, z, y);
        auto d_real = discriminator_forward(arch_, dp, g.constant(data::volumes_to_tensor<float>(ds, idx)), y);
        auto d_fake = discriminator_forward(arch_, dp, fake, y);
        for (float v : d_real.value().data()) real_sum += v;
        for (float v : d_fake.value().data()) fake_sum += v;
    }
    return (real_sum - fake_sum) / static_cast<double>(ds.size());
}

std::vector<data::Volume> ICWGAN::sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const {
    if (class_index >= arch_.num_classes) {
        throw UnknownClassError("ICW-GAN was trained on " + std::to_string(arch_.num_classes) + " classes, asked for " +
                                std::to_string(class_index));
    }
    if (n == 0) throw ContractError("sample count must be >= 1");
    Graph<float> g(tensor::Mode::inference);
    BoundParams<float> p(g, gen_);
    auto bn = bn_;
    std::vector<std::size_t> labels(n, class_index);
    auto z = g.constant(standard_normal<float>(Shape{n, arch_.config.z_dim}, seed));
    auto x = generator_forward(arch_, p, bn, z, g.constant(data::one_hot<float>(labels, arch_.num_classes)));
    std::vector<data::Volume> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(data::tensor_to_volume(x.value(), i));
    return out;
}

void ICWGAN::save(const std::filesystem::path& path) const {
    ParameterSet<float> all = gen_;
    for (const auto& [name, t] : disc_) all.add(name, t);
    models::export_bn_states(bn_, "gen.bn_state", all);
    nlohmann::json meta = {{"model", "icwgan"},
                           {"config", arch_.config.to_json()},
                           {"dims", arch_.dims},
                           {"class_table", class_table_},
                           {"selected_epoch", selected_epoch_}};
    tensor::write_checkpoint(path, all, meta);
}

ICWGAN ICWGAN::load(const std::filesystem::path& path) {
    auto ck = tensor::read_checkpoint(path);
    if (ck.meta.value("model", "") != "icwgan") throw FormatError(path.string() + " is not an ICW-GAN checkpoint");
    ICWGAN m(GANConfig::from_json(ck.meta.at("config")), ck.meta.at("dims").get<data::Dims>(),
             ck.meta.at("class_table").get<std::vector<std::string>>());
    const auto all = ck.params.cast<float>();
    for (auto* set : {&m.gen_, &m.disc_}) {
        for (auto& [name, t] : *set) {
            const auto& src = all.at(name);
            if (src.shape() != t.shape()) throw FormatError("ICW-GAN parameter '" + name + "' has the wrong shape");
            t = src;
        }
    }
    models::import_bn_states(m.bn_, "gen.bn_state", all);
    m.selected_epoch_ = ck.meta.value("selected_epoch", std::size_t{0});
    return m;
}

#define VOLSYNTH_INSTANTIATE_GAN(T)                                                                                 \
    template ParameterSet<T> init_generator<T>(const Architecture&, std::uint64_t);                                 \
    template ParameterSet<T> init_discriminator<T>(const Architecture&, std::uint64_t);                             \
    template std::vector<tensor::BatchNormState<T>> init_generator_bn<T>(const Architecture&);                      \
    template Var<T> generator_forward(const Architecture&, const BoundParams<T>&,                                   \
                                      std::vector<tensor::BatchNormState<T>>&, Var<T>, Var<T>);                     \
    template Var<T> discriminator_forward(const Architecture&, const BoundParams<T>&, Var<T>, Var<T>);              \
    template Tensor<T> interpolate(const Tensor<T>&, const Tensor<T>&, std::span<const T>);                         \
    template Var<T> gradient_penalty(const Critic<T>&, Var<T>, Var<T>);                                             \
    template CriticLoss<T> critic_loss(const Critic<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                       std::span<const T>, double, Graph<T>&);                                      \
    template Var<T> generator_loss(const Critic<T>&, Var<T>, Var<T>);

VOLSYNTH_INSTANTIATE_GAN(float)
VOLSYNTH_INSTANTIATE_GAN(double)
#undef VOLSYNTH_INSTANTIATE_GAN

}  // namespace volsynth::gan
