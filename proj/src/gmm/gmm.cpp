#include "volsynth/gmm/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "volsynth/tensor/checkpoint.hpp"
#include "volsynth/util/json_config.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::gmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2*pi)

double log_sum_exp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// log pi_k + log N(x; mu_k, var_k) for every k.
std::vector<double> component_log_densities(const GaussianMixture& m, std::span<const double> x) {
    if (x.size() != m.dim()) {
        throw DimensionError("feature length " + std::to_string(x.size()) + " vs mixture dimension " +
                             std::to_string(m.dim()));
    }
    std::vector<double> out(m.components());
    for (std::size_t k = 0; k < m.components(); ++k) {
        double acc = 0;
        const auto& mu = m.means[k];
        const auto& var = m.variances[k];
        for (std::size_t d = 0; d < x.size(); ++d) {
            const double diff = x[d] - mu[d];
            acc += kLog2Pi + std::log(var[d]) + diff * diff / var[d];
        }
        out[k] = std::log(m.weights[k]) - 0.5 * acc;
    }
    return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

GaussianMixture kmeanspp_init(const std::vector<std::vector<double>>& x, const EMConfig& cfg) {
    const std::size_t n = x.size(), D = x.front().size(), K = cfg.components;
    Rng rng(cfg.seed);
    std::vector<std::size_t> centers;
    centers.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (centers.size() < K) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(x[i], x[centers.back()]));
            total += d2[i];
        }
        std::size_t pick = 0;
        if (total > 0) {
            double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (pick = 0; pick + 1 < n; ++pick) {
                u -= d2[pick];
                if (u < 0 && d2[pick] > 0) break;
            }
        } else {
            pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        }
        centers.push_back(pick);
    }

    std::vector<double> mean(D, 0.0), var(D, 0.0);
    for (const auto& v : x)
        for (std::size_t d = 0; d < D; ++d) mean[d] += v[d];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (const auto& v : x)
        for (std::size_t d = 0; d < D; ++d) var[d] += (v[d] - mean[d]) * (v[d] - mean[d]);
    for (auto& s : var) s = std::max(s / static_cast<double>(n), cfg.variance_floor);

    GaussianMixture g;
    for (std::size_t k = 0; k < K; ++k) {
        g.weights.push_back(1.0 / static_cast<double>(K));
        g.means.push_back(x[centers[k]]);
        g.variances.push_back(var);
    }
    return g;
}

}  // namespace

void EMConfig::validate() const {
    if (components < 1) throw ContractError("EM needs at least one component");
    if (!(tolerance > 0)) throw ContractError("EM tolerance must be > 0");
    if (!(variance_floor > 0)) throw ContractError("EM variance floor must be > 0");
}

nlohmann::json EMConfig::to_json() const {
    return {{"components", components},
            {"max_iters", max_iters},
            {"tolerance", tolerance},
            {"variance_floor", variance_floor},
            {"seed", seed}};
}

EMConfig EMConfig::from_json(const nlohmann::json& j) {
    const std::string where = "gmm config";
    reject_unknown_keys(j, {"components", "max_iters", "tolerance", "variance_floor", "seed"}, where);
    EMConfig c;
    read_field(j, "components", c.components, where);
    read_field(j, "max_iters", c.max_iters, where);
    read_field(j, "tolerance", c.tolerance, where);
    read_field(j, "variance_floor", c.variance_floor, where);
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

double log_likelihood(const GaussianMixture& m, std::span<const double> x) {
    return log_sum_exp(component_log_densities(m, x));
}

std::vector<double> responsibilities(const GaussianMixture& m, std::span<const double> x) {
    auto lp = component_log_densities(m, x);
    const double z = log_sum_exp(lp);
    for (auto& v : lp) v = std::exp(v - z);
    return lp;
}

FitResult em_fit(const std::vector<std::vector<double>>& x, const EMConfig& cfg) {
    cfg.validate();
    const std::size_t n = x.size(), K = cfg.components;
    if (n < K) {
        throw ContractError("EM with " + std::to_string(K) + " components needs at least that many samples, got " +
                            std::to_string(n));
    }
    const std::size_t D = x.front().size();
    for (const auto& v : x)
        if (v.size() != D) throw DimensionError("EM features have inconsistent lengths");

    FitResult r;
    r.mixture = kmeanspp_init(x, cfg);
    GaussianMixture& g = r.mixture;
    std::vector<std::vector<double>> resp(n);
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t it = 0;; ++it) {
        double ll = 0;
        for (std::size_t i = 0; i < n; ++i) {
            auto lp = component_log_densities(g, x[i]);
            const double z = log_sum_exp(lp);
            ll += z;
            for (auto& v : lp) v = std::exp(v - z);
            resp[i] = std::move(lp);
        }
        ll /= static_cast<double>(n);
        r.log_likelihood_history.push_back(ll);
        if (it > 0 && ll - prev < cfg.tolerance) {
            r.converged = true;
            break;
        }
        if (it == cfg.max_iters) break;
        prev = ll;

        // M-step. A component with no responsibility keeps its mean and
        // variance and gets (near) zero weight.
        for (std::size_t k = 0; k < K; ++k) {
            double nk = 0;
            for (std::size_t i = 0; i < n; ++i) nk += resp[i][k];
            g.weights[k] = nk / static_cast<double>(n);
            if (nk <= std::numeric_limits<double>::min() * static_cast<double>(n)) continue;
            std::vector<double> mu(D, 0.0), var(D, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t d = 0; d < D; ++d) mu[d] += resp[i][k] * x[i][d];
            for (auto& m : mu) m /= nk;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t d = 0; d < D; ++d) var[d] += resp[i][k] * (x[i][d] - mu[d]) * (x[i][d] - mu[d]);
            for (auto& v : var) v = std::max(v / nk, cfg.variance_floor);
            g.means[k] = std::move(mu);
            g.variances[k] = std::move(var);
        }
        ++r.iterations;
    }
    return r;
}

std::vector<std::vector<double>> sample_mixture(const GaussianMixture& m, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ContractError("sample count must be >= 1");
    Rng rng(seed);
    std::discrete_distribution<std::size_t> pick(m.weights.begin(), m.weights.end());
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> out(n, std::vector<double>(m.dim()));
    for (auto& v : out) {
        const std::size_t k = pick(rng);
        for (std::size_t d = 0; d < v.size(); ++d) v[d] = m.means[k][d] + std::sqrt(m.variances[k][d]) * gauss(rng);
    }
    return out;
}

ClassGMM ClassGMM::fit(const data::VolumeDataset& train, const data::Mask& mask, const EMConfig& config) {
    config.validate();
    if (train.size() == 0) throw ContractError("GMM training set is empty");
    ClassGMM model;
    model.mask_ = mask;
    model.config_ = config;
    model.class_table_ = train.class_table;
    std::map<std::size_t, std::vector<std::vector<double>>> by_class;
    for (std::size_t i = 0; i < train.size(); ++i) by_class[train.labels[i]].push_back(data::apply_mask(train.volumes[i], mask));
    for (auto& [c, feats] : by_class) {
        EMConfig cfg = config;
        cfg.seed = derive_seed(config.seed, {c});
        model.fits_.emplace(c, em_fit(feats, cfg));
    }
    return model;
}

std::vector<std::size_t> ClassGMM::trained_classes() const {
    std::vector<std::size_t> out;
    for (const auto& [c, _] : fits_) out.push_back(c);
    return out;
}

const FitResult& ClassGMM::fit_result(std::size_t class_index) const {
    auto it = fits_.find(class_index);
    if (it == fits_.end()) {
        std::string list;
        for (auto c : trained_classes()) list += (list.empty() ? "" : ",") + std::to_string(c);
        throw UnknownClassError("GMM has no model for class " + std::to_string(class_index) + "; trained classes: [" +
                                list + "]");
    }
    return it->second;
}

const GaussianMixture& ClassGMM::mixture(std::size_t class_index) const { return fit_result(class_index).mixture; }

double ClassGMM::log_likelihood(std::size_t class_index, std::span<const double> x) const {
    return gmm::log_likelihood(mixture(class_index), x);
}

std::vector<data::Volume> ClassGMM::sample(std::size_t class_index, std::size_t n, std::uint64_t seed) const {
    const auto& m = mixture(class_index);
    if (n == 0) throw ContractError("sample count must be >= 1");
    std::vector<data::Volume> out;
    for (auto& f : sample_mixture(m, n, seed)) {
        auto v = data::scatter(f, mask_);
        for (auto& x : v.voxels) x = std::clamp(x, 0.0, 1.0);
        out.push_back(std::move(v));
    }
    return out;
}

void ClassGMM::save(const std::filesystem::path& path) const {
    tensor::ParameterSet<double> p;
    const auto& d = mask_.dims;
    tensor::Tensor<double> mask_t(tensor::Shape{d[0], d[1], d[2]});
    for (std::size_t i = 0; i < mask_.bits.size(); ++i) mask_t[i] = mask_.bits[i];
    p.add("mask", std::move(mask_t));
    const std::size_t K = config_.components, D = mask_.valid_count;
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& [c, fit] : fits_) {
        const auto& g = fit.mixture;
        tensor::Tensor<double> w(tensor::Shape{K}), mu(tensor::Shape{K, D}), var(tensor::Shape{K, D});
        for (std::size_t k = 0; k < K; ++k) {
            w[k] = g.weights[k];
            for (std::size_t j = 0; j < D; ++j) {
                mu[k * D + j] = g.means[k][j];
                var[k * D + j] = g.variances[k][j];
            }
        }
        const std::string prefix = "class" + std::to_string(c) + ".";
        p.add(prefix + "weights", std::move(w));
        p.add(prefix + "means", std::move(mu));
        p.add(prefix + "variances", std::move(var));
        classes.push_back(c);
    }
    nlohmann::json meta = {{"model", "gmm"},
                           {"classes", classes},
                           {"class_table", class_table_},
                           {"components", K},
                           {"feature_dim", D},
                           {"variance_floor", config_.variance_floor},
                           {"max_iters", config_.max_iters},
                           {"tolerance", config_.tolerance},
                           {"seed", config_.seed}};
    tensor::write_checkpoint(path, p, meta);
}

ClassGMM ClassGMM::load(const std::filesystem::path& path) {
    auto ck = tensor::read_checkpoint(path);
    if (ck.meta.value("model", "") != "gmm") throw FormatError(path.string() + " is not a GMM checkpoint");
    ClassGMM m;
    m.config_.components = ck.meta.at("components").get<std::size_t>();
    m.config_.variance_floor = ck.meta.at("variance_floor").get<double>();
    m.config_.max_iters = ck.meta.at("max_iters").get<std::size_t>();
    m.config_.tolerance = ck.meta.at("tolerance").get<double>();
    m.config_.seed = ck.meta.at("seed").get<std::uint64_t>();
    m.class_table_ = ck.meta.at("class_table").get<std::vector<std::string>>();
    const auto& mt = ck.params.at("mask");
    if (mt.rank() != 3) throw FormatError("GMM mask must be rank 3");
    std::vector<std::uint8_t> bits(mt.size());
    for (std::size_t i = 0; i < mt.size(); ++i) bits[i] = mt[i] != 0.0;
    m.mask_ = data::Mask(data::Dims{mt.dim(0), mt.dim(1), mt.dim(2)}, std::move(bits));
    const std::size_t K = m.config_.components, D = ck.meta.at("feature_dim").get<std::size_t>();
    if (D != m.mask_.valid_count) throw FormatError("GMM feature dimension does not match mask");
    for (std::size_t c : ck.meta.at("classes").get<std::vector<std::size_t>>()) {
        const std::string prefix = "class" + std::to_string(c) + ".";
        const auto& w = ck.params.at(prefix + "weights");
        const auto& mu = ck.params.at(prefix + "means");
        const auto& var = ck.params.at(prefix + "variances");
        if (w.shape() != tensor::Shape{K} || mu.shape() != tensor::Shape{K, D} || var.shape() != tensor::Shape{K, D}) {
            throw FormatError("GMM parameter shapes for class " + std::to_string(c) + " do not match header");
        }
        FitResult fit;
        for (std::size_t k = 0; k < K; ++k) {
            fit.mixture.weights.push_back(w[k]);
            fit.mixture.means.emplace_back(mu.storage().begin() + static_cast<std::ptrdiff_t>(k * D),
                                           mu.storage().begin() + static_cast<std::ptrdiff_t>((k + 1) * D));
            fit.mixture.variances.emplace_back(var.storage().begin() + static_cast<std::ptrdiff_t>(k * D),
                                               var.storage().begin() + static_cast<std::ptrdiff_t>((k + 1) * D));
        }
        m.fits_.emplace(c, std::move(fit));
    }
    return m;
}

}  // namespace volsynth::gmm
