#include "volsynth/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "volsynth/util/random.hpp"

namespace volsynth::data {

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(std::span<const std::size_t> labels, std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw ContractError("label " + std::to_string(labels[i]) + " outside " + std::to_string(num_classes) +
                                " classes");
        }
        by_class[labels[i]].push_back(i);
    }
    return by_class;
}

void shuffle_with(std::vector<std::size_t>& v, std::uint64_t seed) {
    Rng rng(seed);
    std::shuffle(v.begin(), v.end(), rng);
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    return s.substr(i);
}

}  // namespace

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::real: return "real";
        case Provenance::synthetic: return "synthetic";
        case Provenance::noisy: return "noisy";
    }
    return "?";
}

LabelVector::LabelVector(std::size_t index, std::size_t classes) : class_index(index), num_classes(classes) {
    if (index >= classes) {
        throw UnknownClassError("class " + std::to_string(index) + " outside " + std::to_string(classes) + " classes");
    }
}

std::vector<std::uint8_t> LabelVector::bits() const {
    std::vector<std::uint8_t> b(num_classes, 0);
    b[class_index] = 1;
    return b;
}

Dims VolumeDataset::dims() const {
    if (volumes.empty()) throw ContractError("empty dataset has no dims");
    return volumes.front().dims;
}

void VolumeDataset::add(Volume volume, std::size_t label, Provenance prov, std::uint64_t id) {
    if (label >= class_table.size()) {
        throw UnknownClassError("label " + std::to_string(label) + " outside class table of " +
                                std::to_string(class_table.size()));
    }
    if (!volumes.empty() && volume.dims != volumes.front().dims) {
        throw DimensionError("dataset holds " + to_string(volumes.front().dims) + " volumes, got " +
                             to_string(volume.dims));
    }
    volumes.push_back(std::move(volume));
    labels.push_back(label);
    provenance.push_back(prov);
    ids.push_back(id);
}

std::vector<std::size_t> VolumeDataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes(), 0);
    for (std::size_t l : labels) ++counts.at(l);
    return counts;
}

VolumeDataset VolumeDataset::subset(std::span<const std::size_t> indices) const {
    VolumeDataset out;
    out.class_table = class_table;
    for (std::size_t i : indices) out.add(volumes.at(i), labels.at(i), provenance.at(i), ids.at(i));
    return out;
}

void VolumeDataset::append(const VolumeDataset& other) {
    if (other.class_table != class_table) throw ContractError("cannot append datasets with different class tables");
    for (std::size_t i = 0; i < other.size(); ++i)
        add(other.volumes[i], other.labels[i], other.provenance[i], other.ids[i]);
}

void VolumeDataset::validate() const {
    if (labels.size() != volumes.size() || provenance.size() != volumes.size() || ids.size() != volumes.size()) {
        throw ContractError("dataset arrays are not parallel");
    }
    for (std::size_t i = 0; i < size(); ++i) {
        if (labels[i] >= class_table.size()) throw UnknownClassError("label outside class table");
        if (volumes[i].dims != volumes.front().dims) throw DimensionError("dataset volumes differ in dims");
        if (volumes[i].size() != voxel_count(volumes[i].dims)) throw DimensionError("volume voxel count mismatch");
    }
}

SplitResult split_by_class_size(const VolumeDataset& dataset, std::uint64_t seed) {
    if (dataset.size() == 0) throw ContractError("split_by_class_size: empty dataset");
    SplitResult r;
    auto by_class = indices_by_class(dataset.labels, dataset.num_classes());
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        const std::size_t n = idx.size();
        if (n < 30) {
            r.dropped_classes.push_back(c);
            continue;
        }
        const double r_val = n >= 100 ? 0.1 : 1.0 / 6.0;
        const double r_test = n >= 100 ? 0.2 : 2.0 / 6.0;
        const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) * r_test));
        const auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(n) * r_val));
        shuffle_with(idx, derive_seed(seed, {c}));
        r.test.insert(r.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        r.validation.insert(r.validation.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                            idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
        r.train.insert(r.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), idx.end());
    }
    std::sort(r.train.begin(), r.train.end());
    std::sort(r.validation.begin(), r.validation.end());
    std::sort(r.test.begin(), r.test.end());
    return r;
}

std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const std::size_t> labels, std::size_t num_classes,
                                                       std::size_t k, std::uint64_t seed,
                                                       std::span<const std::string> class_names) {
    if (k < 2) throw ContractError("stratified_kfold needs k >= 2");
    auto by_class = indices_by_class(labels, num_classes);
    std::vector<std::vector<std::size_t>> folds(k);
    std::size_t offset = 0;  // rotates so leftover samples spread over folds
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& idx = by_class[c];
        if (idx.empty()) continue;
        if (idx.size() < k) {
            const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
            throw StratificationError("class '" + name + "' has " + std::to_string(idx.size()) +
                                      " samples, fewer than " + std::to_string(k) + " folds");
        }
        shuffle_with(idx, derive_seed(seed, {c}));
        for (std::size_t j = 0; j < idx.size(); ++j) folds[(offset + j) % k].push_back(idx[j]);
        offset = (offset + idx.size()) % k;
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

std::vector<std::vector<std::size_t>> stratified_kfold(const VolumeDataset& dataset, std::size_t k,
                                                       std::uint64_t seed) {
    return stratified_kfold(dataset.labels, dataset.num_classes(), k, seed, dataset.class_table);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    std::span<const std::size_t> indices, std::span<const std::size_t> labels, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ContractError("holdout fraction must be in [0,1)");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i : indices) by_class[labels[i]].push_back(i);
    std::vector<std::size_t> kept, held;
    for (auto& [c, idx] : by_class) {
        shuffle_with(idx, derive_seed(seed, {c}));
        auto n_held = static_cast<std::size_t>(std::lround(static_cast<double>(idx.size()) * fraction));
        if (fraction > 0.0 && n_held == 0 && idx.size() >= 2) n_held = 1;
        held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
        kept.insert(kept.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
    }
    std::sort(kept.begin(), kept.end());
    std::sort(held.begin(), held.end());
    return {kept, held};
}

VolumeDataset make_blob_dataset(std::size_t num_classes, std::size_t per_class, const Dims& dims,
                                std::uint64_t seed, const BlobOptions& options) {
    if (num_classes == 0 || per_class == 0 || voxel_count(dims) == 0) {
        throw ContractError("make_blob_dataset needs positive classes, samples per class and dims");
    }
    struct Blob {
        std::array<double, 3> center;
        double width;
    };
    const double min_extent = static_cast<double>(std::min({dims[0], dims[1], dims[2]}));
    std::vector<std::vector<Blob>> layouts(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        Rng rng(derive_seed(seed, {0, c}));
        std::uniform_real_distribution<double> pos(0.2, 0.8), wid(options.width_min, options.width_max);
        for (std::size_t b = 0; b < options.blobs_per_class; ++b) {
            Blob blob{};
            for (std::size_t a = 0; a < 3; ++a) blob.center[a] = pos(rng) * static_cast<double>(dims[a]);
            blob.width = wid(rng) * min_extent;
            layouts[c].push_back(blob);
        }
    }

    VolumeDataset ds;
    for (std::size_t c = 0; c < num_classes; ++c) ds.class_table.push_back("class_" + std::to_string(c));
    std::uint64_t id = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            Rng rng(derive_seed(seed, {1, c, i}));
            std::normal_distribution<double> gauss(0.0, 1.0);
            std::uniform_real_distribution<double> amp(1.0 - options.amplitude_spread, 1.0 + options.amplitude_spread);
            std::vector<Blob> blobs = layouts[c];
            std::vector<double> amps;
            for (auto& b : blobs) {
                for (std::size_t a = 0; a < 3; ++a) b.center[a] += gauss(rng) * options.jitter * static_cast<double>(dims[a]);
                amps.push_back(amp(rng));
            }
            Volume v(dims);
            for (std::size_t z = 0; z < dims[0]; ++z)
                for (std::size_t y = 0; y < dims[1]; ++y)
                    for (std::size_t x = 0; x < dims[2]; ++x) {
                        double val = 0;
                        for (std::size_t b = 0; b < blobs.size(); ++b) {
                            const double dz = static_cast<double>(z) + 0.5 - blobs[b].center[0];
                            const double dy = static_cast<double>(y) + 0.5 - blobs[b].center[1];
                            const double dx = static_cast<double>(x) + 0.5 - blobs[b].center[2];
                            val += amps[b] * std::exp(-(dz * dz + dy * dy + dx * dx) /
                                                      (2.0 * blobs[b].width * blobs[b].width));
                        }
                        v.at(z, y, x) = val + options.noise_std * gauss(rng);
                    }
            ds.add(normalize_minmax(v), c, Provenance::real, id++);
        }
    }
    return ds;
}

VolumeDataset read_manifest(const std::filesystem::path& manifest, const std::filesystem::path& classes) {
    VolumeDataset ds;
    {
        std::ifstream in(classes);
        if (!in) throw Error("cannot open classes file " + classes.string());
        std::string line;
        while (std::getline(in, line)) {
            line = trim(line);
            if (!line.empty()) ds.class_table.push_back(line);
        }
    }
    std::ifstream in(manifest);
    if (!in) throw Error("cannot open manifest " + manifest.string());
    const auto base = manifest.parent_path();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) {
            throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": expected 'path,class_index'");
        }
        const std::string path = trim(line.substr(0, comma));
        std::size_t label = 0;
        try {
            std::size_t used = 0;
            const std::string field = trim(line.substr(comma + 1));
            label = std::stoul(field, &used);
            if (used != field.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": bad class index");
        }
        std::filesystem::path p(path);
        if (p.is_relative()) p = base / p;
        ds.add(read_volume(p), label, Provenance::real, line_no - 1);
    }
    if (ds.size() == 0) throw ContractError("manifest " + manifest.string() + " lists no volumes");
    return ds;
}

void write_dataset(const VolumeDataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "volumes");
    std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05zu.vvol", i);
        write_volume(dataset.volumes[i], dir / "volumes" / name);
        manifest << "volumes/" << name << ',' << dataset.labels[i] << '\n';
    }
    std::ofstream classes(dir / "classes.txt", std::ios::trunc);
    for (const auto& c : dataset.class_table) classes << c << '\n';
    if (!manifest || !classes) throw Error("failed writing dataset to " + dir.string());
}

template <typename T>
tensor::Tensor<T> volumes_to_tensor(const VolumeDataset& dataset, std::span<const std::size_t> indices) {
    const Dims d = dataset.dims();
    const std::size_t v = voxel_count(d);
    tensor::Tensor<T> out(tensor::Shape{indices.size(), 1, d[0], d[1], d[2]});
    for (std::size_t n = 0; n < indices.size(); ++n) {
        const auto& src = dataset.volumes.at(indices[n]).voxels;
        for (std::size_t i = 0; i < v; ++i) out[n * v + i] = static_cast<T>(src[i]);
    }
    return out;
}

template <typename T>
tensor::Tensor<T> one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
    tensor::Tensor<T> out(tensor::Shape{labels.size(), num_classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] >= num_classes) throw UnknownClassError("label " + std::to_string(labels[n]) + " out of range");
        out[n * num_classes + labels[n]] = T{1};
    }
    return out;
}

template <typename T>
Volume tensor_to_volume(const tensor::Tensor<T>& batch, std::size_t n) {
    if (batch.rank() != 5 || batch.dim(1) != 1) {
        throw DimensionError("expected [N,1,d,h,w] batch, got " + tensor::to_string(batch.shape()));
    }
    const Dims d{batch.dim(2), batch.dim(3), batch.dim(4)};
    const std::size_t v = voxel_count(d);
    Volume out(d);
    for (std::size_t i = 0; i < v; ++i) out.voxels[i] = static_cast<double>(batch[n * v + i]);
    return out;
}

template tensor::Tensor<float> volumes_to_tensor(const VolumeDataset&, std::span<const std::size_t>);
template tensor::Tensor<double> volumes_to_tensor(const VolumeDataset&, std::span<const std::size_t>);
template tensor::Tensor<float> one_hot(std::span<const std::size_t>, std::size_t);
template tensor::Tensor<double> one_hot(std::span<const std::size_t>, std::size_t);
template Volume tensor_to_volume(const tensor::Tensor<float>&, std::size_t);
template Volume tensor_to_volume(const tensor::Tensor<double>&, std::size_t);

}  // namespace volsynth::data
