#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "volsynth/data/volume.hpp"
#include "volsynth/tensor/tensor.hpp"

namespace volsynth::data {

enum class Provenance : std::uint8_t { real, synthetic, noisy };

const char* to_string(Provenance p);

// One-hot class encoding.
struct LabelVector {
    std::size_t class_index = 0;
    std::size_t num_classes = 0;

    LabelVector(std::size_t index, std::size_t classes);
    std::vector<std::uint8_t> bits() const;
};

// Parallel arrays of volumes and their per-sample metadata. `ids` identify
// samples across subsets: real samples keep the id they were loaded with,
// augmentation assigns fresh ids that never collide with real ones.
struct VolumeDataset {
    std::vector<Volume> volumes;
    std::vector<std::size_t> labels;
    std::vector<Provenance> provenance;
    std::vector<std::uint64_t> ids;
    std::vector<std::string> class_table;

    std::size_t size() const noexcept { return volumes.size(); }
    std::size_t num_classes() const noexcept { return class_table.size(); }
    Dims dims() const;

    void add(Volume volume, std::size_t label, Provenance prov, std::uint64_t id);
    LabelVector label_vector(std::size_t i) const { return {labels.at(i), num_classes()}; }
    std::vector<std::size_t> class_counts() const;
    VolumeDataset subset(std::span<const std::size_t> indices) const;
    void append(const VolumeDataset& other);
    // Throws if the parallel arrays disagree, a label is outside the class
    // table, or volumes have different dims.
    void validate() const;
};

struct SplitResult {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
    std::vector<std::size_t> dropped_classes;
};

// Per class: n >= 100 -> 7:1:2, 30 <= n < 100 -> 3:1:2, n < 30 dropped.
// test = round(n * r_test), validation = round(n * r_val), train = rest.
SplitResult split_by_class_size(const VolumeDataset& dataset, std::uint64_t seed);

// k disjoint folds covering every index; each class is spread so its per-fold
// counts differ by at most one. Indices inside a fold are sorted.
std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const std::size_t> labels, std::size_t num_classes,
                                                       std::size_t k, std::uint64_t seed,
                                                       std::span<const std::string> class_names = {});
std::vector<std::vector<std::size_t>> stratified_kfold(const VolumeDataset& dataset, std::size_t k,
                                                       std::uint64_t seed);

// Stratified holdout of `fraction` of each class (rounded, at least one sample
// if the class has two or more). Returns {kept, held_out}, both sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    std::span<const std::size_t> indices, std::span<const std::size_t> labels, double fraction, std::uint64_t seed);

struct BlobOptions {
    std::size_t blobs_per_class = 3;
    double width_min = 0.10;  // blob sigma as a fraction of the smallest extent
    double width_max = 0.18;
    double jitter = 0.04;     // per-sample center jitter, fraction of extent
    double amplitude_spread = 0.2;
    double noise_std = 0.05;
};

// Desk-scale stand-in for activation maps: each class owns a few Gaussian
// blobs; samples jitter them, add voxel noise and are min-max normalized.
// Samples are stored class by class; ids are 0..n-1.
VolumeDataset make_blob_dataset(std::size_t num_classes, std::size_t per_class, const Dims& dims,
                                std::uint64_t seed, const BlobOptions& options = {});

// Manifest: lines `path,class_index` (paths relative to the manifest's
// directory); classes file: one name per line. Loaded samples are real and
// get their line number as id.
VolumeDataset read_manifest(const std::filesystem::path& manifest, const std::filesystem::path& classes);

// Writes every volume as VVOL under `dir` plus manifest.csv and classes.txt.
void write_dataset(const VolumeDataset& dataset, const std::filesystem::path& dir);

// [N,1,d,h,w] batch of the given samples.
template <typename T>
tensor::Tensor<T> volumes_to_tensor(const VolumeDataset& dataset, std::span<const std::size_t> indices);
// [N,C] one-hot rows.
template <typename T>
tensor::Tensor<T> one_hot(std::span<const std::size_t> labels, std::size_t num_classes);
// Sample n of a [N,1,d,h,w] tensor as a Volume.
template <typename T>
Volume tensor_to_volume(const tensor::Tensor<T>& batch, std::size_t n);

}  // namespace volsynth::data
