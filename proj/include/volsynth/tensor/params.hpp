#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "volsynth/tensor/graph.hpp"
#include "volsynth/util/random.hpp"

namespace volsynth::tensor {

// Named trainable tensors in registration order. Order matters: checkpoints
// are written in it.
template <typename T>
class ParameterSet {
public:
    void add(std::string name, Tensor<T> value) {
        if (index_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(value));
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Tensor<T>& at(const std::string& name) { return entries_[lookup(name)].second; }
    const Tensor<T>& at(const std::string& name) const { return entries_[lookup(name)].second; }

    std::size_t size() const noexcept { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
        return out;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

// Parameters registered as nodes of one graph.
template <typename T>
class BoundParams {
public:
    BoundParams(Graph<T>& graph, const ParameterSet<T>& params) {
        for (const auto& [name, value] : params) vars_.emplace(name, graph.parameter(name, value));
    }

    Var<T> operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ContractError("parameter '" + name + "' not bound");
        return it->second;
    }

private:
    std::map<std::string, Var<T>> vars_;
};

// Zero-mean Gaussian initialization.
template <typename T>
Tensor<T> gaussian_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace volsynth::tensor
