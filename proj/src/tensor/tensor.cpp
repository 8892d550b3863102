#include "volsynth/tensor/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace volsynth::tensor {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }
}

template <typename T>
T Tensor<T>::item() const {
    if (data_.size() != 1) {
        throw ContractError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    for (T v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace volsynth::tensor
