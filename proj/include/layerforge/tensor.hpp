#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layerforge/errors.hpp"

namespace layerforge {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. `Tensor` (float) is the runtime type; the
/// gradient checker instantiates the same code with double.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_product(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (shape_product(shape_) != data_.size()) {
            throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string(shape_));
        }
    }

    static BasicTensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
        return BasicTensor({rows, cols}, fill);
    }

    static BasicTensor scalar(T value) { return BasicTensor({1, 1}, value); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const {
        if (i >= shape_.size()) throw IndexError("dim index out of range for shape " + shape_string(shape_));
        return shape_[i];
    }

    std::size_t rows() const {
        require_rank(2);
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank(2);
        return shape_[1];
    }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* raw() { return data_.data(); }
    const T* raw() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    BasicTensor reshaped(Shape shape) const {
        return BasicTensor(std::move(shape), data_);
    }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return BasicTensor<U>(shape_, std::move(out));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const BasicTensor& other) const { return shape_ == other.shape_; }

    /// Bitwise equality of shape and payload.
    bool bit_equal(const BasicTensor& other) const {
        return shape_ == other.shape_ &&
               (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
    }

    void require_rank(std::size_t r) const {
        if (shape_.size() != r) {
            throw ShapeError("expected rank " + std::to_string(r) + ", got shape " + shape_string(shape_));
        }
    }

private:
    void validate_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError("zero dimension in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace layerforge
