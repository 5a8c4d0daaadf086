#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flexdoc/error.hpp"

namespace flexdoc {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Most of the engine works on rank-2 tensors; a
/// scalar is any tensor holding exactly one value.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        data_.assign(element_count(shape_), fill);
    }
    Tensor(std::size_t rows, std::size_t cols, T fill = T(0)) : Tensor(Shape{rows, cols}, fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }

    static Tensor scalar(T value) { return Tensor(Shape{1, 1}, value); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : size()); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor&) const = default;

    static std::size_t element_count(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

}  // namespace flexdoc
