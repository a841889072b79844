#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lpsr/errors.hpp"

namespace lpsr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

inline Index shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor. Image-like tensors use NHWC layout so that an
// image batch maps directly onto an (N*H*W) x C row-major matrix.
template <typename Scalar>
class Tensor {
public:
    using scalar_type = Scalar;

    Tensor() = default;
    explicit Tensor(Shape shape, Scalar fill = Scalar(0))
        : shape_(std::move(shape)), data_(ArrayX<Scalar>::Constant(shape_size(shape_), fill)) {}
    Tensor(Shape shape, ArrayX<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size())
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, Scalar(0)); }
    // Storage left uninitialized; callers overwrite every element.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.data_.resize(shape_size(shape));
        t.shape_ = std::move(shape);
        return t;
    }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
    Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    ArrayX<Scalar>& array() { return data_; }
    const ArrayX<Scalar>& array() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    // NHWC element access.
    Scalar& at(Index n, Index h, Index w, Index c) {
        return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
    }
    Scalar at(Index n, Index h, Index w, Index c) const {
        return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
    }

    // View as a rows x cols row-major matrix; rows*cols must equal size().
    Eigen::Map<RowMatrix<Scalar>> matrix(Index rows, Index cols) {
        return {data_.data(), rows, cols};
    }
    Eigen::Map<const RowMatrix<Scalar>> matrix(Index rows, Index cols) const {
        return {data_.data(), rows, cols};
    }
    // Trailing dimension as columns.
    Eigen::Map<RowMatrix<Scalar>> matrix() { return matrix(size() / shape_.back(), shape_.back()); }
    Eigen::Map<const RowMatrix<Scalar>> matrix() const {
        return matrix(size() / shape_.back(), shape_.back());
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    // Slice of the leading (batch) dimension: rows [begin, begin+count).
    Tensor batch_slice(Index begin, Index count) const {
        Shape s = shape_;
        const Index stride = size() / shape_[0];
        s[0] = count;
        return Tensor(s, ArrayX<Scalar>(data_.segment(begin * stride, count * stride)));
    }

    template <typename Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape_, ArrayX<Other>(data_.template cast<Other>()));
    }

    bool all_finite() const { return data_.allFinite(); }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && (data_ == other.data_).all();
    }

private:
    Shape shape_;
    ArrayX<Scalar> data_;
};

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
        throw ShapeError(std::string(what) + ": expected " + shape_string(expected) + ", got " +
                         shape_string(t.shape()));
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// Concatenate along the batch dimension.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<const Tensor<Scalar>*>& items) {
    if (items.empty()) return {};
    Shape s = items.front()->shape();
    const Index per = items.front()->size() / s[0];
    Index total = 0;
    for (const auto* t : items) {
        if (t->size() / t->shape()[0] != per) throw ShapeError("stack_batch: inconsistent item shapes");
        total += t->shape()[0];
    }
    s[0] = total;
    Tensor<Scalar> out(s);
    Index offset = 0;
    for (const auto* t : items) {
        out.array().segment(offset, t->size()) = t->array();
        offset += t->size();
    }
    return out;
}

}  // namespace lpsr
