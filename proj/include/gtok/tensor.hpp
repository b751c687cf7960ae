#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gtok {

using Shape = std::vector<std::int64_t>;

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t e : s) {
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "," : "");
    }
    os << ']';
    return os.str();
}

}  // namespace detail

/// Dense row-major multidimensional array. The scalar type is float for
/// training and double for verification runs.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(detail::shape_numel(shape_)), fill) {
        check_shape_();
    }

    static Tensor from(std::vector<T> values, Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        t.check_shape_();
        detail::require(static_cast<std::int64_t>(t.data_.size()) == detail::shape_numel(t.shape_),
                        "tensor: value count " + std::to_string(t.data_.size()) + " does not match shape " +
                            detail::shape_str(t.shape_));
        return t;
    }

    static Tensor scalar(T v) { return from({v}, {1}); }

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
    T at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
    T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    T at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        detail::require(detail::shape_numel(shape) == numel(),
                        "reshape: numel mismatch " + detail::shape_str(shape_) + " -> " + detail::shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(static_cast<double>(v))) {
                return false;
            }
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> v(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) {
            v[i] = static_cast<U>(data_[i]);
        }
        return Tensor<U>::from(std::move(v), shape_);
    }

private:
    void check_shape_() const {
        for (std::int64_t e : shape_) {
            detail::require(e > 0, "tensor: nonpositive extent in " + detail::shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace gtok
