#pragma once

#include <initializer_list>
#include <vector>

#include "splatocc/common.hpp"

namespace splatocc {

// Dense row-major real array with shape metadata. Rank 0..4 is what the
// pipeline actually uses; nothing here assumes a fixed rank.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<real> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, real value);
    static Tensor vec(std::initializer_list<real> values);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }

    real& operator[](std::size_t i) { return data_[i]; }
    real operator[](std::size_t i) const { return data_[i]; }

    real& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    real at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    real& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    real at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    real& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    real at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    // Pointer to row i of a rank-2 tensor.
    real* row(std::size_t i) { return data_.data() + i * shape_[1]; }
    const real* row(std::size_t i) const { return data_.data() + i * shape_[1]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Relabel the dims; the element count must not change (data is already
    // row-major contiguous).
    void reshape(std::vector<std::size_t> shape);

    void fill(real v);
    void zero() { fill(real(0)); }

    Tensor& operator+=(const Tensor& o);
    Tensor& operator-=(const Tensor& o);
    Tensor& operator*=(real s);

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, real s) { return a *= s; }

private:
    std::vector<std::size_t> shape_;
    std::vector<real> data_;
};

// Throws numeric_error naming `what` if any element is NaN or Inf.
void check_finite(const Tensor& t, const std::string& what);
bool all_finite(const Tensor& t);

real max_abs_diff(const Tensor& a, const Tensor& b);
real dot(const Tensor& a, const Tensor& b);
real norm2(const Tensor& a);

}  // namespace splatocc
