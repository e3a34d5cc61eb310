#include "splatocc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace splatocc {

namespace {
std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), real(0)) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    require(product(shape_) == data_.size(), "tensor shape does not match data length");
}

Tensor Tensor::full(std::vector<std::size_t> shape, real value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::vec(std::initializer_list<real> values) {
    return Tensor({values.size()}, std::vector<real>(values));
}

void Tensor::reshape(std::vector<std::size_t> shape) {
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    require(count == data_.size(), "reshape changes the element count");
    shape_ = std::move(shape);
}

void Tensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& o) {
    require(same_shape(o), "tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
    require(same_shape(o), "tensor shape mismatch in -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(real s) {
    for (real& v : data_) v *= s;
    return *this;
}

bool all_finite(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

void check_finite(const Tensor& t, const std::string& what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i]))
            throw numeric_error("non-finite value in " + what + " at flat index " +
                                std::to_string(i));
}

real max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "tensor shape mismatch in max_abs_diff");
    real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

real dot(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "tensor length mismatch in dot");
    real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

real norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

}  // namespace splatocc
