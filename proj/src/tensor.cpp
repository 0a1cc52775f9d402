#include "uap/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "uap/error.hpp"

namespace uap {

std::size_t Tensor::numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), values_(numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    require(values_.size() == numel(shape_), ErrorKind::argument,
            "tensor value count does not match shape " + shape_str());
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
    for (double v : values_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
}

double Tensor::l2_norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
}

std::string Tensor::shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape_[i]);
    }
    return s + ")";
}

}  // namespace uap
