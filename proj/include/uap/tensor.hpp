#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace uap {

/// Dense n-dimensional array of doubles, row-major. The gradient slot lives on
/// the tape node that owns a tensor during differentiation, not here.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);
    Tensor(std::initializer_list<std::size_t> shape) : Tensor(std::vector<std::size_t>(shape)) {}

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return values_.size(); }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool is_scalar() const { return values_.size() == 1; }

    void fill(double v);
    bool all_finite() const;

    double max_abs() const;
    double l2_norm() const;

    std::string shape_str() const;

    static std::size_t numel(const std::vector<std::size_t>& shape);

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

}  // namespace uap
