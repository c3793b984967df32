#ifndef MEDLSDM_TENSOR_HPP
#define MEDLSDM_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "medlsdm/errors.hpp"
#include "medlsdm/rng.hpp"

namespace medlsdm {

// Dense row-major double tensor with shared storage (shallow copies, like
// the usual ML-framework convention; use clone() for a deep copy).
// Feature maps are channels-last (H, W, L, C); conv weights are
// (kh, kw, kl, Cin, Cout).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(numel_of(shape_), 0.0)) {}
    Tensor(std::vector<int64_t> shape, double fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(numel_of(shape_), fill)) {}
    Tensor(std::vector<int64_t> shape, std::vector<double> values);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return data_ != nullptr; }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    // Rank-4 accessor for (H, W, L, C) maps.
    double& at(int64_t h, int64_t w, int64_t l, int64_t c) {
        return (*data_)[static_cast<size_t>(((h * shape_[1] + w) * shape_[2] + l) * shape_[3] + c)];
    }
    double at(int64_t h, int64_t w, int64_t l, int64_t c) const {
        return (*data_)[static_cast<size_t>(((h * shape_[1] + w) * shape_[2] + l) * shape_[3] + c)];
    }

    Tensor clone() const;
    Tensor reshaped(std::vector<int64_t> new_shape) const;
    void fill(double v);
    void zero() { fill(0.0); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    double min() const;
    double max() const;
    double sum() const;

    static int64_t numel_of(const std::vector<int64_t>& shape);

private:
    std::vector<int64_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

std::string shape_str(const std::vector<int64_t>& shape);

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

// out = a + b, elementwise (fresh tensor).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void axpy(Tensor& y, double a, const Tensor& x);  // y += a*x

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double mean_sq_diff(const Tensor& a, const Tensor& b);
double sum_sq_diff(const Tensor& a, const Tensor& b);

}  // namespace medlsdm

#endif
