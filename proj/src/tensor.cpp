#include "medlsdm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace medlsdm {

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != numel_of(shape_))
        throw ShapeError("tensor init: " + std::to_string(data_->size()) +
                         " values for shape " + shape_str(shape_));
}

int64_t Tensor::numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0)
            throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        p[i] = stddev * rng.normal();
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_  = std::make_shared<std::vector<double>>(*data_);
    return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    if (numel_of(new_shape) != numel())
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_  = data_;
    return t;
}

void Tensor::fill(double v) { std::fill(data_->begin(), data_->end(), v); }

bool Tensor::all_finite() const {
    const double* p = data();
    for (int64_t i = 0; i < numel(); ++i)
        if (!std::isfinite(p[i]))
            return false;
    return true;
}

double Tensor::min() const {
    return *std::min_element(data_->begin(), data_->end());
}

double Tensor::max() const {
    return *std::max_element(data_->begin(), data_->end());
}

double Tensor::sum() const {
    double s        = 0.0;
    const double* p = data();
    for (int64_t i = 0; i < numel(); ++i)
        s += p[i];
    return s;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i)
        os << shape[i] << (i + 1 < shape.size() ? ", " : "");
    os << ")";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const double *pa = a.data(), *pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i)
        po[i] = pa[i] + pb[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const double *pa = a.data(), *pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i)
        po[i] = pa[i] - pb[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double *pa = a.data(), *pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i)
        po[i] = pa[i] * pb[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po       = out.data();
    for (int64_t i = 0; i < a.numel(); ++i)
        po[i] = pa[i] * s;
    return out;
}

void axpy(Tensor& y, double a, const Tensor& x) {
    check_same_shape(y, x, "axpy");
    double* py       = y.data();
    const double* px = x.data();
    for (int64_t i = 0; i < y.numel(); ++i)
        py[i] += a * px[i];
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s         = 0.0;
    const double *pa = a.data(), *pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i)
        s += pa[i] * pb[i];
    return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double sum_sq_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sum_sq_diff");
    double s         = 0.0;
    const double *pa = a.data(), *pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = pa[i] - pb[i];
        s += d * d;
    }
    return s;
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
    return sum_sq_diff(a, b) / static_cast<double>(a.numel());
}

}  // namespace medlsdm
