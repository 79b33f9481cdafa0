#include "gqkva/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace gqkva {

const char* dtype_name(DType dt) {
    return dt == DType::F32 ? "f32" : "f64";
}

DType parse_dtype(const std::string& name) {
    if (name == "f32") return DType::F32;
    if (name == "f64") return DType::F64;
    throw ConfigError("unknown dtype '" + name + "', expected f32 or f64");
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

static void validate_shape(const Shape& s) {
    for (int64_t e : s) {
        if (e <= 0) {
            throw DimensionError("extents must be positive, got shape " + shape_str(s));
        }
    }
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
    validate_shape(shape);
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = dtype;
    int64_t n = shape_numel(t.shape_);
    if (dtype == DType::F32) {
        t.data_ = std::vector<float>(static_cast<size_t>(n), 0.0f);
    } else {
        t.data_ = std::vector<double>(static_cast<size_t>(n), 0.0);
    }
    return t;
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, value);
    return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dtype) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not fill shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), dtype);
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0) axis += ndim();
    if (axis < 0 || axis >= ndim()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(shape_));
    }
    return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const {
    if (!defined()) return 0;
    return shape_numel(shape_);
}

double Tensor::get(int64_t i) const {
    if (dtype_ == DType::F32) return static_cast<double>(data<float>()[static_cast<size_t>(i)]);
    return data<double>()[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
    if (dtype_ == DType::F32) {
        data<float>()[static_cast<size_t>(i)] = static_cast<float>(v);
    } else {
        data<double>()[static_cast<size_t>(i)] = v;
    }
}

Tensor Tensor::astype(DType target) const {
    if (target == dtype_) return *this;
    Tensor out = zeros(shape_, target);
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) out.set(i, get(i));
    return out;
}

Tensor Tensor::reshaped(Shape new_shape) const {
    validate_shape(new_shape);
    if (shape_numel(new_shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                             shape_str(new_shape) + ": element counts differ");
    }
    Tensor out = *this;
    out.shape_ = std::move(new_shape);
    return out;
}

bool Tensor::all_finite() const {
    int64_t n = numel();
    if (dtype_ == DType::F32) {
        auto d = data<float>();
        for (int64_t i = 0; i < n; ++i) {
            if (!std::isfinite(d[static_cast<size_t>(i)])) return false;
        }
    } else {
        auto d = data<double>();
        for (int64_t i = 0; i < n; ++i) {
            if (!std::isfinite(d[static_cast<size_t>(i)])) return false;
        }
    }
    return true;
}

bool Tensor::same_bytes(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    size_t n = static_cast<size_t>(numel());
    if (dtype_ == DType::F32) {
        return std::memcmp(data<float>().data(), other.data<float>().data(), n * sizeof(float)) == 0;
    }
    return std::memcmp(data<double>().data(), other.data<double>().data(), n * sizeof(double)) == 0;
}

double Tensor::max_abs() const {
    double m = 0.0;
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) m = std::max(m, std::fabs(get(i)));
    return m;
}

double Tensor::max_abs_diff(const Tensor& other) const {
    if (shape_ != other.shape_) {
        throw DimensionError("max_abs_diff: shapes differ " + shape_str(shape_) + " vs " +
                             shape_str(other.shape_));
    }
    double m = 0.0;
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) m = std::max(m, std::fabs(get(i) - other.get(i)));
    return m;
}

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string(op) + " produced non-finite values");
    }
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw DimensionError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) +
                             " vs " + dtype_name(b.dtype()));
    }
}

}  // namespace gqkva
