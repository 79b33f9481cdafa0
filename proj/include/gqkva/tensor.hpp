#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace gqkva {

// Shape or scheme constraints violated by the caller.
class DimensionError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration (scheme grammar, divisibility, presets).
class ConfigError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An operation produced NaN/Inf. Non-finite values are an error, never a state.
class NumericError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint / tensor file problems.
class IoError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType { F32, F64 };

const char* dtype_name(DType dt);
DType parse_dtype(const std::string& name);

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense n-dimensional array, flat row-major storage, dtype carried per tensor.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype);
    static Tensor full(Shape shape, double value, DType dtype);
    static Tensor from_values(Shape shape, const std::vector<double>& values, DType dtype);

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const;
    int64_t numel() const;
    DType dtype() const { return dtype_; }
    bool defined() const { return !std::holds_alternative<std::monostate>(data_); }

    template <typename T>
    std::span<const T> data() const {
        return std::span<const T>(std::get<std::vector<T>>(data_));
    }
    template <typename T>
    std::span<T> data() {
        return std::span<T>(std::get<std::vector<T>>(data_));
    }

    // Dtype-dispatched element access; slow path for tests and glue code.
    double get(int64_t flat_index) const;
    void set(int64_t flat_index, double value);

    Tensor astype(DType target) const;
    Tensor reshaped(Shape new_shape) const;

    bool all_finite() const;
    bool same_bytes(const Tensor& other) const;
    double max_abs() const;
    double max_abs_diff(const Tensor& other) const;

private:
    Shape shape_;
    DType dtype_ = DType::F32;
    std::variant<std::monostate, std::vector<float>, std::vector<double>> data_;
};

// Value plus its gradient, shapes identical.
struct GradPair {
    Tensor value;
    Tensor grad;
};

// Throws NumericError naming `op` if any element of `t` is NaN/Inf.
void check_finite(const Tensor& t, const char* op);

// Throws DimensionError unless both tensors share a dtype.
void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace gqkva
