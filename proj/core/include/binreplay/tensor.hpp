#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace binreplay {

/// Raised when a caller-supplied value breaks a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a persisted artifact cannot be decoded.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major logical extents. Every extent is >= 1.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) { validate(); }

  [[nodiscard]] size_t rank() const { return dims_.size(); }
  [[nodiscard]] int64_t operator[](size_t i) const { return dims_.at(i); }
  [[nodiscard]] const std::vector<int64_t>& dims() const { return dims_; }
  [[nodiscard]] int64_t numel() const {
    int64_t n = 1;
    for (auto d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
  }
  /// Same extents with the leading (batch) dimension replaced.
  [[nodiscard]] Shape with_batch(int64_t n) const {
    auto d = dims_;
    d.at(0) = n;
    return Shape(std::move(d));
  }
  /// Extents after the leading dimension.
  [[nodiscard]] Shape drop_batch() const {
    return Shape(std::vector<int64_t>(dims_.begin() + 1, dims_.end()));
  }
  [[nodiscard]] std::string str() const;

  bool operator==(const Shape&) const = default;

 private:
  void validate() const {
    for (auto d : dims_)
      if (d < 1) throw ValidationError("shape extent must be >= 1, got " + std::to_string(d));
  }
  std::vector<int64_t> dims_;
};

inline std::string Shape::str() const {
  std::string s = "(";
  for (size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(dims_[i]);
  }
  return s + ")";
}

/// Dense row-major tensor. `FloatTensor` (f32) is the storage/interchange type;
/// `Tensor` (f64) is the working type of the training engine.
template <class T>
struct DenseTensor {
  Shape shape;
  std::vector<T> data;

  DenseTensor() = default;
  explicit DenseTensor(Shape s, T fill = T{})
      : shape(std::move(s)), data(static_cast<size_t>(shape.numel()), fill) {}
  DenseTensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != shape.numel())
      throw ValidationError("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape.str());
  }

  [[nodiscard]] int64_t numel() const { return static_cast<int64_t>(data.size()); }
  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  std::span<T> values() { return data; }
  std::span<const T> values() const { return data; }

  template <class U>
  [[nodiscard]] DenseTensor<U> cast() const {
    DenseTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const DenseTensor&) const = default;
};

using FloatTensor = DenseTensor<float>;
using Tensor = DenseTensor<double>;

/// Throws if any value is NaN or infinite.
template <class T>
void require_finite(const DenseTensor<T>& t, const char* what) {
  for (auto v : t.data)
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite value");
}

}  // namespace binreplay
