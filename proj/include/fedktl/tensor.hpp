#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedktl/error.hpp"

namespace fedktl {

/// Scalar types a Tensor may hold. float is the experiment precision,
/// double the gradient-check precision.
template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Rank-2 tensors are [rows, cols] batches.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    detail::require_shape(shape_size(shape_) == data_.size(),
                          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                              shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> xs) { return Tensor(Shape{xs.size()}, std::vector<T>(xs)); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> xs) {
    return Tensor(Shape{rows, cols}, std::vector<T>(xs));
  }

  template <Real U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading extent; 1 for a rank-1 tensor (treated as a single row).
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.empty()) return 0;
    if (shape_.size() == 1) return shape_[0];
    return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1}, std::multiplies<>());
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::vector<T>& buffer() { return data_; }
  const std::vector<T>& buffer() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Throws NumericError naming `what` if any element is NaN or Inf.
  const Tensor& check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite value in " + what);
    return *this;
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  /// Rows selected by index, as a [idx.size(), cols] tensor.
  Tensor gather_rows(std::span<const std::size_t> idx) const {
    Tensor out(Shape{idx.size(), cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      detail::require_shape(idx[i] < rows(), "gather_rows: row index out of range");
      std::copy_n(row(idx[i]).begin(), cols(), out.row(i).begin());
    }
    return out;
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T{0}); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Row-concatenation of two matrices with equal column counts.
template <Real T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  detail::require_shape(a.cols() == b.cols(), "concat_rows: column mismatch");
  std::vector<T> data(a.buffer());
  data.insert(data.end(), b.buffer().begin(), b.buffer().end());
  return Tensor<T>(Shape{a.rows() + b.rows(), a.cols()}, std::move(data));
}

template <Real T>
T squared_distance(std::span<const T> a, std::span<const T> b) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// 64-bit FNV-1a over the raw bytes; used to detect parameter changes.
template <Real T>
std::uint64_t content_hash(const Tensor<T>& t) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  const auto* p = reinterpret_cast<const unsigned char*>(t.buffer().data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace fedktl
