#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gandef/error.hpp"

namespace gandef {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// 64-byte aligned storage. Vectorized kernels peel differently depending on
/// the start address, so fixed alignment keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::initializer_list<double> values) : Tensor(std::move(shape), Storage(values)) {}
  Tensor(Shape shape, const std::vector<double>& values)
      : Tensor(std::move(shape), Storage(values.begin(), values.end())) {}

  Tensor(Shape shape, Storage values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    require(values_.size() == shape_size(shape_), ErrorKind::ShapeMismatch,
            "value count " + std::to_string(values_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, Storage{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> data() noexcept { return values_; }
  std::span<const double> data() const noexcept { return values_; }
  double* ptr() noexcept { return values_.data(); }
  const double* ptr() const noexcept { return values_.data(); }
  Storage& values() noexcept { return values_; }
  const Storage& values() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const {
    require(values_.size() == 1, ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  /// Same values viewed under a different shape of equal size.
  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), values_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(values_)); }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    require(rank() >= 1 && begin <= end && end <= shape_[0], ErrorKind::ShapeMismatch,
            "slice_rows out of range for " + shape_str(shape_));
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), Storage(values_.begin() + begin * row, values_.begin() + end * row));
  }

  /// Gather rows along the leading axis.
  Tensor gather_rows(std::span<const std::size_t> rows) const {
    require(rank() >= 1, ErrorKind::ShapeMismatch, "gather_rows on scalar");
    const std::size_t row = shape_[0] ? size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = rows.size();
    std::vector<double> out(rows.size() * row);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] < shape_[0], ErrorKind::ShapeMismatch, "gather_rows index out of range");
      std::copy_n(values_.begin() + rows[i] * row, row, out.begin() + i * row);
    }
    return Tensor(std::move(s), std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (auto e : shape_) require(e > 0, ErrorKind::ShapeMismatch, "zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  Storage values_;
};

/// Concatenate along the leading axis; trailing extents must agree.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 1 && a.rank() == b.rank() &&
              std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
          ErrorKind::ShapeMismatch, "concat_rows " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  Storage v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(s), std::move(v));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gandef
