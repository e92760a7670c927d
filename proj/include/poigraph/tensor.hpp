#pragma once

// Dense row-major tensor with value semantics. Storage is shared
// copy-on-write: copies are O(1) until someone mutates.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "poigraph/common.hpp"

namespace poigraph {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

  Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_ = std::make_shared<std::vector<T>>(
        static_cast<size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    validate_shape();
    if (static_cast<int64_t>(values.size()) != shape_numel(shape_)) {
      throw ShapeError("tensor values (" + std::to_string(values.size()) +
                       ") do not fill shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor row(std::vector<T> values) {
    Shape s{1, static_cast<int64_t>(values.size())};
    return Tensor(std::move(s), std::move(values));
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_numel(shape_); }
  int64_t rows() const {
    return shape_.size() == 1 ? 1 : shape_.empty() ? 1 : shape_[0];
  }
  int64_t cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return shape_[0];
    int64_t c = 1;
    for (size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
    return c;
  }

  const T* data() const { return data_->data(); }
  T* mut() {
    detach();
    return data_->data();
  }
  const std::vector<T>& vec() const { return *data_; }

  T at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  T at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  // Same storage, new shape.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  bool all_finite() const {
    for (const T& v : *data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_bits(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data(), other.data(), sizeof(T) * static_cast<size_t>(numel())) == 0;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = static_cast<U>(at(i));
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  void validate_shape() const {
    for (int64_t d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
    }
  }

  void detach() {
    if (data_.use_count() > 1) {
      data_ = std::make_shared<std::vector<T>>(*data_);
    }
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

}  // namespace poigraph
