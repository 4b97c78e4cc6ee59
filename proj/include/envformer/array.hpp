#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "envformer/common.hpp"

namespace envformer {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

/// Dense row-major array: a shape plus flat storage. This is the passive
/// value type; Tensor wraps it with gradient bookkeeping.
template <typename T>
struct Array {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(std::vector<std::size_t> s)
      : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Array(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw DimensionError("Array: data size does not match shape", shape,
                           {data.size()});
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  /// Rows/cols view of the trailing matrix: all leading dims folded into rows.
  std::size_t last_dim() const {
    return shape.empty() ? 1 : shape.back();
  }
  std::size_t fold_rows() const {
    return shape.empty() ? 1 : numel() / shape.back();
  }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const T& at2(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }
  T& at3(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  static Array full(std::vector<std::size_t> shape, T value) {
    Array a(std::move(shape));
    for (T& x : a.data) x = value;
    return a;
  }

  template <typename U>
  Array<U> cast() const {
    Array<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
bool same_shape(const Array<T>& a, const Array<T>& b) {
  return a.shape == b.shape;
}

}  // namespace envformer
