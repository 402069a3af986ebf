#pragma once

#include <cstddef>
#include <vector>

namespace salon {

// Row-major dense matrix of shape rows x cols.
template <typename T>
struct Matrix {
  int rows = 0, cols = 0;
  std::vector<T> v;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(size_t(r) * c, T(0)) {}

  T* row(int r) { return v.data() + size_t(r) * cols; }
  const T* row(int r) const { return v.data() + size_t(r) * cols; }
  T& operator()(int r, int c) { return v[size_t(r) * cols + c]; }
  const T& operator()(int r, int c) const { return v[size_t(r) * cols + c]; }
  void fill(T value) { std::fill(v.begin(), v.end(), value); }
};

}  // namespace salon
