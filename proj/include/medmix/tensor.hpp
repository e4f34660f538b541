#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "medmix/error.hpp"

namespace medmix {

/// Dense row-major matrix. `T` is float for training and double for the
/// finite-difference harness; uint8_t is used for bit masks.
template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw Error("Matrix: data length does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void resize(std::size_t rows, std::size_t cols, T fill = T{}) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, fill);
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      for (T v : data_)
        if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Mask = Matrix<std::uint8_t>;

template <class T>
void require_finite(const Matrix<T>& m, const char* where) {
  if (!m.all_finite()) throw NumericError(std::string("non-finite value in ") + where);
}

inline void require_shape(bool ok, const char* what) {
  if (!ok) throw Error(std::string("shape mismatch: ") + what);
}

/// Copies the listed rows of `src` into a new matrix.
template <class T>
Matrix<T> gather_rows(const Matrix<T>& src, std::span<const std::size_t> rows) {
  Matrix<T> out(rows.size(), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.row(rows[i]).data(), src.cols(), out.row(i).data());
  return out;
}

/// Writes row i of `src` into row rows[i] of `dst`.
template <class T>
void scatter_rows(const Matrix<T>& src, std::span<const std::size_t> rows, Matrix<T>& dst) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.row(i).data(), src.cols(), dst.row(rows[i]).data());
}

/// C = A * B
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require_shape(a.cols() == b.rows(), "matmul inner dimension");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix<T> c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c.data() + i * m;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// C += A^T * B
template <class T>
void matmul_at_b_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  require_shape(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(),
                "matmul_at_b_acc");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const T* arow = a.data() + r * k;
    const T* brow = b.data() + r * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// C = A * B^T
template <class T>
Matrix<T> matmul_a_bt(const Matrix<T>& a, const Matrix<T>& b) {
  require_shape(a.cols() == b.cols(), "matmul_a_bt");
  return matmul(a, transpose(b));
}

template <class T>
void add_inplace(Matrix<T>& dst, const Matrix<T>& src) {
  require_shape(dst.same_shape(src), "add_inplace");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace medmix
