#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "refprior/errors.hpp"

namespace refprior::num {

/// Dense row-major 2-D tensor. There is no broadcasting anywhere in this
/// library: every binary op requires explicit, matching shapes.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length != rows * cols");
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      require(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensor2 = Matrix<float>;
using Tensor2d = Matrix<double>;

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
  if (!m.all_finite()) throw ContractViolation(std::string(what) + ": non-finite value");
}

// ---- plain (untaped) kernels -------------------------------------------

/// a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols() == b.rows(),
          "matmul: dimension mismatch " + shape_str(a) + " * " + shape_str(b));
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a * b^T
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols() == b.cols(),
          "matmul_nt: dimension mismatch " + shape_str(a) + " * " + shape_str(b) + "^T");
  Matrix<T> c(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* brow = b.row(j).data();
      T acc{0};
      for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  return c;
}

/// a^T * b
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.rows() == b.rows(),
          "matmul_tn: dimension mismatch " + shape_str(a) + "^T * " + shape_str(b));
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* arow = a.row(k).data();
    const T* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = arow[i];
      if (aki == T{0}) continue;
      T* crow = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Matrix<T> operator+(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.same_shape(b), "add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix<T> c = a;
  auto cf = c.flat();
  auto bf = b.flat();
  for (std::size_t i = 0; i < cf.size(); ++i) cf[i] += bf[i];
  return c;
}

template <typename T>
Matrix<T> operator-(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.same_shape(b), "sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix<T> c = a;
  auto cf = c.flat();
  auto bf = b.flat();
  for (std::size_t i = 0; i < cf.size(); ++i) cf[i] -= bf[i];
  return c;
}

template <typename T>
Matrix<T> operator*(T s, const Matrix<T>& a) {
  Matrix<T> c = a;
  for (auto& v : c.flat()) v *= s;
  return c;
}

template <typename T>
T frobenius_norm(const Matrix<T>& a) {
  T acc{0};
  for (T v : a.flat()) acc += v * v;
  return std::sqrt(acc);
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.same_shape(b), "max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

/// Row-major stack of row blocks; all blocks must share the column count.
template <typename T>
Matrix<T> vstack(std::span<const Matrix<T>* const> blocks) {
  std::size_t rows = 0;
  const std::size_t cols = blocks.empty() ? 0 : blocks.front()->cols();
  for (const auto* b : blocks) {
    require(b->cols() == cols, "vstack: column mismatch");
    rows += b->rows();
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  for (const auto* b : blocks) data.insert(data.end(), b->flat().begin(), b->flat().end());
  return Matrix<T>(rows, cols, std::move(data));
}

}  // namespace refprior::num
