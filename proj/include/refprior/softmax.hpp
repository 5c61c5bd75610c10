#pragma once

#include <cstdint>
#include <vector>

#include "refprior/matrix.hpp"

namespace refprior::num {

/// Boolean selection matrix; true = entry participates in the softmax.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}
  Mask(std::initializer_list<std::initializer_list<bool>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    for (const auto& r : rows) {
      require(r.size() == cols_, "Mask: ragged initializer");
      for (bool b : r) bits_.push_back(b ? 1 : 0);
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }

  template <typename T>
  bool matches(const Matrix<T>& m) const noexcept {
    return rows_ == m.rows() && cols_ == m.cols();
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Softmax over the unmasked entries of each row, with per-row max
/// subtraction. Masked outputs are exactly zero.
template <typename T>
Matrix<T> masked_row_softmax(const Matrix<T>& scores, const Mask& mask) {
  require(mask.matches(scores), "masked_row_softmax: mask shape " +
                                    shape_str(mask.rows(), mask.cols()) + " != scores shape " +
                                    shape_str(scores));
  Matrix<T> out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    bool any = false;
    T row_max{0};
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!mask(i, j)) continue;
      row_max = any ? std::max(row_max, scores(i, j)) : scores(i, j);
      any = true;
    }
    if (!any) throw ContractViolation("masked_row_softmax: row " + std::to_string(i) + " is fully masked");
    T total{0};
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!mask(i, j)) continue;
      const T e = std::exp(scores(i, j) - row_max);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask(i, j)) out(i, j) /= total;
  }
  return out;
}

/// Per-row selection of the k largest entries. Ties go to the lowest column
/// index, so the result is platform independent.
template <typename T>
Mask top_k_mask(const Matrix<T>& scores, std::size_t k) {
  require(k >= 1 && k <= scores.cols(), "top_k_mask: k=" + std::to_string(k) +
                                            " outside [1, " + std::to_string(scores.cols()) + "]");
  Mask mask(scores.rows(), scores.cols());
  std::vector<std::size_t> order(scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto row = scores.row(i);
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    for (std::size_t j = 0; j < k; ++j) mask.set(i, order[j], true);
  }
  return mask;
}

}  // namespace refprior::num
