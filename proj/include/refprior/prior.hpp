#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "refprior/tape.hpp"

namespace refprior {

/// N x D patch features of one image.
using FeatureMap = num::Tensor2;

/// The reality prior: K prototypes plus the query/key/value maps of the
/// sparse cross-attention that reconstructs inputs from them.
template <typename T>
struct BasicMemoryBank {
  num::Matrix<T> prototypes;  // K x D
  num::Matrix<T> w_query;     // D x D
  num::Matrix<T> w_key;       // D x D
  num::Matrix<T> w_value;     // D x D
  std::size_t top_k = 1;

  std::size_t size() const noexcept { return prototypes.rows(); }
  std::size_t dim() const noexcept { return prototypes.cols(); }

  void validate() const {
    const std::size_t d = dim();
    require(d > 0 && size() > 0, "MemoryBank: empty prototype matrix");
    require(top_k >= 1 && top_k <= size(),
            "MemoryBank: top_k=" + std::to_string(top_k) + " outside [1, K=" + std::to_string(size()) + "]");
    for (const auto* w : {&w_query, &w_key, &w_value})
      require(w->rows() == d && w->cols() == d, "MemoryBank: projection must be D x D");
    for (const auto* m : {&prototypes, &w_query, &w_key, &w_value}) num::require_finite(*m, "MemoryBank");
  }

  template <typename U>
  BasicMemoryBank<U> cast() const {
    return {prototypes.template cast<U>(), w_query.template cast<U>(), w_key.template cast<U>(),
            w_value.template cast<U>(), top_k};
  }

  friend bool operator==(const BasicMemoryBank&, const BasicMemoryBank&) = default;
};

using MemoryBank = BasicMemoryBank<float>;

/// Gaussian prototypes scaled by 1/sqrt(D), then given orthonormal rows
/// (K <= D) or turned into a tight frame with unit mean row norm (K > D).
/// Wk and Wv start at the identity, Wq at sqrt(D) * I.
MemoryBank init_bank(std::size_t K, std::size_t D, std::size_t top_k, std::uint64_t seed);

/// Hex FNV-1a over every bank tensor and top_k.
std::string bank_checksum(const MemoryBank& bank);

/// L2 norm of each prototype row.
std::vector<float> prototype_row_norms(const MemoryBank& bank);

/// True when every prototype norm lies in [0.5, 2.0]. Health check only.
bool prototype_norms_healthy(const MemoryBank& bank);

enum class StatPooling { mean, max, median };

template <typename T>
struct AttentionResult {
  num::Matrix<T> attention;  // N x K, <= k nonzeros per row
  num::Matrix<T> reference;  // N x D ideal reference
  num::Matrix<T> residual;   // N x D, features - reference
  T s_max{0};
  T s_ent{0};
  std::vector<T> row_max;      // per patch
  std::vector<T> row_entropy;  // per patch
};

// ---- taped graph pieces, shared by training, inference and grad checks ----

template <typename T>
struct BankVars {
  num::Var<T> prototypes, w_query, w_key, w_value;
};

template <typename T>
BankVars<T> bank_parameters(num::Tape<T>& tape, const BasicMemoryBank<T>& bank) {
  return {tape.parameter(bank.prototypes), tape.parameter(bank.w_query), tape.parameter(bank.w_key),
          tape.parameter(bank.w_value)};
}

template <typename T>
BankVars<T> bank_constants(num::Tape<T>& tape, const BasicMemoryBank<T>& bank) {
  return {tape.constant(bank.prototypes), tape.constant(bank.w_query), tape.constant(bank.w_key),
          tape.constant(bank.w_value)};
}

template <typename T>
struct ReconstructionVars {
  num::Var<T> attention;
  num::Var<T> reference;
};

/// scores = (F Wq)(M Wk)^T / sqrt(D); A = softmax over the per-row top-k;
/// F_hat = A (M Wv). The top-k selection is a constant during backward.
template <typename T>
ReconstructionVars<T> reconstruct(num::Tape<T>& tape, const BankVars<T>& bank, num::Var<T> features,
                                  std::size_t top_k) {
  const std::size_t d = tape.value(bank.prototypes).cols();
  require(tape.value(features).cols() == d,
          "project: feature dim " + std::to_string(tape.value(features).cols()) + " != bank D=" + std::to_string(d));
  const auto queries = num::matmul(tape, features, bank.w_query);
  const auto keys = num::matmul(tape, bank.prototypes, bank.w_key);
  const auto values = num::matmul(tape, bank.prototypes, bank.w_value);
  const auto scores = num::scale(tape, num::matmul_nt(tape, queries, keys), T{1} / std::sqrt(static_cast<T>(d)));
  const num::Mask mask = num::top_k_mask(tape.value(scores), top_k);
  const auto attention = num::masked_row_softmax(tape, scores, mask);
  return {attention, num::matmul(tape, attention, values)};
}

/// ||M M^T - I||_F, unsquared.
template <typename T>
num::Var<T> orthogonality_penalty(num::Tape<T>& tape, num::Var<T> prototypes) {
  const std::size_t k = tape.value(prototypes).rows();
  const auto gram = num::matmul_nt(tape, prototypes, prototypes);
  return num::frobenius_norm(tape, num::sub(tape, gram, tape.constant(num::Matrix<T>::identity(k))));
}

template <typename T>
T orthogonality_penalty(const BasicMemoryBank<T>& bank) {
  num::Tape<T> tape;
  const auto m = tape.constant(bank.prototypes);
  return tape.value(orthogonality_penalty(tape, m))(0, 0);
}

template <typename T>
T pool(std::vector<T> values, StatPooling mode) {
  require(!values.empty(), "pool: no rows");
  switch (mode) {
    case StatPooling::max:
      return *std::max_element(values.begin(), values.end());
    case StatPooling::median: {
      std::sort(values.begin(), values.end());
      const std::size_t n = values.size();
      return n % 2 == 1 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / T{2};
    }
    case StatPooling::mean:
    default: {
      T acc{0};
      for (T v : values) acc += v;
      return acc / static_cast<T>(values.size());
    }
  }
}

/// Sparse reconstruction of `features` against a frozen bank, plus the
/// attention statistics used as perplexity evidence.
template <typename T>
AttentionResult<T> project(const BasicMemoryBank<T>& bank, const num::Matrix<T>& features,
                           StatPooling pooling = StatPooling::mean) {
  bank.validate();
  require(features.rows() > 0, "project: feature map has no patches");
  num::Tape<T> tape;
  const auto vars = bank_constants(tape, bank);
  const auto f = tape.constant(features);
  const auto rec = reconstruct(tape, vars, f, bank.top_k);

  AttentionResult<T> out;
  out.attention = tape.value(rec.attention);
  out.reference = tape.value(rec.reference);
  out.residual = features - out.reference;
  out.row_max.resize(features.rows());
  out.row_entropy.resize(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    T mx{0};
    T ent{0};
    for (T a : out.attention.row(i)) {
      mx = std::max(mx, a);
      if (a > T{0}) ent -= a * std::log(a);
    }
    out.row_max[i] = mx;
    out.row_entropy[i] = std::max(ent, T{0});
  }
  out.s_max = pool(out.row_max, pooling);
  out.s_ent = pool(out.row_entropy, pooling);
  return out;
}

}  // namespace refprior
