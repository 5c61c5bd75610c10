#include "refprior/prior.hpp"

#include <Eigen/Dense>

#include "refprior/hash.hpp"
#include "refprior/random.hpp"

namespace refprior {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Orthonormal columns spanning the columns of `a` (rows >= cols).
EigenMat thin_q(const EigenMat& a) {
  Eigen::HouseholderQR<EigenMat> qr(a);
  EigenMat q = qr.householderQ() * EigenMat::Identity(a.rows(), a.cols());
  // Fix column signs so the result does not depend on Householder conventions.
  const EigenMat r = qr.matrixQR().topRows(a.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

}  // namespace

MemoryBank init_bank(std::size_t K, std::size_t D, std::size_t top_k, std::uint64_t seed) {
  require(K > 0 && D > 0, "init_bank: K and D must be positive");
  require(top_k >= 1 && top_k <= K, "init_bank: top_k outside [1, K]");
  Rng rng = make_rng(seed, 0x5052494f52ULL);
  const auto raw = gaussian_matrix<double>(K, D, 1.0 / std::sqrt(static_cast<double>(D)), rng);
  EigenMat g = Eigen::Map<const EigenMat>(raw.flat().data(), static_cast<Eigen::Index>(K),
                                          static_cast<Eigen::Index>(D));
  EigenMat m;
  if (K <= D) {
    m = thin_q(g.transpose()).transpose();  // orthonormal rows
  } else {
    // Orthonormal columns scaled to a tight frame: M^T M = (K/D) I.
    m = thin_q(g) * std::sqrt(static_cast<double>(K) / static_cast<double>(D));
  }
  MemoryBank bank;
  bank.prototypes = num::Tensor2d(K, D, std::vector<double>(m.data(), m.data() + m.size())).cast<float>();
  // sqrt(D) cancels the score temperature, so initial scores are plain dot products.
  bank.w_query = static_cast<float>(std::sqrt(static_cast<double>(D))) * num::Tensor2::identity(D);
  bank.w_key = num::Tensor2::identity(D);
  bank.w_value = num::Tensor2::identity(D);
  bank.top_k = top_k;
  return bank;
}

std::string bank_checksum(const MemoryBank& bank) {
  Fnv1a64 h;
  h.update(bank.prototypes);
  h.update(bank.w_query);
  h.update(bank.w_key);
  h.update(bank.w_value);
  h.update_u64(bank.top_k);
  return h.hex();
}

std::vector<float> prototype_row_norms(const MemoryBank& bank) {
  std::vector<float> norms;
  norms.reserve(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    double acc = 0.0;
    for (float v : bank.prototypes.row(i)) acc += static_cast<double>(v) * v;
    norms.push_back(static_cast<float>(std::sqrt(acc)));
  }
  return norms;
}

bool prototype_norms_healthy(const MemoryBank& bank) {
  for (float n : prototype_row_norms(bank))
    if (n < 0.5f || n > 2.0f) return false;
  return true;
}

}  // namespace refprior
