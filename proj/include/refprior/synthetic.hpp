#pragma once

#include <cstdint>
#include <vector>

#include "refprior/dataset.hpp"

namespace refprior {

/// Parameters of the planted-manifold testbed.
struct SyntheticSpec {
  std::size_t D = 128;
  std::size_t K_true = 64;
  std::size_t sparsity = 4;  // prototypes mixed into each real patch
  double noise_sigma = 0.01;
  double off_manifold_norm = 0.5;
  std::size_t n_real = 2000;
  std::size_t n_fake = 2000;
  std::size_t patches = 16;  // N per feature map
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticData {
  std::vector<Sample> samples;        // reals first, then fakes
  num::Tensor2 planted_prototypes;    // K_true x D, orthonormal rows
  num::Tensor2 complement_basis;      // (D - K_true) x D, orthonormal rows

  /// Bank whose prototypes are the planted ones; Wq = sharpness * I,
  /// Wk = Wv = I.
  MemoryBank planted_bank(std::size_t top_k, float sharpness = 1.0f) const;
};

/// Real patches: equal-weight (1/sparsity) combinations of `sparsity`
/// distinct planted prototypes, plus i.i.d. Gaussian noise. Fake maps: a
/// fresh real map plus off_manifold_norm times one unit vector drawn from the
/// orthogonal complement of the planted span, added to every patch.
/// Structure and noise come from separate seeded streams, so setting
/// noise_sigma = 0 yields the exact clean counterpart of a noisy dataset.
SyntheticData make_synthetic(const SyntheticSpec& spec);

/// Stratified split: `holdout_fraction` of each label goes to the second set.
/// Order within each output follows input order.
std::pair<std::vector<Sample>, std::vector<Sample>> stratified_split(std::span<const Sample> samples,
                                                                     double holdout_fraction,
                                                                     std::uint64_t seed);

std::vector<Sample> only_label(std::span<const Sample> samples, Label label);

/// Feature-space corruption: i.i.d. Gaussian noise of the given sigma added
/// to every entry; tags the copy with `tag`.
std::vector<Sample> add_feature_noise(std::span<const Sample> samples, double sigma, std::uint64_t seed,
                                      const std::string& tag = "noise");

}  // namespace refprior
