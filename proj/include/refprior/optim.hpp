#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "refprior/matrix.hpp"

namespace refprior {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moment buffers are kept in double so
/// runs are reproducible bit-for-bit and insensitive to float accumulation.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::span<num::Tensor2* const> params);

  /// Applies one update with learning rate `lr`; grads align with params.
  void step(std::span<const num::Tensor2> grads, double lr);

  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<num::Tensor2*> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

/// Cosine annealing from `base_lr` down to `floor_fraction * base_lr` over
/// `total_steps`; step indices are 0-based.
double cosine_lr(double base_lr, double floor_fraction, std::size_t step, std::size_t total_steps);

}  // namespace refprior
