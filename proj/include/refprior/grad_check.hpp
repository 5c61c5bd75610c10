#pragma once

#include <functional>
#include <span>
#include <vector>

#include "refprior/tape.hpp"

namespace refprior::num {

/// Builds a scalar loss on a fresh tape from the given parameter handles.
using LossBuilder = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients against central differences, entry by
/// entry. Error per entry is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const LossBuilder& loss, const std::vector<Tensor2d>& params,
                           double h = 1e-5);

}  // namespace refprior::num
