#include "refprior/optim.hpp"

#include <cmath>
#include <numbers>

namespace refprior {

AdamW::AdamW(AdamWConfig cfg, std::span<num::Tensor2* const> params)
    : cfg_(cfg), params_(params.begin(), params.end()) {
  for (const auto* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamW::step(std::span<const num::Tensor2> grads, double lr) {
  require(grads.size() == params_.size(), "AdamW: gradient count != parameter count");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto w = params_[p]->flat();
    auto g = grads[p].flat();
    require(g.size() == w.size(), "AdamW: gradient shape mismatch");
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double wi = w[i];
      wi -= lr * cfg_.weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

double cosine_lr(double base_lr, double floor_fraction, std::size_t step, std::size_t total_steps) {
  const double floor_lr = base_lr * floor_fraction;
  if (total_steps <= 1) return base_lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return floor_lr + (base_lr - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace refprior
