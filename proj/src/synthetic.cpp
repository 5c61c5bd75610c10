#include "refprior/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include <Eigen/Dense>

#include "refprior/random.hpp"

namespace refprior {

void SyntheticSpec::validate() const {
  require(D > 0 && K_true > 0, "SyntheticSpec: D and K_true must be positive");
  require(K_true <= D, "SyntheticSpec: K_true=" + std::to_string(K_true) + " > D=" + std::to_string(D) +
                           " (orthonormal planting impossible)");
  require(sparsity >= 1 && sparsity <= K_true, "SyntheticSpec: sparsity outside [1, K_true]");
  require(noise_sigma >= 0.0, "SyntheticSpec: noise_sigma must be >= 0");
  require(patches >= 1, "SyntheticSpec: patches must be >= 1");
  require(n_real + n_fake > 0, "SyntheticSpec: no samples requested");
  if (n_fake > 0) {
    require(K_true < D, "SyntheticSpec: fakes need a non-empty complement (K_true < D)");
    require(off_manifold_norm > 3.0 * noise_sigma,
            "SyntheticSpec: off_manifold_norm must exceed 3 * noise_sigma (classes would not be separable)");
  }
}

MemoryBank SyntheticData::planted_bank(std::size_t top_k, float sharpness) const {
  const std::size_t d = planted_prototypes.cols();
  MemoryBank bank{planted_prototypes, sharpness * num::Tensor2::identity(d), num::Tensor2::identity(d),
                  num::Tensor2::identity(d), top_k};
  bank.validate();
  return bank;
}

namespace {

std::string sample_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, i);
  return buf;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng structure = make_rng(spec.seed, 1);
  Rng noise = make_rng(spec.seed, 2);

  using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto g = gaussian_matrix<double>(spec.D, spec.D, 1.0, structure);
  const EigenMat gm =
      Eigen::Map<const EigenMat>(g.flat().data(), static_cast<Eigen::Index>(spec.D), static_cast<Eigen::Index>(spec.D));
  const EigenMat q = Eigen::HouseholderQR<EigenMat>(gm).householderQ();
  const EigenMat basis = q.transpose();  // rows orthonormal

  SyntheticData out;
  out.planted_prototypes = num::Tensor2(spec.K_true, spec.D);
  out.complement_basis = num::Tensor2(spec.D - spec.K_true, spec.D);
  for (std::size_t i = 0; i < spec.D; ++i)
    for (std::size_t j = 0; j < spec.D; ++j) {
      const float v = static_cast<float>(basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      if (i < spec.K_true)
        out.planted_prototypes(i, j) = v;
      else
        out.complement_basis(i - spec.K_true, j) = v;
    }

  std::vector<std::size_t> pool(spec.K_true);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double weight = 1.0 / static_cast<double>(spec.sparsity);

  auto real_map = [&]() {
    std::vector<double> acc(spec.patches * spec.D, 0.0);
    for (std::size_t r = 0; r < spec.patches; ++r) {
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      for (std::size_t s = 0; s < spec.sparsity; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, spec.K_true - 1);
        std::swap(pool[s], pool[pick(structure)]);
        const auto proto = out.planted_prototypes.row(pool[s]);
        for (std::size_t j = 0; j < spec.D; ++j) acc[r * spec.D + j] += weight * proto[j];
      }
    }
    return acc;
  };
  auto finish = [&](std::vector<double>& acc) {
    num::Tensor2 m(spec.patches, spec.D);
    for (std::size_t i = 0; i < acc.size(); ++i)
      m.flat()[i] = static_cast<float>(acc[i] + spec.noise_sigma * unit(noise));
    return m;
  };

  out.samples.reserve(spec.n_real + spec.n_fake);
  for (std::size_t i = 0; i < spec.n_real; ++i) {
    auto acc = real_map();
    out.samples.push_back({sample_id("real", i), finish(acc), Label::real, "none", "clean"});
  }
  const std::size_t comp = spec.D - spec.K_true;
  for (std::size_t i = 0; i < spec.n_fake; ++i) {
    auto acc = real_map();
    std::vector<double> coeff(comp);
    double norm = 0.0;
    for (auto& c : coeff) {
      c = unit(structure);
      norm += c * c;
    }
    norm = std::sqrt(norm);
    std::vector<double> offset(spec.D, 0.0);
    for (std::size_t c = 0; c < comp; ++c) {
      const auto b = out.complement_basis.row(c);
      for (std::size_t j = 0; j < spec.D; ++j) offset[j] += coeff[c] / norm * b[j];
    }
    for (std::size_t r = 0; r < spec.patches; ++r)
      for (std::size_t j = 0; j < spec.D; ++j) acc[r * spec.D + j] += spec.off_manifold_norm * offset[j];
    out.samples.push_back({sample_id("fake", i), finish(acc), Label::fake, "synthetic", "clean"});
  }
  return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> stratified_split(std::span<const Sample> samples,
                                                                     double holdout_fraction, std::uint64_t seed) {
  require(holdout_fraction >= 0.0 && holdout_fraction <= 1.0, "stratified_split: fraction outside [0, 1]");
  Rng rng = make_rng(seed, 3);
  std::vector<bool> to_holdout(samples.size(), false);
  for (Label label : {Label::real, Label::fake}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].label == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_hold = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_hold; ++i) to_holdout[idx[i]] = true;
  }
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (to_holdout[i] ? out.second : out.first).push_back(samples[i]);
  return out;
}

std::vector<Sample> only_label(std::span<const Sample> samples, Label label) {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (s.label == label) out.push_back(s);
  return out;
}

std::vector<Sample> add_feature_noise(std::span<const Sample> samples, double sigma, std::uint64_t seed,
                                      const std::string& tag) {
  require(sigma >= 0.0, "add_feature_noise: sigma must be >= 0");
  Rng rng = make_rng(seed, 4);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Sample> out(samples.begin(), samples.end());
  for (auto& s : out) {
    for (auto& v : s.features.flat()) v = static_cast<float>(v + sigma * unit(rng));
    s.corruption = tag;
  }
  return out;
}

}  // namespace refprior
