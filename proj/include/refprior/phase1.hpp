#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refprior/dataset.hpp"
#include "refprior/prior.hpp"

namespace refprior {

struct Phase1Config {
  double lambda = 0.01;
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  std::size_t top_k = 128;
  std::size_t K = 4096;
  std::uint64_t seed = 7;
  double weight_decay = 0.01;
  double cosine_floor = 0.01;
  /// Explicit optimizer step budget; overrides epochs and sets the cosine span.
  std::optional<std::size_t> max_steps;
  /// Lets fake-labelled samples into the memory. Only for the memory-source
  /// ablation; production training must keep this false.
  bool allow_mixed_memory = false;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double recon_loss = 0.0;
  double penalty = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;  // full objective per step
  std::size_t steps = 0;
  std::string initial_checksum;
  std::string final_checksum;
  std::optional<double> initial_holdout_loss;
  std::optional<double> final_holdout_loss;
};

struct Phase1Result {
  MemoryBank bank;
  TrainReport report;
};

/// Reconstruction term (mean over N*D of squared residuals) plus
/// lambda * ||M M^T - I||_F.
template <typename T>
num::Var<T> phase1_loss_graph(num::Tape<T>& tape, const BankVars<T>& bank, num::Var<T> features,
                              std::size_t top_k, T lambda) {
  const auto rec = reconstruct(tape, bank, features, top_k);
  const auto recon = num::mean_square(tape, num::sub(tape, features, rec.reference));
  const auto pen = orthogonality_penalty(tape, bank.prototypes);
  return num::add(tape, recon, num::scale(tape, pen, lambda));
}

double phase1_loss(const MemoryBank& bank, const FeatureMap& features, double lambda);

/// Mean per-sample reconstruction term over a set of samples.
double reconstruction_loss(const MemoryBank& bank, std::span<const Sample> samples);

/// Learns the prior from real samples only. `holdout` (optional) is scored
/// before and after training. Each step writes one JSON line to `log`.
Phase1Result train_phase1(const Phase1Config& cfg, std::span<const Sample> data,
                          std::span<const Sample> holdout = {}, std::ostream* log = nullptr);

/// Same, starting from a caller-provided bank (its K and top_k win over cfg).
Phase1Result train_phase1_from(const Phase1Config& cfg, MemoryBank initial, std::span<const Sample> data,
                               std::span<const Sample> holdout = {}, std::ostream* log = nullptr);

}  // namespace refprior
