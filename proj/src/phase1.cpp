#include "refprior/phase1.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "refprior/optim.hpp"
#include "refprior/random.hpp"

namespace refprior {

void Phase1Config::validate() const {
  require(lambda >= 0.0, "Phase1Config: lambda must be >= 0");
  require(lr > 0.0, "Phase1Config: lr must be > 0");
  require(epochs >= 1, "Phase1Config: epochs must be >= 1");
  require(batch_size >= 1, "Phase1Config: batch_size must be >= 1");
  require(K >= 1 && top_k >= 1 && top_k <= K, "Phase1Config: need 1 <= top_k <= K");
  require(weight_decay >= 0.0, "Phase1Config: weight_decay must be >= 0");
  require(cosine_floor >= 0.0 && cosine_floor <= 1.0, "Phase1Config: cosine_floor outside [0, 1]");
}

double phase1_loss(const MemoryBank& bank, const FeatureMap& features, double lambda) {
  bank.validate();
  num::Tape<float> tape;
  const auto vars = bank_constants(tape, bank);
  const auto loss = phase1_loss_graph(tape, vars, tape.constant(features), bank.top_k, static_cast<float>(lambda));
  return tape.value(loss)(0, 0);
}

double reconstruction_loss(const MemoryBank& bank, std::span<const Sample> samples) {
  require(!samples.empty(), "reconstruction_loss: no samples");
  double acc = 0.0;
  for (const auto& s : samples) {
    const auto res = project(bank, s.features);
    double sq = 0.0;
    for (float v : res.residual.flat()) sq += static_cast<double>(v) * v;
    acc += sq / static_cast<double>(res.residual.size());
  }
  return acc / static_cast<double>(samples.size());
}

Phase1Result train_phase1(const Phase1Config& cfg, std::span<const Sample> data, std::span<const Sample> holdout,
                          std::ostream* log) {
  cfg.validate();
  require(!data.empty(), "train_phase1: empty dataset");
  return train_phase1_from(cfg, init_bank(cfg.K, data.front().features.cols(), cfg.top_k, cfg.seed), data,
                           holdout, log);
}

Phase1Result train_phase1_from(const Phase1Config& cfg, MemoryBank bank, std::span<const Sample> data,
                               std::span<const Sample> holdout, std::ostream* log) {
  cfg.validate();
  bank.validate();
  require(!data.empty(), "train_phase1: empty dataset");
  const std::size_t d = bank.dim();
  for (const auto& s : data) {
    if (!cfg.allow_mixed_memory && s.label != Label::real)
      throw ContractViolation("train_phase1: sample '" + s.image_id +
                              "' is labelled fake; the memory bank is trained on real images only");
    require(s.features.cols() == d, "train_phase1: sample '" + s.image_id + "' has wrong feature dim");
    require(s.features.rows() > 0, "train_phase1: sample '" + s.image_id + "' has no patches");
  }

  Phase1Result result;
  TrainReport& report = result.report;
  report.initial_checksum = bank_checksum(bank);
  if (!holdout.empty()) report.initial_holdout_loss = reconstruction_loss(bank, holdout);

  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  // An explicit step budget replaces the epoch count; epochs are cycled until it is spent.
  const std::size_t total_steps = cfg.max_steps ? *cfg.max_steps : steps_per_epoch * cfg.epochs;

  std::array<num::Tensor2*, 4> params{&bank.prototypes, &bank.w_query, &bank.w_key, &bank.w_value};
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay}, params);
  Rng rng = make_rng(cfg.seed, 0x504841534531ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const auto started = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total_steps; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size() && step < total_steps; b += cfg.batch_size, ++step) {
      std::vector<const num::Tensor2*> blocks;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i)
        blocks.push_back(&data[order[i]].features);
      const num::Tensor2 batch = num::vstack<float>(blocks);

      num::Tape<float> tape;
      const auto vars = bank_parameters(tape, bank);
      const auto f = tape.constant(batch);
      const auto rec = reconstruct(tape, vars, f, bank.top_k);
      const auto recon = num::mean_square(tape, num::sub(tape, f, rec.reference));
      const auto pen = orthogonality_penalty(tape, vars.prototypes);
      const auto loss = num::add(tape, recon, num::scale(tape, pen, static_cast<float>(cfg.lambda)));
      tape.backward(loss);

      const std::array<num::Tensor2, 4> grads{tape.grad(vars.prototypes), tape.grad(vars.w_query),
                                              tape.grad(vars.w_key), tape.grad(vars.w_value)};
      const double lr = cosine_lr(cfg.lr, cfg.cosine_floor, step, total_steps);
      opt.step(grads, lr);

      const double recon_v = tape.value(recon)(0, 0);
      const double pen_v = tape.value(pen)(0, 0);
      report.step_losses.push_back(tape.value(loss)(0, 0));
      stats.recon_loss += recon_v;
      stats.penalty += pen_v;
      ++batches;
      if (log) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        *log << nlohmann::json{{"step", step}, {"recon_loss", recon_v}, {"penalty", pen_v}, {"lr", lr},
                               {"elapsed_s", t}}
                    .dump()
             << '\n';
      }
    }
    if (batches == 0) break;
    stats.recon_loss /= static_cast<double>(batches);
    stats.penalty /= static_cast<double>(batches);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    report.epochs.push_back(stats);
  }
  report.steps = step;
  bank.validate();
  report.final_checksum = bank_checksum(bank);
  if (!holdout.empty()) report.final_holdout_loss = reconstruction_loss(bank, holdout);
  result.bank = std::move(bank);
  return result;
}

}  // namespace refprior
