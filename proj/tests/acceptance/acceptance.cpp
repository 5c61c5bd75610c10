// One PASS/FAIL line per acceptance criterion. Arguments, when given, select
// criteria by name. Exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "refprior/evalkit.hpp"
#include "refprior/grad_check.hpp"
#include "refprior/random.hpp"
#include "refprior/store.hpp"
#include "refprior/synthetic.hpp"
#include "support/curation_oracle.hpp"

using namespace refprior;
using num::Tensor2d;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  constexpr std::size_t N = 8, D = 16, K = 32, k = 4;
  Rng rng = make_rng(101);
  auto bank = init_bank(K, D, k, 3).cast<double>();
  // Move off the structured initialisation so every term is exercised.
  bank.w_query = bank.w_query + gaussian_matrix<double>(D, D, 0.3, rng);
  bank.w_key = bank.w_key + gaussian_matrix<double>(D, D, 0.3, rng);
  bank.w_value = bank.w_value + gaussian_matrix<double>(D, D, 0.3, rng);
  const Tensor2d features = gaussian_matrix<double>(N, D, 0.5, rng);

  const auto p1 = num::grad_check(
      [&](num::Tape<double>& t, std::span<const num::Var<double>> p) {
        return phase1_loss_graph<double>(t, {p[0], p[1], p[2], p[3]}, t.constant(features), k, 0.1);
      },
      {bank.prototypes, bank.w_query, bank.w_key, bank.w_value});

  const auto heads = init_heads(D, {8, 4}, 5).cast<double>();
  std::vector<Tensor2d> head_params;
  for (const auto* t : heads.tensors()) head_params.push_back(*t);
  HeadBatch<double> batch;
  batch.stats = gaussian_matrix<double>(N, 2, 1.0, rng);
  batch.residual = gaussian_matrix<double>(N, D, 1.0, rng);
  Tensor2d y(N, 1);
  for (std::size_t i = 0; i < N; i += 2) y(i, 0) = 1.0;
  double p2 = 0.0;
  for (auto mode : {AblationMode::full, AblationMode::residual_only, AblationMode::perplexity_only,
                    AblationMode::baseline_classify_only}) {
    const auto r = num::grad_check(
        [&](num::Tape<double>& t, std::span<const num::Var<double>> p) {
          HeadVars<double> w{p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]};
          return num::bce_mean(t, num::sigmoid(t, head_logits(t, w, batch, mode)), y);
        },
        head_params);
    p2 = std::max(p2, r.max_relative_error);
  }
  const double secs = seconds_since(t0);
  return {p1.max_relative_error <= 1e-4 && p2 <= 1e-4 && secs < 60.0,
          "phase1 max rel err " + fmt(p1.max_relative_error) + " over " + std::to_string(p1.entries_checked) +
              " entries, phase2 " + fmt(p2) + ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------

// Dense attention written out with loops, as the oracle for k = K.
Tensor2d dense_attention(const BasicMemoryBank<double>& b, const Tensor2d& f) {
  const std::size_t n = f.rows(), K = b.size(), D = b.dim();
  Tensor2d q(n, D), key(K, D), a(n, K);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t l = 0; l < D; ++l) q(i, j) += f(i, l) * b.w_query(l, j);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t l = 0; l < D; ++l) key(i, j) += b.prototypes(i, l) * b.w_key(l, j);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < K; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < D; ++l) s += q(i, l) * key(j, l);
      a(i, j) = s / std::sqrt(static_cast<double>(D));
      mx = std::max(mx, a(i, j));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) z += a(i, j) = std::exp(a(i, j) - mx);
    for (std::size_t j = 0; j < K; ++j) a(i, j) /= z;
  }
  return a;
}

Outcome sparse_contracts() {
  Rng rng = make_rng(202);
  std::uniform_int_distribution<std::size_t> dimK(1, 32), dimD(1, 16), dimN(1, 8);
  double worst_sum = 0.0, worst_dense = 0.0;
  std::size_t bad_nnz = 0, bad_ent = 0, bad_max = 0;
  constexpr int inputs = 10000;
  for (int it = 0; it < inputs; ++it) {
    const std::size_t K = dimK(rng), D = dimD(rng), n = dimN(rng);
    std::uniform_int_distribution<std::size_t> pick_k(1, K);
    BasicMemoryBank<double> b{gaussian_matrix<double>(K, D, 1.0, rng), gaussian_matrix<double>(D, D, 1.0, rng),
                              gaussian_matrix<double>(D, D, 1.0, rng), gaussian_matrix<double>(D, D, 1.0, rng),
                              pick_k(rng)};
    const Tensor2d f = gaussian_matrix<double>(n, D, 1.0, rng);
    const auto r = project(b, f);
    const double k = static_cast<double>(b.top_k);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      std::size_t nnz = 0;
      for (double a : r.attention.row(i)) sum += a, nnz += a != 0.0;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      bad_nnz += nnz > b.top_k;
      bad_ent += r.row_entropy[i] < 0.0 || r.row_entropy[i] > std::log(k) + 1e-12;
      bad_max += r.row_max[i] < 1.0 / k - 1e-12 || r.row_max[i] > 1.0;
    }
    bad_ent += r.s_ent < 0.0 || r.s_ent > std::log(k) + 1e-12;
    bad_max += r.s_max < 1.0 / k - 1e-12 || r.s_max > 1.0;

    b.top_k = K;
    worst_dense = std::max(worst_dense, num::max_abs_diff(project(b, f).attention, dense_attention(b, f)));
  }
  const bool pass = worst_sum <= 1e-6 && worst_dense <= 1e-6 && bad_nnz == 0 && bad_ent == 0 && bad_max == 0;
  return {pass, std::to_string(inputs) + " inputs: max |row sum - 1| " + fmt(worst_sum) + ", k=K vs dense " +
                    fmt(worst_dense) + ", nnz/entropy/max violations " + std::to_string(bad_nnz) + "/" +
                    std::to_string(bad_ent) + "/" + std::to_string(bad_max)};
}

// ---------------------------------------------------------------------------

Outcome orthogonality_regime() {
  SyntheticSpec s;
  s.D = 32;
  s.K_true = 16;
  s.n_real = 300;
  s.n_fake = 0;
  const auto data = make_synthetic(s);
  Phase1Config c = desk_pipeline().phase1;
  c.top_k = 4;

  c.K = 32;
  const auto square = train_phase1(c, data.samples);
  const double pen_square = orthogonality_penalty(square.bank);
  const double init_square = orthogonality_penalty(init_bank(32, 32, 4, c.seed));

  c.K = 64;
  const auto wide = train_phase1(c, data.samples);
  const double pen_wide = orthogonality_penalty(wide.bank);
  const double bound = std::sqrt(64.0 - 32.0);
  return {pen_square < 1e-2 && pen_wide >= bound - 1e-3,
          "K=D=32 penalty " + fmt(init_square) + " -> " + fmt(pen_square) + " (< 0.01); K=64 penalty " +
              fmt(pen_wide) + " (bound " + fmt(bound) + ")"};
}

// ---------------------------------------------------------------------------

Outcome manifold_separation() {
  const auto t0 = Clock::now();
  const SyntheticSpec spec;
  const auto data = make_synthetic(spec);
  const auto [train, test] = stratified_split(data.samples, 0.2, spec.seed);
  const auto result = train_pipeline(desk_pipeline(), train);
  const double auc = residual_auc(result.model.bank, test);
  const double bacc = balanced_accuracy(predict(result.model, test));
  const double secs = seconds_since(t0);
  return {auc >= 0.95 && bacc >= 0.95 && secs <= 300.0,
          "held-out residual AUC " + fmt(auc) + ", B.Acc " + fmt(bacc) + ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------

// Per seed: one real-only prior shared by the three head wirings, plus one
// mixed-memory prior with full heads.
struct SeedRun {
  double baseline = 0, residual_only = 0, full = 0, mixed = 0;
};

std::vector<SeedRun>& seed_runs() {
  static std::vector<SeedRun> runs = [] {
    std::vector<SeedRun> out;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      SyntheticSpec spec;
      spec.seed = seed;
      const auto data = make_synthetic(spec);
      const auto [train, test] = stratified_split(data.samples, 0.2, seed);
      PipelineConfig pc = desk_pipeline();
      pc.phase1.seed = pc.phase2.seed = seed;
      const auto prior = train_phase1(pc.phase1, only_label(train, Label::real)).bank;
      auto bacc_with = [&](const MemoryBank& bank, AblationMode mode) {
        DetectorConfig dc = pc.detector;
        dc.mode = mode;
        const auto heads = train_phase2(bank, pc.phase2, dc, train).heads;
        return balanced_accuracy(predict({bank, heads, dc}, test));
      };
      SeedRun r;
      r.baseline = bacc_with(prior, AblationMode::baseline_classify_only);
      r.residual_only = bacc_with(prior, AblationMode::residual_only);
      r.full = bacc_with(prior, AblationMode::full);
      pc.phase1.allow_mixed_memory = true;
      r.mixed = bacc_with(train_phase1(pc.phase1, train).bank, AblationMode::full);
      out.push_back(r);
    }
    return out;
  }();
  return runs;
}

Outcome ablation_ordering() {
  int violations = 0;
  std::string detail;
  for (const auto& r : seed_runs()) {
    violations += r.full < r.residual_only || r.residual_only < r.baseline;
    detail += (detail.empty() ? "" : "; ") + fmt(r.full) + " >= " + fmt(r.residual_only) + " >= " + fmt(r.baseline);
  }
  return {violations <= 1, std::to_string(violations) + " of 5 seeds out of order (full >= residual_only >= "
                           "baseline): " + detail};
}

Outcome memory_purity() {
  double real = 0, mixed = 0;
  for (const auto& r : seed_runs()) real += r.full / 5.0, mixed += r.mixed / 5.0;
  return {mixed < real, "mean B.Acc real-only prior " + fmt(real, 6) + ", mixed prior " + fmt(mixed, 6)};
}

// ---------------------------------------------------------------------------

// Off-manifold norm lowered from the default so the detector does not
// saturate at B.Acc 1 for every setting; five seeds averaged.
std::vector<double> mean_sweep(SweepAxis axis, std::span<const std::size_t> values) {
  std::vector<double> mean(values.size());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.off_manifold_norm = 0.15;
    spec.n_real = spec.n_fake = 300;
    PipelineConfig pc = desk_pipeline();
    pc.phase1.seed = pc.phase2.seed = seed;
    if (axis == SweepAxis::K) {
      spec.K_true = 16;
      pc.phase1.top_k = 4;
    }
    const auto data = make_synthetic(spec);
    const auto [train, test] = stratified_split(data.samples, 0.5, seed);
    const auto rows = sweep(axis, values, pc, train, test);
    for (std::size_t i = 0; i < values.size(); ++i) mean[i] += rows[i].bacc / 5.0;
  }
  return mean;
}

Outcome sensitivity_shape() {
  const std::size_t Ks[] = {8, 16, 32, 64};
  const std::size_t ks[] = {1, 2, 4, 8};
  const auto bK = mean_sweep(SweepAxis::K, Ks);
  const auto bk = mean_sweep(SweepAxis::top_k, ks);
  const std::size_t peak = Ks[std::max_element(bK.begin(), bK.end()) - bK.begin()];
  const bool k_ok = bk[2] > bk[0] && bk[3] > bk[0];
  std::string detail = "K-sweep B.Acc";
  for (std::size_t i = 0; i < 4; ++i) detail += " " + std::to_string(Ks[i]) + ":" + fmt(bK[i]);
  detail += " (peak K=" + std::to_string(peak) + (peak >= 16 ? ", ok" : ", expected >= 16") + "); k-sweep B.Acc";
  for (std::size_t i = 0; i < 4; ++i) detail += " " + std::to_string(ks[i]) + ":" + fmt(bk[i]);
  detail += k_ok ? " (k=4,8 above k=1, ok)" : " (expected k=4 and k=8 above k=1)";
  return {peak >= 16 && k_ok, detail};
}

// ---------------------------------------------------------------------------

Outcome curation_oracle() {
  std::vector<TrialRecord> fixture;
  const double rts[] = {1000, 1000, 1000, 1000, 6000};
  for (int i = 0; i < 5; ++i) {
    TrialRecord r;
    r.trial_id = "t" + std::to_string(i);
    r.image_id = "g" + std::to_string(i);
    r.ground_truth = Truth::generated;
    r.S = 1;
    r.RT = rts[i];
    r.participant_id = "p";
    fixture.push_back(r);
  }
  const auto fx = select_hard(fixture);
  const bool fixture_ok = fx.mu_rt == 2000.0 && fx.sigma_rt == 2000.0 && fx.selected == std::vector<std::string>{"g4"} &&
                          oracle::oracle_select(fixture, {}) == std::set<std::string>{"g4"};

  std::mt19937_64 rng(303);
  int checked = 0, mismatches = 0;
  while (checked < 1000) {
    const auto log = oracle::random_trial_log(rng);
    const auto cfg = oracle::random_curation_config(rng);
    if (!oracle::has_generated_in_scope(log, cfg)) continue;
    const auto got = select_hard(log, cfg).selected;
    mismatches += std::set<std::string>(got.begin(), got.end()) != oracle::oracle_select(log, cfg);
    ++checked;
  }
  return {fixture_ok && mismatches == 0,
          std::to_string(mismatches) + " mismatches on " + std::to_string(checked) +
              " random logs; fixture mu " + fmt(fx.mu_rt) + " sigma " + fmt(fx.sigma_rt) + " selected " +
              std::to_string(fx.selected.size())};
}

// ---------------------------------------------------------------------------

Outcome determinism_persistence() {
  SyntheticSpec spec;
  spec.n_real = spec.n_fake = 100;
  const auto data = make_synthetic(spec);
  PipelineConfig pc = desk_pipeline();
  pc.phase1.max_steps = 30;
  pc.phase2.max_steps = 30;

  auto ckpt_bytes = [&](const PipelineConfig& c) {
    const auto r = train_pipeline(c, data.samples);
    return encode_checkpoint({r.model.bank, r.model.heads, r.model.config, {}});
  };
  const auto a = ckpt_bytes(pc), b = ckpt_bytes(pc);
  auto other = pc;
  other.phase1.seed = pc.phase1.seed + 1;
  const bool same_seed = a == b && ckpt_bytes(other) != a;

  const auto decoded = decode_checkpoint(a);
  const bool ckpt_round = encode_checkpoint(decoded) == a;

  Rng rng = make_rng(404);
  FeatureMap f = gaussian_matrix<float>(196, 1024, 1.0f, rng);
  f(0, 0) = -0.0f;
  f(1, 1) = std::numeric_limits<float>::denorm_min();
  f(2, 2) = std::numeric_limits<float>::max();
  const auto back = decode_features(encode_features(f));
  const bool feat_round = back.rows() == f.rows() && back.cols() == f.cols() &&
                          std::memcmp(back.flat().data(), f.flat().data(), f.size() * sizeof(float)) == 0;

  const auto prior = train_phase1(pc.phase1, only_label(data.samples, Label::real)).bank;
  const std::string before = bank_checksum(prior);
  const auto heads = train_phase2(prior, pc.phase2, pc.detector, data.samples).heads;
  const bool frozen = bank_checksum(prior) == before &&
                      Checkpoint{prior, heads, pc.detector, {}}.prior_checksum() == before;

  auto yn = [](bool v) { return v ? "yes" : "no"; };
  return {same_seed && ckpt_round && feat_round && frozen,
          std::string("same-seed checkpoints identical ") + yn(same_seed) + ", checkpoint round trip " + yn(ckpt_round) +
              ", 196x1024 feature round trip " + yn(feat_round) + ", prior checksum unchanged by phase 2 " +
              yn(frozen)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient_fidelity", gradient_fidelity},
      {"sparse_attention_contracts", sparse_contracts},
      {"orthogonality_regime", orthogonality_regime},
      {"manifold_separation", manifold_separation},
      {"ablation_ordering", ablation_ordering},
      {"memory_purity", memory_purity},
      {"sensitivity_shape", sensitivity_shape},
      {"curation_oracle", curation_oracle},
      {"determinism_persistence", determinism_persistence},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failures;
}
