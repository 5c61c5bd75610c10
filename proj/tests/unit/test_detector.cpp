#include <gtest/gtest.h>

#include <cmath>

#include "refprior/detector.hpp"
#include "refprior/evalkit.hpp"
#include "refprior/grad_check.hpp"
#include "refprior/random.hpp"
#include "refprior/synthetic.hpp"

using namespace refprior;
using num::Tensor2;

namespace {

SyntheticSpec toy_spec(std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.D = 16;
  s.K_true = 8;
  s.sparsity = 2;
  s.noise_sigma = 0.01;
  s.off_manifold_norm = 0.5;
  s.n_real = 60;
  s.n_fake = 60;
  s.patches = 4;
  s.seed = seed;
  return s;
}

DetectorConfig toy_detector() {
  DetectorConfig c;
  c.heads = {8, 4};
  return c;
}

Phase2Config toy_phase2() {
  Phase2Config c;
  c.lr = 1e-2;
  c.batch_size = 16;
  c.max_steps = 200;
  c.seed = 3;
  return c;
}

std::vector<Label> labels_of(std::span<const Sample> s) {
  std::vector<Label> out;
  for (const auto& x : s) out.push_back(x.label);
  return out;
}

}  // namespace

TEST(Bce, HandValues) {
  EXPECT_NEAR(bce_loss(0.5, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(0.5, 1), 0.69315, 1e-5);
  EXPECT_NEAR(bce_loss(0.9, 0), -std::log(0.1), 1e-12);
  EXPECT_NEAR(bce_loss(0.9, 0), 2.30259, 1e-5);
  EXPECT_NEAR(bce_loss(1.0, 1), 0.0, 1e-6);
  EXPECT_NEAR(bce_loss(0.0, 1), -std::log(1e-7), 1e-9);
  EXPECT_THROW(bce_loss(0.5, 2), ContractViolation);
}

TEST(Heads, ShapesFollowConfig) {
  const auto h = init_heads(16, {8, 4}, 1);
  EXPECT_EQ(h.per_w1.rows(), 2u);
  EXPECT_EQ(h.per_w1.cols(), 8u);
  EXPECT_EQ(h.per_w2.rows(), 8u);
  EXPECT_EQ(h.per_w2.cols(), 4u);
  EXPECT_EQ(h.res_w.rows(), 16u);
  EXPECT_EQ(h.res_w.cols(), 4u);
  EXPECT_EQ(h.cls_w1.rows(), 8u);
  EXPECT_EQ(h.cls_w2.cols(), 1u);
  EXPECT_NO_THROW(h.validate());
  EXPECT_EQ(init_heads(16, {8, 4}, 1), h);
}

TEST(Heads, ZeroHeadsPredictOneHalf) {
  const auto data = make_synthetic(toy_spec());
  const Detector model{data.planted_bank(2), zero_heads(16, {8, 4}), toy_detector()};
  for (std::size_t i = 0; i < data.samples.size(); i += 17) {
    EXPECT_DOUBLE_EQ(score(model, data.samples[i].features).y_pred, 0.5);
  }
}

TEST(Evidence, HeatmapIsPerPatchResidualNorm) {
  const auto data = make_synthetic(toy_spec());
  const auto bank = data.planted_bank(2);
  const auto& f = data.samples.back().features;
  const auto ev = compute_evidence(bank, f, StatPooling::mean);
  const auto res = project(bank, f);
  double total = 0.0;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    double sq = 0.0;
    for (float v : res.residual.row(i)) sq += double(v) * v;
    EXPECT_NEAR(ev.heatmap[i], std::sqrt(sq), 1e-6);
    total += sq;
  }
  EXPECT_NEAR(ev.residual_norm, std::sqrt(total), 1e-5);
}

TEST(Evidence, GatingRemovesTheOtherPath) {
  const auto data = make_synthetic(toy_spec());
  const auto bank = data.planted_bank(2);
  auto a = compute_evidence(bank, data.samples[0].features, StatPooling::mean);
  auto b = a;
  b.s_max += 0.3f;
  b.s_ent -= 0.2f;
  auto c = a;
  for (float& v : c.pooled_residual.flat()) v += 0.1f;
  const auto heads = init_heads(16, {8, 4}, 9);

  auto run = [&](const Evidence& e, AblationMode m) {
    DetectorConfig cfg = toy_detector();
    cfg.mode = m;
    return score_evidence({bank, heads, cfg}, e).y_pred;
  };
  EXPECT_EQ(run(a, AblationMode::residual_only), run(b, AblationMode::residual_only));
  EXPECT_NE(run(a, AblationMode::residual_only), run(c, AblationMode::residual_only));
  EXPECT_EQ(run(a, AblationMode::perplexity_only), run(c, AblationMode::perplexity_only));
  EXPECT_NE(run(a, AblationMode::perplexity_only), run(b, AblationMode::perplexity_only));
  // The baseline reads the input features, so neither residual nor stats matter.
  EXPECT_EQ(run(a, AblationMode::baseline_classify_only), run(b, AblationMode::baseline_classify_only));
  EXPECT_EQ(run(a, AblationMode::baseline_classify_only), run(c, AblationMode::baseline_classify_only));
}

TEST(Evidence, FittedNormStandardizesStats) {
  const auto data = make_synthetic(toy_spec());
  const auto bank = data.planted_bank(4);
  std::vector<Evidence> ev;
  for (const auto& s : data.samples) ev.push_back(compute_evidence(bank, s.features, StatPooling::mean));
  const auto cfg = toy_detector();
  const auto norm = fit_input_norm(ev, cfg);
  std::vector<const Evidence*> items;
  for (const auto& e : ev) items.push_back(&e);
  const auto batch = make_head_batch(items, cfg, norm);
  for (std::size_t c = 0; c < 2; ++c) {
    if (norm.stat_scale(0, c) == 1.0f) continue;  // degenerate column
    double m = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < batch.stats.rows(); ++i) m += batch.stats(i, c);
    m /= double(batch.stats.rows());
    for (std::size_t i = 0; i < batch.stats.rows(); ++i) sq += (batch.stats(i, c) - m) * (batch.stats(i, c) - m);
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(sq / double(batch.stats.rows()), 1.0, 1e-3);
  }
  double rms = 0.0;
  for (float v : batch.residual.flat()) rms += double(v) * v;
  EXPECT_NEAR(std::sqrt(rms / double(batch.residual.size())), 1.0, 1e-4);
}

TEST(Evidence, ConstantStatColumnIsNotScaled) {
  const auto data = make_synthetic(toy_spec());
  const auto bank = data.planted_bank(1);  // k = 1: s_max = 1 and s_ent = 0 everywhere
  std::vector<Evidence> ev;
  for (const auto& s : data.samples) ev.push_back(compute_evidence(bank, s.features, StatPooling::mean));
  const auto norm = fit_input_norm(ev, toy_detector());
  EXPECT_EQ(norm.stat_scale(0, 0), 1.0f);
  EXPECT_EQ(norm.stat_scale(0, 1), 1.0f);
  EXPECT_FLOAT_EQ(norm.stat_shift(0, 0), 1.0f);

  // With k = sparsity the attention splits almost evenly, so s_ent sits at
  // ln 2 up to float noise and must not be blown up.
  std::vector<Evidence> even;
  const auto bank2 = data.planted_bank(2);
  for (const auto& s : data.samples) even.push_back(compute_evidence(bank2, s.features, StatPooling::mean));
  EXPECT_EQ(fit_input_norm(even, toy_detector()).stat_scale(0, 1), 1.0f);
}

TEST(Phase2, SeparableEvidenceIsLearned) {
  auto spec = toy_spec();
  spec.n_real = spec.n_fake = 400;
  const auto data = make_synthetic(spec);
  const auto [train, test] = stratified_split(data.samples, 0.4, 1);
  const auto bank = data.planted_bank(2);
  DetectorConfig dcfg = toy_detector();
  dcfg.heads = {32, 16};
  auto pcfg = toy_phase2();
  pcfg.max_steps = 600;
  const auto r = train_phase2(bank, pcfg, dcfg, train);
  EXPECT_EQ(r.report.steps, 600u);
  // Within the first 200 steps the training loss is already small.
  double tail = 0.0;
  for (std::size_t i = 190; i < 200; ++i) tail += r.report.step_losses[i];
  EXPECT_LT(tail / 10.0, 0.1);

  const Detector model{bank, r.heads, dcfg};
  std::size_t fakes = 0, flagged = 0;
  for (const auto& s : test) {
    if (s.label != Label::fake) continue;
    ++fakes;
    flagged += score(model, s.features).y_pred > 0.5;
  }
  EXPECT_GE(double(flagged), 0.95 * double(fakes));
}

TEST(Phase2, ShuffledLabelsGiveChanceAccuracy) {
  auto spec = toy_spec(4);
  spec.n_real = spec.n_fake = 200;
  const auto data = make_synthetic(spec);
  auto [train, test] = stratified_split(data.samples, 0.5, 4);
  const auto bank = data.planted_bank(2);
  // A single permutation keeps some chance correlation with the truth, which
  // separable evidence then amplifies; the null holds for the expectation.
  double mean = 0.0;
  for (int perm = 0; perm < 5; ++perm) {
    Rng rng = make_rng(77 + perm);
    auto labels = labels_of(train);
    std::shuffle(labels.begin(), labels.end(), rng);
    auto shuffled = train;
    for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
    const auto r = train_phase2(bank, toy_phase2(), toy_detector(), shuffled);
    mean += balanced_accuracy(predict({bank, r.heads, toy_detector()}, test)) / 5.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.1);
}

TEST(Phase2, LeavesBankUntouchedAndIsDeterministic) {
  const auto data = make_synthetic(toy_spec());
  const auto bank = data.planted_bank(2);
  const auto before = bank_checksum(bank);
  auto cfg = toy_phase2();
  cfg.max_steps = 20;
  const auto a = train_phase2(bank, cfg, toy_detector(), data.samples);
  const auto b = train_phase2(bank, cfg, toy_detector(), data.samples);
  EXPECT_EQ(a.report.bank_checksum_before, before);
  EXPECT_EQ(a.report.bank_checksum_after, before);
  EXPECT_EQ(bank_checksum(bank), before);
  EXPECT_EQ(a.heads, b.heads);
}

TEST(Phase2, SingleClassIsRejected) {
  const auto data = make_synthetic(toy_spec());
  const auto reals = only_label(data.samples, Label::real);
  EXPECT_THROW(train_phase2(data.planted_bank(2), toy_phase2(), toy_detector(), reals), ContractViolation);
  EXPECT_THROW(train_phase2(data.planted_bank(2), toy_phase2(), toy_detector(), std::vector<Sample>{}),
               ContractViolation);
}

TEST(Phase2, PerPatchPoolingTrains) {
  const auto data = make_synthetic(toy_spec());
  auto dcfg = toy_detector();
  dcfg.residual_pooling = ResidualPooling::per_patch;
  const auto bank = data.planted_bank(2);
  const auto r = train_phase2(bank, toy_phase2(), dcfg, data.samples);
  EXPECT_GT(balanced_accuracy(predict({bank, r.heads, dcfg}, data.samples)), 0.9);
}

TEST(Phase2, BceGraphGradientsMatchFiniteDifferences) {
  Rng rng = make_rng(12);
  const auto heads = init_heads(6, {5, 3}, 2).cast<double>();
  HeadBatch<double> batch;
  batch.stats = gaussian_matrix<double>(4, 2, 1.0, rng);
  batch.residual = gaussian_matrix<double>(4, 6, 1.0, rng);
  const num::Tensor2d y{{1}, {0}, {0}, {1}};
  std::vector<num::Tensor2d> params;
  for (const auto* t : heads.tensors()) params.push_back(*t);
  for (auto mode : {AblationMode::full, AblationMode::residual_only, AblationMode::perplexity_only}) {
    const auto r = num::grad_check(
        [&](num::Tape<double>& t, std::span<const num::Var<double>> p) {
          HeadVars<double> w{p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]};
          return num::bce_mean(t, num::sigmoid(t, head_logits(t, w, batch, mode)), y);
        },
        params);
    EXPECT_LE(r.max_relative_error, 1e-6) << to_string(mode);
  }
}

TEST(Detector, VerdictJsonCarriesHeatmapOnRequest) {
  Verdict v;
  v.image_id = "a";
  v.heatmap = {0.5f, 1.0f};
  const auto without = nlohmann::json::parse(verdict_json(v, false));
  const auto with = nlohmann::json::parse(verdict_json(v, true, "abc"));
  EXPECT_FALSE(without.contains("heatmap"));
  EXPECT_EQ(with.at("heatmap").size(), 2u);
  EXPECT_EQ(with.at("fingerprint"), "abc");
  EXPECT_EQ(with.at("label"), "real");
}

TEST(Detector, EnumRoundTrips) {
  for (auto m : {AblationMode::baseline_classify_only, AblationMode::perplexity_only, AblationMode::residual_only,
                 AblationMode::full})
    EXPECT_EQ(parse_ablation_mode(to_string(m)), m);
  for (auto p : {StatPooling::mean, StatPooling::max, StatPooling::median})
    EXPECT_EQ(parse_stat_pooling(to_string(p)), p);
  EXPECT_THROW(parse_ablation_mode("everything"), ContractViolation);
}
