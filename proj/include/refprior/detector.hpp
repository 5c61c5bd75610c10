#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refprior/dataset.hpp"
#include "refprior/prior.hpp"

namespace refprior {

/// Which evidence reaches the classification head.
///  - baseline_classify_only: mean-pooled input features through the residual
///    projection, no reference comparison at all;
///  - perplexity_only / residual_only: the other evidence vector is zeroed;
///  - full: both evidence vectors.
enum class AblationMode { baseline_classify_only, perplexity_only, residual_only, full };

/// mean_rows: linear_res sees the patch-mean residual (one logit per image).
/// per_patch: every patch is scored on its own residual and attention
/// statistics, and the image logit is the mean of patch logits.
enum class ResidualPooling { mean_rows, per_patch };

std::string to_string(AblationMode m);
AblationMode parse_ablation_mode(const std::string& s);
std::string to_string(ResidualPooling p);
ResidualPooling parse_residual_pooling(const std::string& s);
std::string to_string(StatPooling p);
StatPooling parse_stat_pooling(const std::string& s);

struct HeadsShape {
  std::size_t hidden = 256;
  std::size_t evidence_dim = 128;
};

struct DetectorConfig {
  HeadsShape heads;
  AblationMode mode = AblationMode::full;
  ResidualPooling residual_pooling = ResidualPooling::mean_rows;
  StatPooling stat_pooling = StatPooling::mean;
  double threshold = 0.5;
};

/// Fixed affine preprocessing of the head inputs, fitted once on the
/// training evidence: attention stats are z-scored per column and the
/// residual (or feature) vectors are divided by their global RMS. Not trained.
template <typename T>
struct InputNorm {
  num::Matrix<T> stat_shift{1, 2, T{0}};
  num::Matrix<T> stat_scale{1, 2, T{1}};
  num::Matrix<T> vec_scale{1, 1, T{1}};

  template <typename U>
  InputNorm<U> cast() const {
    return {stat_shift.template cast<U>(), stat_scale.template cast<U>(), vec_scale.template cast<U>()};
  }
  friend bool operator==(const InputNorm&, const InputNorm&) = default;
};

/// Parameters of the perplexity MLP (2 -> h -> d_e), the residual projection
/// (D -> d_e) and the classifier MLP (2 d_e -> h -> 1). Hidden layers use GELU.
template <typename T>
struct BasicEvidenceHeads {
  num::Matrix<T> per_w1, per_b1, per_w2, per_b2;
  num::Matrix<T> res_w, res_b;
  num::Matrix<T> cls_w1, cls_b1, cls_w2, cls_b2;
  InputNorm<T> norm;

  std::size_t feature_dim() const noexcept { return res_w.rows(); }
  std::size_t evidence_dim() const noexcept { return res_w.cols(); }
  std::size_t hidden() const noexcept { return per_w1.cols(); }

  auto tensors() { return std::array{&per_w1, &per_b1, &per_w2, &per_b2, &res_w, &res_b, &cls_w1, &cls_b1, &cls_w2, &cls_b2}; }
  auto tensors() const {
    return std::array{&per_w1, &per_b1, &per_w2, &per_b2, &res_w, &res_b, &cls_w1, &cls_b1, &cls_w2, &cls_b2};
  }
  static constexpr std::array<const char*, 10> names{"per_w1", "per_b1", "per_w2", "per_b2", "res_w",
                                                     "res_b",  "cls_w1", "cls_b1", "cls_w2", "cls_b2"};

  void validate() const;

  template <typename U>
  BasicEvidenceHeads<U> cast() const {
    BasicEvidenceHeads<U> out;
    auto dst = out.tensors();
    auto src = tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = src[i]->template cast<U>();
    out.norm = norm.template cast<U>();
    return out;
  }

  friend bool operator==(const BasicEvidenceHeads&, const BasicEvidenceHeads&) = default;
};

using EvidenceHeads = BasicEvidenceHeads<float>;

template <>
void BasicEvidenceHeads<float>::validate() const;

/// Gaussian weights with stddev 1/sqrt(fan_in); zero biases.
EvidenceHeads init_heads(std::size_t feature_dim, const HeadsShape& shape, std::uint64_t seed);

/// All-zero parameters: every input maps to logit 0, y_pred = 0.5.
EvidenceHeads zero_heads(std::size_t feature_dim, const HeadsShape& shape);

/// Everything the heads consume for one image, derived from a frozen bank.
struct Evidence {
  float s_max = 0.0f;
  float s_ent = 0.0f;
  num::Tensor2 pooled_residual;  // 1 x D, patch mean of the residual
  num::Tensor2 pooled_features;  // 1 x D, patch mean of the input (baseline)
  num::Tensor2 patch_stats;      // N x 2, per-patch [max, entropy]
  num::Tensor2 residual;         // N x D
  num::Tensor2 features;         // N x D input, for per-patch baseline scoring
  float residual_norm = 0.0f;    // ||residual||_F
  std::vector<float> heatmap;    // per-patch L2 norm of the residual rows
};

Evidence compute_evidence(const MemoryBank& bank, const FeatureMap& features, StatPooling pooling);

struct Verdict {
  std::string image_id;
  double y_pred = 0.5;
  Label label = Label::real;
  double s_max = 0.0;
  double s_ent = 0.0;
  double residual_norm = 0.0;
  std::vector<float> heatmap;
};

/// Frozen prior plus trained heads.
struct Detector {
  MemoryBank bank;
  EvidenceHeads heads;
  DetectorConfig config;
};

/// Batched forward pass from evidence to probabilities (B x 1).
template <typename T>
struct HeadVars {
  num::Var<T> per_w1, per_b1, per_w2, per_b2, res_w, res_b, cls_w1, cls_b1, cls_w2, cls_b2;
};

template <typename T>
HeadVars<T> head_vars(num::Tape<T>& tape, const BasicEvidenceHeads<T>& h, bool trainable) {
  auto make = [&](const num::Matrix<T>& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  return {make(h.per_w1), make(h.per_b1), make(h.per_w2), make(h.per_b2), make(h.res_w),
          make(h.res_b),  make(h.cls_w1), make(h.cls_b1), make(h.cls_w2), make(h.cls_b2)};
}

/// Inputs of one batch, already normalized. For mean_rows pooling each image
/// is one row; for per_patch each patch is one row and `group` rows belong to
/// one image.
template <typename T>
struct HeadBatch {
  num::Matrix<T> stats;     // rows x 2
  num::Matrix<T> residual;  // rows x D (pooled features in baseline mode)
  std::size_t group = 1;
};

template <typename T>
num::Var<T> head_logits(num::Tape<T>& tape, const HeadVars<T>& w, const HeadBatch<T>& batch, AblationMode mode) {
  using namespace num;
  const std::size_t rows = batch.stats.rows();
  require(batch.residual.rows() == rows, "head_logits: stats/residual row mismatch");
  require(batch.group >= 1 && rows % batch.group == 0, "head_logits: rows not divisible by group");
  const std::size_t de = tape.value(w.res_w).cols();

  const auto stats = tape.constant(batch.stats);
  const auto res = tape.constant(batch.residual);
  auto v_per = add_row_bias(
      tape, matmul(tape, gelu(tape, add_row_bias(tape, matmul(tape, stats, w.per_w1), w.per_b1)), w.per_w2),
      w.per_b2);
  auto v_res = add_row_bias(tape, matmul(tape, res, w.res_w), w.res_b);
  if (mode == AblationMode::residual_only || mode == AblationMode::baseline_classify_only)
    v_per = tape.constant(Matrix<T>(rows, de));
  if (mode == AblationMode::perplexity_only) v_res = tape.constant(Matrix<T>(rows, de));

  const auto evidence = concat_cols(tape, v_per, v_res);
  const auto hidden = gelu(tape, add_row_bias(tape, matmul(tape, evidence, w.cls_w1), w.cls_b1));
  auto logits = add_row_bias(tape, matmul(tape, hidden, w.cls_w2), w.cls_b2);
  if (batch.group > 1) {
    const std::size_t images = rows / batch.group;
    Matrix<T> pool(images, rows);
    for (std::size_t i = 0; i < images; ++i)
      for (std::size_t r = 0; r < batch.group; ++r) pool(i, i * batch.group + r) = T{1} / static_cast<T>(batch.group);
    logits = matmul(tape, tape.constant(std::move(pool)), logits);
  }
  return logits;
}

/// Assembles the head inputs for a batch of evidence records.
HeadBatch<float> make_head_batch(std::span<const Evidence* const> items, const DetectorConfig& cfg,
                                 const InputNorm<float>& norm = {});

/// Fits the input normalizer to a set of evidence records.
InputNorm<float> fit_input_norm(std::span<const Evidence> evidence, const DetectorConfig& cfg);

/// Full-image verdict: project against the bank, build evidence, run heads.
Verdict score(const Detector& model, const FeatureMap& features, const std::string& image_id = "");
Verdict score_evidence(const Detector& model, const Evidence& ev, const std::string& image_id = "");

/// Convenience overload matching the detector contract.
Verdict score(const MemoryBank& bank, const EvidenceHeads& heads, const FeatureMap& features,
              const DetectorConfig& cfg = {});

/// Binary cross-entropy with y_pred clamped to [1e-7, 1 - 1e-7].
double bce_loss(double y_pred, int y);

struct Phase2Config {
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;
  double weight_decay = 0.01;
  double cosine_floor = 0.01;
  std::optional<std::size_t> max_steps;

  void validate() const;
};

struct Phase2Report {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
  std::string bank_checksum_before;
  std::string bank_checksum_after;
};

struct Phase2Result {
  EvidenceHeads heads;
  Phase2Report report;
};

/// Trains the heads by mean BCE with the prior frozen. Evidence is computed
/// once per sample against the frozen bank.
Phase2Result train_phase2(const MemoryBank& bank, const Phase2Config& cfg, const DetectorConfig& dcfg,
                          std::span<const Sample> data, std::ostream* log = nullptr);

/// Same, from precomputed evidence (labels align with `evidence`).
Phase2Result train_phase2_evidence(const MemoryBank& bank, const Phase2Config& cfg, const DetectorConfig& dcfg,
                                   std::span<const Evidence> evidence, std::span<const Label> labels,
                                   std::ostream* log = nullptr);

/// Wiring switch: same bank and heads, different evidence gating.
Detector ablation_variant(const Detector& model, AblationMode mode);

/// JSON heatmap record: {image_id, y_pred, s_max, s_ent, residual_norm,
/// heatmap[N]} plus label; `fingerprint` is added when non-empty.
std::string verdict_json(const Verdict& v, bool with_heatmap, const std::string& fingerprint = "");

}  // namespace refprior
