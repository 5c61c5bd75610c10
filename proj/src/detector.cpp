#include "refprior/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "refprior/optim.hpp"
#include "refprior/random.hpp"

namespace refprior {

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::baseline_classify_only: return "baseline_classify_only";
    case AblationMode::perplexity_only: return "perplexity_only";
    case AblationMode::residual_only: return "residual_only";
    case AblationMode::full: return "full";
  }
  return "full";
}

AblationMode parse_ablation_mode(const std::string& s) {
  for (auto m : {AblationMode::baseline_classify_only, AblationMode::perplexity_only, AblationMode::residual_only,
                 AblationMode::full})
    if (s == to_string(m)) return m;
  throw ContractViolation("unknown ablation mode '" + s + "'");
}

std::string to_string(ResidualPooling p) { return p == ResidualPooling::per_patch ? "per_patch" : "mean_rows"; }

ResidualPooling parse_residual_pooling(const std::string& s) {
  if (s == "mean_rows") return ResidualPooling::mean_rows;
  if (s == "per_patch") return ResidualPooling::per_patch;
  throw ContractViolation("unknown residual pooling '" + s + "'");
}

std::string to_string(StatPooling p) {
  switch (p) {
    case StatPooling::max: return "max";
    case StatPooling::median: return "median";
    default: return "mean";
  }
}

StatPooling parse_stat_pooling(const std::string& s) {
  if (s == "mean") return StatPooling::mean;
  if (s == "max") return StatPooling::max;
  if (s == "median") return StatPooling::median;
  throw ContractViolation("unknown stat pooling '" + s + "'");
}

template <>
void BasicEvidenceHeads<float>::validate() const {
  const std::size_t h = hidden();
  const std::size_t de = evidence_dim();
  require(h > 0 && de > 0 && feature_dim() > 0, "EvidenceHeads: empty dimensions");
  auto shape = [](const num::Tensor2& m, std::size_t r, std::size_t c, const char* name) {
    require(m.rows() == r && m.cols() == c,
            std::string("EvidenceHeads: ") + name + " has shape " + num::shape_str(m) + ", expected " +
                num::shape_str(r, c));
  };
  shape(per_w1, 2, h, "per_w1");
  shape(per_b1, 1, h, "per_b1");
  shape(per_w2, h, de, "per_w2");
  shape(per_b2, 1, de, "per_b2");
  shape(res_b, 1, de, "res_b");
  shape(cls_w1, 2 * de, h, "cls_w1");
  shape(cls_b1, 1, h, "cls_b1");
  shape(cls_w2, h, 1, "cls_w2");
  shape(cls_b2, 1, 1, "cls_b2");
  for (const auto* t : tensors()) num::require_finite(*t, "EvidenceHeads");
  shape(norm.stat_shift, 1, 2, "norm.stat_shift");
  shape(norm.stat_scale, 1, 2, "norm.stat_scale");
  shape(norm.vec_scale, 1, 1, "norm.vec_scale");
  for (const auto* t : {&norm.stat_shift, &norm.stat_scale, &norm.vec_scale}) num::require_finite(*t, "EvidenceHeads");
}

EvidenceHeads zero_heads(std::size_t feature_dim, const HeadsShape& shape) {
  const std::size_t h = shape.hidden;
  const std::size_t de = shape.evidence_dim;
  EvidenceHeads out;
  out.per_w1 = num::Tensor2(2, h);
  out.per_b1 = num::Tensor2(1, h);
  out.per_w2 = num::Tensor2(h, de);
  out.per_b2 = num::Tensor2(1, de);
  out.res_w = num::Tensor2(feature_dim, de);
  out.res_b = num::Tensor2(1, de);
  out.cls_w1 = num::Tensor2(2 * de, h);
  out.cls_b1 = num::Tensor2(1, h);
  out.cls_w2 = num::Tensor2(h, 1);
  out.cls_b2 = num::Tensor2(1, 1);
  return out;
}

EvidenceHeads init_heads(std::size_t feature_dim, const HeadsShape& shape, std::uint64_t seed) {
  require(shape.hidden > 0 && shape.evidence_dim > 0 && feature_dim > 0, "init_heads: empty dimensions");
  EvidenceHeads out = zero_heads(feature_dim, shape);
  Rng rng = make_rng(seed, 0x4845414453ULL);
  for (auto* w : {&out.per_w1, &out.per_w2, &out.res_w, &out.cls_w1, &out.cls_w2}) {
    const float stddev = 1.0f / std::sqrt(static_cast<float>(w->rows()));
    *w = gaussian_matrix<float>(w->rows(), w->cols(), stddev, rng);
  }
  return out;
}

Evidence compute_evidence(const MemoryBank& bank, const FeatureMap& features, StatPooling pooling) {
  const auto res = project(bank, features, pooling);
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  Evidence ev;
  ev.s_max = res.s_max;
  ev.s_ent = res.s_ent;
  ev.pooled_residual = num::Tensor2(1, d);
  ev.pooled_features = num::Tensor2(1, d);
  ev.patch_stats = num::Tensor2(n, 2);
  ev.heatmap.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const float r = res.residual(i, j);
      sq += static_cast<double>(r) * r;
      ev.pooled_residual(0, j) += r;
      ev.pooled_features(0, j) += features(i, j);
    }
    ev.heatmap[i] = static_cast<float>(std::sqrt(sq));
    total += sq;
    ev.patch_stats(i, 0) = res.row_max[i];
    ev.patch_stats(i, 1) = res.row_entropy[i];
  }
  for (std::size_t j = 0; j < d; ++j) {
    ev.pooled_residual(0, j) /= static_cast<float>(n);
    ev.pooled_features(0, j) /= static_cast<float>(n);
  }
  ev.residual_norm = static_cast<float>(std::sqrt(total));
  ev.residual = res.residual;
  ev.features = features;
  return ev;
}

namespace {

HeadBatch<float> raw_head_batch(std::span<const Evidence* const> items, const DetectorConfig& cfg) {
  require(!items.empty(), "make_head_batch: empty batch");
  const bool baseline = cfg.mode == AblationMode::baseline_classify_only;
  HeadBatch<float> batch;
  if (cfg.residual_pooling == ResidualPooling::mean_rows) {
    const std::size_t d = items.front()->pooled_residual.cols();
    batch.stats = num::Tensor2(items.size(), 2);
    batch.residual = num::Tensor2(items.size(), d);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Evidence& ev = *items[i];
      require(ev.pooled_residual.cols() == d, "make_head_batch: feature dim mismatch");
      batch.stats(i, 0) = ev.s_max;
      batch.stats(i, 1) = ev.s_ent;
      const auto& src = baseline ? ev.pooled_features : ev.pooled_residual;
      std::copy(src.row(0).begin(), src.row(0).end(), batch.residual.row(i).begin());
    }
    batch.group = 1;
    return batch;
  }
  const std::size_t n = items.front()->residual.rows();
  const std::size_t d = items.front()->residual.cols();
  batch.stats = num::Tensor2(items.size() * n, 2);
  batch.residual = num::Tensor2(items.size() * n, d);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Evidence& ev = *items[i];
    require(ev.residual.rows() == n && ev.residual.cols() == d,
            "make_head_batch: per-patch scoring needs equal patch counts within a batch");
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t row = i * n + r;
      batch.stats(row, 0) = ev.patch_stats(r, 0);
      batch.stats(row, 1) = ev.patch_stats(r, 1);
      const auto& src = baseline ? ev.features : ev.residual;
      std::copy(src.row(r).begin(), src.row(r).end(), batch.residual.row(row).begin());
    }
  }
  batch.group = n;
  return batch;
}

}  // namespace

HeadBatch<float> make_head_batch(std::span<const Evidence* const> items, const DetectorConfig& cfg,
                                 const InputNorm<float>& norm) {
  HeadBatch<float> batch = raw_head_batch(items, cfg);
  for (std::size_t i = 0; i < batch.stats.rows(); ++i)
    for (std::size_t c = 0; c < 2; ++c)
      batch.stats(i, c) = (batch.stats(i, c) - norm.stat_shift(0, c)) * norm.stat_scale(0, c);
  const float vs = norm.vec_scale(0, 0);
  for (float& v : batch.residual.flat()) v *= vs;
  return batch;
}

InputNorm<float> fit_input_norm(std::span<const Evidence> evidence, const DetectorConfig& cfg) {
  require(!evidence.empty(), "fit_input_norm: no evidence");
  std::vector<const Evidence*> items;
  items.reserve(evidence.size());
  for (const auto& e : evidence) items.push_back(&e);
  const HeadBatch<float> raw = raw_head_batch(items, cfg);
  InputNorm<float> norm;
  const double rows = static_cast<double>(raw.stats.rows());
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < raw.stats.rows(); ++i) mean += raw.stats(i, c);
    mean /= rows;
    double var = 0.0;
    for (std::size_t i = 0; i < raw.stats.rows(); ++i) var += (raw.stats(i, c) - mean) * (raw.stats(i, c) - mean);
    const double sd = std::sqrt(var / rows);
    norm.stat_shift(0, c) = static_cast<float>(mean);
    // A (near-)constant column, e.g. k = 1, carries nothing beyond float noise;
    // leave it centred but unscaled.
    norm.stat_scale(0, c) = sd > 1e-4 ? static_cast<float>(1.0 / sd) : 1.0f;
  }
  double sq = 0.0;
  for (float v : raw.residual.flat()) sq += static_cast<double>(v) * v;
  const double rms = std::sqrt(sq / static_cast<double>(raw.residual.size()));
  norm.vec_scale(0, 0) = rms > 1e-12 ? static_cast<float>(1.0 / rms) : 1.0f;
  return norm;
}

namespace {

num::Tensor2 forward_probabilities(const EvidenceHeads& heads, const HeadBatch<float>& batch, AblationMode mode) {
  num::Tape<float> tape;
  const auto w = head_vars(tape, heads, false);
  const auto p = num::sigmoid(tape, head_logits(tape, w, batch, mode));
  return tape.value(p);
}

}  // namespace

Verdict score_evidence(const Detector& model, const Evidence& ev, const std::string& image_id) {
  model.heads.validate();
  require(model.heads.feature_dim() == ev.pooled_residual.cols(), "score: heads/feature dim mismatch");
  const Evidence* item = &ev;
  const auto batch = make_head_batch(std::span<const Evidence* const>(&item, 1), model.config, model.heads.norm);
  const num::Tensor2 p = forward_probabilities(model.heads, batch, model.config.mode);

  Verdict v;
  v.image_id = image_id;
  v.y_pred = std::clamp(static_cast<double>(p(0, 0)), 1e-7, 1.0 - 1e-7);
  v.label = v.y_pred > model.config.threshold ? Label::fake : Label::real;
  v.s_max = ev.s_max;
  v.s_ent = ev.s_ent;
  v.residual_norm = ev.residual_norm;
  v.heatmap = ev.heatmap;
  return v;
}

Verdict score(const Detector& model, const FeatureMap& features, const std::string& image_id) {
  model.bank.validate();
  require(features.cols() == model.bank.dim(), "score: feature dim " + std::to_string(features.cols()) +
                                                   " != bank D=" + std::to_string(model.bank.dim()));
  return score_evidence(model, compute_evidence(model.bank, features, model.config.stat_pooling), image_id);
}

Verdict score(const MemoryBank& bank, const EvidenceHeads& heads, const FeatureMap& features,
              const DetectorConfig& cfg) {
  return score(Detector{bank, heads, cfg}, features);
}

double bce_loss(double y_pred, int y) {
  require(y == 0 || y == 1, "bce_loss: label must be 0 or 1");
  const double p = std::clamp(y_pred, 1e-7, 1.0 - 1e-7);
  return y == 1 ? -std::log(p) : -std::log(1.0 - p);
}

void Phase2Config::validate() const {
  require(lr > 0.0, "Phase2Config: lr must be > 0");
  require(epochs >= 1, "Phase2Config: epochs must be >= 1");
  require(batch_size >= 1, "Phase2Config: batch_size must be >= 1");
  require(weight_decay >= 0.0, "Phase2Config: weight_decay must be >= 0");
  require(cosine_floor >= 0.0 && cosine_floor <= 1.0, "Phase2Config: cosine_floor outside [0, 1]");
}

Phase2Result train_phase2(const MemoryBank& bank, const Phase2Config& cfg, const DetectorConfig& dcfg,
                          std::span<const Sample> data, std::ostream* log) {
  require(!data.empty(), "train_phase2: empty dataset");
  std::vector<Evidence> evidence;
  std::vector<Label> labels;
  evidence.reserve(data.size());
  for (const auto& s : data) {
    require(s.features.cols() == bank.dim(), "train_phase2: sample '" + s.image_id + "' has wrong feature dim");
    evidence.push_back(compute_evidence(bank, s.features, dcfg.stat_pooling));
    labels.push_back(s.label);
  }
  return train_phase2_evidence(bank, cfg, dcfg, evidence, labels, log);
}

Phase2Result train_phase2_evidence(const MemoryBank& bank, const Phase2Config& cfg, const DetectorConfig& dcfg,
                                   std::span<const Evidence> evidence, std::span<const Label> labels,
                                   std::ostream* log) {
  cfg.validate();
  require(evidence.size() == labels.size(), "train_phase2: evidence/label count mismatch");
  require(!evidence.empty(), "train_phase2: empty dataset");
  const auto n_fake = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::fake));
  require(n_fake > 0 && n_fake < labels.size(), "train_phase2: dataset must contain both real and fake samples");

  Phase2Result result;
  result.report.bank_checksum_before = bank_checksum(bank);

  EvidenceHeads heads = init_heads(bank.dim(), dcfg.heads, cfg.seed);
  heads.norm = fit_input_norm(evidence, dcfg);
  auto params = heads.tensors();
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay}, params);
  Rng rng = make_rng(cfg.seed, 0x504841534532ULL);

  const std::size_t steps_per_epoch = (evidence.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.max_steps ? *cfg.max_steps : steps_per_epoch * cfg.epochs;
  std::vector<std::size_t> order(evidence.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  while (step < total_steps) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size() && step < total_steps; b += cfg.batch_size, ++step) {
      std::vector<const Evidence*> items;
      num::Tensor2 y(std::min(order.size(), b + cfg.batch_size) - b, 1);
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
        items.push_back(&evidence[order[i]]);
        y(i - b, 0) = labels[order[i]] == Label::fake ? 1.0f : 0.0f;
      }
      const auto batch = make_head_batch(items, dcfg, heads.norm);

      num::Tape<float> tape;
      const auto w = head_vars(tape, heads, true);
      const auto p = num::sigmoid(tape, head_logits(tape, w, batch, dcfg.mode));
      const auto loss = num::bce_mean(tape, p, y);
      tape.backward(loss);

      const std::array<num::Var<float>, 10> vars{w.per_w1, w.per_b1, w.per_w2, w.per_b2, w.res_w,
                                                 w.res_b,  w.cls_w1, w.cls_b1, w.cls_w2, w.cls_b2};
      std::vector<num::Tensor2> grads;
      grads.reserve(vars.size());
      for (auto v : vars) grads.push_back(tape.grad(v));
      const double lr = cosine_lr(cfg.lr, cfg.cosine_floor, step, total_steps);
      opt.step(grads, lr);

      const double lv = tape.value(loss)(0, 0);
      result.report.step_losses.push_back(lv);
      epoch_loss += lv;
      ++batches;
      if (log) *log << nlohmann::json{{"step", step}, {"bce", lv}, {"lr", lr}}.dump() << '\n';
    }
    if (batches == 0) break;
    result.report.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }
  result.report.steps = step;
  result.report.bank_checksum_after = bank_checksum(bank);
  if (result.report.bank_checksum_after != result.report.bank_checksum_before)
    throw ContractViolation("train_phase2: memory bank changed during detector training");
  heads.validate();
  result.heads = std::move(heads);
  return result;
}

Detector ablation_variant(const Detector& model, AblationMode mode) {
  Detector out = model;
  out.config.mode = mode;
  return out;
}

std::string verdict_json(const Verdict& v, bool with_heatmap, const std::string& fingerprint) {
  nlohmann::ordered_json j;
  j["image_id"] = v.image_id;
  j["y_pred"] = v.y_pred;
  j["label"] = std::string(to_string(v.label));
  j["s_max"] = v.s_max;
  j["s_ent"] = v.s_ent;
  j["residual_norm"] = v.residual_norm;
  if (with_heatmap) j["heatmap"] = v.heatmap;
  if (!fingerprint.empty()) j["fingerprint"] = fingerprint;
  return j.dump();
}

}  // namespace refprior
