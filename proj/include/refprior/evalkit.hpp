#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refprior/detector.hpp"
#include "refprior/phase1.hpp"

namespace refprior {

/// (TPR + TNR) / 2 with 1 = fake as the positive class.
double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions);

/// Area under the ROC curve of `scores` for label 1 against label 0,
/// ties counted as one half.
double roc_auc(std::span<const int> labels, std::span<const double> scores);

struct Prediction {
  std::string image_id;
  Label truth = Label::real;
  Label predicted = Label::real;
  double y_pred = 0.5;
  std::string generator;
};

std::vector<Prediction> predict(const Detector& model, std::span<const Sample> samples);
double balanced_accuracy(std::span<const Prediction> predictions);

/// Residual-norm AUC of fakes against reals under a frozen bank.
double residual_auc(const MemoryBank& bank, std::span<const Sample> samples);

// ---- pipeline -------------------------------------------------------------

struct PipelineConfig {
  Phase1Config phase1;
  Phase2Config phase2;
  DetectorConfig detector;
};

/// Settings sized for the synthetic testbed on one CPU core.
PipelineConfig desk_pipeline();

struct PipelineResult {
  Detector model;
  TrainReport phase1;
  Phase2Report phase2;
};

/// Phase 1 on the real samples of `train` (all of them when mixed memory is
/// allowed), then Phase 2 on all of `train` with the bank frozen.
PipelineResult train_pipeline(const PipelineConfig& cfg, std::span<const Sample> train);

// ---- robustness -----------------------------------------------------------

struct EvalRow {
  std::string corruption;
  std::string generator;  // "all" for the aggregate row
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
  double bacc = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // clean rows first, then one block per corruption tag
  double bacc = 0.0;          // clean aggregate
  std::optional<double> j_rob;  // jpeg90
  std::optional<double> r_rob;  // resize0.9
  std::vector<std::pair<double, double>> blur_curve;  // (sigma, B.Acc), ascending sigma
  std::map<std::string, double> corruption_bacc;
  std::size_t n_samples = 0;
  std::string fingerprint;
};

/// Scores clean samples and every corruption group of `corrupted`; each
/// group must hold exactly the clean image ids.
EvalReport robustness_eval(const Detector& model, std::span<const Sample> clean, std::span<const Sample> corrupted,
                           const std::string& fingerprint = "");

std::string eval_csv(const EvalReport& r);
nlohmann::ordered_json eval_json(const EvalReport& r);

// ---- sensitivity sweeps ---------------------------------------------------

enum class SweepAxis { K, top_k };
std::string to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

struct SweepRow {
  std::size_t value = 0;
  std::size_t K = 0;
  std::size_t top_k = 0;
  double bacc = 0.0;
  double residual_auc = 0.0;
  double holdout_recon = 0.0;
};

/// K sweeps keep top_k = min(cfg top_k, K). Values must be ascending.
std::vector<SweepRow> sweep(SweepAxis axis, std::span<const std::size_t> values, const PipelineConfig& cfg,
                            std::span<const Sample> train, std::span<const Sample> test);

std::string sweep_csv(SweepAxis axis, std::span<const SweepRow> rows);

}  // namespace refprior
