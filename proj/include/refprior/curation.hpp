#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace refprior {

enum class Truth { real, generated };
enum class Cohort { lay, cv_expert, aigi_expert };

std::string_view to_string(Truth t);
std::string_view to_string(Cohort c);
Truth parse_truth(std::string_view s);
Cohort parse_cohort(std::string_view s);

/// One answered psychophysics trial.
struct TrialRecord {
  std::string trial_id;
  std::string image_id;
  Truth ground_truth = Truth::real;
  Truth chosen = Truth::real;
  int S = 1;         // realism score, 1..4
  double RT = 1.0;   // response time in ms, > 0
  std::string participant_id;
  Cohort cohort = Cohort::lay;
  std::string timestamp;  // ISO-8601, answer time

  void validate() const;
  friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

nlohmann::ordered_json to_json(const TrialRecord& r);
/// Schema-checked; unknown keys, wrong types and out-of-range values are
/// contract violations.
TrialRecord trial_from_json(const nlohmann::json& j);
/// One compact JSON object per line, no trailing spaces.
std::string trial_line(const TrialRecord& r);

std::vector<TrialRecord> parse_trial_log(std::istream& in, const std::string& source = "<trials>");
std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path);

enum class Aggregation { mean, median };
std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

struct CurationConfig {
  int tau_real = 4;
  Aggregation s_aggregation = Aggregation::median;
  Aggregation rt_aggregation = Aggregation::mean;
  std::optional<std::set<Cohort>> cohort_filter;  // unset: every cohort
  /// Compute mu/sigma over real-image RTs as well. Selection stays generated-only.
  bool rt_stats_include_real = false;

  void validate() const;
};

struct ImageAggregate {
  std::string image_id;
  Truth ground_truth = Truth::generated;
  std::size_t trials = 0;
  double S = 0.0;
  double RT = 0.0;
};

struct CurationResult {
  std::vector<std::string> selected;  // sorted
  double mu_rt = 0.0;
  double sigma_rt = 0.0;  // population standard deviation
  double rt_threshold = 0.0;
  std::size_t trials_in_scope = 0;
  std::size_t generated_images = 0;
  std::size_t selected_by_realism = 0;
  std::size_t selected_by_rt = 0;
  std::vector<std::string> warnings;
};

/// Per-image aggregates of the trials that pass the cohort filter, keyed by
/// image id.
std::map<std::string, ImageAggregate> aggregate_images(std::span<const TrialRecord> trials, const CurationConfig& cfg);

/// Margin below which an RT counts as equal to mu + sigma, hence not slow.
/// With two generated images the slower one sits exactly on the threshold, so
/// without it rounding would decide.
double rt_tie_tolerance(double mu_rt);

/// Hard generated images: aggregated S >= tau_real or aggregated RT above
/// mu + sigma of the aggregated RTs in scope.
CurationResult select_hard(std::span<const TrialRecord> trials, const CurationConfig& cfg = {});

nlohmann::ordered_json curation_sidecar(const CurationResult& r, const CurationConfig& cfg);

struct CohortStats {
  std::size_t trials = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double mean_S = 0.0;
  double mean_RT = 0.0;
};

std::map<Cohort, CohortStats> cohort_report(std::span<const TrialRecord> trials);
nlohmann::ordered_json cohort_report_json(const std::map<Cohort, CohortStats>& report);

}  // namespace refprior
