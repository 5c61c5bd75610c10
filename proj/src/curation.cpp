#include "refprior/curation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>

#include "refprior/errors.hpp"

namespace refprior {

std::string_view to_string(Truth t) { return t == Truth::real ? "real" : "generated"; }

std::string_view to_string(Cohort c) {
  switch (c) {
    case Cohort::cv_expert: return "cv_expert";
    case Cohort::aigi_expert: return "aigi_expert";
    default: return "lay";
  }
}

Truth parse_truth(std::string_view s) {
  if (s == "real") return Truth::real;
  if (s == "generated") return Truth::generated;
  throw ContractViolation("unknown image class '" + std::string(s) + "' (expected real|generated)");
}

Cohort parse_cohort(std::string_view s) {
  if (s == "lay") return Cohort::lay;
  if (s == "cv_expert") return Cohort::cv_expert;
  if (s == "aigi_expert") return Cohort::aigi_expert;
  throw ContractViolation("unknown cohort '" + std::string(s) + "' (expected lay|cv_expert|aigi_expert)");
}

std::string_view to_string(Aggregation a) { return a == Aggregation::mean ? "mean" : "median"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "median") return Aggregation::median;
  throw ContractViolation("unknown aggregation '" + std::string(s) + "' (expected mean|median)");
}

void TrialRecord::validate() const {
  require(!trial_id.empty(), "trial: empty trial_id");
  require(!image_id.empty(), "trial " + trial_id + ": empty image_id");
  require(S >= 1 && S <= 4, "trial " + trial_id + ": S=" + std::to_string(S) + " outside {1,2,3,4}");
  require(std::isfinite(RT) && RT > 0.0, "trial " + trial_id + ": RT must be a positive number of ms");
}

nlohmann::ordered_json to_json(const TrialRecord& r) {
  nlohmann::ordered_json j;
  j["trial_id"] = r.trial_id;
  j["image_id"] = r.image_id;
  j["ground_truth"] = std::string(to_string(r.ground_truth));
  j["chosen"] = std::string(to_string(r.chosen));
  j["S"] = r.S;
  j["RT"] = r.RT;
  j["participant_id"] = r.participant_id;
  j["cohort"] = std::string(to_string(r.cohort));
  j["timestamp"] = r.timestamp;
  return j;
}

TrialRecord trial_from_json(const nlohmann::json& j) {
  require(j.is_object(), "trial: record must be a JSON object");
  static const std::set<std::string> known{"trial_id", "image_id", "ground_truth", "chosen", "S",
                                           "RT", "participant_id", "cohort", "timestamp"};
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, "trial: unknown field '" + it.key() + "'");
  auto str = [&](const char* key) {
    require(j.contains(key), std::string("trial: missing field '") + key + "'");
    require(j[key].is_string(), std::string("trial: field '") + key + "' must be a string");
    return j[key].get<std::string>();
  };
  TrialRecord r;
  r.trial_id = str("trial_id");
  r.image_id = str("image_id");
  r.ground_truth = parse_truth(str("ground_truth"));
  r.chosen = parse_truth(str("chosen"));
  require(j.contains("S") && j["S"].is_number_integer(), "trial " + r.trial_id + ": S must be an integer");
  const auto s = j["S"].get<long long>();
  require(s >= 1 && s <= 4, "trial " + r.trial_id + ": S=" + std::to_string(s) + " outside {1,2,3,4}");
  r.S = static_cast<int>(s);
  require(j.contains("RT") && j["RT"].is_number(), "trial " + r.trial_id + ": RT must be a number");
  r.RT = j["RT"].get<double>();
  r.participant_id = str("participant_id");
  r.cohort = parse_cohort(str("cohort"));
  r.timestamp = j.contains("timestamp") ? str("timestamp") : std::string();
  r.validate();
  return r;
}

std::string trial_line(const TrialRecord& r) { return to_json(r).dump(); }

std::vector<TrialRecord> parse_trial_log(std::istream& in, const std::string& source) {
  std::vector<TrialRecord> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ContractViolation(where + "invalid JSON: " + e.what());
    }
    try {
      out.push_back(trial_from_json(j));
    } catch (const ContractViolation& e) {
      throw ContractViolation(where + e.what());
    }
    require(ids.insert(out.back().trial_id).second, where + "duplicate trial_id '" + out.back().trial_id + "'");
  }
  return out;
}

std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial log '" + path.string() + "'");
  return parse_trial_log(in, path.string());
}

void CurationConfig::validate() const {
  require(tau_real >= 1 && tau_real <= 4, "CurationConfig: tau_real must be in {1,2,3,4}");
  require(!cohort_filter || !cohort_filter->empty(), "CurationConfig: cohort filter selects no cohort");
}

namespace {

// Input order must not leak into the result, so values are sorted first.
double aggregate(std::vector<double> v, Aggregation a) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (a == Aggregation::median) return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(n);
}

}  // namespace

double rt_tie_tolerance(double mu_rt) { return 1e-9 * std::max(1.0, std::abs(mu_rt)); }

std::map<std::string, ImageAggregate> aggregate_images(std::span<const TrialRecord> trials,
                                                       const CurationConfig& cfg) {
  struct Acc {
    Truth truth;
    std::vector<double> s, rt;
  };
  std::map<std::string, Acc> acc;
  for (const auto& t : trials) {
    if (cfg.cohort_filter && !cfg.cohort_filter->count(t.cohort)) continue;
    auto [it, fresh] = acc.try_emplace(t.image_id, Acc{t.ground_truth, {}, {}});
    require(it->second.truth == t.ground_truth,
            "trial log: image '" + t.image_id + "' appears as both real and generated");
    it->second.s.push_back(t.S);
    it->second.rt.push_back(t.RT);
  }
  std::map<std::string, ImageAggregate> out;
  for (const auto& [id, a] : acc)
    out[id] = {id, a.truth, a.s.size(), aggregate(a.s, cfg.s_aggregation), aggregate(a.rt, cfg.rt_aggregation)};
  return out;
}

CurationResult select_hard(std::span<const TrialRecord> trials, const CurationConfig& cfg) {
  cfg.validate();
  require(!trials.empty(), "select_hard: empty trial log");
  for (const auto& t : trials) t.validate();
  require(std::any_of(trials.begin(), trials.end(), [](const auto& t) { return t.ground_truth == Truth::generated; }),
          "select_hard: no generated-image trials");

  const auto images = aggregate_images(trials, cfg);
  CurationResult r;
  for (const auto& t : trials)
    if (!cfg.cohort_filter || cfg.cohort_filter->count(t.cohort)) ++r.trials_in_scope;

  std::set<std::string> all_generated;
  for (const auto& t : trials)
    if (t.ground_truth == Truth::generated) all_generated.insert(t.image_id);
  for (const auto& id : all_generated)
    if (!images.count(id)) r.warnings.push_back("image '" + id + "' has no trials in the cohort filter; excluded");

  std::vector<double> rts;
  for (const auto& [id, a] : images)
    if (a.ground_truth == Truth::generated || cfg.rt_stats_include_real) rts.push_back(a.RT);
  for (const auto& [id, a] : images) r.generated_images += a.ground_truth == Truth::generated;
  require(r.generated_images > 0, "select_hard: no generated images left after the cohort filter");

  std::sort(rts.begin(), rts.end());
  double sum = 0.0;
  for (double x : rts) sum += x;
  r.mu_rt = sum / static_cast<double>(rts.size());
  double ss = 0.0;
  for (double x : rts) ss += (x - r.mu_rt) * (x - r.mu_rt);
  r.sigma_rt = std::sqrt(ss / static_cast<double>(rts.size()));
  r.rt_threshold = r.mu_rt + r.sigma_rt;

  for (const auto& [id, a] : images) {
    if (a.ground_truth != Truth::generated) continue;
    const bool deceptive = a.S >= static_cast<double>(cfg.tau_real);
    const bool slow = a.RT - r.mu_rt - r.sigma_rt > rt_tie_tolerance(r.mu_rt);
    r.selected_by_realism += deceptive;
    r.selected_by_rt += slow;
    if (deceptive || slow) r.selected.push_back(id);
  }
  return r;
}

nlohmann::ordered_json curation_sidecar(const CurationResult& r, const CurationConfig& cfg) {
  nlohmann::ordered_json j;
  j["mu_rt"] = r.mu_rt;
  j["sigma_rt"] = r.sigma_rt;
  j["rt_threshold"] = r.rt_threshold;
  j["tau_real"] = cfg.tau_real;
  j["s_aggregation"] = std::string(to_string(cfg.s_aggregation));
  j["rt_aggregation"] = std::string(to_string(cfg.rt_aggregation));
  if (cfg.cohort_filter) {
    auto arr = nlohmann::ordered_json::array();
    for (Cohort c : *cfg.cohort_filter) arr.push_back(std::string(to_string(c)));
    j["cohort_filter"] = arr;
  } else {
    j["cohort_filter"] = nullptr;
  }
  j["rt_stats_include_real"] = cfg.rt_stats_include_real;
  j["counts"] = {{"trials_in_scope", r.trials_in_scope},
                 {"generated_images", r.generated_images},
                 {"selected", r.selected.size()},
                 {"selected_by_realism", r.selected_by_realism},
                 {"selected_by_rt", r.selected_by_rt}};
  j["warnings"] = r.warnings;
  return j;
}

std::map<Cohort, CohortStats> cohort_report(std::span<const TrialRecord> trials) {
  require(!trials.empty(), "cohort_report: empty trial log");
  std::map<Cohort, CohortStats> out;
  std::map<Cohort, std::pair<std::vector<double>, std::vector<double>>> values;
  for (const auto& t : trials) {
    t.validate();
    auto& c = out[t.cohort];
    ++c.trials;
    c.correct += t.chosen == t.ground_truth;
    values[t.cohort].first.push_back(t.S);
    values[t.cohort].second.push_back(t.RT);
  }
  for (auto& [cohort, c] : out) {
    c.accuracy = static_cast<double>(c.correct) / static_cast<double>(c.trials);
    c.mean_S = aggregate(values[cohort].first, Aggregation::mean);
    c.mean_RT = aggregate(values[cohort].second, Aggregation::mean);
  }
  return out;
}

nlohmann::ordered_json cohort_report_json(const std::map<Cohort, CohortStats>& report) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [cohort, c] : report)
    j[std::string(to_string(cohort))] = {{"trials", c.trials},
                                         {"correct", c.correct},
                                         {"accuracy", c.accuracy},
                                         {"mean_S", c.mean_S},
                                         {"mean_RT", c.mean_RT}};
  return j;
}

}  // namespace refprior
