#include <gtest/gtest.h>

#include <sstream>

#include "support/curation_oracle.hpp"
#include "refprior/errors.hpp"

using namespace refprior;

namespace {

TrialRecord trial(std::string id, std::string image, Truth truth, int S, double RT, Cohort c = Cohort::lay,
                  Truth chosen = Truth::real) {
  TrialRecord r;
  r.trial_id = std::move(id);
  r.image_id = std::move(image);
  r.ground_truth = truth;
  r.chosen = chosen;
  r.S = S;
  r.RT = RT;
  r.participant_id = "p0";
  r.cohort = c;
  r.timestamp = "2026-01-01T00:00:00Z";
  return r;
}

std::vector<TrialRecord> slow_image_fixture() {
  std::vector<TrialRecord> log;
  const double rts[] = {1000, 1000, 1000, 1000, 6000};
  for (int i = 0; i < 5; ++i)
    log.push_back(trial("t" + std::to_string(i), "g" + std::to_string(i), Truth::generated, 1, rts[i]));
  return log;
}

std::set<std::string> as_set(const CurationResult& r) { return {r.selected.begin(), r.selected.end()}; }

}  // namespace

TEST(SelectHard, SlowImageAboveMeanPlusSigma) {
  const auto r = select_hard(slow_image_fixture());
  EXPECT_DOUBLE_EQ(r.mu_rt, 2000.0);
  EXPECT_DOUBLE_EQ(r.sigma_rt, 2000.0);
  EXPECT_DOUBLE_EQ(r.rt_threshold, 4000.0);
  EXPECT_EQ(r.selected, std::vector<std::string>{"g4"});
  EXPECT_EQ(r.selected_by_rt, 1u);
  EXPECT_EQ(r.selected_by_realism, 0u);
}

TEST(SelectHard, TopRealismIsIncludedRegardlessOfRt) {
  std::vector<TrialRecord> log{trial("a", "g", Truth::generated, 4, 100), trial("b", "g", Truth::generated, 4, 100),
                               trial("c", "g", Truth::generated, 1, 100), trial("d", "h", Truth::generated, 1, 100)};
  const auto r = select_hard(log);
  EXPECT_EQ(r.selected, std::vector<std::string>{"g"});  // median of {1,4,4} is 4
  EXPECT_EQ(r.selected_by_realism, 1u);
}

TEST(SelectHard, RealImagesAreNeverSelected) {
  auto log = slow_image_fixture();
  log.push_back(trial("r1", "real_slow", Truth::real, 4, 1e6));
  const auto r = select_hard(log);
  EXPECT_EQ(r.selected, std::vector<std::string>{"g4"});
  EXPECT_DOUBLE_EQ(r.mu_rt, 2000.0);  // real RTs are out of the statistics by default

  CurationConfig with_real;
  with_real.rt_stats_include_real = true;
  const auto r2 = select_hard(log, with_real);
  EXPECT_GT(r2.mu_rt, 2000.0);
  for (const auto& id : r2.selected) EXPECT_NE(id, "real_slow");
}

TEST(SelectHard, ErrorsAndWarnings) {
  EXPECT_THROW(select_hard(std::vector<TrialRecord>{}), ContractViolation);
  EXPECT_THROW(select_hard(std::vector<TrialRecord>{trial("a", "r", Truth::real, 1, 10)}), ContractViolation);
  CurationConfig bad;
  bad.tau_real = 5;
  EXPECT_THROW(select_hard(slow_image_fixture(), bad), ContractViolation);

  auto log = slow_image_fixture();
  log.push_back(trial("x", "expert_only", Truth::generated, 4, 10, Cohort::cv_expert));
  CurationConfig lay;
  lay.cohort_filter = std::set<Cohort>{Cohort::lay};
  const auto r = select_hard(log, lay);
  EXPECT_EQ(r.selected, std::vector<std::string>{"g4"});
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("expert_only"), std::string::npos);
  EXPECT_EQ(r.trials_in_scope, 5u);

  std::vector<TrialRecord> mixed{trial("a", "g", Truth::generated, 1, 10), trial("b", "g", Truth::real, 1, 10)};
  EXPECT_THROW(select_hard(mixed), ContractViolation);
}

TEST(SelectHard, InvariantToTrialOrder) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 100; ++i) {
    auto log = oracle::random_trial_log(rng);
    const auto want = select_hard(log);
    std::shuffle(log.begin(), log.end(), rng);
    const auto got = select_hard(log);
    EXPECT_EQ(got.selected, want.selected);
    EXPECT_EQ(got.rt_threshold, want.rt_threshold);
  }
}

TEST(SelectHard, HigherTauNeverGrowsTheSet) {
  std::mt19937_64 rng(22);
  for (int i = 0; i < 100; ++i) {
    const auto log = oracle::random_trial_log(rng);
    std::set<std::string> prev;
    for (int tau = 1; tau <= 4; ++tau) {
      CurationConfig c;
      c.tau_real = tau;
      const auto cur = as_set(select_hard(log, c));
      if (tau > 1) EXPECT_TRUE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
      prev = cur;
    }
  }
}

TEST(SelectHard, RtShiftLeavesSelectionUnchanged) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 100; ++i) {
    auto log = oracle::random_trial_log(rng);
    const auto want = select_hard(log);
    for (auto& t : log) t.RT += 1024.0;  // exact in binary, so no rounding at the threshold
    const auto got = select_hard(log);
    EXPECT_EQ(got.selected, want.selected);
    EXPECT_DOUBLE_EQ(got.mu_rt, want.mu_rt + 1024.0);
  }
}

TEST(SelectHard, MatchesBruteForceOracle) {
  std::mt19937_64 rng(24);
  int checked = 0;
  for (int i = 0; i < 300; ++i) {
    const auto log = oracle::random_trial_log(rng);
    const auto cfg = oracle::random_curation_config(rng);
    if (!oracle::has_generated_in_scope(log, cfg)) continue;
    EXPECT_EQ(as_set(select_hard(log, cfg)), oracle::oracle_select(log, cfg)) << "log " << i;
    ++checked;
  }
  EXPECT_GT(checked, 200);
}

TEST(CohortReport, AccuracyPerCohort) {
  std::vector<TrialRecord> log{
      trial("1", "a", Truth::real, 2, 100, Cohort::lay, Truth::real),
      trial("2", "b", Truth::generated, 3, 300, Cohort::lay, Truth::generated),
      trial("3", "c", Truth::generated, 4, 200, Cohort::lay, Truth::generated),
      trial("4", "d", Truth::generated, 1, 400, Cohort::lay, Truth::real),
      trial("5", "d", Truth::generated, 1, 500, Cohort::cv_expert, Truth::generated),
  };
  const auto rep = cohort_report(log);
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_DOUBLE_EQ(rep.at(Cohort::lay).accuracy, 0.75);
  EXPECT_EQ(rep.at(Cohort::lay).correct, 3u);
  EXPECT_DOUBLE_EQ(rep.at(Cohort::lay).mean_S, 2.5);
  EXPECT_DOUBLE_EQ(rep.at(Cohort::lay).mean_RT, 250.0);
  EXPECT_DOUBLE_EQ(rep.at(Cohort::cv_expert).accuracy, 1.0);
  EXPECT_EQ(cohort_report_json(rep).at("lay").at("accuracy"), 0.75);
  EXPECT_THROW(cohort_report(std::vector<TrialRecord>{}), ContractViolation);
}

TEST(TrialLog, LineRoundTrip) {
  const auto r = trial("t1", "img", Truth::generated, 3, 1234.5, Cohort::aigi_expert, Truth::real);
  const auto line = trial_line(r);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(line.find(": "), std::string::npos);
  EXPECT_EQ(trial_from_json(nlohmann::json::parse(line)), r);
  std::istringstream in(line + "\n\n" + trial_line(trial("t2", "img", Truth::generated, 1, 10)) + "\n");
  EXPECT_EQ(parse_trial_log(in).size(), 2u);
}

TEST(TrialLog, SchemaViolationsNameTheLine) {
  const std::string good = trial_line(trial("t1", "img", Truth::generated, 3, 100));
  auto bad = [&](const std::string& mutated) {
    std::istringstream in(good + "\n" + mutated + "\n");
    try {
      parse_trial_log(in, "log.jsonl");
    } catch (const ContractViolation& e) {
      EXPECT_NE(std::string(e.what()).find("log.jsonl:2"), std::string::npos) << e.what();
      return true;
    }
    return false;
  };
  auto j = nlohmann::json::parse(good);
  j["trial_id"] = "t2";
  EXPECT_FALSE(bad(j.dump()));
  EXPECT_TRUE(bad(good));  // duplicate trial id
  for (auto [key, value] : std::vector<std::pair<std::string, nlohmann::json>>{
           {"S", 5}, {"S", 2.5}, {"RT", -1}, {"RT", "fast"}, {"cohort", "robot"}, {"ground_truth", "fake"}, {"extra", 1}}) {
    auto m = j;
    m[key] = value;
    EXPECT_TRUE(bad(m.dump())) << key;
  }
  auto missing = j;
  missing.erase("participant_id");
  EXPECT_TRUE(bad(missing.dump()));
  EXPECT_TRUE(bad("{broken"));
}

TEST(CurationSidecar, RecordsStatisticsAndCounts) {
  const auto r = select_hard(slow_image_fixture());
  const auto j = curation_sidecar(r, {});
  EXPECT_EQ(j.at("mu_rt"), 2000.0);
  EXPECT_EQ(j.at("sigma_rt"), 2000.0);
  EXPECT_EQ(j.at("tau_real"), 4);
  EXPECT_TRUE(j.at("cohort_filter").is_null());
  EXPECT_EQ(j.at("counts").at("selected"), 1);
  EXPECT_EQ(j.at("counts").at("generated_images"), 5);
}

TEST(SelectHard, SlowerOfTwoSitsOnTheThreshold) {
  // mu + sigma equals the larger value exactly, and the rule is strict.
  for (double b : {1001.0, 4102.1764705882351, 7777.7}) {
    std::vector<TrialRecord> log{trial("a", "x", Truth::generated, 1, 1000), trial("b", "y", Truth::generated, 1, b)};
    EXPECT_TRUE(select_hard(log).selected.empty()) << b;
  }
}
