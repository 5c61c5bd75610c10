#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "refprior/cli.hpp"
#include "refprior/curation.hpp"
#include "refprior/store.hpp"

using namespace refprior;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("refprior_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  void make_data() {
    const auto r = cli({"make-synthetic", "--D", "16", "--K-true", "8", "--sparsity", "2", "--n-real", "24",
                        "--n-fake", "24", "--patches", "4", "--holdout", "0.25", "--noise-corruption", "0.05",
                        "--out", p("data"), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  std::vector<std::string> prior_args(const std::string& out) {
    return {"train-prior", "--features", p("data/train.jsonl"), "--K", "8", "--topk", "2", "--lambda", "0.01",
            "--lr", "1e-2", "--max-steps", "20", "--seed", "7", "--out", out, "--log", p("p1.log")};
  }

  fs::path dir;
};

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  auto r = cli({"train-prior", "--bogus"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"launch-rockets"}).code, 1);
  EXPECT_EQ(cli({"train-prior", "--features", "x.jsonl"}).code, 1);  // --out is required
  EXPECT_EQ(cli({"curate", "--trials", "t", "--out", "o", "--tau-real", "5"}).code, 1);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(CliTest, MissingInputsExitTwo) {
  EXPECT_EQ(cli({"score", "--ckpt", p("none.ckpt"), "--features", p("none.mirf")}).code, 2);
  EXPECT_EQ(cli({"curate", "--trials", p("none.jsonl"), "--out", p("h.txt")}).code, 2);
  EXPECT_EQ(cli({"inspect-checkpoint", "--ckpt", p("none.ckpt"), "--config", p("no.json")}).code, 2);
}

TEST_F(CliTest, BadConfigIsAContractViolation) {
  std::ofstream(p("cfg.json")) << R"({"phase9": {}})";
  EXPECT_EQ(cli({"make-synthetic", "--out", p("d"), "--config", p("cfg.json")}).code, 1);
  std::ofstream(p("cfg.json")) << R"({"synthetic": {"D": "wide"}})";
  EXPECT_EQ(cli({"make-synthetic", "--out", p("d"), "--config", p("cfg.json")}).code, 1);
  EXPECT_FALSE(fs::exists(p("d")));
}

TEST_F(CliTest, EndToEndPipeline) {
  make_data();
  auto prior = cli(prior_args(p("prior.ckpt")));
  ASSERT_EQ(prior.code, 0) << prior.err;
  const auto ps = nlohmann::json::parse(prior.out);
  EXPECT_EQ(ps.at("steps"), 20);
  EXPECT_EQ(ps.at("samples"), 18);
  EXPECT_EQ(ps.at("skipped_fake"), 18);
  EXPECT_EQ(ps.at("config").at("phase1").at("K"), 8);
  std::ifstream log(p("p1.log"));
  std::size_t lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 20u);

  auto det = cli({"train-detector", "--prior", p("prior.ckpt"), "--features", p("data/train.jsonl"), "--hidden", "8",
                  "--evidence-dim", "4", "--max-steps", "20", "--lr", "1e-2", "--out", p("det.ckpt"), "--log",
                  p("p2.log")});
  ASSERT_EQ(det.code, 0) << det.err;
  const auto ds = nlohmann::json::parse(det.out);
  EXPECT_EQ(ds.at("prior_checksum_before"), ds.at("prior_checksum_after"));
  EXPECT_EQ(ds.at("prior_checksum_before"), ps.at("prior_checksum"));

  const auto first = read_manifest(p("data/test.jsonl")).front();
  auto sc = cli({"score", "--ckpt", p("det.ckpt"), "--features", p("data/" + first.path), "--emit-heatmap"});
  ASSERT_EQ(sc.code, 0) << sc.err;
  const auto v = nlohmann::json::parse(sc.out);
  EXPECT_EQ(v.at("image_id"), first.image_id);
  EXPECT_EQ(v.at("heatmap").size(), 4u);
  EXPECT_EQ(v.at("fingerprint"), ds.at("fingerprint"));

  auto ev = cli({"eval", "--ckpt", p("det.ckpt"), "--features", p("data/test.jsonl"), "--corrupted",
                 p("data/test.noise0.05.jsonl"), "--csv", p("eval.csv"), "--json", p("eval.json")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto e = nlohmann::json::parse(ev.out);
  EXPECT_GE(e.at("bacc").get<double>(), 0.0);
  EXPECT_TRUE(e.contains("j_rob"));
  EXPECT_EQ(e.at("fingerprint"), ds.at("fingerprint"));
  EXPECT_TRUE(fs::exists(p("eval.csv")));

  auto ic = cli({"inspect-checkpoint", "--ckpt", p("det.ckpt")});
  ASSERT_EQ(ic.code, 0);
  EXPECT_EQ(nlohmann::json::parse(ic.out).at("header").at("kind"), "detector");

  auto prior_only = cli({"score", "--ckpt", p("prior.ckpt"), "--features", p("data/" + first.path)});
  EXPECT_EQ(prior_only.code, 1);
}

TEST_F(CliTest, RerunsAreByteIdentical) {
  make_data();
  ASSERT_EQ(cli(prior_args(p("a.ckpt"))).code, 0);
  ASSERT_EQ(cli(prior_args(p("b.ckpt"))).code, 0);
  EXPECT_EQ(read_file(p("a.ckpt")), read_file(p("b.ckpt")));
  auto other = prior_args(p("c.ckpt"));
  other[std::find(other.begin(), other.end(), "--seed") - other.begin() + 1] = "8";
  ASSERT_EQ(cli(other).code, 0);
  EXPECT_NE(read_file(p("a.ckpt")), read_file(p("c.ckpt")));
}

TEST_F(CliTest, ConfigFileFeedsFlagsAndFlagsWin) {
  make_data();
  std::ofstream(p("cfg.json")) << R"({"seed": 7, "phase1": {"K": 8, "top_k": 2, "lr": 0.01, "max_steps": 5}})";
  auto a = cli({"train-prior", "--config", p("cfg.json"), "--features", p("data/train.jsonl"), "--out", p("a.ckpt"),
                "--log", p("a.log")});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(nlohmann::json::parse(a.out).at("steps"), 5);
  auto b = cli({"train-prior", "--config", p("cfg.json"), "--max-steps", "3", "--features", p("data/train.jsonl"),
                "--out", p("b.ckpt"), "--log", p("b.log")});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(nlohmann::json::parse(b.out).at("steps"), 3);
}

TEST_F(CliTest, DetectorRefusesMismatchedPriorUnlessForced) {
  make_data();
  ASSERT_EQ(cli(prior_args(p("prior.ckpt"))).code, 0);
  std::vector<std::string> args{"train-detector", "--prior", p("prior.ckpt"), "--features", p("data/train.jsonl"),
                                "--K", "4096", "--max-steps", "2", "--hidden", "4", "--evidence-dim", "4",
                                "--out", p("det.ckpt"), "--log", p("p2.log")};
  auto r = cli(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("4096"), std::string::npos);
  EXPECT_FALSE(fs::exists(p("det.ckpt")));
  args.push_back("--force");
  EXPECT_EQ(cli(args).code, 0);
}

TEST_F(CliTest, CorruptCheckpointExitsTwo) {
  make_data();
  ASSERT_EQ(cli(prior_args(p("prior.ckpt"))).code, 0);
  auto bytes = read_file(p("prior.ckpt"));
  bytes[bytes.size() - 30] ^= 0x40;
  write_file_atomic(p("prior.ckpt"), bytes);
  EXPECT_EQ(cli({"inspect-checkpoint", "--ckpt", p("prior.ckpt")}).code, 2);
}

TEST_F(CliTest, CurateWritesListAndSidecar) {
  {
    std::ofstream out(p("trials.jsonl"));
    const double rts[] = {1000, 1000, 1000, 1000, 6000};
    for (int i = 0; i < 5; ++i) {
      TrialRecord r;
      r.trial_id = "t" + std::to_string(i);
      r.image_id = "g" + std::to_string(i);
      r.ground_truth = Truth::generated;
      r.chosen = Truth::real;
      r.S = 1;
      r.RT = rts[i];
      r.participant_id = "p";
      out << trial_line(r) << '\n';
    }
  }
  auto r = cli({"curate", "--trials", p("trials.jsonl"), "--tau-real", "4", "--out", p("hard.txt"), "--cohort-report",
                p("cohorts.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(p("hard.txt")), "g4\n");
  const auto side = nlohmann::json::parse(read_file(p("hard.txt.json")));
  EXPECT_EQ(side.at("mu_rt"), 2000.0);
  EXPECT_EQ(side.at("sigma_rt"), 2000.0);
  EXPECT_TRUE(side.contains("fingerprint"));
  EXPECT_EQ(nlohmann::json::parse(read_file(p("cohorts.json"))).at("lay").at("accuracy"), 0.0);
}

TEST_F(CliTest, SweepOnSyntheticTestbed) {
  auto r = cli({"sweep", "--axis", "k", "--values", "1,2", "--desk", "--D", "16", "--K-true", "8", "--sparsity", "2",
                "--n-real", "16", "--n-fake", "16", "--patches", "4", "--K", "8", "--max-steps", "3", "--hidden", "4",
                "--evidence-dim", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("# fingerprint ", 0), 0u);
  EXPECT_NE(r.out.find("k,K,top_k,bacc,residual_auc,holdout_recon\n"), std::string::npos);
}
