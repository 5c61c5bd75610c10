#include "refprior/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "refprior/config.hpp"
#include "refprior/curation.hpp"
#include "refprior/evalkit.hpp"
#include "refprior/service.hpp"
#include "refprior/store.hpp"
#include "refprior/synthetic.hpp"

namespace refprior {

namespace {

/// Values merged from defaults, --config and explicit flags, in that order.
struct Settings {
  nlohmann::json file = nlohmann::json::object();
  std::string config_path;
  std::uint64_t seed = 7;
  bool seed_given = false;

  nlohmann::json section(const char* name) const {
    if (!file.contains(name)) return nlohmann::json::object();
    require(file[name].is_object(), std::string("config: section '") + name + "' must be an object");
    return file[name];
  }
};

void load_config(Settings& s) {
  if (s.config_path.empty()) return;
  const std::string text = read_file(s.config_path);
  try {
    s.file = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractViolation("config '" + s.config_path + "' is not valid JSON: " + e.what());
  }
  require(s.file.is_object(), "config: top level must be an object");
  static const std::set<std::string> known{"seed", "phase1", "phase2", "detector", "synthetic", "curation"};
  for (auto it = s.file.begin(); it != s.file.end(); ++it)
    require(known.count(it.key()) > 0, "config: unknown section '" + it.key() + "'");
  if (!s.seed_given && s.file.contains("seed")) {
    require(s.file["seed"].is_number_unsigned(), "config: seed must be a non-negative integer");
    s.seed = s.file["seed"].get<std::uint64_t>();
  }
}

template <typename T>
void take(const CLI::Option* opt, T& dst, const T& value) {
  if (opt->count() > 0) dst = value;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

struct Phase1Flags {
  std::size_t K = 0, top_k = 0, epochs = 0, batch = 0, max_steps = 0;
  double lambda = 0, lr = 0;
  CLI::Option *oK = nullptr, *ok = nullptr, *oe = nullptr, *ob = nullptr, *om = nullptr, *ol = nullptr, *olr = nullptr;
  bool mixed = false;

  void add(CLI::App* c) {
    oK = c->add_option("--K", K, "memory bank size")->check(CLI::PositiveNumber);
    ok = c->add_option("--topk", top_k, "attention sparsity k")->check(CLI::PositiveNumber);
    ol = c->add_option("--lambda", lambda, "orthogonality weight")->check(CLI::NonNegativeNumber);
    olr = c->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
    oe = c->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    ob = c->add_option("--batch-size", batch, "images per step")->check(CLI::PositiveNumber);
    om = c->add_option("--max-steps", max_steps, "step budget (overrides epochs)")->check(CLI::PositiveNumber);
    c->add_flag("--allow-mixed-memory", mixed, "admit fake samples into the memory (ablation only)");
  }

  Phase1Config resolve(const Settings& s, Phase1Config base = {}) const {
    Phase1Config c = phase1_config_from_json(s.section("phase1"), base);
    take(oK, c.K, K);
    take(ok, c.top_k, top_k);
    take(ol, c.lambda, lambda);
    take(olr, c.lr, lr);
    take(oe, c.epochs, epochs);
    take(ob, c.batch_size, batch);
    if (om->count()) c.max_steps = max_steps;
    if (mixed) c.allow_mixed_memory = true;
    if (s.seed_given || !s.section("phase1").contains("seed")) c.seed = s.seed;
    c.validate();
    return c;
  }
};

struct Phase2Flags {
  std::size_t epochs = 0, batch = 0, max_steps = 0, hidden = 0, evidence_dim = 0;
  double lr = 0;
  std::string mode, pooling, stat_pooling;
  CLI::Option *oe = nullptr, *ob = nullptr, *om = nullptr, *olr = nullptr, *oh = nullptr, *od = nullptr;
  CLI::Option *omode = nullptr, *opool = nullptr, *ostat = nullptr;

  void add(CLI::App* c) {
    olr = c->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
    oe = c->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    ob = c->add_option("--batch-size", batch, "images per step")->check(CLI::PositiveNumber);
    om = c->add_option("--max-steps", max_steps, "step budget (overrides epochs)")->check(CLI::PositiveNumber);
    add_wiring(c);
  }

  void add_wiring(CLI::App* c) {
    oh = c->add_option("--hidden", hidden, "hidden width of the MLP heads")->check(CLI::PositiveNumber);
    od = c->add_option("--evidence-dim", evidence_dim, "evidence vector size")->check(CLI::PositiveNumber);
    omode = c->add_option("--mode", mode, "baseline_classify_only|perplexity_only|residual_only|full");
    opool = c->add_option("--pooling", pooling, "mean_rows|per_patch");
    ostat = c->add_option("--stat-pooling", stat_pooling, "mean|max|median");
  }

  Phase2Config resolve_train(const Settings& s) const {
    Phase2Config c = phase2_config_from_json(s.section("phase2"));
    take(olr, c.lr, lr);
    take(oe, c.epochs, epochs);
    take(ob, c.batch_size, batch);
    if (om->count()) c.max_steps = max_steps;
    if (s.seed_given || !s.section("phase2").contains("seed")) c.seed = s.seed;
    c.validate();
    return c;
  }

  DetectorConfig resolve_detector(const Settings& s, DetectorConfig base = {}) const {
    DetectorConfig c = detector_config_from_json(s.section("detector"), base);
    if (oh && oh->count()) c.heads.hidden = hidden;
    if (od && od->count()) c.heads.evidence_dim = evidence_dim;
    if (omode->count()) c.mode = parse_ablation_mode(mode);
    if (opool->count()) c.residual_pooling = parse_residual_pooling(pooling);
    if (ostat->count()) c.stat_pooling = parse_stat_pooling(stat_pooling);
    return c;
  }
};

struct SyntheticFlags {
  SyntheticSpec v;
  CLI::Option *oD = nullptr, *oK = nullptr, *os = nullptr, *on = nullptr, *oo = nullptr, *or_ = nullptr, *of = nullptr,
              *op = nullptr;

  void add(CLI::App* c) {
    oD = c->add_option("--D", v.D, "feature dimension")->check(CLI::PositiveNumber);
    oK = c->add_option("--K-true", v.K_true, "planted prototypes")->check(CLI::PositiveNumber);
    os = c->add_option("--sparsity", v.sparsity, "prototypes per real patch")->check(CLI::PositiveNumber);
    on = c->add_option("--noise-sigma", v.noise_sigma, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
    oo = c->add_option("--off-norm", v.off_manifold_norm, "fake offset norm")->check(CLI::NonNegativeNumber);
    or_ = c->add_option("--n-real", v.n_real, "real maps");
    of = c->add_option("--n-fake", v.n_fake, "fake maps");
    op = c->add_option("--patches", v.patches, "patches per map")->check(CLI::PositiveNumber);
  }

  SyntheticSpec resolve(const Settings& s) const {
    SyntheticSpec r = synthetic_spec_from_json(s.section("synthetic"));
    take(oD, r.D, v.D);
    take(oK, r.K_true, v.K_true);
    take(os, r.sparsity, v.sparsity);
    take(on, r.noise_sigma, v.noise_sigma);
    take(oo, r.off_manifold_norm, v.off_manifold_norm);
    take(or_, r.n_real, v.n_real);
    take(of, r.n_fake, v.n_fake);
    take(op, r.patches, v.patches);
    if (s.seed_given || !s.section("synthetic").contains("seed")) r.seed = s.seed;
    r.validate();
    return r;
  }
};

CurationConfig curation_from_json(const nlohmann::json& j) {
  CurationConfig c;
  require(j.is_object(), "curation config must be an object");
  static const std::set<std::string> known{"tau_real", "s_aggregation", "rt_aggregation", "cohort_filter",
                                           "rt_stats_include_real"};
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, "curation config: unknown key '" + it.key() + "'");
  try {
    if (j.contains("tau_real")) c.tau_real = j["tau_real"].get<int>();
    if (j.contains("s_aggregation")) c.s_aggregation = parse_aggregation(j["s_aggregation"].get<std::string>());
    if (j.contains("rt_aggregation")) c.rt_aggregation = parse_aggregation(j["rt_aggregation"].get<std::string>());
    if (j.contains("cohort_filter") && !j["cohort_filter"].is_null()) {
      std::set<Cohort> f;
      for (const auto& x : j["cohort_filter"]) f.insert(parse_cohort(x.get<std::string>()));
      c.cohort_filter = f;
    }
    if (j.contains("rt_stats_include_real")) c.rt_stats_include_real = j["rt_stats_include_real"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation(std::string("curation config: ") + e.what());
  }
  return c;
}

ojson curation_to_json(const CurationConfig& c) {
  ojson j;
  j["tau_real"] = c.tau_real;
  j["s_aggregation"] = std::string(to_string(c.s_aggregation));
  j["rt_aggregation"] = std::string(to_string(c.rt_aggregation));
  if (c.cohort_filter) {
    auto arr = ojson::array();
    for (Cohort x : *c.cohort_filter) arr.push_back(std::string(to_string(x)));
    j["cohort_filter"] = arr;
  } else {
    j["cohort_filter"] = nullptr;
  }
  j["rt_stats_include_real"] = c.rt_stats_include_real;
  return j;
}

std::vector<Sample> load_manifest_samples(const std::string& path) { return load_samples(path); }

std::map<std::string, fs::path> feature_index(const std::string& manifest) {
  std::map<std::string, fs::path> out;
  for (const auto& r : read_manifest(manifest, true))
    if (r.corruption == "clean") out[r.image_id] = resolve_feature_path(manifest, r);
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reference-comparison detector: memory prior, evidence heads, evaluation and curation", "refprior"};
  app.require_subcommand(1);
  app.fallthrough();  // --seed and --config may follow the subcommand
  Settings settings;
  auto* oseed = app.add_option("--seed", settings.seed, "seed for every random stream");
  app.add_option("--config", settings.config_path, "JSON config file; flags override it");

  // make-synthetic
  auto* mk = app.add_subcommand("make-synthetic", "write a planted-manifold dataset as feature files");
  SyntheticFlags mk_spec;
  mk_spec.add(mk);
  std::string mk_out;
  double mk_holdout = 0.0, mk_noise = 0.0;
  mk->add_option("--out", mk_out, "output directory")->required();
  mk->add_option("--holdout", mk_holdout, "also write train/test manifests with this test fraction")
      ->check(CLI::Range(0.0, 0.9));
  auto* mk_onoise =
      mk->add_option("--noise-corruption", mk_noise, "also write a feature-noise corrupted copy of the test set")
          ->check(CLI::PositiveNumber);

  // train-prior
  auto* tp = app.add_subcommand("train-prior", "learn the memory bank from real features");
  Phase1Flags tp_flags;
  tp_flags.add(tp);
  std::string tp_features, tp_out, tp_log;
  tp->add_option("--features", tp_features, "feature manifest (JSONL)")->required();
  tp->add_option("--out", tp_out, "checkpoint to write")->required();
  tp->add_option("--log", tp_log, "training log (JSONL); default stderr");

  // train-detector
  auto* td = app.add_subcommand("train-detector", "train the evidence heads on a frozen prior");
  Phase2Flags td_flags;
  td_flags.add(td);
  std::string td_prior, td_features, td_out, td_log;
  std::size_t td_K = 0, td_k = 0;
  bool td_force = false;
  td->add_option("--prior", td_prior, "prior checkpoint")->required();
  td->add_option("--features", td_features, "labelled feature manifest")->required();
  td->add_option("--out", td_out, "checkpoint to write")->required();
  td->add_option("--log", td_log, "training log (JSONL); default stderr");
  auto* td_oK = td->add_option("--K", td_K, "expected bank size");
  auto* td_ok = td->add_option("--topk", td_k, "expected top-k");
  td->add_flag("--force", td_force, "ignore config mismatches with the prior checkpoint");

  // score
  auto* sc = app.add_subcommand("score", "score one feature file");
  std::string sc_ckpt, sc_features, sc_id;
  bool sc_heatmap = false;
  sc->add_option("--ckpt", sc_ckpt, "detector checkpoint")->required();
  sc->add_option("--features", sc_features, "FeatureFile (.mirf)")->required();
  sc->add_option("--image-id", sc_id, "id echoed in the verdict (default: file stem)");
  sc->add_flag("--emit-heatmap", sc_heatmap, "include the per-patch residual map");
  std::string sc_mode;
  auto* sc_omode = sc->add_option("--mode", sc_mode, "override the evidence wiring");

  // eval
  auto* ev = app.add_subcommand("eval", "balanced accuracy and robustness report");
  std::string ev_ckpt, ev_features, ev_csv, ev_json, ev_mode;
  std::vector<std::string> ev_corrupted;
  double ev_noise = 0.0;
  ev->add_option("--ckpt", ev_ckpt, "detector checkpoint")->required();
  ev->add_option("--features", ev_features, "clean manifest")->required();
  ev->add_option("--corrupted", ev_corrupted, "corrupted manifests paired by image id");
  auto* ev_onoise = ev->add_option("--noise-sigma", ev_noise, "add a feature-noise corruption of the clean set")
                        ->check(CLI::PositiveNumber);
  ev->add_option("--csv", ev_csv, "CSV report path");
  ev->add_option("--json", ev_json, "JSON report path");
  auto* ev_omode = ev->add_option("--mode", ev_mode, "override the evidence wiring");

  // sweep
  auto* sw = app.add_subcommand("sweep", "K or top-k sensitivity on the synthetic testbed or given manifests");
  std::string sw_axis, sw_train, sw_test, sw_out;
  std::vector<std::size_t> sw_values;
  double sw_holdout = 0.2;
  sw->add_option("--axis", sw_axis, "K or k")->required();
  sw->add_option("--values", sw_values, "ascending values")->required()->delimiter(',');
  sw->add_option("--train", sw_train, "training manifest (default: synthetic testbed)");
  sw->add_option("--test", sw_test, "test manifest");
  sw->add_option("--holdout", sw_holdout, "test fraction for the synthetic testbed")->check(CLI::Range(0.05, 0.9));
  sw->add_option("--out", sw_out, "CSV path (default stdout)");
  SyntheticFlags sw_spec;
  sw_spec.add(sw);
  Phase1Flags sw_p1;
  sw_p1.add(sw);
  Phase2Flags sw_p2;
  sw_p2.add_wiring(sw);
  bool sw_desk = false;
  sw->add_flag("--desk", sw_desk, "start from the one-core desk profile instead of the full-size defaults");

  // curate
  auto* cu = app.add_subcommand("curate", "select the hard generated subset from trial logs");
  std::string cu_trials, cu_out, cu_sidecar, cu_sagg, cu_rtagg, cu_report;
  int cu_tau = 4;
  std::vector<std::string> cu_cohorts;
  bool cu_include_real = false;
  cu->add_option("--trials", cu_trials, "trial log (JSONL)")->required();
  auto* cu_otau = cu->add_option("--tau-real", cu_tau, "realism threshold")->check(CLI::Range(1, 4));
  cu->add_option("--out", cu_out, "selected image ids, one per line")->required();
  cu->add_option("--sidecar", cu_sidecar, "statistics JSON (default: <out>.json)");
  auto* cu_osagg = cu->add_option("--s-agg", cu_sagg, "per-image S statistic: median|mean");
  auto* cu_ortagg = cu->add_option("--rt-agg", cu_rtagg, "per-image RT statistic: mean|median");
  auto* cu_ocoh = cu->add_option("--cohort", cu_cohorts, "restrict to cohorts (lay, cv_expert, aigi_expert)");
  cu->add_flag("--rt-stats-include-real", cu_include_real, "compute RT mean/std over real images too");
  cu->add_option("--cohort-report", cu_report, "write per-cohort accuracy JSON");

  // inspect-checkpoint
  auto* ic = app.add_subcommand("inspect-checkpoint", "print a checkpoint header and verify its hashes");
  std::string ic_ckpt;
  ic->add_option("--ckpt", ic_ckpt, "checkpoint")->required();

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP scoring and trial service");
  std::string sv_ckpt, sv_features, sv_pool, sv_log, sv_snapshot, sv_images, sv_host = "127.0.0.1", sv_token;
  int sv_port = 8080;
  sv->add_option("--ckpt", sv_ckpt, "detector checkpoint (scoring answers 503 without it)");
  sv->add_option("--features", sv_features, "manifest used to score by image_id");
  sv->add_option("--trial-pool", sv_pool, "trial images (JSONL of image_id, file, ground_truth)");
  sv->add_option("--trial-log", sv_log, "trial log to append to");
  sv->add_option("--snapshot", sv_snapshot, "session snapshot file");
  sv->add_option("--image-dir", sv_images, "directory holding the trial images");
  sv->add_option("--host", sv_host, "bind address");
  sv->add_option("--port", sv_port, "port (0 = any)")->check(CLI::Range(0, 65535));
  sv->add_option("--token", sv_token, "bearer token required on /v1 endpoints");

  try {
    std::vector<std::string> args(raw_args.rbegin(), raw_args.rend());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    settings.seed_given = oseed->count() > 0;
    load_config(settings);

    if (mk->parsed()) {
      const SyntheticSpec spec = mk_spec.resolve(settings);
      const auto data = make_synthetic(spec);
      const fs::path dir(mk_out);
      ojson summary;
      summary["spec"] = to_json(spec);
      summary["fingerprint"] = config_fingerprint(to_json(spec));
      summary["manifest"] = export_samples(dir, data.samples).string();
      if (mk_holdout > 0.0) {
        const auto [train, test] = stratified_split(data.samples, mk_holdout, spec.seed);
        std::vector<ManifestRecord> tr, te;
        auto rec = [](const Sample& s) {
          return ManifestRecord{s.image_id, s.image_id + ".mirf", s.label, s.generator, s.corruption};
        };
        for (const auto& s : train) tr.push_back(rec(s));
        for (const auto& s : test) te.push_back(rec(s));
        write_manifest(dir / "train.jsonl", tr);
        write_manifest(dir / "test.jsonl", te);
        summary["train"] = (dir / "train.jsonl").string();
        summary["test"] = (dir / "test.jsonl").string();
        if (mk_onoise->count()) {
          std::ostringstream tag;
          tag << "noise" << mk_noise;
          const auto noisy = add_feature_noise(test, mk_noise, spec.seed, tag.str());
          summary["corrupted"] = export_samples(dir, noisy, "test." + tag.str() + ".jsonl").string();
        }
      }
      out << summary.dump() << '\n';
      return 0;
    }

    if (tp->parsed()) {
      const Phase1Config cfg = tp_flags.resolve(settings);
      auto samples = load_manifest_samples(tp_features);
      // A labelled manifest is fine: the memory only ever sees its real rows.
      const std::size_t all = samples.size();
      if (!cfg.allow_mixed_memory) samples = only_label(samples, Label::real);
      std::ofstream logf;
      if (!tp_log.empty()) {
        logf.open(tp_log);
        if (!logf) throw IoError("cannot open log '" + tp_log + "'");
      }
      const auto res = train_phase1(cfg, samples, {}, tp_log.empty() ? &err : &logf);
      Checkpoint ck;
      ck.bank = res.bank;
      ck.config["phase1"] = to_json(cfg);
      save_checkpoint(tp_out, ck);
      ojson summary;
      summary["checkpoint"] = tp_out;
      summary["kind"] = "prior";
      summary["prior_checksum"] = ck.prior_checksum();
      summary["fingerprint"] = ck.fingerprint();
      summary["samples"] = samples.size();
      summary["skipped_fake"] = all - samples.size();
      summary["steps"] = res.report.steps;
      summary["final_loss"] = res.report.step_losses.empty() ? 0.0 : res.report.step_losses.back();
      summary["penalty"] = orthogonality_penalty(res.bank);
      summary["config"] = ck.config;
      out << summary.dump() << '\n';
      return 0;
    }

    if (td->parsed()) {
      const Phase2Config cfg = td_flags.resolve_train(settings);
      const DetectorConfig dcfg = td_flags.resolve_detector(settings);
      CheckpointExpectation expect;
      if (td_oK->count()) expect.K = td_K;
      if (td_ok->count()) expect.top_k = td_k;
      Checkpoint ck = load_checkpoint(td_prior, expect, td_force);
      const auto samples = load_manifest_samples(td_features);
      std::ofstream logf;
      if (!td_log.empty()) {
        logf.open(td_log);
        if (!logf) throw IoError("cannot open log '" + td_log + "'");
      }
      const std::string before = ck.prior_checksum();
      auto res = train_phase2(ck.bank, cfg, dcfg, samples, td_log.empty() ? &err : &logf);
      ck.heads = std::move(res.heads);
      ck.detector = dcfg;
      ck.config["phase2"] = to_json(cfg);
      save_checkpoint(td_out, ck);
      ojson summary;
      summary["checkpoint"] = td_out;
      summary["kind"] = "detector";
      summary["prior_checksum_before"] = before;
      summary["prior_checksum_after"] = ck.prior_checksum();
      summary["fingerprint"] = ck.fingerprint();
      summary["steps"] = res.report.steps;
      summary["final_epoch_bce"] = res.report.epoch_losses.empty() ? 0.0 : res.report.epoch_losses.back();
      summary["config"] = ck.config;
      summary["detector"] = to_json(dcfg);
      out << summary.dump() << '\n';
      return 0;
    }

    if (sc->parsed()) {
      const bool override_mode = sc_omode->count() > 0;
      const AblationMode mode = override_mode ? parse_ablation_mode(sc_mode) : AblationMode::full;
      Checkpoint ck = load_checkpoint(sc_ckpt);
      require(ck.heads.has_value(), "score: '" + sc_ckpt + "' is a prior-only checkpoint");
      Detector model{ck.bank, *ck.heads, ck.detector};
      if (override_mode) model = ablation_variant(model, mode);
      const FeatureMap f = read_features(sc_features);
      const std::string id = sc_id.empty() ? fs::path(sc_features).stem().string() : sc_id;
      out << verdict_json(score(model, f, id), sc_heatmap, ck.fingerprint()) << '\n';
      return 0;
    }

    if (ev->parsed()) {
      const bool override_mode = ev_omode->count() > 0;
      const AblationMode mode = override_mode ? parse_ablation_mode(ev_mode) : AblationMode::full;
      Checkpoint ck = load_checkpoint(ev_ckpt);
      require(ck.heads.has_value(), "eval: '" + ev_ckpt + "' is a prior-only checkpoint");
      Detector model{ck.bank, *ck.heads, ck.detector};
      if (override_mode) model = ablation_variant(model, mode);
      const auto clean = load_manifest_samples(ev_features);
      std::vector<Sample> corrupted;
      for (const auto& m : ev_corrupted) {
        auto c = load_manifest_samples(m);
        corrupted.insert(corrupted.end(), c.begin(), c.end());
      }
      if (ev_onoise->count()) {
        std::ostringstream tag;
        tag << "noise" << ev_noise;
        auto noisy = add_feature_noise(clean, ev_noise, settings.seed, tag.str());
        corrupted.insert(corrupted.end(), noisy.begin(), noisy.end());
      }
      const auto report = robustness_eval(model, clean, corrupted, ck.fingerprint());
      if (!ev_csv.empty()) write_text(ev_csv, eval_csv(report));
      auto j = eval_json(report);
      j["mode"] = to_string(model.config.mode);
      if (!ev_json.empty()) write_text(ev_json, j.dump(2) + "\n");
      out << j.dump() << '\n';
      return 0;
    }

    if (sw->parsed()) {
      const SweepAxis axis = parse_sweep_axis(sw_axis);
      PipelineConfig pc = sw_desk ? desk_pipeline() : PipelineConfig{};
      pc.phase1 = sw_p1.resolve(settings, pc.phase1);
      pc.phase2 = phase2_config_from_json(settings.section("phase2"), pc.phase2);
      if (settings.seed_given || !settings.section("phase2").contains("seed")) pc.phase2.seed = settings.seed;
      pc.detector = sw_p2.resolve_detector(settings, pc.detector);
      std::vector<Sample> train, test;
      ojson echo;
      if (!sw_train.empty()) {
        require(!sw_test.empty(), "sweep: --train needs --test");
        train = load_manifest_samples(sw_train);
        test = load_manifest_samples(sw_test);
      } else {
        const SyntheticSpec spec = sw_spec.resolve(settings);
        auto split = stratified_split(make_synthetic(spec).samples, sw_holdout, spec.seed);
        train = std::move(split.first);
        test = std::move(split.second);
        echo["synthetic"] = to_json(spec);
      }
      const auto rows = sweep(axis, sw_values, pc, train, test);
      echo["axis"] = to_string(axis);
      echo["values"] = sw_values;
      echo["phase1"] = to_json(pc.phase1);
      echo["phase2"] = to_json(pc.phase2);
      echo["detector"] = to_json(pc.detector);
      const std::string csv = sweep_csv(axis, rows);
      ojson summary;
      summary["fingerprint"] = config_fingerprint(echo);
      summary["config"] = echo;
      auto jr = ojson::array();
      for (const auto& r : rows)
        jr.push_back({{"value", r.value}, {"K", r.K}, {"top_k", r.top_k}, {"bacc", r.bacc},
                      {"residual_auc", r.residual_auc}, {"holdout_recon", r.holdout_recon}});
      summary["rows"] = jr;
      if (sw_out.empty()) {
        out << "# fingerprint " << summary["fingerprint"].get<std::string>() << '\n' << csv;
      } else {
        write_text(sw_out, csv);
        out << summary.dump() << '\n';
      }
      return 0;
    }

    if (cu->parsed()) {
      CurationConfig cfg = curation_from_json(settings.section("curation"));
      take(cu_otau, cfg.tau_real, cu_tau);
      if (cu_osagg->count()) cfg.s_aggregation = parse_aggregation(cu_sagg);
      if (cu_ortagg->count()) cfg.rt_aggregation = parse_aggregation(cu_rtagg);
      if (cu_ocoh->count()) {
        std::set<Cohort> f;
        for (const auto& c : cu_cohorts) f.insert(parse_cohort(c));
        cfg.cohort_filter = f;
      }
      if (cu_include_real) cfg.rt_stats_include_real = true;
      cfg.validate();
      const auto trials = read_trial_log(cu_trials);
      const auto result = select_hard(trials, cfg);
      for (const auto& w : result.warnings) err << "warning: " << w << '\n';
      std::string list;
      for (const auto& id : result.selected) list += id + "\n";
      write_text(cu_out, list);
      auto side = curation_sidecar(result, cfg);
      side["fingerprint"] = config_fingerprint(curation_to_json(cfg));
      write_text(cu_sidecar.empty() ? cu_out + ".json" : cu_sidecar, side.dump(2) + "\n");
      if (!cu_report.empty()) write_text(cu_report, cohort_report_json(cohort_report(trials)).dump(2) + "\n");
      out << side.dump() << '\n';
      return 0;
    }

    if (ic->parsed()) {
      const std::string bytes = read_file(ic_ckpt);
      auto header = checkpoint_header(bytes);
      const Checkpoint ck = decode_checkpoint(bytes);
      ojson j;
      j["header"] = header;
      j["verified"] = true;
      j["prior_checksum"] = ck.prior_checksum();
      j["fingerprint"] = ck.fingerprint();
      j["bytes"] = bytes.size();
      j["orthogonality_penalty"] = orthogonality_penalty(ck.bank);
      out << j.dump() << '\n';
      return 0;
    }

    if (sv->parsed()) {
      std::shared_ptr<ScoringBackend> scoring;
      if (!sv_ckpt.empty()) {
        scoring = std::make_shared<ScoringBackend>(load_checkpoint(sv_ckpt),
                                                   sv_features.empty() ? std::map<std::string, fs::path>{}
                                                                       : feature_index(sv_features));
      }
      std::shared_ptr<TrialBackend> trials;
      if (!sv_pool.empty()) {
        require(!sv_log.empty(), "serve: --trial-pool needs --trial-log");
        trials = std::make_shared<TrialBackend>(
            read_trial_pool(sv_pool), sv_log,
            sv_snapshot.empty() ? std::nullopt : std::optional<fs::path>(sv_snapshot));
      }
      ServiceConfig cfg;
      cfg.host = sv_host;
      cfg.port = sv_port;
      if (!sv_token.empty()) cfg.bearer_token = sv_token;
      cfg.image_dir = sv_images.empty() ? (sv_pool.empty() ? fs::path(".") : fs::path(sv_pool).parent_path())
                                        : fs::path(sv_images);
      Service service(cfg, scoring, trials);
      const int port = service.bind();
      out << nlohmann::json{{"listening", sv_host + ":" + std::to_string(port)},
                            {"model_loaded", scoring != nullptr}}
                 .dump()
          << std::endl;
      service.listen();
      return 0;
    }
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return 2;
  } catch (const ContractViolation& e) {
    err << "contract violation: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 1;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace refprior
