#include "refprior/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "refprior/synthetic.hpp"

namespace refprior {

double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions) {
  require(labels.size() == predictions.size(), "balanced_accuracy: labels and predictions differ in length");
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "balanced_accuracy: labels must be 0/1");
    require(predictions[i] == 0 || predictions[i] == 1, "balanced_accuracy: predictions must be 0/1");
    if (labels[i] == 1) {
      predictions[i] == 1 ? ++tp : ++fn;
    } else {
      predictions[i] == 0 ? ++tn : ++fp;
    }
  }
  require(tp + fn > 0 && tn + fp > 0, "balanced_accuracy: both classes must be present");
  const double tpr = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double tnr = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return 0.5 * (tpr + tnr);
}

double roc_auc(std::span<const int> labels, std::span<const double> scores) {
  require(labels.size() == scores.size(), "roc_auc: labels and scores differ in length");
  std::vector<std::size_t> idx(labels.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U from mid-ranks.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) rank_sum += mid;
    i = j;
  }
  for (int l : labels) {
    require(l == 0 || l == 1, "roc_auc: labels must be 0/1");
    n_pos += l == 1;
  }
  const std::size_t n_neg = labels.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, "roc_auc: both classes must be present");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

std::vector<Prediction> predict(const Detector& model, std::span<const Sample> samples) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const Verdict v = score(model, s.features, s.image_id);
    out.push_back({s.image_id, s.label, v.label, v.y_pred, s.generator});
  }
  return out;
}

double balanced_accuracy(std::span<const Prediction> predictions) {
  std::vector<int> y, p;
  for (const auto& x : predictions) {
    y.push_back(x.truth == Label::fake);
    p.push_back(x.predicted == Label::fake);
  }
  return balanced_accuracy(y, p);
}

double residual_auc(const MemoryBank& bank, std::span<const Sample> samples) {
  std::vector<int> y;
  std::vector<double> s;
  for (const auto& x : samples) {
    const auto res = project(bank, x.features);
    y.push_back(x.label == Label::fake);
    s.push_back(num::frobenius_norm(res.residual));
  }
  return roc_auc(y, s);
}

PipelineConfig desk_pipeline() {
  PipelineConfig c;
  c.phase1.K = 64;
  c.phase1.top_k = 8;
  c.phase1.lr = 3e-2;
  c.phase1.batch_size = 8;
  c.phase1.epochs = 5;
  c.phase2.lr = 1e-3;
  c.phase2.epochs = 10;
  c.phase2.batch_size = 32;
  return c;
}

PipelineResult train_pipeline(const PipelineConfig& cfg, std::span<const Sample> train) {
  require(!train.empty(), "train_pipeline: empty training set");
  const auto memory = cfg.phase1.allow_mixed_memory ? std::vector<Sample>(train.begin(), train.end())
                                                    : only_label(train, Label::real);
  auto p1 = train_phase1(cfg.phase1, memory);
  auto p2 = train_phase2(p1.bank, cfg.phase2, cfg.detector, train);
  return {Detector{std::move(p1.bank), std::move(p2.heads), cfg.detector}, std::move(p1.report),
          std::move(p2.report)};
}

namespace {

std::vector<EvalRow> rows_for(const std::string& corruption, std::span<const Prediction> preds) {
  std::vector<EvalRow> rows;
  std::vector<Prediction> reals;
  std::map<std::string, std::vector<Prediction>> fakes;
  for (const auto& p : preds) (p.truth == Label::real ? reals : fakes[p.generator]).push_back(p);
  EvalRow all{corruption, "all", reals.size(), preds.size() - reals.size(), balanced_accuracy(preds)};
  rows.push_back(all);
  if (fakes.size() > 1) {
    for (auto& [gen, f] : fakes) {
      std::vector<Prediction> subset = reals;
      subset.insert(subset.end(), f.begin(), f.end());
      rows.push_back({corruption, gen, reals.size(), f.size(), balanced_accuracy(subset)});
    }
  }
  return rows;
}

std::optional<double> tag_number(const std::string& tag, const std::string& prefix) {
  if (tag.size() <= prefix.size() || tag.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(tag.substr(prefix.size()), &used);
    if (used != tag.size() - prefix.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

EvalReport robustness_eval(const Detector& model, std::span<const Sample> clean, std::span<const Sample> corrupted,
                           const std::string& fingerprint) {
  require(!clean.empty(), "robustness_eval: no clean samples");
  std::set<std::string> clean_ids;
  std::map<std::string, Label> clean_label;
  for (const auto& s : clean) {
    require(clean_ids.insert(s.image_id).second, "robustness_eval: duplicate clean id '" + s.image_id + "'");
    clean_label[s.image_id] = s.label;
  }

  std::map<std::string, std::vector<Sample>> groups;
  for (const auto& s : corrupted) {
    require(s.corruption != "clean", "robustness_eval: corrupted set contains a clean sample '" + s.image_id + "'");
    groups[s.corruption].push_back(s);
  }
  for (const auto& [tag, g] : groups) {
    std::set<std::string> ids;
    for (const auto& s : g) {
      require(clean_ids.count(s.image_id) > 0,
              "robustness_eval: id '" + s.image_id + "' in " + tag + " has no clean counterpart");
      require(ids.insert(s.image_id).second, "robustness_eval: duplicate id '" + s.image_id + "' in " + tag);
      require(clean_label.at(s.image_id) == s.label, "robustness_eval: label of '" + s.image_id + "' differs in " + tag);
    }
    for (const auto& id : clean_ids)
      require(ids.count(id) > 0, "robustness_eval: id '" + id + "' missing from corruption " + tag);
  }

  EvalReport r;
  r.fingerprint = fingerprint;
  r.n_samples = clean.size();
  const auto clean_preds = predict(model, clean);
  r.rows = rows_for("clean", clean_preds);
  r.bacc = r.rows.front().bacc;
  r.corruption_bacc["clean"] = r.bacc;
  for (const auto& [tag, g] : groups) {
    const auto preds = predict(model, g);
    const auto rows = rows_for(tag, preds);
    r.rows.insert(r.rows.end(), rows.begin(), rows.end());
    const double b = rows.front().bacc;
    r.corruption_bacc[tag] = b;
    r.n_samples += g.size();
    if (tag == "jpeg90") r.j_rob = b;
    if (tag == "resize0.9") r.r_rob = b;
    if (const auto sigma = tag_number(tag, "blur")) r.blur_curve.emplace_back(*sigma, b);
  }
  std::sort(r.blur_curve.begin(), r.blur_curve.end());
  return r;
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(6);
  out << "corruption,generator,n_real,n_fake,bacc\n";
  for (const auto& row : r.rows)
    out << row.corruption << ',' << row.generator << ',' << row.n_real << ',' << row.n_fake << ',' << std::fixed
        << row.bacc << std::defaultfloat << '\n';
  return out.str();
}

nlohmann::ordered_json eval_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["bacc"] = r.bacc;
  j["j_rob"] = r.j_rob ? nlohmann::ordered_json(*r.j_rob) : nlohmann::ordered_json(nullptr);
  j["r_rob"] = r.r_rob ? nlohmann::ordered_json(*r.r_rob) : nlohmann::ordered_json(nullptr);
  auto curve = nlohmann::ordered_json::array();
  for (const auto& [sigma, b] : r.blur_curve) curve.push_back({{"sigma", sigma}, {"bacc", b}});
  j["blur_curve"] = curve;
  j["corruptions"] = r.corruption_bacc;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"corruption", row.corruption},
                    {"generator", row.generator},
                    {"n_real", row.n_real},
                    {"n_fake", row.n_fake},
                    {"bacc", row.bacc}});
  j["rows"] = rows;
  j["n_samples"] = r.n_samples;
  j["fingerprint"] = r.fingerprint;
  return j;
}

std::string to_string(SweepAxis a) { return a == SweepAxis::K ? "K" : "k"; }

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "K") return SweepAxis::K;
  if (s == "k" || s == "top_k" || s == "topk") return SweepAxis::top_k;
  throw ContractViolation("unknown sweep axis '" + s + "' (expected K or k)");
}

std::vector<SweepRow> sweep(SweepAxis axis, std::span<const std::size_t> values, const PipelineConfig& cfg,
                            std::span<const Sample> train, std::span<const Sample> test) {
  require(!values.empty(), "sweep: no values");
  require(std::is_sorted(values.begin(), values.end()), "sweep: values must be sorted ascending");
  require(!test.empty(), "sweep: empty test set");
  std::vector<SweepRow> rows;
  const auto test_reals = only_label(test, Label::real);
  for (std::size_t v : values) {
    require(v >= 1, "sweep: values must be >= 1");
    PipelineConfig c = cfg;
    if (axis == SweepAxis::K) {
      c.phase1.K = v;
      c.phase1.top_k = std::min(cfg.phase1.top_k, v);
    } else {
      c.phase1.top_k = v;
    }
    const auto res = train_pipeline(c, train);
    SweepRow row;
    row.value = v;
    row.K = c.phase1.K;
    row.top_k = c.phase1.top_k;
    row.bacc = balanced_accuracy(predict(res.model, test));
    row.residual_auc = residual_auc(res.model.bank, test);
    row.holdout_recon = test_reals.empty() ? 0.0 : reconstruction_loss(res.model.bank, test_reals);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(SweepAxis axis, std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << to_string(axis) << ",K,top_k,bacc,residual_auc,holdout_recon\n";
  out.precision(6);
  for (const auto& r : rows)
    out << r.value << ',' << r.K << ',' << r.top_k << ',' << std::fixed << r.bacc << ',' << r.residual_auc << ','
        << std::scientific << r.holdout_recon << std::defaultfloat << '\n';
  return out.str();
}

}  // namespace refprior
