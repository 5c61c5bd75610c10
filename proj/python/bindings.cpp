#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "refprior/cli.hpp"
#include "refprior/curation.hpp"
#include "refprior/detector.hpp"
#include "refprior/store.hpp"

namespace py = pybind11;
using namespace refprior;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

FeatureMap to_map(const F32Array& a) {
  require(a.ndim() == 2, "feature map must be a 2-D array (N x D)");
  const auto n = static_cast<std::size_t>(a.shape(0)), d = static_cast<std::size_t>(a.shape(1));
  return FeatureMap(n, d, std::vector<float>(a.data(), a.data() + n * d));
}

py::array_t<float> to_array(const FeatureMap& f) {
  py::array_t<float> out({f.rows(), f.cols()});
  std::copy(f.flat().begin(), f.flat().end(), out.mutable_data());
  return out;
}

CurationConfig curation_config(const nlohmann::json& j) {
  CurationConfig c;
  if (j.contains("tau_real")) c.tau_real = j["tau_real"].get<int>();
  if (j.contains("s_aggregation")) c.s_aggregation = parse_aggregation(j["s_aggregation"].get<std::string>());
  if (j.contains("rt_aggregation")) c.rt_aggregation = parse_aggregation(j["rt_aggregation"].get<std::string>());
  if (j.contains("rt_stats_include_real")) c.rt_stats_include_real = j["rt_stats_include_real"].get<bool>();
  if (j.contains("cohorts") && !j["cohorts"].is_null()) {
    std::set<Cohort> f;
    for (const auto& s : j["cohorts"]) f.insert(parse_cohort(s.get<std::string>()));
    c.cohort_filter = f;
  }
  return c;
}

std::vector<TrialRecord> trials_from(const std::string& json_list) {
  std::vector<TrialRecord> out;
  for (const auto& t : nlohmann::json::parse(json_list)) out.push_back(trial_from_json(t));
  return out;
}

class PyDetector {
 public:
  explicit PyDetector(const std::string& path) : ckpt_(load_checkpoint(path)) {
    require(ckpt_.heads.has_value(), "'" + path + "' is a prior-only checkpoint");
    model_ = Detector{ckpt_.bank, *ckpt_.heads, ckpt_.detector};
    fingerprint_ = ckpt_.fingerprint();
  }
  std::string score(const F32Array& f, const std::string& image_id, bool heatmap) const {
    return verdict_json(refprior::score(model_, to_map(f), image_id), heatmap, fingerprint_);
  }
  const std::string& fingerprint() const { return fingerprint_; }
  std::string prior_checksum() const { return ckpt_.prior_checksum(); }
  std::size_t K() const { return ckpt_.bank.size(); }
  std::size_t D() const { return ckpt_.bank.dim(); }
  std::size_t top_k() const { return ckpt_.bank.top_k; }

 private:
  Checkpoint ckpt_;
  Detector model_;
  std::string fingerprint_;
};

}  // namespace

PYBIND11_MODULE(_refprior, m) {
  m.doc() = "Bindings for the refprior detector core";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("encode_features", [](const F32Array& a) { return py::bytes(encode_features(to_map(a))); });
  m.def("decode_features", [](const py::bytes& b) { return to_array(decode_features(std::string(b))); });
  m.def("write_features", [](const std::string& path, const F32Array& a) { write_features(path, to_map(a)); });
  m.def("read_features", [](const std::string& path) { return to_array(read_features(path)); });
  m.def("crc32", [](const py::bytes& b) {
    const std::string s(b);
    return crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  });

  m.def("valid_corruption_tag", &valid_corruption_tag);
  m.def("read_manifest", [](const std::string& path, bool check_files) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : read_manifest(path, check_files)) arr.push_back(to_json(r));
    return arr.dump();
  }, py::arg("path"), py::arg("check_files") = true);
  m.def("write_manifest", [](const std::string& path, const std::string& records) {
    std::vector<ManifestRecord> rs;
    for (const auto& j : nlohmann::json::parse(records)) rs.push_back(manifest_record_from_json(j));
    write_manifest(path, rs);
  });

  m.def("trial_line", [](const std::string& record) { return trial_line(trial_from_json(nlohmann::json::parse(record))); });
  m.def("read_trial_log", [](const std::string& path) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : read_trial_log(path)) arr.push_back(to_json(r));
    return arr.dump();
  });
  m.def("select_hard", [](const std::string& trials, const std::string& cfg) {
    const auto c = curation_config(nlohmann::json::parse(cfg));
    const auto r = select_hard(trials_from(trials), c);
    auto j = curation_sidecar(r, c);
    j["selected"] = r.selected;
    return j.dump();
  });
  m.def("cohort_report", [](const std::string& trials) {
    return cohort_report_json(cohort_report(trials_from(trials))).dump();
  });

  m.def("checkpoint_header", [](const std::string& path) { return checkpoint_header(read_file(path)).dump(); });

  py::class_<PyDetector>(m, "Detector")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("score", &PyDetector::score, py::arg("features"), py::arg("image_id") = "", py::arg("heatmap") = false)
      .def_property_readonly("fingerprint", &PyDetector::fingerprint)
      .def_property_readonly("prior_checksum", &PyDetector::prior_checksum)
      .def_property_readonly("K", &PyDetector::K)
      .def_property_readonly("D", &PyDetector::D)
      .def_property_readonly("top_k", &PyDetector::top_k);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_cli(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  });
}
