#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "refprior/detector.hpp"
#include "refprior/phase1.hpp"
#include "refprior/synthetic.hpp"

namespace refprior {

using ojson = nlohmann::ordered_json;

ojson to_json(const Phase1Config& c);
ojson to_json(const Phase2Config& c);
ojson to_json(const DetectorConfig& c);
ojson to_json(const SyntheticSpec& s);

/// Missing keys keep their defaults; unknown keys are a contract violation.
Phase1Config phase1_config_from_json(const nlohmann::json& j, Phase1Config base = {});
Phase2Config phase2_config_from_json(const nlohmann::json& j, Phase2Config base = {});
DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig base = {});
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});

/// FNV-1a hex over the compact dump of `j` with keys sorted.
std::string config_fingerprint(const nlohmann::json& j);
std::string config_fingerprint(const ojson& j);

}  // namespace refprior
