#include "refprior/config.hpp"

#include <set>

#include "refprior/hash.hpp"

namespace refprior {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  require(j.is_object(), std::string(what) + ": config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, std::string(what) + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& dst, const char* what) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    dst = j[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ContractViolation(std::string(what) + ": key '" + key + "' has the wrong type");
  }
}

void read_size(const nlohmann::json& j, const char* key, std::size_t& dst, const char* what) {
  if (!j.contains(key)) return;
  require(j[key].is_number_integer() && j[key].get<long long>() >= 0,
          std::string(what) + ": key '" + key + "' must be a non-negative integer");
  dst = j[key].get<std::size_t>();
}

}  // namespace

ojson to_json(const Phase1Config& c) {
  ojson j;
  j["K"] = c.K;
  j["top_k"] = c.top_k;
  j["lambda"] = c.lambda;
  j["lr"] = c.lr;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["weight_decay"] = c.weight_decay;
  j["cosine_floor"] = c.cosine_floor;
  j["max_steps"] = c.max_steps ? ojson(*c.max_steps) : ojson(nullptr);
  j["allow_mixed_memory"] = c.allow_mixed_memory;
  return j;
}

ojson to_json(const Phase2Config& c) {
  ojson j;
  j["lr"] = c.lr;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["weight_decay"] = c.weight_decay;
  j["cosine_floor"] = c.cosine_floor;
  j["max_steps"] = c.max_steps ? ojson(*c.max_steps) : ojson(nullptr);
  return j;
}

ojson to_json(const DetectorConfig& c) {
  ojson j;
  j["hidden"] = c.heads.hidden;
  j["evidence_dim"] = c.heads.evidence_dim;
  j["mode"] = to_string(c.mode);
  j["residual_pooling"] = to_string(c.residual_pooling);
  j["stat_pooling"] = to_string(c.stat_pooling);
  j["threshold"] = c.threshold;
  return j;
}

ojson to_json(const SyntheticSpec& s) {
  ojson j;
  j["D"] = s.D;
  j["K_true"] = s.K_true;
  j["sparsity"] = s.sparsity;
  j["noise_sigma"] = s.noise_sigma;
  j["off_manifold_norm"] = s.off_manifold_norm;
  j["n_real"] = s.n_real;
  j["n_fake"] = s.n_fake;
  j["patches"] = s.patches;
  j["seed"] = s.seed;
  return j;
}

Phase1Config phase1_config_from_json(const nlohmann::json& j, Phase1Config c) {
  constexpr const char* what = "phase1 config";
  reject_unknown(j, {"K", "top_k", "lambda", "lr", "epochs", "batch_size", "seed", "weight_decay", "cosine_floor",
                     "max_steps", "allow_mixed_memory"},
                 what);
  read_size(j, "K", c.K, what);
  read_size(j, "top_k", c.top_k, what);
  read(j, "lambda", c.lambda, what);
  read(j, "lr", c.lr, what);
  read_size(j, "epochs", c.epochs, what);
  read_size(j, "batch_size", c.batch_size, what);
  read(j, "seed", c.seed, what);
  read(j, "weight_decay", c.weight_decay, what);
  read(j, "cosine_floor", c.cosine_floor, what);
  if (j.contains("max_steps")) {
    if (j["max_steps"].is_null()) {
      c.max_steps.reset();
    } else {
      std::size_t v = 0;
      read_size(j, "max_steps", v, what);
      c.max_steps = v;
    }
  }
  read(j, "allow_mixed_memory", c.allow_mixed_memory, what);
  c.validate();
  return c;
}

Phase2Config phase2_config_from_json(const nlohmann::json& j, Phase2Config c) {
  constexpr const char* what = "phase2 config";
  reject_unknown(j, {"lr", "epochs", "batch_size", "seed", "weight_decay", "cosine_floor", "max_steps"}, what);
  read(j, "lr", c.lr, what);
  read_size(j, "epochs", c.epochs, what);
  read_size(j, "batch_size", c.batch_size, what);
  read(j, "seed", c.seed, what);
  read(j, "weight_decay", c.weight_decay, what);
  read(j, "cosine_floor", c.cosine_floor, what);
  if (j.contains("max_steps")) {
    if (j["max_steps"].is_null()) {
      c.max_steps.reset();
    } else {
      std::size_t v = 0;
      read_size(j, "max_steps", v, what);
      c.max_steps = v;
    }
  }
  c.validate();
  return c;
}

DetectorConfig detector_config_from_json(const nlohmann::json& j, DetectorConfig c) {
  constexpr const char* what = "detector config";
  reject_unknown(j, {"hidden", "evidence_dim", "mode", "residual_pooling", "stat_pooling", "threshold"}, what);
  read_size(j, "hidden", c.heads.hidden, what);
  read_size(j, "evidence_dim", c.heads.evidence_dim, what);
  std::string s;
  if (j.contains("mode")) {
    read(j, "mode", s, what);
    c.mode = parse_ablation_mode(s);
  }
  if (j.contains("residual_pooling")) {
    read(j, "residual_pooling", s, what);
    c.residual_pooling = parse_residual_pooling(s);
  }
  if (j.contains("stat_pooling")) {
    read(j, "stat_pooling", s, what);
    c.stat_pooling = parse_stat_pooling(s);
  }
  read(j, "threshold", c.threshold, what);
  require(c.heads.hidden > 0 && c.heads.evidence_dim > 0, "detector config: head sizes must be positive");
  require(c.threshold > 0.0 && c.threshold < 1.0, "detector config: threshold must lie in (0, 1)");
  return c;
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec s) {
  constexpr const char* what = "synthetic spec";
  reject_unknown(j, {"D", "K_true", "sparsity", "noise_sigma", "off_manifold_norm", "n_real", "n_fake", "patches", "seed"},
                 what);
  read_size(j, "D", s.D, what);
  read_size(j, "K_true", s.K_true, what);
  read_size(j, "sparsity", s.sparsity, what);
  read(j, "noise_sigma", s.noise_sigma, what);
  read(j, "off_manifold_norm", s.off_manifold_norm, what);
  read_size(j, "n_real", s.n_real, what);
  read_size(j, "n_fake", s.n_fake, what);
  read_size(j, "patches", s.patches, what);
  read(j, "seed", s.seed, what);
  s.validate();
  return s;
}

std::string config_fingerprint(const nlohmann::json& j) { return fnv1a64_hex(j.dump()); }

std::string config_fingerprint(const ojson& j) { return config_fingerprint(nlohmann::json(j)); }

}  // namespace refprior
