#include "refprior/service.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <numeric>

#include "httplib.h"
#include "refprior/random.hpp"

namespace refprior {

namespace fs = std::filesystem;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

// ---- scoring ---------------------------------------------------------------

ScoringBackend::ScoringBackend(Checkpoint ckpt, std::map<std::string, fs::path> features_by_id)
    : fingerprint_(ckpt.fingerprint()), features_by_id_(std::move(features_by_id)) {
  require(ckpt.heads.has_value(), "service: checkpoint has no detector heads (prior-only)");
  model_ = Detector{std::move(ckpt.bank), std::move(*ckpt.heads), ckpt.detector};
}

std::string ScoringBackend::score_bytes(std::string_view body, bool heatmap) const {
  if (!model_) throw HttpError(503, "model not loaded");
  FeatureMap f;
  try {
    f = decode_features(body);
  } catch (const FormatError& e) {
    throw HttpError(400, e.what());
  }
  if (f.cols() != model_->bank.dim() || f.rows() == 0)
    throw HttpError(400, "feature map shape " + num::shape_str(f) + " does not match model D=" +
                             std::to_string(model_->bank.dim()));
  if (!f.all_finite()) throw HttpError(400, "feature map contains non-finite values");
  return verdict_json(score(*model_, f), heatmap, fingerprint_);
}

std::string ScoringBackend::score_id(const std::string& image_id, bool heatmap) const {
  if (!model_) throw HttpError(503, "model not loaded");
  const auto it = features_by_id_.find(image_id);
  if (it == features_by_id_.end()) throw HttpError(404, "unknown image_id '" + image_id + "'");
  FeatureMap f;
  try {
    f = read_features(it->second);
  } catch (const IoError& e) {
    throw HttpError(500, e.what());
  }
  return verdict_json(score(*model_, f, image_id), heatmap, fingerprint_);
}

// ---- trials ----------------------------------------------------------------

std::vector<TrialImage> read_trial_pool(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial pool '" + path.string() + "'");
  std::vector<TrialImage> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      TrialImage t{j.at("image_id").get<std::string>(), j.at("file").get<std::string>(),
                   parse_truth(j.at("ground_truth").get<std::string>())};
      require(ids.insert(t.image_id).second, "duplicate image_id '" + t.image_id + "'");
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw ContractViolation(where + e.what());
    } catch (const ContractViolation& e) {
      throw ContractViolation(where + e.what());
    }
  }
  require(!out.empty(), "trial pool '" + path.string() + "' is empty");
  return out;
}

TrialBackend::TrialBackend(std::vector<TrialImage> pool, fs::path log_path, std::optional<fs::path> snapshot_path)
    : pool_(std::move(pool)), log_path_(std::move(log_path)), snapshot_path_(std::move(snapshot_path)) {
  require(!pool_.empty(), "TrialBackend: empty image pool");
  if (fs::exists(log_path_)) {
    for (const auto& r : read_trial_log(log_path_)) {
      logged_ids_.insert(r.trial_id);
      ++lines_;
    }
  }
  if (snapshot_path_ && fs::exists(*snapshot_path_)) {
    try {
      restore(nlohmann::json::parse(read_file(*snapshot_path_)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("session snapshot '" + snapshot_path_->string() + "': " + e.what());
    }
  }
}

std::vector<std::size_t> TrialBackend::make_plan(std::size_t pool_size, std::uint64_t seed) {
  std::vector<std::size_t> plan(pool_size);
  std::iota(plan.begin(), plan.end(), std::size_t{0});
  Rng rng = make_rng(seed, 0x545249414cULL);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = plan.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(plan[i - 1], plan[j]);
  }
  return plan;
}

std::string TrialBackend::create_session(const std::string& participant_id, Cohort cohort, std::uint64_t seed,
                                         std::optional<std::size_t> limit) {
  require(!participant_id.empty(), "session: participant_id must be non-empty");
  std::lock_guard lock(mu_);
  Session s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", next_session_++);
  s.session_id = buf;
  s.participant_id = participant_id;
  s.cohort = cohort;
  s.seed = seed;
  s.plan = make_plan(pool_.size(), seed);
  if (limit) {
    require(*limit >= 1, "session: limit must be >= 1");
    if (*limit < s.plan.size()) s.plan.resize(*limit);
  }
  s.started_at = utc_timestamp();
  const std::string id = s.session_id;
  sessions_.emplace(id, std::move(s));
  write_snapshot_locked();
  return id;
}

nlohmann::ordered_json TrialBackend::next(const std::string& session_id) {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw HttpError(404, "unknown session '" + session_id + "'");
  Session& s = it->second;
  if (s.cursor >= s.plan.size()) throw HttpError(410, "session '" + session_id + "' is exhausted");
  char buf[32];
  std::snprintf(buf, sizeof buf, "-t%04zu", s.cursor);
  ServedTrial t{s.session_id + buf, s.session_id, s.plan[s.cursor], utc_timestamp(), false};
  nlohmann::ordered_json out;
  out["trial_id"] = t.trial_id;
  out["image_url"] = "/v1/trial/image/" + t.trial_id;
  out["index"] = s.cursor;
  out["total"] = s.plan.size();
  served_[t.trial_id] = std::move(t);
  ++s.cursor;
  write_snapshot_locked();
  return out;
}

void TrialBackend::answer(const TrialAnswer& a) {
  Truth chosen;
  try {
    chosen = parse_truth(a.chosen);
  } catch (const ContractViolation& e) {
    throw HttpError(422, e.what());
  }
  if (a.S < 1 || a.S > 4) throw HttpError(422, "S=" + std::to_string(a.S) + " outside {1,2,3,4}");
  if (!std::isfinite(a.RT_ms) || a.RT_ms <= 0.0) throw HttpError(422, "RT_ms must be > 0");

  std::lock_guard lock(mu_);
  const auto it = served_.find(a.trial_id);
  if (it == served_.end()) {
    if (logged_ids_.count(a.trial_id)) throw HttpError(409, "trial '" + a.trial_id + "' already answered");
    throw HttpError(404, "unknown trial '" + a.trial_id + "'");
  }
  ServedTrial& t = it->second;
  if (t.answered || logged_ids_.count(a.trial_id)) throw HttpError(409, "trial '" + a.trial_id + "' already answered");
  const Session& s = sessions_.at(t.session_id);
  const TrialImage& img = pool_.at(t.pool_index);

  TrialRecord r;
  r.trial_id = t.trial_id;
  r.image_id = img.image_id;
  r.ground_truth = img.ground_truth;
  r.chosen = chosen;
  r.S = static_cast<int>(a.S);
  r.RT = a.RT_ms;
  r.participant_id = s.participant_id;
  r.cohort = s.cohort;
  r.timestamp = utc_timestamp();

  std::ofstream out(log_path_, std::ios::app | std::ios::binary);
  if (!out) throw HttpError(500, "cannot open trial log");
  out << trial_line(r) << '\n';
  out.flush();
  if (!out) throw HttpError(500, "trial log write failed");
  t.answered = true;
  logged_ids_.insert(r.trial_id);
  ++lines_;
  write_snapshot_locked();
}

fs::path TrialBackend::image_file(const std::string& trial_id) const {
  std::lock_guard lock(mu_);
  const auto it = served_.find(trial_id);
  if (it == served_.end()) throw HttpError(404, "unknown trial '" + trial_id + "'");
  return pool_.at(it->second.pool_index).file;
}

std::size_t TrialBackend::log_lines() const {
  std::lock_guard lock(mu_);
  return lines_;
}

nlohmann::ordered_json TrialBackend::snapshot() const {
  std::lock_guard lock(mu_);
  return snapshot_locked();
}

nlohmann::ordered_json TrialBackend::snapshot_locked() const {
  nlohmann::ordered_json j;
  j["next_session"] = next_session_;
  auto sessions = nlohmann::ordered_json::array();
  for (const auto& [id, s] : sessions_)
    sessions.push_back({{"session_id", s.session_id},
                        {"participant_id", s.participant_id},
                        {"cohort", std::string(to_string(s.cohort))},
                        {"seed", s.seed},
                        {"plan", s.plan},
                        {"cursor", s.cursor},
                        {"started_at", s.started_at}});
  j["sessions"] = sessions;
  auto served = nlohmann::ordered_json::array();
  for (const auto& [id, t] : served_)
    served.push_back({{"trial_id", t.trial_id},
                      {"session_id", t.session_id},
                      {"pool_index", t.pool_index},
                      {"served_at", t.served_at},
                      {"answered", t.answered}});
  j["served"] = served;
  return j;
}

void TrialBackend::restore(const nlohmann::json& snap) {
  next_session_ = snap.at("next_session").get<std::size_t>();
  for (const auto& s : snap.at("sessions")) {
    Session x;
    x.session_id = s.at("session_id").get<std::string>();
    x.participant_id = s.at("participant_id").get<std::string>();
    x.cohort = parse_cohort(s.at("cohort").get<std::string>());
    x.seed = s.at("seed").get<std::uint64_t>();
    x.plan = s.at("plan").get<std::vector<std::size_t>>();
    x.cursor = s.at("cursor").get<std::size_t>();
    x.started_at = s.at("started_at").get<std::string>();
    for (std::size_t i : x.plan) require(i < pool_.size(), "session snapshot does not match the image pool");
    sessions_[x.session_id] = std::move(x);
  }
  for (const auto& t : snap.at("served")) {
    ServedTrial x{t.at("trial_id").get<std::string>(), t.at("session_id").get<std::string>(),
                  t.at("pool_index").get<std::size_t>(), t.at("served_at").get<std::string>(),
                  t.at("answered").get<bool>()};
    require(x.pool_index < pool_.size(), "session snapshot does not match the image pool");
    x.answered = x.answered || logged_ids_.count(x.trial_id) > 0;
    served_[x.trial_id] = std::move(x);
  }
}

void TrialBackend::write_snapshot_locked() const {
  if (snapshot_path_) write_file_atomic(*snapshot_path_, snapshot_locked().dump());
}

// ---- HTTP ------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& msg) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const HttpError& e) {
    send_error(res, e.status(), e.what());
  } catch (const ContractViolation& e) {
    send_error(res, 400, e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

bool wants_heatmap(const httplib::Request& req) {
  return req.has_param("heatmap") && req.get_param_value("heatmap") != "0" && req.get_param_value("heatmap") != "false";
}

std::string content_type_for(const fs::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

}  // namespace

Service::Service(ServiceConfig cfg, std::shared_ptr<ScoringBackend> scoring, std::shared_ptr<TrialBackend> trials)
    : cfg_(std::move(cfg)),
      scoring_(scoring ? std::move(scoring) : std::make_shared<ScoringBackend>()),
      trials_(std::move(trials)),
      server_(std::make_unique<httplib::Server>()) {
  routes();
}

Service::~Service() { stop(); }

void Service::routes() {
  auto& svr = *server_;
  svr.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (!cfg_.bearer_token || req.path == "/v1/health") return httplib::Server::HandlerResponse::Unhandled;
    if (req.get_header_value("Authorization") != "Bearer " + *cfg_.bearer_token) {
      send_error(res, 401, "missing or invalid bearer token");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  svr.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(nlohmann::ordered_json{{"status", "ok"}, {"model_loaded", scoring_->loaded()}}.dump(),
                    "application/json");
  });

  svr.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!scoring_->loaded()) throw HttpError(503, "model not loaded");
      const bool heatmap = wants_heatmap(req);
      std::string body;
      if (req.get_header_value("Content-Type").rfind("application/json", 0) == 0) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::exception& e) {
          throw HttpError(400, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_string())
          throw HttpError(400, "JSON body must be {\"image_id\": string}");
        body = scoring_->score_id(j["image_id"].get<std::string>(), heatmap);
      } else {
        body = scoring_->score_bytes(req.body, heatmap);
      }
      res.set_content(body, "application/json");
    });
  });

  svr.Post("/v1/session", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!trials_) throw HttpError(503, "trial backend not configured");
      const auto j = nlohmann::json::parse(req.body);
      if (!j.is_object()) throw HttpError(400, "body must be a JSON object");
      const std::string participant = j.at("participant_id").get<std::string>();
      const Cohort cohort = parse_cohort(j.value("cohort", std::string("lay")));
      const auto seed = j.value("seed", std::uint64_t{0});
      std::optional<std::size_t> limit;
      if (j.contains("limit")) limit = j["limit"].get<std::size_t>();
      const std::string id = trials_->create_session(participant, cohort, seed, limit);
      res.status = 201;
      res.set_content(nlohmann::ordered_json{{"session_id", id}}.dump(), "application/json");
    });
  });

  svr.Get("/v1/trial/next", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!trials_) throw HttpError(503, "trial backend not configured");
      if (!req.has_param("session")) throw HttpError(400, "missing session parameter");
      res.set_content(trials_->next(req.get_param_value("session")).dump(), "application/json");
    });
  });

  svr.Post("/v1/trial/answer", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!trials_) throw HttpError(503, "trial backend not configured");
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception& e) {
        throw HttpError(400, std::string("malformed JSON: ") + e.what());
      }
      if (!j.is_object() || !j.contains("trial_id") || !j["trial_id"].is_string())
        throw HttpError(400, "body must carry a string trial_id");
      TrialAnswer a;
      a.trial_id = j["trial_id"].get<std::string>();
      if (!j.contains("chosen") || !j["chosen"].is_string()) throw HttpError(422, "chosen must be real|generated");
      a.chosen = j["chosen"].get<std::string>();
      if (!j.contains("S") || !j["S"].is_number_integer()) throw HttpError(422, "S must be an integer in {1..4}");
      a.S = j["S"].get<long long>();
      if (!j.contains("RT_ms") || !j["RT_ms"].is_number()) throw HttpError(422, "RT_ms must be a positive number");
      a.RT_ms = j["RT_ms"].get<double>();
      trials_->answer(a);
      res.status = 204;
    });
  });

  svr.Get(R"(/v1/trial/image/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!trials_) throw HttpError(503, "trial backend not configured");
      const fs::path file = cfg_.image_dir / trials_->image_file(req.matches[1]);
      std::string bytes;
      try {
        bytes = read_file(file);
      } catch (const IoError&) {
        throw HttpError(404, "image not found");
      }
      res.set_content(bytes, content_type_for(file));
    });
  });
}

int Service::bind() {
  if (cfg_.port == 0) {
    const int port = server_->bind_to_any_port(cfg_.host);
    if (port < 0) throw IoError("cannot bind " + cfg_.host);
    cfg_.port = port;
    return port;
  }
  if (!server_->bind_to_port(cfg_.host, cfg_.port))
    throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return cfg_.port;
}

void Service::listen() { server_->listen_after_bind(); }

void Service::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

}  // namespace refprior
