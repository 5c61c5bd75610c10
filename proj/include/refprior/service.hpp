#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refprior/curation.hpp"
#include "refprior/store.hpp"

namespace httplib {
class Server;
}

namespace refprior {

/// Error carrying the HTTP status the facade should answer with.
class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

std::string utc_timestamp();

// ---- scoring ---------------------------------------------------------------

class ScoringBackend {
 public:
  ScoringBackend() = default;
  ScoringBackend(Checkpoint ckpt, std::map<std::string, std::filesystem::path> features_by_id = {});

  bool loaded() const noexcept { return model_.has_value(); }
  const std::string& fingerprint() const noexcept { return fingerprint_; }

  /// FeatureFile bytes -> Verdict JSON. Throws HttpError(400/503).
  std::string score_bytes(std::string_view body, bool heatmap) const;
  /// Looks the id up in the feature index. Throws HttpError(404/503).
  std::string score_id(const std::string& image_id, bool heatmap) const;

 private:
  std::optional<Detector> model_;
  std::string fingerprint_;
  std::map<std::string, std::filesystem::path> features_by_id_;
};

// ---- psychophysics trials ------------------------------------------------

struct TrialImage {
  std::string image_id;
  std::string file;  // relative to the image directory
  Truth ground_truth = Truth::real;
};

/// JSONL lines {image_id, file, ground_truth}.
std::vector<TrialImage> read_trial_pool(const std::filesystem::path& path);

struct Session {
  std::string session_id;
  std::string participant_id;
  Cohort cohort = Cohort::lay;
  std::uint64_t seed = 0;
  std::vector<std::size_t> plan;  // indices into the pool, fixed at creation
  std::size_t cursor = 0;         // next plan entry to serve
  std::string started_at;
};

struct ServedTrial {
  std::string trial_id;
  std::string session_id;
  std::size_t pool_index = 0;
  std::string served_at;
  bool answered = false;
};

struct TrialAnswer {
  std::string trial_id;
  std::string chosen;  // "real" | "generated"
  long long S = 0;
  double RT_ms = 0.0;
};

/// Sessions, blinded trial serving and the single-writer trial log.
class TrialBackend {
 public:
  /// Existing log lines are read so duplicates are caught across restarts;
  /// a snapshot, when present, restores sessions.
  TrialBackend(std::vector<TrialImage> pool, std::filesystem::path log_path,
               std::optional<std::filesystem::path> snapshot_path = std::nullopt);

  /// Returns the new session id. The plan is a seeded shuffle of the pool,
  /// truncated to `limit` when given.
  std::string create_session(const std::string& participant_id, Cohort cohort, std::uint64_t seed,
                             std::optional<std::size_t> limit = std::nullopt);

  /// {trial_id, image_url, index, total}. 404 unknown session, 410 exhausted.
  nlohmann::ordered_json next(const std::string& session_id);

  /// Appends one TrialRecord. 404 unknown trial, 409 answered, 422 bad values.
  void answer(const TrialAnswer& a);

  /// Image file behind a served trial id (404 otherwise).
  std::filesystem::path image_file(const std::string& trial_id) const;

  nlohmann::ordered_json snapshot() const;
  std::size_t log_lines() const;

  /// Seeded plan, exposed for tests.
  static std::vector<std::size_t> make_plan(std::size_t pool_size, std::uint64_t seed);

 private:
  void restore(const nlohmann::json& snap);
  nlohmann::ordered_json snapshot_locked() const;
  void write_snapshot_locked() const;

  std::vector<TrialImage> pool_;
  std::filesystem::path log_path_;
  std::optional<std::filesystem::path> snapshot_path_;
  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, ServedTrial> served_;
  std::set<std::string> logged_ids_;
  std::size_t next_session_ = 1;
  std::size_t lines_ = 0;
};

// ---- HTTP facade -----------------------------------------------------------

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds any free port
  std::optional<std::string> bearer_token;
  std::filesystem::path image_dir = ".";
};

class Service {
 public:
  Service(ServiceConfig cfg, std::shared_ptr<ScoringBackend> scoring, std::shared_ptr<TrialBackend> trials);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the socket and returns the port; call before listen().
  int bind();
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  void routes();

  ServiceConfig cfg_;
  std::shared_ptr<ScoringBackend> scoring_;
  std::shared_ptr<TrialBackend> trials_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace refprior
