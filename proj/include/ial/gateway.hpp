// SPDX-License-Identifier: Apache-2.0
//
// JSON service over one loop session. Every handler is also callable without
// the HTTP layer (Engine::handle), which is what the tests replay against.
//
//   GET  /api/round            round number, open flag, digests, job state
//   POST /api/round/advance    {P, K, F, inst_scorer, feat_scorer} -> 202
//   GET  /api/round/status     background job state
//   GET  /api/queue            ranked entries of the latest report
//   GET  /api/instances/{id}   instance payload with attention and contributions
//   POST /api/annotations      {instance_id, feature_mask [[t,d,v]], time_mask [[t,v]]}
//   POST /api/whatif           {instance_id, off [[t,d]]}
//   GET  /api/metrics          per-round metric records

#pragma once

#include "ial/cer.hpp"
#include "ial/data_io.hpp"
#include "ial/ial_loop.hpp"

#include <condition_variable>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace ial::gw {

using json = io::json;

inline constexpr const char* kWireVersion = "ial.v1";

struct Response {
  int status = 200;
  json body;
};

struct EngineOptions {
  /// Defaults for fields the advance request leaves out.
  cer::CerConfig cer;
  /// Annotation file appended on every accepted submission (optional).
  std::optional<std::filesystem::path> store_path;
  /// Checkpoint rewritten after every completed round (optional).
  std::optional<std::filesystem::path> checkpoint_path;
  io::CheckpointMeta checkpoint_meta;
  /// Metric record stream appended after every completed round (optional).
  std::optional<std::filesystem::path> records_path;
};

enum class JobState { idle, running, done, failed };

class Engine {
 public:
  Engine(loop::Session session, EngineOptions options);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  /// Dispatches one request; path excludes the query string.
  Response handle(const std::string& method, const std::string& path, const std::string& body);

  Response get_round() const;
  Response advance(const json& request);
  Response status() const;
  Response queue() const;
  Response instance(const std::string& id) const;
  Response annotate(const json& request);
  Response whatif(const json& request) const;
  Response metrics() const;

  /// Blocks until no background job is running.
  void wait_idle();

 private:
  json round_json() const;
  json job_json() const;
  json instance_json(const TimeSeriesInstance& inst, const ad::Matrix& z) const;
  const TimeSeriesInstance* find_instance(const std::string& id) const;
  void start_job(std::string kind, std::function<void()> work);
  void after_round();

  mutable std::mutex mu_;
  std::condition_variable idle_cv_;
  loop::Session session_;
  EngineOptions options_;
  std::vector<json> history_;
  std::string job_kind_;
  JobState job_state_ = JobState::idle;
  std::string job_error_;
  std::thread worker_;
};

/// Metric record for the session's current round ("kind": "round_metrics").
json round_record(const loop::Session& session);

Response error_response(int status, const std::string& type, const std::string& message);

/// HTTP front end. listen() blocks; stop() may be called from another thread.
class Server {
 public:
  explicit Server(Engine& engine);
  ~Server();

  /// Binds host:port (port 0 picks a free one); returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind() first.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ial::gw
