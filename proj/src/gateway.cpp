// SPDX-License-Identifier: Apache-2.0
#include "ial/gateway.hpp"

#include "ial/errors.hpp"
#include "ial/model.hpp"

#include <httplib.h>

#include <utility>

namespace ial::gw {

namespace {

json matrix_json(const ad::Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_json(const ad::Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json metrics_json(const std::optional<loop::Metrics>& m) {
  if (!m) return nullptr;
  return {{"name", m->name}, {"value", m->value}, {"count", m->count}};
}

const char* job_name(JobState s) {
  switch (s) {
    case JobState::idle: return "idle";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "idle";
}

cer::Scorer scorer_arg(const json& req, const char* key, cer::Scorer fallback, bool instance) {
  if (!req.contains(key)) return fallback;
  return cer::parse_scorer_for(req.at(key).get<std::string>(), instance);
}

}  // namespace

Response error_response(int status, const std::string& type, const std::string& message) {
  return {status, {{"version", kWireVersion}, {"error", {{"type", type}, {"message", message}}}}};
}

json round_record(const loop::Session& session) {
  const auto& st = session.state();
  json rec{{"kind", "round_metrics"},
           {"s", st.s},
           {"valid", metrics_json(st.valid_metrics)},
           {"test", metrics_json(st.test_metrics)},
           {"params_hash", st.params_hash},
           {"store_digest", st.store_digest},
           {"store_size", session.store().size()}};
  if (st.report && st.report->round == st.s) {
    rec["inst_scorer"] = std::string(cer::to_string(st.report->inst_scorer));
    rec["feat_scorer"] = std::string(cer::to_string(st.report->feat_scorer));
  }
  return rec;
}

Engine::Engine(loop::Session session, EngineOptions options)
    : session_(std::move(session)), options_(std::move(options)) {
  session_.refresh_metrics();
  history_.push_back(round_record(session_));
}

Engine::~Engine() {
  if (worker_.joinable()) worker_.join();
}

void Engine::wait_idle() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return job_state_ != JobState::running; });
}

json Engine::job_json() const {
  json j{{"kind", job_kind_}, {"state", job_name(job_state_)}};
  if (!job_error_.empty()) j["error"] = job_error_;
  return j;
}

json Engine::round_json() const {
  const auto& st = session_.state();
  json j{{"version", kWireVersion},
         {"s", st.s},
         {"open", st.open},
         {"pending", st.pending},
         {"params_hash", st.params_hash},
         {"store_digest", st.store_digest},
         {"store_size", session_.store().size()},
         {"job", job_json()}};
  if (st.report) {
    j["K"] = st.report->entries.size();
    j["inst_scorer"] = std::string(cer::to_string(st.report->inst_scorer));
    j["feat_scorer"] = std::string(cer::to_string(st.report->feat_scorer));
  }
  return j;
}

Response Engine::get_round() const {
  std::lock_guard lock(mu_);
  return {200, round_json()};
}

Response Engine::status() const {
  std::lock_guard lock(mu_);
  return {200, {{"version", kWireVersion}, {"s", session_.state().s}, {"job", job_json()}}};
}

void Engine::start_job(std::string kind, std::function<void()> work) {
  // Caller holds mu_ and has checked that no job is running.
  if (worker_.joinable()) worker_.join();
  job_kind_ = std::move(kind);
  job_state_ = JobState::running;
  job_error_.clear();
  worker_ = std::thread([this, work = std::move(work)] {
    std::string err;
    try {
      work();
    } catch (const std::exception& e) {
      err = e.what();
    }
    {
      std::lock_guard lock(mu_);
      job_state_ = err.empty() ? JobState::done : JobState::failed;
      job_error_ = err;
    }
    idle_cv_.notify_all();
  });
}

Response Engine::advance(const json& request) {
  std::lock_guard lock(mu_);
  if (job_state_ == JobState::running) {
    return error_response(409, "ConflictError", "a background job is running");
  }
  if (session_.state().open) {
    return error_response(409, "ConflictError",
                          "round " + std::to_string(session_.state().s) + " is still open");
  }
  cer::CerConfig config = options_.cer;
  config.P = request.value("P", config.P);
  config.K = request.value("K", config.K);
  config.F = request.value("F", config.F);
  config.inst_scorer = scorer_arg(request, "inst_scorer", config.inst_scorer, true);
  config.feat_scorer = scorer_arg(request, "feat_scorer", config.feat_scorer, false);
  const auto& cfg = session_.model_config();
  if (config.P < 1 || static_cast<std::size_t>(config.P) > session_.valid().size()) {
    throw ValidationError("P must lie in [1, " + std::to_string(session_.valid().size()) + "]");
  }
  if (config.K < 1 || static_cast<std::size_t>(config.K) > session_.train().size()) {
    throw ValidationError("K must lie in [1, " + std::to_string(session_.train().size()) + "]");
  }
  if (config.F < 1 || config.F > cfg.T * cfg.D) {
    throw ValidationError("F must lie in [1, " + std::to_string(cfg.T * cfg.D) + "]");
  }
  const int next = session_.state().s + 1;
  start_job("rerank", [this, config] {
    // Mutations are refused while the job runs, so the session is stable.
    cer::RerankReport report = session_.plan_round(config);
    std::lock_guard inner(mu_);
    session_.open_round(std::move(report));
  });
  return {202, {{"version", kWireVersion}, {"round", next}, {"job", job_json()}}};
}

const TimeSeriesInstance* Engine::find_instance(const std::string& id) const {
  for (const Dataset* ds : {&session_.train(), &session_.valid(), &session_.test()}) {
    if (const auto idx = ds->find(id)) return &ds->instances[*idx];
  }
  return nullptr;
}

json Engine::instance_json(const TimeSeriesInstance& inst, const ad::Matrix& z) const {
  const ParamVector& params = session_.params();
  const ModelConfig& cfg = session_.model_config();
  const AttentionMap attn =
      model::forward_attention(model::embed_inputs(inst.x, params, cfg), params, cfg, &z);
  json contributions = json::array();
  for (const auto& g : model::contribution_all(inst.x, attn, params, cfg)) {
    contributions.push_back(matrix_json(g));
  }
  const char* split = session_.train().find(inst.id)   ? "train"
                      : session_.valid().find(inst.id) ? "valid"
                                                       : "test";
  json annotations = json::array();
  for (const auto& e : session_.store().by_instance(inst.id)) {
    annotations.push_back(io::annotation_to_json(e));
  }
  return {{"instance_id", inst.id},
          {"split", split},
          {"x", matrix_json(inst.x)},
          {"y", vector_json(inst.y)},
          {"prediction", vector_json(model::predict(attn, params, cfg))},
          {"attention", {{"beta", vector_json(attn.beta)}, {"gamma", matrix_json(attn.gamma)}}},
          {"contribution", std::move(contributions)},
          {"contribution_scheme", std::string(model::kContributionScheme)},
          {"annotations", std::move(annotations)}};
}

Response Engine::queue() const {
  std::lock_guard lock(mu_);
  const auto& st = session_.state();
  if (!st.report) {
    return error_response(409, "ConflictError", "no round has been opened");
  }
  const ad::Matrix z = cer::mean_latent(session_.train(), session_.store(), session_.params(),
                                        session_.model_config());
  json entries = json::array();
  for (const auto& e : st.report->entries) {
    const auto idx = session_.train().find(e.instance_id);
    json j = instance_json(session_.train().instances[*idx], z);
    json feats = json::array();
    for (const auto& f : e.features) {
      feats.push_back({{"t", f.t},
                       {"d", f.d},
                       {"score", f.score},
                       {"scorer", std::string(cer::to_string(st.report->feat_scorer))},
                       {"flags", f.flags}});
    }
    const bool pending =
        st.open && std::find(st.pending.begin(), st.pending.end(), e.instance_id) != st.pending.end();
    j["score"] = e.score;
    j["features"] = std::move(feats);
    j["status"] = pending ? "pending" : "done";
    entries.push_back(std::move(j));
  }
  return {200,
          {{"version", kWireVersion},
           {"round", st.report->round},
           {"open", st.open},
           {"validation_ids", st.report->validation_ids},
           {"entries", std::move(entries)}}};
}

Response Engine::instance(const std::string& id) const {
  std::lock_guard lock(mu_);
  const TimeSeriesInstance* inst = find_instance(id);
  if (inst == nullptr) {
    return error_response(404, "NotFoundError", "unknown instance '" + id + "'");
  }
  const ad::Matrix z = cer::mean_latent(session_.train(), session_.store(), session_.params(),
                                        session_.model_config());
  json j = instance_json(*inst, z);
  j["version"] = kWireVersion;
  return {200, std::move(j)};
}

Response Engine::annotate(const json& request) {
  std::lock_guard lock(mu_);
  if (job_state_ == JobState::running) {
    return error_response(409, "ConflictError", "a background job is running");
  }
  const ModelConfig& cfg = session_.model_config();
  const std::string id = request.at("instance_id").get<std::string>();
  if (find_instance(id) == nullptr) {
    return error_response(404, "NotFoundError", "unknown instance '" + id + "'");
  }
  io::SparseCells cells;
  for (const auto& c : request.value("feature_mask", json::array())) {
    cells.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
  }
  io::SparseSteps steps;
  for (const auto& s : request.value("time_mask", json::array())) {
    steps.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  }
  AttentionMask mask{id, io::dense_feature_mask(cells, cfg.T, cfg.D),
                     io::dense_time_mask(steps, cfg.T)};
  session_.submit(mask, request.value("annotator", std::string("ui")));
  if (options_.store_path) {
    io::annotation_append(*options_.store_path, session_.store().entries().back(), cfg.T, cfg.D);
  }
  const auto& st = session_.state();
  json body{{"version", kWireVersion},
            {"accepted", id},
            {"round", st.s},
            {"store_size", session_.store().size()},
            {"remaining", st.pending.size()}};
  if (st.pending.empty()) {
    start_job("complete_round", [this] {
      loop::Session work = [&] {
        std::lock_guard inner(mu_);
        return session_;
      }();
      work.complete_round();
      std::lock_guard inner(mu_);
      session_ = std::move(work);
      after_round();
    });
    body["job"] = job_json();
  }
  return {200, std::move(body)};
}

void Engine::after_round() {
  const auto& st = session_.state();
  const json rec = round_record(session_);
  history_.push_back(rec);
  if (options_.records_path) {
    if (st.report) io::record_append(*options_.records_path, cer::report_to_json(*st.report));
    io::record_append(*options_.records_path, rec);
  }
  if (options_.checkpoint_path) {
    io::CheckpointMeta meta = options_.checkpoint_meta;
    meta.round = st.s;
    io::checkpoint_save(*options_.checkpoint_path, session_.params(), meta);
  }
}

Response Engine::whatif(const json& request) const {
  std::lock_guard lock(mu_);
  const std::string id = request.at("instance_id").get<std::string>();
  const TimeSeriesInstance* inst = find_instance(id);
  if (inst == nullptr) {
    return error_response(404, "NotFoundError", "unknown instance '" + id + "'");
  }
  const ParamVector& params = session_.params();
  const ModelConfig& cfg = session_.model_config();
  std::vector<std::pair<int, int>> off;
  for (const auto& c : request.value("off", json::array())) {
    const int t = c.at(0).get<int>();
    const int d = c.at(1).get<int>();
    if (t < 0 || t >= cfg.T || d < 0 || d >= cfg.D) {
      throw ValidationError("cell (" + std::to_string(t) + "," + std::to_string(d) +
                            ") out of range");
    }
    off.emplace_back(t, d);
  }
  const ad::Matrix z = cer::mean_latent(session_.train(), session_.store(), params, cfg);
  const AttentionMap attn =
      model::forward_attention(model::embed_inputs(inst->x, params, cfg), params, cfg, &z);
  const ad::Vector base = model::predict(attn, params, cfg);
  const ad::Vector cf = model::predict_with_override(attn, params, cfg, off);
  AttentionMap attn_cf = attn;
  for (const auto& [t, d] : off) attn_cf.gamma(t, d) = 0.0;
  const auto before = model::contribution_all(inst->x, attn, params, cfg);
  const auto after = model::contribution_all(inst->x, attn_cf, params, cfg);
  json contrib = json::array();
  for (std::size_t k = 0; k < before.size(); ++k) {
    contrib.push_back(matrix_json(before[k] - after[k]));
  }
  return {200,
          {{"version", kWireVersion},
           {"instance_id", id},
           {"off", request.value("off", json::array())},
           {"y_base", vector_json(base)},
           {"y_cf", vector_json(cf)},
           {"delta", vector_json(base - cf)},
           {"delta_norm", (base - cf).norm()},
           {"contribution_delta", std::move(contrib)}}};
}

Response Engine::metrics() const {
  std::lock_guard lock(mu_);
  return {200, {{"version", kWireVersion}, {"records", history_}}};
}

Response Engine::handle(const std::string& method, const std::string& path,
                        const std::string& body) {
  try {
    const auto parse = [&] {
      try {
        return body.empty() ? json::object() : json::parse(body);
      } catch (const json::exception& e) {
        throw ParseError(std::string("request body: ") + e.what());
      }
    };
    if (method == "GET") {
      if (path == "/api/round") return get_round();
      if (path == "/api/round/status") return status();
      if (path == "/api/queue") return queue();
      if (path == "/api/metrics") return metrics();
      const std::string prefix = "/api/instances/";
      if (path.rfind(prefix, 0) == 0 && path.size() > prefix.size()) {
        return instance(path.substr(prefix.size()));
      }
    } else if (method == "POST") {
      if (path == "/api/round/advance") return advance(parse());
      if (path == "/api/annotations") return annotate(parse());
      if (path == "/api/whatif") return whatif(parse());
    }
    return error_response(404, "NotFoundError", "no route for " + method + " " + path);
  } catch (const json::exception& e) {
    return error_response(400, "ValidationError", std::string("malformed request: ") + e.what());
  } catch (const ParseError& e) {
    return error_response(400, "ParseError", e.what());
  } catch (const ValidationError& e) {
    return error_response(400, "ValidationError", e.what());
  } catch (const ShapeError& e) {
    return error_response(400, "ShapeError", e.what());
  } catch (const NotFoundError& e) {
    return error_response(404, "NotFoundError", e.what());
  } catch (const MissingInstanceError& e) {
    return error_response(404, "NotFoundError", e.what());
  } catch (const DuplicateError& e) {
    return error_response(409, "DuplicateError", e.what());
  } catch (const ConflictError& e) {
    return error_response(409, "ConflictError", e.what());
  } catch (const PreconditionError& e) {
    return error_response(409, "PreconditionError", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "InternalError", e.what());
  }
}

struct Server::Impl {
  Engine& engine;
  httplib::Server http;
  explicit Impl(Engine& e) : engine(e) {}
};

Server::Server(Engine& engine) : impl_(std::make_unique<Impl>(engine)) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    const Response r = impl_->engine.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->http.Get(R"(/api/.*)", route);
  impl_->http.Post(R"(/api/.*)", route);
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->http.bind_to_any_port(host);
    if (p < 0) throw Error("cannot bind " + host);
    return p;
  }
  if (!impl_->http.bind_to_port(host, port)) {
    throw Error("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace ial::gw
