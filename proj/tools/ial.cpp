// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: data generation, pretraining, annotation rounds,
// evaluation, the JSON service and the numerical check suites.

#include "ial/checks.hpp"
#include "ial/data_io.hpp"
#include "ial/errors.hpp"
#include "ial/gateway.hpp"
#include "ial/ial_loop.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

using namespace ial;
using json = io::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

json metrics_json(const std::optional<loop::Metrics>& m) {
  if (!m) return nullptr;
  return {{"name", m->name}, {"value", m->value}, {"count", m->count}};
}

// Everything a command needs to rebuild a session from files on disk.
struct Workspace {
  io::Checkpoint ckpt;
  io::Split split;
  nap::AnnotationStore store;
};

Workspace open_workspace(const std::string& ckpt_path, const std::string& data_path,
                         const std::string& store_path) {
  Workspace w;
  w.ckpt = io::checkpoint_load(ckpt_path);
  const Dataset ds = io::dataset_load(data_path);
  const ModelConfig& cfg = w.ckpt.meta.model;
  if (ds.T() != cfg.T || ds.D() != cfg.D || ds.L() != cfg.L) {
    throw SchemaError("dataset shape does not match the checkpoint's model config");
  }
  w.split = io::split_dataset(ds, w.ckpt.meta.split_seed);
  if (!store_path.empty()) w.store = io::annotation_load(store_path, cfg.T, cfg.D);
  return w;
}

loop::Session make_session(Workspace& w, std::uint64_t seed) {
  loop::SessionConfig sc;
  sc.seed = seed;
  sc.adapt.weights = w.ckpt.meta.nap;
  return loop::Session(w.split.train, w.split.valid, w.split.test, w.ckpt.params,
                       w.ckpt.meta.model, sc, w.store, w.ckpt.meta.round);
}

// --- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::string out;
  io::SyntheticSpec spec;
  std::string task = "binary";
};

int cmd_gen(const GenArgs& a) {
  io::SyntheticSpec spec = a.spec;
  spec.task = parse_task(a.task);
  const Dataset ds = io::generate_synthetic(spec);
  io::dataset_save(ds, a.out);
  print({{"out", a.out}, {"instances", ds.size()}, {"T", ds.T()}, {"D", ds.D()}, {"L", ds.L()}});
  return 0;
}

// --- pretrain ---------------------------------------------------------------

struct PretrainArgs {
  std::string data, config, out;
};

int cmd_pretrain(const PretrainArgs& a) {
  const json conf = a.config.empty() ? json::object() : read_json_file(a.config);
  const Dataset ds = io::dataset_load(a.data);
  if (ds.empty()) throw PreconditionError("dataset is empty");

  ModelConfig cfg;
  cfg.T = ds.T();
  cfg.D = ds.D();
  cfg.L = ds.L();
  cfg.task = parse_task(conf.value("task", std::string("binary")));
  const json mj = conf.value("model", json::object());
  cfg.hidden_beta = mj.value("hidden_beta", cfg.hidden_beta);
  cfg.hidden_gamma = mj.value("hidden_gamma", cfg.hidden_gamma);
  cfg.latent_dim = mj.value("latent_dim", cfg.latent_dim);
  cfg.r_dim = mj.value("r_dim", cfg.r_dim);

  loop::PretrainConfig pc;
  const json pj = conf.value("pretrain", json::object());
  pc.lr = pj.value("lr", pc.lr);
  pc.batch_size = pj.value("batch_size", pc.batch_size);
  pc.max_epochs = pj.value("max_epochs", pc.max_epochs);
  pc.patience = pj.value("patience", pc.patience);
  pc.weight_decay = pj.value("weight_decay", pc.weight_decay);
  pc.seed = pj.value("seed", pc.seed);

  io::CheckpointMeta meta;
  meta.model = cfg;
  const json nj = conf.value("nap", json::object());
  meta.nap.mask = nj.value("lambda_mask", meta.nap.mask);
  meta.nap.kl = nj.value("lambda_kl", meta.nap.kl);
  if (nj.value("mask_target", std::string("magnitude")) == "rescaled") {
    meta.nap.target = nap::MaskTarget::rescaled;
  }
  meta.split_seed = conf.value("split_seed", std::uint64_t{0});

  const io::Split split = io::split_dataset(ds, meta.split_seed);
  const loop::PretrainResult r = loop::pretrain(split.train, &split.valid, cfg, pc);
  meta.extra = {{"pretrain",
                 {{"epochs_run", r.log.epochs_run},
                  {"best_epoch", r.log.best_epoch},
                  {"seed", pc.seed},
                  {"valid_loss", r.log.valid_loss.empty() ? 0.0 : r.log.valid_loss[r.log.best_epoch]}}}};
  io::checkpoint_save(a.out, r.params, meta);

  const nap::AnnotationStore empty;
  json out{{"out", a.out},
           {"epochs_run", r.log.epochs_run},
           {"best_epoch", r.log.best_epoch},
           {"params_hash", r.params.digest()}};
  if (!split.valid.empty()) {
    out["valid"] = metrics_json(loop::evaluate_model(r.params, cfg, split.train, empty, split.valid));
  }
  print(out);
  return 0;
}

// --- round ------------------------------------------------------------------

struct RoundArgs {
  std::string ckpt, data, store, records;
  std::string inst_scorer = "uncertainty";
  std::string feat_scorer = "counterfactual";
  int P = 20, K = 16, F = 4;
  std::string annotator = "oracle";
  double oracle_noise = 0.0, oracle_idk = 0.0;
  bool full_grid = false;
  std::uint64_t seed = 0;
  int rounds = 1;
  std::string host = "127.0.0.1";
  int port = 8080;
};

cer::CerConfig cer_config(const RoundArgs& a) {
  cer::CerConfig c;
  c.P = a.P;
  c.K = a.K;
  c.F = a.F;
  c.inst_scorer = cer::parse_scorer_for(a.inst_scorer, true);
  c.feat_scorer = cer::parse_scorer_for(a.feat_scorer, false);
  return c;
}

int round_oracle(const RoundArgs& a, Workspace& w) {
  loop::Session session = make_session(w, a.seed);
  loop::OracleConfig oc;
  oc.noise_rate = a.oracle_noise;
  oc.idk_rate = a.oracle_idk;
  oc.scope = a.full_grid ? loop::OracleConfig::Scope::full_grid : loop::OracleConfig::Scope::requested;
  loop::OracleAnnotator oracle(oc, loop::round_seed(a.seed, session.state().s + 1));
  const cer::CerConfig cc = cer_config(a);

  json rounds = json::array();
  for (int r = 0; r < a.rounds; ++r) {
    const std::size_t before = session.store().size();
    session.run_round(cc, oracle);
    const auto& entries = session.store().entries();
    for (std::size_t i = before; i < entries.size(); ++i) {
      io::annotation_append(a.store, entries[i], w.ckpt.meta.model.T, w.ckpt.meta.model.D);
    }
    io::CheckpointMeta meta = w.ckpt.meta;
    meta.round = session.state().s;
    io::checkpoint_save(a.ckpt, session.params(), meta);
    const json rec = gw::round_record(session);
    if (!a.records.empty()) {
      io::record_append(a.records, cer::report_to_json(*session.state().report));
      io::record_append(a.records, rec);
    }
    rounds.push_back(rec);
  }
  print({{"rounds", rounds}});
  return 0;
}

int round_serve(const RoundArgs& a, Workspace& w) {
  gw::EngineOptions opts;
  opts.store_path = a.store;
  opts.checkpoint_path = a.ckpt;
  opts.checkpoint_meta = w.ckpt.meta;
  if (!a.records.empty()) opts.records_path = a.records;
  const int start = w.ckpt.meta.round;
  gw::Engine engine(make_session(w, a.seed), opts);
  gw::Server server(engine);
  const int port = server.bind(a.host, a.port);

  const gw::Response adv = engine.advance({{"P", a.P},
                                           {"K", a.K},
                                           {"F", a.F},
                                           {"inst_scorer", a.inst_scorer},
                                           {"feat_scorer", a.feat_scorer}});
  if (adv.status != 202) {
    std::cerr << adv.body.dump() << "\n";
    return 1;
  }
  std::cerr << "serving round " << start + 1 << " on http://" << a.host << ":" << port
            << " (submit masks to /api/annotations)\n";

  std::atomic<bool> finished = false;
  std::thread watcher([&] {
    while (!finished) {
      const json r = engine.get_round().body;
      const std::string job = r.at("job").at("state").get<std::string>();
      const bool closed = r.at("s").get<int>() == start + 1 && !r.at("open").get<bool>();
      if (job == "failed" || (closed && job != "running")) {
        finished = true;
        server.stop();
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
  });
  server.listen();
  finished = true;
  watcher.join();
  engine.wait_idle();
  print(engine.metrics().body);
  return 0;
}

int cmd_round(const RoundArgs& a) {
  if (a.rounds < 1) throw ValidationError("--rounds must be at least 1");
  Workspace w = open_workspace(a.ckpt, a.data, a.store);
  if (a.annotator == "oracle") return round_oracle(a, w);
  if (a.annotator == "serve") {
    if (a.rounds != 1) throw ValidationError("--annotator serve handles one round at a time");
    return round_serve(a, w);
  }
  throw ValidationError("unknown annotator '" + a.annotator + "'");
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, store, split = "test", records;
};

int cmd_eval(const EvalArgs& a) {
  Workspace w = open_workspace(a.ckpt, a.data, a.store);
  const Dataset* target = nullptr;
  if (a.split == "train") target = &w.split.train;
  if (a.split == "valid") target = &w.split.valid;
  if (a.split == "test") target = &w.split.test;
  if (target == nullptr) throw ValidationError("--split must be train, valid or test");
  const loop::Metrics m =
      loop::evaluate_model(w.ckpt.params, w.ckpt.meta.model, w.split.train, w.store, *target);
  json out{{"split", a.split},
           {"round", w.ckpt.meta.round},
           {"store_size", w.store.size()},
           {"metric", metrics_json(m)},
           {"params_hash", w.ckpt.params.digest()}};
  if (!a.records.empty()) {
    json hist = json::array();
    for (const json& r : io::record_read(a.records)) {
      if (r.value("kind", "") == "round_metrics") hist.push_back(r);
    }
    out["history"] = hist;
  }
  print(out);
  return 0;
}

// --- serve ------------------------------------------------------------------

struct ServeArgs {
  std::string ckpt, data, store, records, host = "127.0.0.1";
  int port = 8080;
  std::uint64_t seed = 0;
};

int cmd_serve(const ServeArgs& a) {
  Workspace w = open_workspace(a.ckpt, a.data, a.store);
  gw::EngineOptions opts;
  if (!a.store.empty()) opts.store_path = a.store;
  opts.checkpoint_path = a.ckpt;
  opts.checkpoint_meta = w.ckpt.meta;
  if (!a.records.empty()) opts.records_path = a.records;
  gw::Engine engine(make_session(w, a.seed), opts);
  gw::Server server(engine);
  const int port = server.bind(a.host, a.port);
  std::cerr << "listening on http://" << a.host << ":" << port << "\n";
  server.listen();
  return 0;
}

// --- check ------------------------------------------------------------------

struct CheckArgs {
  bool gradients = false, influence = false;
};

int cmd_check(const CheckArgs& a) {
  const bool all = !a.gradients && !a.influence;
  bool ok = true;
  json out = json::object();
  if (a.gradients || all) {
    const checks::GradientReport g = checks::gradient_suite();
    const bool pass = g.max_rel_error < 1e-4 && g.seconds < 10.0;
    ok = ok && pass;
    json cases = json::array();
    for (const auto& c : g.cases) {
      cases.push_back({{"seed", c.seed},
                       {"objective", c.objective},
                       {"max_rel_error", c.max_rel_error},
                       {"worst_segment", c.worst_segment}});
    }
    out["gradients"] = {{"pass", pass},
                        {"max_rel_error", g.max_rel_error},
                        {"seconds", g.seconds},
                        {"cases", cases}};
  }
  if (a.influence || all) {
    const checks::HvpReport h = checks::hvp_suite();
    const bool hvp_pass = h.hvp_vs_fd < 1e-3 && h.hvp_vs_exact < 1e-3 && h.cg_residual < 1e-2 &&
                          h.seconds < 10.0;
    const checks::InfluenceReport r = checks::influence_loo_suite();
    const bool loo_pass = r.spearman >= 0.7 && r.seconds < 120.0;
    ok = ok && hvp_pass && loo_pass;
    out["hvp"] = {{"pass", hvp_pass},
                  {"hvp_vs_fd", h.hvp_vs_fd},
                  {"hvp_vs_exact", h.hvp_vs_exact},
                  {"cg_residual", h.cg_residual},
                  {"cg_iterations", h.cg_iterations},
                  {"seconds", h.seconds}};
    out["influence_loo"] = {{"pass", loo_pass},
                            {"spearman", r.spearman},
                            {"pearson", r.pearson},
                            {"cg_converged", r.cg_converged},
                            {"seconds", r.seconds}};
  }
  out["pass"] = ok;
  print(out);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive attention learning engine"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset with known relevance");
  g->add_option("--out", gen.out, "Output JSONL path")->required();
  g->add_option("--n", gen.spec.N, "Number of instances")->capture_default_str();
  g->add_option("--t", gen.spec.T, "Timesteps")->capture_default_str();
  g->add_option("--d", gen.spec.D, "Features per timestep")->capture_default_str();
  g->add_option("--task", gen.task, "binary | multiclass | regression")->capture_default_str();
  g->add_option("--classes", gen.spec.classes, "Classes for multiclass")->capture_default_str();
  g->add_option("--sparsity", gen.spec.sparsity, "Number of relevant cells")->capture_default_str();
  g->add_option("--noise", gen.spec.noise_std, "Label noise std")->capture_default_str();
  g->add_option("--seed", gen.spec.seed, "Random seed")->capture_default_str();

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Train the attention model on the training split");
  p->add_option("--data", pre.data, "Dataset JSONL")->required();
  p->add_option("--config", pre.config, "JSON config (model, pretrain, nap, task, split_seed)");
  p->add_option("--out", pre.out, "Checkpoint path")->required();

  RoundArgs rnd;
  auto* r = app.add_subcommand("round", "Run annotation rounds from a checkpoint");
  r->add_option("--ckpt", rnd.ckpt, "Checkpoint (rewritten after each round)")->required();
  r->add_option("--data", rnd.data, "Dataset JSONL")->required();
  r->add_option("--store", rnd.store, "Annotation store JSONL (appended)")->required();
  r->add_option("--inst-scorer", rnd.inst_scorer, "influence | uncertainty | random")
      ->capture_default_str();
  r->add_option("--feat-scorer", rnd.feat_scorer,
                "influence | uncertainty | counterfactual | random")
      ->capture_default_str();
  r->add_option("--p", rnd.P, "Validation losers considered")->capture_default_str();
  r->add_option("--k", rnd.K, "Instances per round")->capture_default_str();
  r->add_option("--f", rnd.F, "Cells per instance")->capture_default_str();
  r->add_option("--annotator", rnd.annotator, "oracle | serve")->capture_default_str();
  r->add_option("--oracle-noise", rnd.oracle_noise, "Oracle flip rate")->capture_default_str();
  r->add_option("--oracle-idk", rnd.oracle_idk, "Oracle abstention rate")->capture_default_str();
  r->add_flag("--full-grid", rnd.full_grid, "Oracle labels every cell, not just requested ones");
  r->add_option("--rounds", rnd.rounds, "Rounds to run (oracle only)")->capture_default_str();
  r->add_option("--records", rnd.records, "Metric record stream to append");
  r->add_option("--seed", rnd.seed, "Random seed")->capture_default_str();
  r->add_option("--host", rnd.host, "Bind address (serve)")->capture_default_str();
  r->add_option("--port", rnd.port, "Port (serve)")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint under the annotation store");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset JSONL")->required();
  e->add_option("--store", ev.store, "Annotation store JSONL");
  e->add_option("--split", ev.split, "train | valid | test")->capture_default_str();
  e->add_option("--records", ev.records, "Metric record stream to include");

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "Serve the JSON API");
  s->add_option("--ckpt", sv.ckpt, "Checkpoint (rewritten after each round)")->required();
  s->add_option("--data", sv.data, "Dataset JSONL")->required();
  s->add_option("--store", sv.store, "Annotation store JSONL");
  s->add_option("--records", sv.records, "Metric record stream");
  s->add_option("--host", sv.host, "Bind address")->capture_default_str();
  s->add_option("--port", sv.port, "Port (0 picks a free one)")->capture_default_str();
  s->add_option("--seed", sv.seed, "Random seed")->capture_default_str();

  CheckArgs ck;
  auto* c = app.add_subcommand("check", "Run the numerical oracle suites");
  c->add_flag("--gradients", ck.gradients, "Autodiff vs finite differences");
  c->add_flag("--influence", ck.influence, "HVP/CG fidelity and influence vs leave-one-out");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen(gen);
    if (*p) return cmd_pretrain(pre);
    if (*r) return cmd_round(rnd);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_serve(sv);
    if (*c) return cmd_check(ck);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
