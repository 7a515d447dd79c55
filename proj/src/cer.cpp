// SPDX-License-Identifier: Apache-2.0
#include "ial/cer.hpp"

#include "ial/errors.hpp"
#include "ial/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ial::cer {

namespace {

struct ScorerName {
  Scorer scorer;
  std::string_view name;
};

constexpr ScorerName kScorerNames[] = {
    {Scorer::inst_influence, "inst-influence"},
    {Scorer::inst_uncertainty, "inst-uncertainty"},
    {Scorer::feat_influence, "feat-influence"},
    {Scorer::feat_uncertainty, "feat-uncertainty"},
    {Scorer::feat_counterfactual, "feat-counterfactual"},
    {Scorer::inst_random, "inst-random"},
    {Scorer::feat_random, "feat-random"},
};

// Shifted by the first draw: identical draws give exactly zero.
ad::Vector sample_variance(const std::vector<ad::Vector>& draws) {
  const auto n = static_cast<double>(draws.size());
  const ad::Vector& ref = draws.front();
  ad::Vector sum = ad::Vector::Zero(ref.size());
  ad::Vector sq = ad::Vector::Zero(ref.size());
  for (const auto& d : draws) {
    const ad::Vector dev = d - ref;
    sum += dev;
    sq += dev.cwiseAbs2();
  }
  return ((sq - sum.cwiseAbs2() / n) / (n - 1.0)).cwiseMax(0.0);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

std::string_view to_string(Scorer s) {
  for (const auto& e : kScorerNames) {
    if (e.scorer == s) return e.name;
  }
  return "unknown";
}

Scorer parse_scorer(std::string_view name) {
  for (const auto& e : kScorerNames) {
    if (e.name == name) return e.scorer;
  }
  throw ValidationError("unknown scorer '" + std::string(name) + "'");
}

Scorer parse_scorer_for(std::string_view name, bool instance) {
  const std::string full = name.find('-') == std::string_view::npos
                               ? std::string(instance ? "inst-" : "feat-") + std::string(name)
                               : std::string(name);
  const Scorer s = parse_scorer(full);
  if (is_instance_scorer(s) != instance) {
    throw ValidationError("'" + std::string(name) + "' is not " +
                          (instance ? "an instance" : "a feature") + " scorer");
  }
  return s;
}

bool is_instance_scorer(Scorer s) {
  return s == Scorer::inst_influence || s == Scorer::inst_uncertainty || s == Scorer::inst_random;
}

ad::Matrix mean_latent(const Dataset& pool, const nap::AnnotationStore& store,
                       const ParamVector& params, const ModelConfig& cfg) {
  return nap::summarize_store(pool, store, params, cfg, nap::LatentMode::mean).z;
}

std::vector<double> per_instance_loss(const Dataset& ds, const ParamVector& params,
                                      const ModelConfig& cfg, const ad::Matrix* z) {
  const auto batch = model::pointers(ds);
  if (batch.empty()) return {};
  const model::BatchPrediction pred = model::infer_batch(params, cfg, batch, z);
  std::vector<double> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ad::Vector y_hat = pred.y_hat.row(static_cast<Eigen::Index>(i)).transpose();
    out.push_back(model::task_loss(y_hat, batch[i]->y, cfg.task));
  }
  return out;
}

std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

std::vector<std::size_t> select_validation_subset(const std::vector<double>& losses, int P) {
  if (losses.empty()) {
    throw PreconditionError("validation set is empty");
  }
  if (P < 1 || static_cast<std::size_t>(P) > losses.size()) {
    throw PreconditionError("P must lie in [1, " + std::to_string(losses.size()) + "], got " +
                            std::to_string(P));
  }
  std::vector<std::size_t> order = descending_order(losses);
  order.resize(static_cast<std::size_t>(P));
  return order;
}

std::vector<std::string> select_validation_subset(const Dataset& valid, const ParamVector& params,
                                                  const ModelConfig& cfg, const ad::Matrix* z,
                                                  int P) {
  if (valid.empty()) {
    throw PreconditionError("validation set is empty");
  }
  std::vector<std::string> ids;
  for (std::size_t i : select_validation_subset(per_instance_loss(valid, params, cfg, z), P)) {
    ids.push_back(valid.instances[i].id);
  }
  return ids;
}

BatchLoss model_batch_loss(const ModelConfig& cfg, const ad::Matrix* z) {
  std::optional<ad::Matrix> zc;
  if (z != nullptr) zc = *z;
  return [cfg, zc](const BoundParams& p, std::span<const TimeSeriesInstance* const> batch) {
    model::LatentRows rows;
    if (zc) {
      for (Eigen::Index t = 0; t < zc->rows(); ++t) {
        rows.push_back(p.tape().constant(zc->row(t)));
      }
    }
    const model::BatchOutput out = model::forward_batch(p, cfg, batch, zc ? &rows : nullptr);
    return model::task_loss_batch(out.logits, model::stack_labels(batch), cfg.task);
  };
}

InfluenceScorer::InfluenceScorer(InfluenceProblem problem,
                                 std::span<const TimeSeriesInstance* const> validation)
    : problem_(std::move(problem)), mask_(problem_.params.trainable_mask()) {
  if (problem_.train.empty()) {
    throw PreconditionError("influence needs a nonempty training set");
  }
  ad::Vector g_val = ad::Vector::Zero(static_cast<Eigen::Index>(problem_.params.size()));
  for (const TimeSeriesInstance* v : validation) {
    g_val += grad_of(*v);
  }
  const BatchLoss loss = problem_.loss;
  const auto train = problem_.train;
  const ParamVector& theta = problem_.params;
  const double wd = problem_.weight_decay;
  const ScalarFunction objective = [loss, train, &theta, wd](const BoundParams& p) {
    ad::Var l = loss(p, train);
    if (wd > 0.0) l = l + weight_decay_term(p, theta, wd);
    return l;
  };
  solve_ = cg_solve([&](const ad::Vector& v) { return hvp(objective, theta, v); }, g_val,
                    problem_.cg);
}

ad::Vector InfluenceScorer::grad_of(const TimeSeriesInstance& u) const {
  const TimeSeriesInstance* one[] = {&u};
  const BatchLoss& loss = problem_.loss;
  const ScalarFunction f = [&](const BoundParams& p) {
    return loss(p, std::span<const TimeSeriesInstance* const>(one, 1));
  };
  return gradient(f, problem_.params).flatten().cwiseProduct(mask_);
}

double InfluenceScorer::score(const TimeSeriesInstance& u) const {
  return -solve_.x.dot(grad_of(u));
}

ScoreRecord InfluenceScorer::record(const TimeSeriesInstance& u) const {
  ScoreRecord r{u.id, std::nullopt, Scorer::inst_influence, score(u), {}};
  if (!solve_.converged) r.flags.emplace_back(flag::cg_not_converged);
  return r;
}

ScoreRecord InfluenceScorer::feature_record(const TimeSeriesInstance& u, int t, int d,
                                            const io::FeatureStats& stats) const {
  if (t < 0 || t >= u.x.rows() || d < 0 || d >= u.x.cols()) {
    throw ValidationError("cell (" + std::to_string(t) + "," + std::to_string(d) +
                          ") out of range");
  }
  ScoreRecord r{u.id, std::make_pair(t, d), Scorer::feat_influence, 0.0, {}};
  const double sd = stats.std(d);
  if (sd == 0.0) {
    r.flags.emplace_back(flag::constant_feature);
    return r;
  }
  const double base = score(u);
  double acc = 0.0;
  for (const double k : {-2.0, -1.0, 1.0, 2.0}) {
    TimeSeriesInstance pert = u;
    pert.x(t, d) += k * sd;
    acc += std::abs(score(pert) - base);
  }
  r.value = acc / 4.0;
  if (!solve_.converged) r.flags.emplace_back(flag::cg_not_converged);
  return r;
}

ad::Matrix InfluenceScorer::feature_grid(const TimeSeriesInstance& u,
                                         const io::FeatureStats& stats) const {
  ad::Matrix out = ad::Matrix::Zero(u.x.rows(), u.x.cols());
  const double base = score(u);
  for (Eigen::Index t = 0; t < u.x.rows(); ++t) {
    for (Eigen::Index d = 0; d < u.x.cols(); ++d) {
      const double sd = stats.std(d);
      if (sd == 0.0) continue;
      double acc = 0.0;
      for (const double k : {-2.0, -1.0, 1.0, 2.0}) {
        TimeSeriesInstance pert = u;
        pert.x(t, d) += k * sd;
        acc += std::abs(score(pert) - base);
      }
      out(t, d) = acc / 4.0;
    }
  }
  return out;
}

std::vector<double> instance_uncertainty(const Dataset& ds, const ad::Matrix& mu,
                                         const ad::Matrix& sigma, const ParamVector& params,
                                         const ModelConfig& cfg, int S, std::uint64_t seed) {
  if (S < 2) {
    throw PreconditionError("uncertainty needs S >= 2 samples");
  }
  const auto batch = model::pointers(ds);
  std::vector<std::vector<ad::Vector>> draws(batch.size());
  for (const ad::Matrix& z : nap::sample_latents(mu, sigma, S, seed)) {
    const model::BatchPrediction pred = model::infer_batch(params, cfg, batch, &z);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      draws[i].push_back(pred.y_hat.row(static_cast<Eigen::Index>(i)).transpose());
    }
  }
  std::vector<double> out;
  out.reserve(batch.size());
  for (const auto& d : draws) {
    out.push_back(sample_variance(d).mean());
  }
  return out;
}

ad::Matrix feature_uncertainty(const TimeSeriesInstance& u, const ad::Matrix& mu,
                               const ad::Matrix& sigma, const ParamVector& params,
                               const ModelConfig& cfg, int S, std::uint64_t seed) {
  if (S < 2) {
    throw PreconditionError("uncertainty needs S >= 2 samples");
  }
  const ad::Matrix v = model::embed_inputs(u.x, params, cfg);
  std::vector<ad::Vector> draws;
  for (const ad::Matrix& z : nap::sample_latents(mu, sigma, S, seed)) {
    const AttentionMap attn = model::forward_attention(v, params, cfg, &z);
    ad::Matrix eff = attn.gamma;
    eff.array().colwise() *= attn.beta.array();
    draws.push_back(Eigen::Map<const ad::Vector>(eff.data(), eff.size()));
  }
  const ad::Vector var = sample_variance(draws);
  return Eigen::Map<const ad::Matrix>(var.data(), cfg.T, cfg.D);
}

Counterfactual counterfactual_score(const AttentionMap& attn, const ParamVector& params,
                                    const ModelConfig& cfg, int t, int d) {
  const std::pair<int, int> off[] = {{t, d}};
  Counterfactual c;
  c.delta = model::predict(attn, params, cfg) - model::predict_with_override(attn, params, cfg, off);
  c.score = c.delta.norm();
  return c;
}

Counterfactual counterfactual_score(const TimeSeriesInstance& u, const ParamVector& params,
                                    const ModelConfig& cfg, const ad::Matrix* z, int t, int d) {
  const AttentionMap attn =
      model::forward_attention(model::embed_inputs(u.x, params, cfg), params, cfg, z);
  return counterfactual_score(attn, params, cfg, t, d);
}

ad::Matrix counterfactual_grid(const TimeSeriesInstance& u, const ParamVector& params,
                               const ModelConfig& cfg, const ad::Matrix* z) {
  const AttentionMap attn =
      model::forward_attention(model::embed_inputs(u.x, params, cfg), params, cfg, z);
  const ad::Vector base = model::predict(attn, params, cfg);
  ad::Matrix out(cfg.T, cfg.D);
  for (int t = 0; t < cfg.T; ++t) {
    for (int d = 0; d < cfg.D; ++d) {
      const std::pair<int, int> off[] = {{t, d}};
      out(t, d) = (base - model::predict_with_override(attn, params, cfg, off)).norm();
    }
  }
  return out;
}

std::vector<double> random_instance_scores(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(mix(seed, 0x1157));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = u(rng);
  return out;
}

ad::Matrix random_feature_scores(int T, int D, std::uint64_t seed, std::size_t instance_index) {
  std::mt19937_64 rng(mix(seed, 0xFEA7ULL + (static_cast<std::uint64_t>(instance_index) << 16)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ad::Matrix out(T, D);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = u(rng);
  return out;
}

io::json report_to_json(const RerankReport& r) {
  io::json entries = io::json::array();
  for (const auto& e : r.entries) {
    io::json feats = io::json::array();
    for (const auto& f : e.features) {
      feats.push_back({{"t", f.t}, {"d", f.d}, {"score", f.score}, {"flags", f.flags}});
    }
    entries.push_back({{"instance_id", e.instance_id},
                       {"index", e.index},
                       {"score", e.score},
                       {"flags", e.flags},
                       {"features", std::move(feats)}});
  }
  return {{"kind", "rerank_report"},
          {"round", r.round},
          {"P", r.P},
          {"K", r.K},
          {"F", r.F},
          {"inst_scorer", std::string(to_string(r.inst_scorer))},
          {"feat_scorer", std::string(to_string(r.feat_scorer))},
          {"seed", r.seed},
          {"validation_ids", r.validation_ids},
          {"entries", std::move(entries)},
          {"warnings", r.warnings}};
}

RerankReport report_from_json(const io::json& j) {
  RerankReport r;
  try {
    r.round = j.at("round").get<int>();
    r.P = j.at("P").get<int>();
    r.K = j.at("K").get<int>();
    r.F = j.at("F").get<int>();
    r.inst_scorer = parse_scorer(j.at("inst_scorer").get<std::string>());
    r.feat_scorer = parse_scorer(j.at("feat_scorer").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.validation_ids = j.at("validation_ids").get<std::vector<std::string>>();
    r.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& ej : j.at("entries")) {
      RerankEntry e;
      e.instance_id = ej.at("instance_id").get<std::string>();
      e.index = ej.at("index").get<std::size_t>();
      e.score = ej.at("score").get<double>();
      e.flags = ej.value("flags", std::vector<std::string>{});
      for (const auto& fj : ej.at("features")) {
        e.features.push_back({fj.at("t").get<int>(), fj.at("d").get<int>(),
                              fj.at("score").get<double>(),
                              fj.value("flags", std::vector<std::string>{})});
      }
      r.entries.push_back(std::move(e));
    }
  } catch (const io::json::exception& e) {
    throw SchemaError(std::string("rerank report: ") + e.what());
  }
  return r;
}

RerankReport rerank(const Dataset& train, const Dataset& valid, const nap::AnnotationStore& store,
                    const ParamVector& params, const ModelConfig& cfg, const CerConfig& config,
                    int round) {
  if (!is_instance_scorer(config.inst_scorer) || is_instance_scorer(config.feat_scorer)) {
    throw PreconditionError("rerank needs one instance scorer and one feature scorer");
  }
  if (config.K < 1 || static_cast<std::size_t>(config.K) > train.size()) {
    throw PreconditionError("K must lie in [1, N]");
  }
  if (config.F < 1 || config.F > cfg.T * cfg.D) {
    throw PreconditionError("F must lie in [1, T*D]");
  }

  RerankReport report;
  report.round = round;
  report.P = config.P;
  report.K = config.K;
  report.F = config.F;
  report.inst_scorer = config.inst_scorer;
  report.feat_scorer = config.feat_scorer;
  report.seed = config.seed;

  const nap::LatentSummary latent =
      nap::summarize_store(train, store, params, cfg, nap::LatentMode::mean);
  const ad::Matrix& z = latent.z;

  const std::vector<std::size_t> val_idx =
      select_validation_subset(per_instance_loss(valid, params, cfg, &z), config.P);
  std::vector<const TimeSeriesInstance*> val_ptrs;
  for (std::size_t i : val_idx) {
    report.validation_ids.push_back(valid.instances[i].id);
    val_ptrs.push_back(&valid.instances[i]);
  }

  const bool needs_influence =
      config.inst_scorer == Scorer::inst_influence || config.feat_scorer == Scorer::feat_influence;
  std::optional<InfluenceScorer> influence;
  if (needs_influence) {
    InfluenceProblem prob;
    prob.params = params;
    prob.params.set_trainable([](const std::string& n) { return n.rfind("nap.", 0) != 0; });
    prob.loss = model_batch_loss(cfg, &z);
    prob.train = model::pointers(train);
    prob.weight_decay = config.weight_decay;
    prob.cg = config.cg;
    influence.emplace(std::move(prob), val_ptrs);
    if (!influence->converged()) {
      report.warnings.emplace_back(std::string(flag::cg_not_converged) + ": relative residual " +
                                   std::to_string(influence->solve().residual));
    }
  }

  std::vector<double> inst_scores;
  std::vector<std::string> inst_flags;
  switch (config.inst_scorer) {
    case Scorer::inst_influence:
      for (const auto& u : train.instances) inst_scores.push_back(influence->score(u));
      if (!influence->converged()) inst_flags.emplace_back(flag::cg_not_converged);
      break;
    case Scorer::inst_uncertainty:
      inst_scores = instance_uncertainty(train, latent.mu, latent.sigma, params, cfg,
                                         config.mc_samples, config.seed);
      break;
    default:
      inst_scores = random_instance_scores(train.size(), config.seed);
      break;
  }
  for (std::size_t i = 0; i < inst_scores.size(); ++i) {
    if (!std::isfinite(inst_scores[i])) {
      throw NonFiniteError("instance score of '" + train.instances[i].id + "' is not finite");
    }
  }

  std::optional<io::FeatureStats> stats;
  if (config.feat_scorer == Scorer::feat_influence) stats = io::feature_stats(train);

  for (std::size_t i : descending_order(inst_scores)) {
    if (report.entries.size() == static_cast<std::size_t>(config.K)) break;
    const TimeSeriesInstance& u = train.instances[i];
    if (config.exclude_annotated && store.contains_instance(u.id)) continue;

    ad::Matrix grid;
    std::vector<std::string> feat_flags;
    switch (config.feat_scorer) {
      case Scorer::feat_influence:
        grid = influence->feature_grid(u, *stats);
        if (!influence->converged()) feat_flags.emplace_back(flag::cg_not_converged);
        break;
      case Scorer::feat_uncertainty:
        grid = feature_uncertainty(u, latent.mu, latent.sigma, params, cfg, config.mc_samples,
                                   config.seed);
        break;
      case Scorer::feat_counterfactual:
        grid = counterfactual_grid(u, params, cfg, &z);
        break;
      default:
        grid = random_feature_scores(cfg.T, cfg.D, config.seed, i);
        break;
    }
    if (!grid.allFinite()) {
      throw NonFiniteError("feature scores of '" + u.id + "' are not finite");
    }

    RerankEntry entry{u.id, i, inst_scores[i], inst_flags, {}};
    const std::vector<double> cells(grid.data(), grid.data() + grid.size());
    for (std::size_t c : descending_order(cells)) {
      if (entry.features.size() == static_cast<std::size_t>(config.F)) break;
      const int t = static_cast<int>(c) / cfg.D;
      const int d = static_cast<int>(c) % cfg.D;
      std::vector<std::string> fl = feat_flags;
      if (stats && stats->std(d) == 0.0) fl.emplace_back(flag::constant_feature);
      entry.features.push_back({t, d, cells[c], std::move(fl)});
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ial::cer
