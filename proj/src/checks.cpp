// SPDX-License-Identifier: Apache-2.0
#include "ial/checks.hpp"

#include "ial/errors.hpp"
#include "ial/model.hpp"
#include "ial/nap.hpp"
#include "ial/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace ial::checks {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TimeSeriesInstance random_instance(const std::string& id, int T, int D, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  TimeSeriesInstance inst;
  inst.id = id;
  inst.x.resize(T, D);
  for (Eigen::Index i = 0; i < inst.x.size(); ++i) inst.x.data()[i] = normal(rng);
  inst.y = ad::Vector::Constant(1, (rng() & 1U) ? 1.0 : 0.0);
  return inst;
}

AttentionMask random_mask(const std::string& id, int T, int D, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tern(-1, 1);
  AttentionMask m = AttentionMask::unknown(id, T, D);
  for (Eigen::Index i = 0; i < m.feature_mask.size(); ++i) m.feature_mask.data()[i] = tern(rng);
  for (Eigen::Index t = 0; t < m.time_mask.size(); ++t) m.time_mask(t) = tern(rng);
  return m;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

}  // namespace

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ShapeError("pearson needs two equal-length samples of size >= 2");
  }
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

GradientReport gradient_suite(int models, double h) {
  const auto t0 = Clock::now();
  GradientReport report;
  for (int m = 0; m < models; ++m) {
    const auto seed = static_cast<std::uint64_t>(m);
    ModelConfig cfg;
    cfg.T = 4;
    cfg.D = 6;
    cfg.hidden_beta = 8;
    cfg.hidden_gamma = 8;
    cfg.latent_dim = 4;
    cfg.r_dim = 8;
    ParamVector params = model::init_params(cfg, seed);
    std::mt19937_64 rng(seed + 1000);
    Dataset ds;
    for (int i = 0; i < 5; ++i) {
      ds.instances.push_back(random_instance("g" + std::to_string(i), cfg.T, cfg.D, rng));
    }
    const auto batch = model::pointers(ds);
    std::vector<AttentionMask> masks;
    for (int i = 0; i < 3; ++i) masks.push_back(random_mask(ds.instances[i].id, cfg.T, cfg.D, rng));
    const std::vector<nap::Annotated> context = nap::resolve(ds, masks);
    std::normal_distribution<double> normal(0.0, 1.0);
    ad::Matrix eps(cfg.T, cfg.latent_dim);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);

    const ScalarFunction task = [&](const BoundParams& p) {
      return model::task_loss_batch(model::forward_batch(p, cfg, batch, nullptr).logits,
                                    model::stack_labels(batch), cfg.task);
    };
    const ScalarFunction napf = [&](const BoundParams& p) {
      const nap::NapLossWeights w;
      return nap::nap_loss_on_tape(p, cfg, batch, context, context, w, nap::LatentMode::sample,
                                   &eps)
          .total;
    };
    for (const auto& [name, f] : {std::pair{"task", task}, std::pair{"nap", napf}}) {
      const FiniteDiffReport fd = finite_diff_check(f, params, h);
      GradientCase c{seed, name, fd.max_rel_error, {}};
      for (const auto& s : fd.segments) {
        if (s.max_rel_error == fd.max_rel_error) c.worst_segment = s.name;
      }
      report.max_rel_error = std::max(report.max_rel_error, fd.max_rel_error);
      report.cases.push_back(std::move(c));
    }
  }
  report.seconds = since(t0);
  return report;
}

LogisticData make_logistic_data(int n_train, int n_valid, int D, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ad::Vector w(D);
  for (int d = 0; d < D; ++d) w(d) = normal(rng);
  auto draw = [&](const std::string& id) {
    TimeSeriesInstance inst;
    inst.id = id;
    inst.x.resize(1, D);
    for (int d = 0; d < D; ++d) inst.x(0, d) = normal(rng);
    const double p = 1.0 / (1.0 + std::exp(-(inst.x.row(0).dot(w.transpose()))));
    inst.y = ad::Vector::Constant(1, u01(rng) < p ? 1.0 : 0.0);
    return inst;
  };
  LogisticData out;
  out.D = D;
  for (int i = 0; i < n_train; ++i) out.train.instances.push_back(draw("t" + std::to_string(i)));
  for (int i = 0; i < n_valid; ++i) out.valid.instances.push_back(draw("v" + std::to_string(i)));
  return out;
}

ParamVector logistic_init(int D) {
  ParamVector p;
  p.add("b", ad::Matrix::Zero(1, 1));
  p.add("w", ad::Matrix::Zero(D, 1));
  return p;
}

cer::BatchLoss logistic_loss() {
  return [](const BoundParams& p, std::span<const TimeSeriesInstance* const> batch) {
    ad::Matrix X(static_cast<Eigen::Index>(batch.size()), batch.front()->x.cols());
    for (std::size_t i = 0; i < batch.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = batch[i]->x.row(0);
    const ad::Var logits = ad::add_row(ad::matmul(p.tape().constant(X), p["w"]), p["b"]);
    return model::task_loss_batch(logits, model::stack_labels(batch), Task::binary);
  };
}

ScalarFunction logistic_objective(const Dataset& train, double weight_decay) {
  const auto batch = model::pointers(train);
  const cer::BatchLoss loss = logistic_loss();
  return [batch, loss, weight_decay](const BoundParams& p) {
    ad::Var l = loss(p, batch);
    if (weight_decay > 0.0) {
      l = l + (0.5 * weight_decay) * (ad::sum(ad::square(p["w"])) + ad::sum(ad::square(p["b"])));
    }
    return l;
  };
}

ad::Matrix logistic_hessian(const Dataset& train, const ParamVector& theta, double weight_decay) {
  // Flattened order follows the ParamVector: b first, then w.
  const int D = static_cast<int>(theta.at("w").rows());
  ad::Matrix H = ad::Matrix::Zero(D + 1, D + 1);
  for (const auto& inst : train.instances) {
    ad::Vector xt(D + 1);
    xt(0) = 1.0;
    xt.tail(D) = inst.x.row(0).transpose();
    const double z = xt.tail(D).dot(theta.at("w").col(0)) + theta.at("b")(0, 0);
    const double p = 1.0 / (1.0 + std::exp(-z));
    H += p * (1.0 - p) * xt * xt.transpose();
  }
  H /= static_cast<double>(train.size());
  H.diagonal().array() += weight_decay;
  return H;
}

ParamVector logistic_fit(const Dataset& train, double weight_decay, ParamVector theta, double tol) {
  const ScalarFunction f = logistic_objective(train, weight_decay);
  for (int it = 0; it < 100; ++it) {
    const ad::Vector g = gradient(f, theta).flatten();
    if (g.norm() < tol) break;
    const ad::Matrix H = logistic_hessian(train, theta, weight_decay);
    theta.unflatten(theta.flatten() - H.ldlt().solve(g));
  }
  return theta;
}

HvpReport hvp_suite(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const double wd = 0.01;
  const LogisticData data = make_logistic_data(60, 0, 6, seed);
  const ScalarFunction f = logistic_objective(data.train, wd);
  ParamVector theta = logistic_init(data.D);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& s : theta.segments()) {
    for (Eigen::Index i = 0; i < s.values.size(); ++i) s.values.data()[i] = 0.5 * normal(rng);
  }
  HvpReport r;
  const ad::Matrix H = logistic_hessian(data.train, theta, wd);
  const auto n = static_cast<Eigen::Index>(theta.size());
  for (int k = 0; k < 5; ++k) {
    ad::Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
    const ad::Vector hv = hvp(f, theta, v);
    const ad::Vector exact = H * v;
    const double e = 1e-4;
    const ad::Vector fd = (gradient(f, theta.with_values(theta.flatten() + e * v)).flatten() -
                           gradient(f, theta.with_values(theta.flatten() - e * v)).flatten()) /
                          (2.0 * e);
    r.hvp_vs_exact = std::max(r.hvp_vs_exact, (hv - exact).norm() / exact.norm());
    r.hvp_vs_fd = std::max(r.hvp_vs_fd, (hv - fd).norm() / fd.norm());
  }
  ad::Vector b(n);
  for (Eigen::Index i = 0; i < n; ++i) b(i) = normal(rng);
  const CgOptions opts;
  const CgResult cg = cg_solve([&](const ad::Vector& v) { return hvp(f, theta, v); }, b, opts);
  const ad::Matrix A = H + opts.damping * ad::Matrix::Identity(n, n);
  r.cg_residual = (A * cg.x - b).norm() / b.norm();
  r.cg_iterations = cg.iterations;
  r.cg_converged = cg.converged;
  r.seconds = since(t0);
  return r;
}

InfluenceReport influence_loo_suite(std::uint64_t seed, int n_train, int n_valid, int D,
                                    double weight_decay) {
  const auto t0 = Clock::now();
  const LogisticData data = make_logistic_data(n_train, n_valid, D, seed);
  const ParamVector theta = logistic_fit(data.train, weight_decay, logistic_init(D));
  const auto valid = model::pointers(data.valid);
  const cer::BatchLoss loss = logistic_loss();
  const auto valid_loss = [&](const ParamVector& p) {
    const ScalarFunction f = [&](const BoundParams& bp) { return loss(bp, valid); };
    return evaluate(f, p) * static_cast<double>(valid.size());
  };
  const double base = valid_loss(theta);

  cer::InfluenceProblem prob;
  prob.params = theta;
  prob.loss = loss;
  prob.train = model::pointers(data.train);
  prob.weight_decay = weight_decay;
  const cer::InfluenceScorer scorer(std::move(prob), valid);

  InfluenceReport r;
  r.cg_converged = scorer.converged();
  std::vector<double> predicted;
  for (int i = 0; i < n_train; ++i) {
    r.influence.push_back(scorer.score(data.train.instances[static_cast<std::size_t>(i)]));
    Dataset minus;
    for (int j = 0; j < n_train; ++j) {
      if (j != i) minus.instances.push_back(data.train.instances[static_cast<std::size_t>(j)]);
    }
    const ParamVector refit = logistic_fit(minus, weight_decay, theta);
    r.loo_delta.push_back(valid_loss(refit) - base);
    predicted.push_back(-r.influence.back() / static_cast<double>(n_train));
  }
  std::vector<double> neg_delta;
  for (double d : r.loo_delta) neg_delta.push_back(-d);
  r.spearman = spearman(r.influence, neg_delta);
  r.pearson = pearson(predicted, r.loo_delta);
  r.seconds = since(t0);
  return r;
}

}  // namespace ial::checks
