// SPDX-License-Identifier: Apache-2.0
#include "ial/cer.hpp"
#include "ial/checks.hpp"
#include "ial/errors.hpp"
#include "ial/ial_loop.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace ial;
using ial::testing::random_matrix;
using ial::testing::toy_config;
using ial::testing::toy_dataset;

namespace {

// Mean squared error of a linear model y = x w + b on T = 1 instances.
cer::BatchLoss linear_mse() {
  return [](const BoundParams& p, std::span<const TimeSeriesInstance* const> batch) {
    ad::Matrix X(static_cast<Eigen::Index>(batch.size()), batch.front()->x.cols());
    ad::Matrix y(static_cast<Eigen::Index>(batch.size()), 1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      X.row(static_cast<Eigen::Index>(i)) = batch[i]->x.row(0);
      y(static_cast<Eigen::Index>(i), 0) = batch[i]->y(0);
    }
    auto pred = ad::add_row(ad::matmul(p.tape().constant(X), p["w"]), p["b"]);
    return ad::mean(ad::square(pred - p.tape().constant(y)));
  };
}

double val_loss(const Dataset& valid, const ParamVector& theta) {
  const auto ptrs = model::pointers(valid);
  const auto loss = checks::logistic_loss();
  return evaluate([&](const BoundParams& p) { return loss(p, ptrs); }, theta) * static_cast<double>(valid.size());
}

struct Trained {
  Dataset train, valid, test;
  ModelConfig cfg;
  ParamVector params;
};

Trained small_trained(std::uint64_t seed) {
  Trained t;
  const Dataset ds = toy_dataset(120, 4, 5, seed);
  auto split = io::split_dataset(ds, seed);
  t.train = std::move(split.train);
  t.valid = std::move(split.valid);
  t.test = std::move(split.test);
  t.cfg = toy_config(4, 5);
  loop::PretrainConfig pc;
  pc.max_epochs = 15;
  pc.seed = seed;
  t.params = loop::pretrain(t.train, &t.valid, t.cfg, pc).params;
  return t;
}

}  // namespace

TEST_SUITE("scorer names") {
  TEST_CASE("round trip and level checks") {
    for (auto s : {cer::Scorer::inst_influence, cer::Scorer::inst_uncertainty, cer::Scorer::feat_influence,
                   cer::Scorer::feat_uncertainty, cer::Scorer::feat_counterfactual, cer::Scorer::inst_random,
                   cer::Scorer::feat_random}) {
      CHECK(cer::parse_scorer(cer::to_string(s)) == s);
    }
    CHECK(cer::parse_scorer_for("uncertainty", true) == cer::Scorer::inst_uncertainty);
    CHECK(cer::parse_scorer_for("uncertainty", false) == cer::Scorer::feat_uncertainty);
    CHECK(cer::parse_scorer_for("random", false) == cer::Scorer::feat_random);
    CHECK_THROWS_AS(cer::parse_scorer_for("counterfactual", true), ValidationError);
    CHECK_THROWS_AS(cer::parse_scorer_for("inst-influence", false), ValidationError);
    CHECK_THROWS(cer::parse_scorer("bogus"));
  }
}

TEST_SUITE("select_validation_subset") {
  TEST_CASE("P = M returns every index sorted; ties by index") {
    const std::vector<double> losses = {0.3, 0.9, 0.3, 0.1, 0.9};
    const auto all = cer::select_validation_subset(losses, 5);
    CHECK(all == std::vector<std::size_t>{1, 4, 0, 2, 3});
    CHECK(cer::select_validation_subset(losses, 1) == std::vector<std::size_t>{1});
  }

  TEST_CASE("matches an exhaustive sort") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> coarse(0, 4);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> losses(10);
      for (auto& l : losses) l = coarse(rng) * 0.25;
      std::vector<std::size_t> oracle(10);
      std::iota(oracle.begin(), oracle.end(), 0);
      // Insertion sort by (loss desc, index asc).
      for (std::size_t i = 1; i < oracle.size(); ++i)
        for (std::size_t j = i; j > 0; --j) {
          const auto a = oracle[j - 1], b = oracle[j];
          if (losses[b] > losses[a] || (losses[b] == losses[a] && b < a)) std::swap(oracle[j - 1], oracle[j]);
        }
      const auto got = cer::select_validation_subset(losses, 6);
      CHECK(got == std::vector<std::size_t>(oracle.begin(), oracle.begin() + 6));
    }
  }

  TEST_CASE("precondition errors") {
    CHECK_THROWS_AS(cer::select_validation_subset(std::vector<double>{}, 1), PreconditionError);
    CHECK_THROWS_AS(cer::select_validation_subset(std::vector<double>{1.0, 2.0}, 3), PreconditionError);
    CHECK_THROWS_AS(cer::select_validation_subset(std::vector<double>{1.0, 2.0}, 0), PreconditionError);
  }

  TEST_CASE("dataset overload returns ids of the highest losses") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 2);
    const Dataset ds = toy_dataset(12, cfg.T, cfg.D, 2);
    const auto losses = cer::per_instance_loss(ds, p, cfg, nullptr);
    const auto ids = cer::select_validation_subset(ds, p, cfg, nullptr, 4);
    const auto idx = cer::select_validation_subset(losses, 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ids[i] == ds.instances[idx[i]].id);
  }
}

TEST_SUITE("instance influence") {
  TEST_CASE("a perfectly fit point scores exactly zero; duplicates score alike") {
    const auto data = checks::make_logistic_data(20, 8, 3, 3);
    cer::InfluenceProblem prob;
    prob.params = checks::logistic_init(3);
    std::mt19937_64 rng(3);
    prob.params.unflatten(random_matrix(4, 1, rng).reshaped());
    prob.loss = linear_mse();
    prob.train = model::pointers(data.train);
    prob.weight_decay = 0.01;
    const auto val = model::pointers(data.valid);
    const cer::InfluenceScorer scorer(prob, val);
    TimeSeriesInstance fit{"fit", ad::Matrix::Zero(1, 3), ad::Vector::Constant(1, prob.params.at("b")(0, 0)), {}, {}};
    CHECK(scorer.score(fit) == 0.0);
    TimeSeriesInstance copy = data.train.instances[0];
    copy.id = "copy";
    CHECK(scorer.score(copy) == scorer.score(data.train.instances[0]));
    CHECK(scorer.record(copy).flags.empty());
  }

  TEST_CASE("N = 24 convex model: rank and sign agreement with leave-one-out") {
    const auto r = checks::influence_loo_suite();
    CHECK(r.cg_converged);
    CHECK(r.spearman >= 0.7);
    CHECK(r.pearson >= 0.7);
  }

  TEST_CASE("non-converged CG flags every record") {
    const auto data = checks::make_logistic_data(24, 10, 4, 4);
    cer::InfluenceProblem prob;
    prob.params = checks::logistic_init(4);
    prob.loss = checks::logistic_loss();
    prob.train = model::pointers(data.train);
    prob.cg.max_iter = 1;
    prob.cg.tol = 1e-14;
    const auto val = model::pointers(data.valid);
    const cer::InfluenceScorer scorer(prob, val);
    CHECK_FALSE(scorer.converged());
    const auto rec = scorer.record(data.train.instances[0]);
    REQUIRE(rec.flags.size() == 1);
    CHECK(rec.flags[0] == cer::flag::cg_not_converged);
  }
}

TEST_SUITE("feature influence") {
  TEST_CASE("constant feature scores zero with a flag") {
    const auto data = checks::make_logistic_data(24, 10, 4, 5);
    cer::InfluenceProblem prob;
    prob.params = checks::logistic_fit(data.train, 0.01, checks::logistic_init(4));
    prob.loss = checks::logistic_loss();
    prob.train = model::pointers(data.train);
    prob.weight_decay = 0.01;
    const auto val = model::pointers(data.valid);
    const cer::InfluenceScorer scorer(prob, val);
    auto stats = io::feature_stats(data.train);
    stats.std(2) = 0.0;
    const auto rec = scorer.feature_record(data.train.instances[0], 0, 2, stats);
    CHECK(rec.value == 0.0);
    REQUIRE(rec.flags.size() == 1);
    CHECK(rec.flags[0] == cer::flag::constant_feature);
    const auto ok = scorer.feature_record(data.train.instances[0], 0, 1, stats);
    CHECK(ok.value > 0.0);
    CHECK(ok.flags.empty());
    const ad::Matrix grid = scorer.feature_grid(data.train.instances[0], stats);
    CHECK(grid(0, 1) == doctest::Approx(ok.value).epsilon(1e-12));
    CHECK(grid(0, 2) == 0.0);
  }

  TEST_CASE("locally linear: the +s and -s changes have equal size") {
    const auto data = checks::make_logistic_data(24, 10, 4, 6);
    cer::InfluenceProblem prob;
    prob.params = checks::logistic_fit(data.train, 0.01, checks::logistic_init(4));
    prob.loss = checks::logistic_loss();
    prob.train = model::pointers(data.train);
    prob.weight_decay = 0.01;
    const auto val = model::pointers(data.valid);
    const cer::InfluenceScorer scorer(prob, val);
    const auto& u = data.train.instances[3];
    const double s = 1e-4;
    for (int d = 0; d < 4; ++d) {
      TimeSeriesInstance up = u, down = u;
      up.x(0, d) += s;
      down.x(0, d) -= s;
      const double base = scorer.score(u);
      const double dp = std::abs(scorer.score(up) - base), dm = std::abs(scorer.score(down) - base);
      CHECK(std::abs(dp - dm) <= 0.1 * std::max(dp, dm));
    }
  }

  TEST_CASE("top-1 feature agrees with perturb-and-retrain") {
    const double wd = 0.01;
    const auto data = checks::make_logistic_data(24, 40, 4, 7);
    const auto theta = checks::logistic_fit(data.train, wd, checks::logistic_init(4));
    cer::InfluenceProblem prob;
    prob.params = theta;
    prob.loss = checks::logistic_loss();
    prob.train = model::pointers(data.train);
    prob.weight_decay = wd;
    const auto val = model::pointers(data.valid);
    const cer::InfluenceScorer scorer(prob, val);
    const auto stats = io::feature_stats(data.train);
    const double base = val_loss(data.valid, theta);
    int agree = 0;
    const int instances = 8;
    for (int i = 0; i < instances; ++i) {
      const auto& u = data.train.instances[static_cast<std::size_t>(i)];
      const ad::Matrix grid = scorer.feature_grid(u, stats);
      std::vector<double> brute(4, 0.0);
      for (int d = 0; d < 4; ++d) {
        for (double k : {-2.0, -1.0, 1.0, 2.0}) {
          Dataset moved = data.train;
          moved.instances[static_cast<std::size_t>(i)].x(0, d) += k * stats.std(d);
          brute[static_cast<std::size_t>(d)] +=
              std::abs(val_loss(data.valid, checks::logistic_fit(moved, wd, theta)) - base) / 4.0;
        }
      }
      Eigen::Index top_grid = 0;
      grid.row(0).maxCoeff(&top_grid);
      const auto top_brute = std::max_element(brute.begin(), brute.end()) - brute.begin();
      agree += top_grid == top_brute ? 1 : 0;
    }
    CHECK(agree >= 6);
  }
}

TEST_SUITE("uncertainty") {
  TEST_CASE("zero sigma gives zero scores") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 8);
    const Dataset ds = toy_dataset(5, cfg.T, cfg.D, 8);
    std::mt19937_64 rng(8);
    const ad::Matrix mu = random_matrix(cfg.T, cfg.latent_dim, rng);
    const ad::Matrix zero = ad::Matrix::Zero(cfg.T, cfg.latent_dim);
    for (double v : cer::instance_uncertainty(ds, mu, zero, p, cfg, 30, 1)) CHECK(v == 0.0);
    CHECK(cer::feature_uncertainty(ds.instances[0], mu, zero, p, cfg, 30, 1).isZero(0.0));
  }

  TEST_CASE("nonnegative, reproducible, and stable across seed batches") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 9);
    const Dataset ds = toy_dataset(6, cfg.T, cfg.D, 9);
    const ad::Matrix mu = ad::Matrix::Zero(cfg.T, cfg.latent_dim);
    const ad::Matrix sd = ad::Matrix::Ones(cfg.T, cfg.latent_dim);
    const auto a = cer::instance_uncertainty(ds, mu, sd, p, cfg, 200, 1);
    const auto b = cer::instance_uncertainty(ds, mu, sd, p, cfg, 200, 2);
    CHECK(a == cer::instance_uncertainty(ds, mu, sd, p, cfg, 200, 1));
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] > 0.0);
      CHECK(std::abs(a[i] - b[i]) <= 0.2 * std::max(a[i], b[i]));
    }
    const ad::Matrix f = cer::feature_uncertainty(ds.instances[0], mu, sd, p, cfg, 30, 4);
    CHECK(f.minCoeff() >= 0.0);
    CHECK(f == cer::feature_uncertainty(ds.instances[0], mu, sd, p, cfg, 30, 4));
  }

  TEST_CASE("instance uncertainty equals the sample variance of predictions") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 10);
    const Dataset ds = toy_dataset(3, cfg.T, cfg.D, 10);
    const ad::Matrix mu = ad::Matrix::Zero(cfg.T, cfg.latent_dim);
    const ad::Matrix sd = ad::Matrix::Ones(cfg.T, cfg.latent_dim);
    const int S = 7;
    const auto scores = cer::instance_uncertainty(ds, mu, sd, p, cfg, S, 11);
    const auto draws = nap::sample_latents(mu, sd, S, 11);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::vector<double> y;
      for (const auto& z : draws) {
        const auto attn = model::forward_attention(model::embed_inputs(ds.instances[i].x, p, cfg), p, cfg, &z);
        y.push_back(model::predict(attn, p, cfg)(0));
      }
      const double m = std::accumulate(y.begin(), y.end(), 0.0) / S;
      double var = 0.0;
      for (double v : y) var += (v - m) * (v - m);
      CHECK(scores[i] == doctest::Approx(var / (S - 1)).epsilon(1e-9));
    }
  }
}

TEST_SUITE("counterfactual") {
  TEST_CASE("matches two independent forward passes") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 12);
    const Dataset ds = toy_dataset(10, cfg.T, cfg.D, 12);
    std::mt19937_64 rng(12);
    const ad::Matrix z = random_matrix(cfg.T, cfg.latent_dim, rng);
    for (const auto& u : ds.instances) {
      const auto attn = model::forward_attention(model::embed_inputs(u.x, p, cfg), p, cfg, &z);
      const ad::Matrix grid = cer::counterfactual_grid(u, p, cfg, &z);
      for (int t = 0; t < cfg.T; ++t)
        for (int d = 0; d < cfg.D; ++d) {
          auto edited = attn;
          edited.gamma(t, d) = 0.0;
          const double oracle = std::abs(model::predict(attn, p, cfg)(0) - model::predict(edited, p, cfg)(0));
          CHECK(std::abs(grid(t, d) - oracle) <= 1e-12);
          const auto cf = cer::counterfactual_score(u, p, cfg, &z, t, d);
          CHECK(cf.score == grid(t, d));
          CHECK(cf.delta.size() == 1);
        }
    }
  }

  TEST_CASE("L2 norm over multiclass outputs") {
    const auto cfg = toy_config(3, 4, Task::multiclass, 3);
    const auto p = model::init_params(cfg, 13);
    const Dataset ds = toy_dataset(2, cfg.T, cfg.D, 13, Task::multiclass);
    const auto& u = ds.instances[0];
    const auto attn = model::forward_attention(model::embed_inputs(u.x, p, cfg), p, cfg);
    const auto cf = cer::counterfactual_score(attn, p, cfg, 1, 2);
    auto edited = attn;
    edited.gamma(1, 2) = 0.0;
    const ad::Vector delta = model::predict(attn, p, cfg) - model::predict(edited, p, cfg);
    CHECK((cf.delta - delta).norm() < 1e-15);
    CHECK(cf.score == doctest::Approx(delta.norm()));
  }

  TEST_CASE("gamma = 0 or beta = 0 cells score exactly zero") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 14);
    std::mt19937_64 rng(14);
    auto attn = model::forward_attention(random_matrix(cfg.T, cfg.D, rng), p, cfg);
    attn.gamma(0, 3) = 0.0;
    attn.beta(2) = 0.0;
    CHECK(cer::counterfactual_score(attn, p, cfg, 0, 3).score == 0.0);
    for (int d = 0; d < cfg.D; ++d) CHECK(cer::counterfactual_score(attn, p, cfg, 2, d).score == 0.0);
  }
}

TEST_SUITE("random control") {
  TEST_CASE("seeded and in range") {
    const auto a = cer::random_instance_scores(50, 3);
    CHECK(a == cer::random_instance_scores(50, 3));
    CHECK(a != cer::random_instance_scores(50, 4));
    const ad::Matrix g = cer::random_feature_scores(3, 4, 3, 7);
    CHECK(g == cer::random_feature_scores(3, 4, 3, 7));
    CHECK(g != cer::random_feature_scores(3, 4, 3, 8));
    CHECK(g.rows() == 3);
    CHECK(g.cols() == 4);
  }
}

TEST_SUITE("rerank") {
  TEST_CASE("descending_order sorts by value with index tie-break") {
    CHECK(cer::descending_order({1.0, 3.0, 3.0, 2.0, 1.0}) == std::vector<std::size_t>{1, 2, 3, 0, 4});
  }

  TEST_CASE("every scorer pair: shape, order, finiteness, determinism") {
    const auto tr = small_trained(15);
    nap::AnnotationStore store;
    store.append(1, AttentionMask{tr.train.instances[0].id, *tr.train.instances[0].relevance,
                                  *tr.train.instances[0].relevance_time});
    for (auto inst : {cer::Scorer::inst_uncertainty, cer::Scorer::inst_influence, cer::Scorer::inst_random}) {
      for (auto feat : {cer::Scorer::feat_counterfactual, cer::Scorer::feat_uncertainty,
                        cer::Scorer::feat_influence, cer::Scorer::feat_random}) {
        CAPTURE(cer::to_string(inst));
        CAPTURE(cer::to_string(feat));
        cer::CerConfig cc;
        cc.P = 5;
        cc.K = 4;
        cc.F = 3;
        cc.inst_scorer = inst;
        cc.feat_scorer = feat;
        cc.mc_samples = 8;
        cc.seed = 2;
        const auto r = cer::rerank(tr.train, tr.valid, store, tr.params, tr.cfg, cc, 2);
        REQUIRE(r.entries.size() == 4);
        CHECK(r.validation_ids.size() == 5);
        for (std::size_t k = 0; k < r.entries.size(); ++k) {
          const auto& e = r.entries[k];
          CHECK(e.instance_id != tr.train.instances[0].id);
          CHECK(std::isfinite(e.score));
          CHECK(e.features.size() == 3);
          if (k > 0) {
            const auto& prev = r.entries[k - 1];
            CHECK((prev.score > e.score || (prev.score == e.score && prev.index < e.index)));
          }
          for (std::size_t f = 1; f < e.features.size(); ++f) {
            const auto& a = e.features[f - 1];
            const auto& b = e.features[f];
            CHECK((a.score > b.score || (a.score == b.score && a.t * tr.cfg.D + a.d < b.t * tr.cfg.D + b.d)));
          }
        }
        const auto again = cer::rerank(tr.train, tr.valid, store, tr.params, tr.cfg, cc, 2);
        CHECK(cer::report_to_json(again).dump() == cer::report_to_json(r).dump());
      }
    }
  }

  TEST_CASE("K = N and F = T D give the full ordering") {
    const auto tr = small_trained(16);
    cer::CerConfig cc;
    cc.P = 3;
    cc.K = static_cast<int>(tr.train.size());
    cc.F = tr.cfg.T * tr.cfg.D;
    const auto r = cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, cc, 1);
    CHECK(r.entries.size() == tr.train.size());
    const nap::LatentSummary latent = nap::summarize_store(tr.train, {}, tr.params, tr.cfg, nap::LatentMode::mean);
    const auto scores = cer::instance_uncertainty(tr.train, latent.mu, latent.sigma, tr.params, tr.cfg, cc.mc_samples, cc.seed);
    const auto order = cer::descending_order(scores);
    for (std::size_t k = 0; k < order.size(); ++k) {
      CHECK(r.entries[k].index == order[k]);
      CHECK(r.entries[k].score == scores[order[k]]);
    }
    const ad::Matrix grid = cer::counterfactual_grid(tr.train.instances[r.entries[0].index], tr.params, tr.cfg, &latent.z);
    CHECK(r.entries[0].features.size() == static_cast<std::size_t>(grid.size()));
    CHECK(r.entries[0].features.front().score == grid.maxCoeff());
    CHECK(r.entries[0].features.back().score == grid.minCoeff());
  }

  TEST_CASE("defaults and preconditions") {
    const cer::CerConfig cc;
    CHECK(cc.inst_scorer == cer::Scorer::inst_uncertainty);
    CHECK(cc.feat_scorer == cer::Scorer::feat_counterfactual);
    const auto tr = small_trained(17);
    cer::CerConfig bad;
    bad.P = 2;
    bad.K = static_cast<int>(tr.train.size()) + 1;
    CHECK_THROWS_AS(cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, bad, 1), PreconditionError);
    bad.K = 2;
    bad.F = tr.cfg.T * tr.cfg.D + 1;
    CHECK_THROWS_AS(cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, bad, 1), PreconditionError);
    bad.F = 2;
    bad.P = static_cast<int>(tr.valid.size()) + 1;
    CHECK_THROWS_AS(cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, bad, 1), PreconditionError);
    bad.P = 2;
    bad.feat_scorer = cer::Scorer::inst_random;
    CHECK_THROWS_AS(cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, bad, 1), PreconditionError);
  }

  TEST_CASE("report json round trip") {
    const auto tr = small_trained(18);
    cer::CerConfig cc;
    cc.P = 3;
    cc.K = 3;
    cc.F = 2;
    const auto r = cer::rerank(tr.train, tr.valid, {}, tr.params, tr.cfg, cc, 1);
    const auto j = cer::report_to_json(r);
    CHECK(cer::report_to_json(cer::report_from_json(j)) == j);
  }
}
