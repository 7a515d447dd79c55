// SPDX-License-Identifier: Apache-2.0
#include "ial/calculus.hpp"
#include "ial/errors.hpp"
#include "ial/ial_loop.hpp"
#include "ial/nap.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace ial;
using ial::testing::random_mask;
using ial::testing::random_matrix;
using ial::testing::toy_config;
using ial::testing::toy_dataset;

namespace {

AttentionMask truth_mask(const TimeSeriesInstance& inst) {
  return AttentionMask{inst.id, *inst.relevance, *inst.relevance_time};
}

double l1(const ad::Matrix& a, const ad::Matrix& b) { return (a - b).cwiseAbs().sum(); }

struct Fitted {
  Dataset ds;
  ModelConfig cfg;
  ParamVector pretrained;
};

Fitted fitted(std::uint64_t seed) {
  Fitted f;
  f.ds = toy_dataset(200, 4, 6, seed);
  f.cfg = toy_config(4, 6);
  loop::PretrainConfig pc;
  pc.max_epochs = 30;
  pc.seed = seed;
  f.pretrained = loop::pretrain(f.ds, nullptr, f.cfg, pc).params;
  return f;
}

nap::AnnotationStore first_k(const Dataset& ds, int K, int round = 1) {
  nap::AnnotationStore st;
  for (int k = 0; k < K; ++k) st.append(round, truth_mask(ds.instances[static_cast<std::size_t>(k)]));
  return st;
}

}  // namespace

TEST_SUITE("annotation store") {
  TEST_CASE("rejects invalid values and duplicates") {
    nap::AnnotationStore st;
    auto m = AttentionMask::unknown("a", 2, 2);
    st.append(1, m);
    CHECK_THROWS_AS(st.append(1, m), DuplicateError);
    CHECK_NOTHROW(st.append(2, m));
    m.feature_mask(0, 1) = 2;
    CHECK_THROWS_AS(st.append(3, m), ValidationError);
    CHECK(st.size() == 2);
    CHECK(st.by_round(2).size() == 1);
    CHECK(st.by_instance("a").size() == 2);
    CHECK(st.contains_instance("a"));
    CHECK_FALSE(st.contains_instance("b"));
  }

  TEST_CASE("digest follows content") {
    nap::AnnotationStore a, b;
    a.append(1, AttentionMask::unknown("x", 2, 2));
    b.append(1, AttentionMask::unknown("x", 2, 2));
    CHECK(a.digest() == b.digest());
    b.append(1, AttentionMask::unknown("y", 2, 2));
    CHECK(a.digest() != b.digest());
  }
}

TEST_SUITE("encode_annotations") {
  TEST_CASE("duplicated pair gives identical rows; K = 1 shape") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 1);
    const Dataset ds = toy_dataset(5, cfg.T, cfg.D, 1);
    std::mt19937_64 rng(1);
    const auto m = random_mask(ds.instances[2], rng);
    const std::vector<AttentionMask> two = {m, m};
    const auto r = nap::encode_annotations(ds, two, p, cfg);
    REQUIRE(r.size() == 2);
    CHECK(r[0] == r[1]);
    const auto one = nap::encode_annotations(ds, std::span(two.data(), 1), p, cfg);
    REQUIRE(one.size() == 1);
    CHECK(one[0].rows() == cfg.T);
    CHECK(one[0].cols() == cfg.r_dim);
  }

  TEST_CASE("unknown differs from not-attend") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 2);
    const Dataset ds = toy_dataset(3, cfg.T, cfg.D, 2);
    auto unknown = AttentionMask::unknown(ds.instances[0].id, cfg.T, cfg.D);
    auto zero = unknown;
    zero.feature_mask.setZero();
    zero.time_mask.setZero();
    const std::vector<AttentionMask> a = {unknown}, b = {zero};
    CHECK(l1(nap::encode_annotations(ds, a, p, cfg)[0], nap::encode_annotations(ds, b, p, cfg)[0]) > 0.0);
  }

  TEST_CASE("unknown instance raises MissingInstanceError") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 3);
    const Dataset ds = toy_dataset(3, cfg.T, cfg.D, 3);
    const std::vector<AttentionMask> m = {AttentionMask::unknown("nope", cfg.T, cfg.D)};
    CHECK_THROWS_AS(nap::encode_annotations(ds, m, p, cfg), MissingInstanceError);
  }
}

TEST_SUITE("summarize") {
  TEST_CASE("identity, mean of two, permutation, empty") {
    std::mt19937_64 rng(4);
    const ad::Matrix a = random_matrix(3, 5, rng), b = random_matrix(3, 5, rng), c = random_matrix(3, 5, rng);
    const std::vector<ad::Matrix> one = {a};
    CHECK(*nap::summarize(one) == a);
    const std::vector<ad::Matrix> two = {a, b};
    CHECK((*nap::summarize(two) - (a + b) / 2.0).cwiseAbs().maxCoeff() < 1e-15);
    const std::vector<ad::Matrix> abc = {a, b, c}, cab = {c, a, b};
    CHECK((*nap::summarize(abc) - *nap::summarize(cab)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_FALSE(nap::summarize(std::span<const ad::Matrix>{}).has_value());
  }
}

TEST_SUITE("latent_params") {
  TEST_CASE("empty context falls back to the prior") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 5);
    const auto [mu, sigma] = nap::latent_params(std::nullopt, p, cfg);
    CHECK(mu.isZero(0.0));
    CHECK(sigma.isOnes(0.0));
    CHECK(mu.rows() == cfg.T);
    CHECK(mu.cols() == cfg.latent_dim);
  }

  TEST_CASE("zero sigma head gives softplus(0) = ln 2") {
    const auto cfg = toy_config();
    auto p = model::init_params(cfg, 6);
    p.at("nap.sigma.weight").setZero();
    p.at("nap.sigma.bias").setZero();
    std::mt19937_64 rng(6);
    const auto [mu, sigma] = nap::latent_params(random_matrix(cfg.T, cfg.r_dim, rng), p, cfg);
    CHECK((sigma.array() - std::log(2.0)).abs().maxCoeff() < 1e-15);
  }

  TEST_CASE("sigma stays positive on 1,000 random summaries") {
    const auto cfg = toy_config();
    auto p = model::init_params(cfg, 7);
    std::mt19937_64 rng(7);
    p.at("nap.sigma.weight") = random_matrix(cfg.r_dim, cfg.latent_dim, rng, 3.0);
    double lo = 1.0;
    for (int i = 0; i < 1000; ++i) {
      const auto [mu, sigma] = nap::latent_params(random_matrix(cfg.T, cfg.r_dim, rng, 2.0), p, cfg);
      lo = std::min(lo, sigma.minCoeff());
    }
    CHECK(lo > 0.0);
  }

  TEST_CASE("mu is the affine map of r_bar") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 8);
    std::mt19937_64 rng(8);
    const ad::Matrix r = random_matrix(cfg.T, cfg.r_dim, rng);
    const auto [mu, sigma] = nap::latent_params(r, p, cfg);
    ad::Matrix expected = r * p.at("nap.mu.weight");
    expected.rowwise() += p.at("nap.mu.bias").row(0);
    CHECK((mu - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_SUITE("sample_latent") {
  TEST_CASE("mean mode returns mu exactly") {
    std::mt19937_64 rng(9);
    const ad::Matrix mu = random_matrix(4, 3, rng);
    CHECK(nap::sample_latent(mu, ad::Matrix::Ones(4, 3), nap::LatentMode::mean, 1) == mu);
  }

  TEST_CASE("vanishing sigma collapses onto mu") {
    std::mt19937_64 rng(10);
    const ad::Matrix mu = random_matrix(4, 3, rng);
    const ad::Matrix z = nap::sample_latent(mu, ad::Matrix::Constant(4, 3, 1e-12), nap::LatentMode::sample, 3);
    CHECK((z - mu).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("10,000 standard-normal draws") {
    const ad::Matrix z = nap::sample_latent(ad::Matrix::Zero(100, 100), ad::Matrix::Ones(100, 100),
                                            nap::LatentMode::sample, 42);
    const double mean = z.mean();
    const double var = (z.array() - mean).square().sum() / (z.size() - 1);
    CHECK(std::abs(mean) <= 0.05);
    CHECK(var >= 0.9);
    CHECK(var <= 1.1);
  }

  TEST_CASE("seeded draws are reproducible and distinct across seeds") {
    const ad::Matrix mu = ad::Matrix::Zero(3, 2), sd = ad::Matrix::Ones(3, 2);
    CHECK(nap::sample_latent(mu, sd, nap::LatentMode::sample, 5) ==
          nap::sample_latent(mu, sd, nap::LatentMode::sample, 5));
    CHECK(nap::sample_latent(mu, sd, nap::LatentMode::sample, 5) !=
          nap::sample_latent(mu, sd, nap::LatentMode::sample, 6));
    const auto many = nap::sample_latents(mu, sd, 4, 5);
    CHECK(many.size() == 4);
    CHECK(many[0] != many[1]);
  }
}

TEST_SUITE("conditioned_attention") {
  TEST_CASE("empty store in mean mode equals z = 0") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 11);
    const Dataset ds = toy_dataset(4, cfg.T, cfg.D, 11);
    const auto& inst = ds.instances[1];
    const auto a = nap::conditioned_attention(inst, ds, {}, p, cfg, nap::LatentMode::mean);
    const ad::Matrix z = ad::Matrix::Zero(cfg.T, cfg.latent_dim);
    const auto b = model::forward_attention(model::embed_inputs(inst.x, p, cfg), p, cfg, &z);
    CHECK(a.beta == b.beta);
    CHECK(a.gamma == b.gamma);
  }

  TEST_CASE("store permutation leaves mean-mode attention bitwise identical") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 12);
    const Dataset ds = toy_dataset(10, cfg.T, cfg.D, 12);
    std::mt19937_64 rng(12);
    std::vector<AttentionMask> masks;
    for (int k = 0; k < 6; ++k) masks.push_back(random_mask(ds.instances[static_cast<std::size_t>(k)], rng));
    nap::AnnotationStore a, b;
    for (const auto& m : masks) a.append(1, m);
    std::vector<AttentionMask> shuffled = masks;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (const auto& m : shuffled) b.append(1, m);
    for (const auto& inst : ds.instances) {
      const auto x = nap::conditioned_attention(inst, ds, a, p, cfg, nap::LatentMode::mean);
      const auto y = nap::conditioned_attention(inst, ds, b, p, cfg, nap::LatentMode::mean);
      CHECK(x.beta == y.beta);
      CHECK(x.gamma == y.gamma);
    }
  }

  TEST_CASE("one more annotation changes attention with parameters untouched") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 13);
    const Dataset ds = toy_dataset(10, cfg.T, cfg.D, 13);
    auto store = first_k(ds, 3);
    const std::string hash = p.digest();
    const auto before = nap::conditioned_attention(ds.instances[5], ds, store, p, cfg, nap::LatentMode::mean);
    store.append(2, truth_mask(ds.instances[4]));
    const auto after = nap::conditioned_attention(ds.instances[5], ds, store, p, cfg, nap::LatentMode::mean);
    CHECK(l1(before.gamma, after.gamma) > 0.0);
    CHECK(p.digest() == hash);
  }

  TEST_CASE("the same latent conditions every instance") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 14);
    const Dataset ds = toy_dataset(6, cfg.T, cfg.D, 14);
    const auto store = first_k(ds, 2);
    const auto summary = nap::summarize_store(ds, store, p, cfg, nap::LatentMode::mean);
    CHECK(summary.context_size == 2);
    CHECK(summary.z == summary.mu);
    for (const auto& inst : ds.instances) {
      const auto a = nap::conditioned_attention(inst, ds, store, p, cfg, nap::LatentMode::mean);
      const auto b = model::forward_attention(model::embed_inputs(inst.x, p, cfg), p, cfg, &summary.z);
      CHECK(a.gamma == b.gamma);
    }
  }
}

TEST_SUITE("kl") {
  TEST_CASE("closed form values") {
    CHECK(nap::kl_standard_normal(ad::Matrix::Zero(3, 4), ad::Matrix::Ones(3, 4)) == 0.0);
    CHECK(nap::kl_standard_normal(ad::Matrix::Ones(1, 1), ad::Matrix::Ones(1, 1)) == doctest::Approx(0.5));
    CHECK(nap::kl_standard_normal(ad::Matrix::Ones(2, 3), ad::Matrix::Ones(2, 3)) == doctest::Approx(3.0));
  }

  TEST_CASE("tape KL matches the closed form and is nonnegative") {
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> s(0.05, 3.0);
    for (int i = 0; i < 200; ++i) {
      const ad::Matrix mu = random_matrix(3, 2, rng, 2.0);
      ad::Matrix sigma(3, 2);
      for (Eigen::Index k = 0; k < sigma.size(); ++k) sigma.data()[k] = s(rng);
      double manual = 0.0;
      for (Eigen::Index k = 0; k < mu.size(); ++k) {
        const double m = mu.data()[k], sd = sigma.data()[k];
        manual += 0.5 * (m * m + sd * sd - 1.0) - std::log(sd);
      }
      const double closed = nap::kl_standard_normal(mu, sigma);
      CHECK(std::abs(closed - manual) <= 1e-10);
      CHECK(closed >= -1e-12);
      ad::Tape tape(false);
      nap::LatentVars lv;
      for (int t = 0; t < 3; ++t) {
        lv.mu.push_back(tape.constant(mu.row(t)));
        lv.sigma.push_back(tape.constant(sigma.row(t)));
      }
      CHECK(std::abs(nap::kl_on_tape(lv).scalar() - closed) <= 1e-10);
    }
  }
}

TEST_SUITE("nap_loss") {
  TEST_CASE("all-unknown masks contribute no mask term") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 16);
    const Dataset ds = toy_dataset(4, cfg.T, cfg.D, 16);
    const std::vector<AttentionMask> masks = {AttentionMask::unknown(ds.instances[0].id, cfg.T, cfg.D),
                                              AttentionMask::unknown(ds.instances[1].id, cfg.T, cfg.D)};
    const auto ann = nap::resolve(ds, masks);
    const auto batch = model::pointers(ds);
    for (auto target : {nap::MaskTarget::magnitude, nap::MaskTarget::rescaled}) {
      nap::NapLossWeights w;
      w.target = target;
      const auto v = nap::nap_loss(p, cfg, batch, ann, ann, w, nap::LatentMode::mean, 0);
      CHECK(v.mask == 0.0);
    }
  }

  TEST_CASE("zero weights reduce to the task loss") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 17);
    const Dataset ds = toy_dataset(6, cfg.T, cfg.D, 17);
    std::mt19937_64 rng(17);
    const std::vector<AttentionMask> masks = {random_mask(ds.instances[0], rng), random_mask(ds.instances[1], rng)};
    const auto ann = nap::resolve(ds, masks);
    const auto batch = model::pointers(ds);
    nap::NapLossWeights w;
    w.mask = 0.0;
    w.kl = 0.0;
    const auto v = nap::nap_loss(p, cfg, batch, ann, ann, w, nap::LatentMode::sample, 3);
    CHECK(v.total == v.task);
    CHECK(v.mask > 0.0);
    CHECK(v.kl > 0.0);
  }

  TEST_CASE("mask supervision matches a direct computation") {
    const auto cfg = toy_config(3, 2);
    const auto p = model::init_params(cfg, 18);
    const Dataset ds = toy_dataset(2, cfg.T, cfg.D, 18);
    AttentionMask m = AttentionMask::unknown(ds.instances[0].id, cfg.T, cfg.D);
    m.feature_mask(0, 0) = 1;
    m.feature_mask(2, 1) = 0;
    m.time_mask(1) = 1;
    m.time_mask(2) = 0;
    const std::vector<const TimeSeriesInstance*> one = {&ds.instances[0]};
    const std::vector<const AttentionMask*> masks = {&m};
    ad::Tape tape(false);
    BoundParams bp(tape, p);
    const auto attn = model::attention_batch(bp, cfg, model::stack_timesteps(one), nullptr);
    const auto plain = model::forward_attention(model::embed_inputs(ds.instances[0].x, p, cfg), p, cfg);
    auto bce = [](double q, int y) { return -(y * std::log(q) + (1 - y) * std::log(1 - q)); };
    const double time_term = -std::log(plain.beta(1)) - std::log(1 - plain.beta(2));
    {
      const double g00 = plain.gamma(0, 0), g21 = plain.gamma(2, 1);
      const double feat = (bce(g00 * g00, 1) + bce(g21 * g21, 0)) / 2.0;
      const double got = nap::mask_supervision(attn, masks, nap::MaskTarget::magnitude).scalar();
      CHECK(got == doctest::Approx(feat + time_term).epsilon(1e-9));
    }
    {
      const double feat = (bce((plain.gamma(0, 0) + 1) / 2, 1) + bce((plain.gamma(2, 1) + 1) / 2, 0)) / 2.0;
      const double got = nap::mask_supervision(attn, masks, nap::MaskTarget::rescaled).scalar();
      CHECK(got == doctest::Approx(feat + time_term).epsilon(1e-9));
    }
  }

  TEST_CASE("gradient passes the finite-difference check in mean mode") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 19);
    const Dataset ds = toy_dataset(6, cfg.T, cfg.D, 19);
    std::mt19937_64 rng(19);
    const std::vector<AttentionMask> masks = {random_mask(ds.instances[0], rng), random_mask(ds.instances[1], rng),
                                              random_mask(ds.instances[2], rng)};
    const auto ann = nap::resolve(ds, masks);
    const std::vector<const TimeSeriesInstance*> batch = {&ds.instances[3], &ds.instances[4], &ds.instances[5]};
    const nap::NapLossWeights w;
    auto f = [&](const BoundParams& bp) {
      return nap::nap_loss_on_tape(bp, cfg, batch, std::span(ann.data(), 2), ann, w, nap::LatentMode::mean, nullptr).total;
    };
    CHECK(finite_diff_check(f, p, 1e-6).max_rel_error < 1e-3);
  }

  TEST_CASE("per-instance KL scaling") {
    const auto cfg = toy_config();
    const auto p = model::init_params(cfg, 20);
    const Dataset ds = toy_dataset(5, cfg.T, cfg.D, 20);
    const std::vector<AttentionMask> masks = {truth_mask(ds.instances[0]), truth_mask(ds.instances[1])};
    const auto ann = nap::resolve(ds, masks);
    const auto batch = model::pointers(ds);
    nap::NapLossWeights a, b;
    b.kl_per_instance = false;
    const auto va = nap::nap_loss(p, cfg, batch, ann, ann, a, nap::LatentMode::mean, 0);
    const auto vb = nap::nap_loss(p, cfg, batch, ann, ann, b, nap::LatentMode::mean, 0);
    CHECK(va.kl == doctest::Approx(vb.kl));
    CHECK(vb.total - va.total == doctest::Approx(0.1 * va.kl * (1.0 - 1.0 / 7.0)));
  }
}

TEST_SUITE("adapt_train") {
  TEST_CASE("empty store raises PreconditionError") {
    const auto cfg = toy_config();
    const Dataset ds = toy_dataset(5, cfg.T, cfg.D, 21);
    CHECK_THROWS_AS(nap::adapt_train(ds, {}, model::init_params(cfg, 21), cfg, {}), PreconditionError);
  }

  TEST_CASE("full-store loss falls, runs are reproducible, only conditioning moves") {
    const auto f = fitted(22);
    const auto store = first_k(f.ds, 16);
    nap::AdaptConfig ac;
    ac.seed = 3;
    ac.steps = 100;
    const auto a = nap::adapt_train(f.ds, store, f.pretrained, f.cfg, ac);
    const auto b = nap::adapt_train(f.ds, store, f.pretrained, f.cfg, ac);
    CHECK(a.params.flatten() == b.params.flatten());
    const auto& curve = a.log.full_store_loss;
    REQUIRE(curve.size() == 11);
    CHECK(curve.back() < curve.front());
    // Windowed trend over blocks of 10 steps.
    int falls = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) falls += curve[i] < curve[i - 1] ? 1 : 0;
    CHECK(falls >= 6);
    for (const auto& s : a.params.segments()) {
      CHECK(s.trainable);
      if (!model::is_conditioning_segment(s.name)) {
        CHECK(s.values == f.pretrained.at(s.name));
      }
    }
    CHECK(a.params.digest() != f.pretrained.digest());
  }

  TEST_CASE("context growth: sigma trends down as the context grows") {
    const int K = 16;
    std::vector<std::vector<double>> per_seed;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto f = fitted(seed);
      const auto store = first_k(f.ds, K);
      nap::AdaptConfig ac;
      ac.seed = seed;
      const auto adapted = nap::adapt_train(f.ds, store, f.pretrained, f.cfg, ac).params;
      const auto masks = store.masks();
      std::vector<double> row;
      for (int k = 1; k <= K; ++k) {
        const auto r = nap::encode_annotations(f.ds, std::span(masks.data(), static_cast<std::size_t>(k)), adapted, f.cfg);
        row.push_back(nap::latent_params(nap::summarize(r), adapted, f.cfg).second.mean());
      }
      per_seed.push_back(row);
    }
    std::vector<double> median;
    for (int k = 0; k < K; ++k) {
      std::vector<double> col;
      for (const auto& r : per_seed) col.push_back(r[static_cast<std::size_t>(k)]);
      std::nth_element(col.begin(), col.begin() + 2, col.end());
      median.push_back(col[2]);
    }
    double kbar = (K + 1) / 2.0, sbar = std::accumulate(median.begin(), median.end(), 0.0) / K;
    double cov = 0.0;
    for (int k = 0; k < K; ++k) cov += (k + 1 - kbar) * (median[static_cast<std::size_t>(k)] - sbar);
    CHECK(median.back() < median.front());
    CHECK(cov < 0.0);
  }
}
