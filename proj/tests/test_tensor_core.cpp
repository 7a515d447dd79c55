// SPDX-License-Identifier: Apache-2.0
#include "ial/autodiff.hpp"
#include "ial/calculus.hpp"
#include "ial/checks.hpp"
#include "ial/digest.hpp"
#include "ial/errors.hpp"
#include "ial/optim.hpp"
#include "ial/params.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace ial;
using ial::testing::random_matrix;

namespace {

ParamVector vec2(double a, double b) {
  ParamVector p;
  ad::Matrix m(1, 2);
  m << a, b;
  p.add("theta", m);
  return p;
}

ad::Vector v2(double a, double b) {
  ad::Vector v(2);
  v << a, b;
  return v;
}

// 0.5 * theta^T A theta with A = diag(a).
ScalarFunction diag_quadratic(ad::Vector a) {
  return [a](const BoundParams& p) {
    ad::Matrix half(1, a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      half(0, i) = 0.5 * a(i);
    }
    auto c = p.tape().constant(half);
    return ad::sum(c * ad::square(p["theta"]));
  };
}

ParamVector two_layer(std::mt19937_64& rng) {
  ParamVector p;
  p.add("w1", random_matrix(6, 5, rng, 0.5));
  p.add("b1", random_matrix(1, 5, rng, 0.1));
  p.add("w2", random_matrix(5, 1, rng, 0.5));
  return p;
}

ScalarFunction two_layer_loss(const ad::Matrix& X, const ad::Matrix& y) {
  return [X, y](const BoundParams& p) {
    auto h = ad::tanh(ad::add_row(ad::matmul(p.tape().constant(X), p["w1"]), p["b1"]));
    auto out = ad::matmul(h, p["w2"]);
    return ad::mean(ad::square(out - p.tape().constant(y)));
  };
}

}  // namespace

TEST_SUITE("gradient") {
  TEST_CASE("sum of squares at (1, 2) gives (2, 4)") {
    auto f = [](const BoundParams& p) { return ad::sum(ad::square(p["theta"])); };
    const auto g = gradient(f, vec2(1, 2)).flatten();
    CHECK(g(0) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(g(1) == doctest::Approx(4.0).epsilon(1e-15));
  }

  TEST_CASE("constant objective has zero gradient") {
    auto f = [](const BoundParams& p) { return p.tape().constant(ad::Matrix::Constant(1, 1, 3.0)); };
    CHECK(gradient(f, vec2(1, 2)).flatten().isZero(0.0));
  }

  TEST_CASE("two-layer net matches central differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(seed);
      const auto theta = two_layer(rng);
      const auto f = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
      const auto report = finite_diff_check(f, theta, 1e-5);
      CHECK(report.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("gradient keeps the segment structure") {
    std::mt19937_64 rng(1);
    const auto theta = two_layer(rng);
    const auto g = gradient(two_layer_loss(random_matrix(3, 6, rng), random_matrix(3, 1, rng)), theta);
    REQUIRE(g.segments().size() == theta.segments().size());
    for (std::size_t i = 0; i < g.segments().size(); ++i) {
      CHECK(g.segments()[i].name == theta.segments()[i].name);
      CHECK(g.segments()[i].values.rows() == theta.segments()[i].values.rows());
      CHECK(g.segments()[i].values.cols() == theta.segments()[i].values.cols());
    }
  }

  TEST_CASE("non-finite loss names the offending segment") {
    ParamVector p = vec2(1, 2);
    ad::Matrix bad(1, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    p.add("broken", bad);
    auto f = [](const BoundParams& b) { return ad::sum(b["theta"]) + ad::sum(b["broken"]); };
    try {
      gradient(f, p);
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(std::string(e.what()).find("broken") != std::string::npos);
    }
  }

  TEST_CASE("non-finite loss with finite parameters") {
    auto f = [](const BoundParams& b) { return ad::sum(ad::log(b["theta"])); };
    CHECK_THROWS_AS(gradient(f, vec2(-1, 1)), NonFiniteError);
  }

  TEST_CASE("linearity: grad(a f + b g) = a grad f + b grad g") {
    std::mt19937_64 rng(3);
    const auto theta = two_layer(rng);
    const auto f = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
    const auto g = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
    const double a = 1.7, b = -0.4;
    auto combo = [&](const BoundParams& p) { return a * f(p) + b * g(p); };
    const ad::Vector lhs = gradient(combo, theta).flatten();
    const ad::Vector rhs = a * gradient(f, theta).flatten() + b * gradient(g, theta).flatten();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("value_and_gradient agrees with evaluate and gradient") {
    std::mt19937_64 rng(4);
    const auto theta = two_layer(rng);
    const auto f = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
    const auto [value, grad] = value_and_gradient(f, theta);
    CHECK(value == evaluate(f, theta));
    CHECK(grad.flatten() == gradient(f, theta).flatten());
  }
}

TEST_SUITE("autodiff ops") {
  // Each op is checked through sum(op(x) * w) against central differences.
  TEST_CASE("elementwise and structural ops match central differences") {
    std::mt19937_64 rng(9);
    ParamVector theta;
    theta.add("a", random_matrix(3, 4, rng));
    theta.add("b", random_matrix(3, 4, rng));
    theta.add("r", random_matrix(1, 4, rng));
    theta.add("c", random_matrix(3, 1, rng));
    theta.add("m", random_matrix(4, 2, rng));
    const ad::Matrix w = random_matrix(3, 4, rng);
    std::vector<std::pair<const char*, std::function<ad::Var(const BoundParams&)>>> ops = {
        {"add", [](const BoundParams& p) { return p["a"] + p["b"]; }},
        {"sub", [](const BoundParams& p) { return p["a"] - p["b"]; }},
        {"mul", [](const BoundParams& p) { return p["a"] * p["b"]; }},
        {"sigmoid", [](const BoundParams& p) { return ad::sigmoid(p["a"]); }},
        {"tanh", [](const BoundParams& p) { return ad::tanh(p["a"]); }},
        {"softplus", [](const BoundParams& p) { return ad::softplus(p["a"]); }},
        {"exp", [](const BoundParams& p) { return ad::exp(p["a"]); }},
        {"log", [](const BoundParams& p) { return ad::log(ad::square(p["a"]) + 1.0); }},
        {"softmax", [](const BoundParams& p) { return ad::softmax_rows(p["a"]); }},
        {"log_softmax", [](const BoundParams& p) { return ad::log_softmax_rows(p["a"]); }},
        {"add_row", [](const BoundParams& p) { return ad::add_row(p["a"], p["r"]); }},
        {"scale_rows", [](const BoundParams& p) { return ad::scale_rows(p["a"], p["c"]); }},
        {"broadcast", [](const BoundParams& p) { return ad::broadcast_rows(p["r"], 3); }},
        {"matmul_slice",
         [](const BoundParams& p) {
           auto m = ad::matmul(p["a"], p["m"]);
           std::vector<ad::Var> parts = {m, ad::slice_cols(p["b"], 1, 2)};
           return ad::concat_cols(parts);
         }},
        {"neg_scalar", [](const BoundParams& p) { return 2.0 - (-p["a"]) + 0.5; }},
        {"sum_cols", [](const BoundParams& p) { return ad::broadcast_rows(ad::mean_rows(ad::sum_cols(p["a"]) * p["c"]), 1); }},
    };
    for (const auto& [name, op] : ops) {
      CAPTURE(name);
      auto f = [&, op = op](const BoundParams& p) {
        auto out = op(p);
        if (out.rows() == w.rows() && out.cols() == w.cols()) {
          return ad::sum(out * p.tape().constant(w));
        }
        return ad::sum(ad::square(out));
      };
      CHECK(finite_diff_check(f, theta, 1e-6).max_rel_error < 1e-6);
    }
  }

  TEST_CASE("clamp has zero gradient where active") {
    ParamVector p;
    ad::Matrix m(1, 3);
    m << -2.0, 0.3, 2.0;
    p.add("x", m);
    auto f = [](const BoundParams& b) { return ad::sum(ad::clamp(b["x"], -1.0, 1.0)); };
    const auto g = gradient(f, p).flatten();
    CHECK(g(0) == 0.0);
    CHECK(g(1) == 1.0);
    CHECK(g(2) == 0.0);
  }

  TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(2);
    ad::Tape tape(false);
    auto s = ad::softmax_rows(tape.constant(random_matrix(5, 7, rng, 10.0)));
    for (Eigen::Index i = 0; i < 5; ++i) {
      CHECK(std::abs(s.value().row(i).sum() - 1.0) < 1e-12);
    }
  }
}

TEST_SUITE("hvp") {
  TEST_CASE("quadratic diag(1, 3) times (1, 1) gives (1, 3)") {
    const auto hv = hvp(diag_quadratic(v2(1, 3)), vec2(0.3, -0.7), v2(1, 1));
    CHECK(std::abs(hv(0) - 1.0) < 1e-8);
    CHECK(std::abs(hv(1) - 3.0) < 1e-8);
  }

  TEST_CASE("zero direction gives zero") {
    std::mt19937_64 rng(5);
    const auto theta = two_layer(rng);
    const auto f = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
    const ad::Vector zero = ad::Vector::Zero(static_cast<Eigen::Index>(theta.size()));
    CHECK(hvp(f, theta, zero).isZero(0.0));
  }

  TEST_CASE("logistic loss on 10 points matches the gradient-difference oracle") {
    const auto data = checks::make_logistic_data(10, 1, 4, 21);
    const auto f = checks::logistic_objective(data.train, 0.0);
    std::mt19937_64 rng(6);
    const auto theta = checks::logistic_init(4).with_values(random_matrix(5, 1, rng).reshaped());
    for (int k = 0; k < 5; ++k) {
      const ad::Vector v = random_matrix(5, 1, rng).reshaped();
      const double eps = 1e-3 / std::max(1.0, v.norm());
      const ad::Vector oracle = (gradient(f, theta.with_values(theta.flatten() + eps * v)).flatten() -
                                 gradient(f, theta.with_values(theta.flatten() - eps * v)).flatten()) /
                                (2 * eps);
      const ad::Vector hv = hvp(f, theta, v);
      CHECK((hv - oracle).norm() / oracle.norm() < 1e-3);
      const ad::Vector exact = checks::logistic_hessian(data.train, theta, 0.0) * v;
      CHECK((hv - exact).norm() / exact.norm() < 1e-6);
    }
  }

  TEST_CASE("symmetry: v^T H w = w^T H v") {
    std::mt19937_64 rng(8);
    const auto theta = two_layer(rng);
    const auto f = two_layer_loss(random_matrix(5, 6, rng), random_matrix(5, 1, rng));
    const auto n = static_cast<int>(theta.size());
    for (int k = 0; k < 5; ++k) {
      const ad::Vector v = random_matrix(n, 1, rng).reshaped();
      const ad::Vector w = random_matrix(n, 1, rng).reshaped();
      const double a = v.dot(hvp(f, theta, w));
      const double b = w.dot(hvp(f, theta, v));
      CHECK(std::abs(a - b) <= 1e-6 * std::max(std::abs(a), std::abs(b)));
    }
  }

  TEST_CASE("frozen coordinates are ignored") {
    std::mt19937_64 rng(10);
    auto theta = two_layer(rng);
    theta.segment("b1").trainable = false;
    const auto f = two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng));
    const ad::Vector v = random_matrix(static_cast<int>(theta.size()), 1, rng).reshaped();
    const ad::Vector mask = theta.trainable_mask();
    const ad::Vector hv = hvp(f, theta, v);
    CHECK(hv.cwiseProduct(ad::Vector::Ones(mask.size()) - mask).isZero(0.0));
    CHECK((hv - hvp(f, theta, ad::Vector(v.cwiseProduct(mask)))).norm() < 1e-12);
  }
}

TEST_SUITE("cg_solve") {
  const LinearOperator zero_op = [](const ad::Vector& x) { return ad::Vector(ad::Vector::Zero(x.size())); };

  TEST_CASE("identity system without damping returns b") {
    const ad::Vector b = v2(0.5, -2.0);
    CgOptions o;
    o.damping = 0.0;
    const auto r = cg_solve([](const ad::Vector& x) { return x; }, b, o);
    CHECK((r.x - b).norm() < 1e-12);
    CHECK(r.converged);
  }

  TEST_CASE("diag(2, 4) with b = (2, 4) gives (1, 1)") {
    CgOptions o;
    o.damping = 0.0;
    const auto r = cg_solve([](const ad::Vector& x) { return ad::Vector(x.cwiseProduct(v2(2, 4))); },
                            v2(2, 4), o);
    CHECK((r.x - v2(1, 1)).norm() < 1e-12);
  }

  TEST_CASE("H = 0 with damping returns b / damping") {
    const ad::Vector b = v2(3.0, -1.5);
    CgOptions o;
    o.damping = 0.25;
    const auto r = cg_solve(zero_op, b, o);
    CHECK((r.x - b / 0.25).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("b = 0 returns zero immediately") {
    const auto r = cg_solve(zero_op, ad::Vector::Zero(3));
    CHECK(r.x.isZero(0.0));
    CHECK(r.iterations == 0);
    CHECK(r.converged);
  }

  TEST_CASE("rejects bad options") {
    CgOptions o;
    o.max_iter = 0;
    CHECK_THROWS_AS(cg_solve(zero_op, v2(1, 1), o), PreconditionError);
    o.max_iter = 10;
    o.damping = -1;
    CHECK_THROWS_AS(cg_solve(zero_op, v2(1, 1), o), PreconditionError);
  }

  TEST_CASE("convex logistic model: residual and dense-solve oracle") {
    const auto data = checks::make_logistic_data(30, 1, 5, 13);
    const auto f = checks::logistic_objective(data.train, 1e-3);
    const auto theta = checks::logistic_fit(data.train, 1e-3, checks::logistic_init(5));
    std::mt19937_64 rng(2);
    const ad::Vector b = random_matrix(6, 1, rng).reshaped();
    const auto r = cg_solve([&](const ad::Vector& v) { return hvp(f, theta, v); }, b);
    CHECK(r.residual < 1e-2);
    ad::Matrix H = checks::logistic_hessian(data.train, theta, 1e-3);
    H += 0.01 * ad::Matrix::Identity(6, 6);
    const ad::Vector dense = H.ldlt().solve(b);
    CHECK((r.x - dense).norm() / dense.norm() < 1e-4);
  }

  TEST_CASE("indefinite operator stops with the best iterate") {
    const auto r = cg_solve([](const ad::Vector& x) { return ad::Vector(-2.0 * x); }, v2(1, 1));
    CHECK(r.stagnated);
    CHECK_FALSE(r.converged);
    CHECK(r.x.allFinite());
  }

  TEST_CASE("max_iter bounds the iterations") {
    ad::Vector d(20);
    for (int i = 0; i < 20; ++i) d(i) = 1.0 + i * i;
    CgOptions o;
    o.max_iter = 3;
    o.tol = 1e-14;
    const auto r = cg_solve([&](const ad::Vector& x) { return ad::Vector(x.cwiseProduct(d)); },
                            ad::Vector::Ones(20), o);
    CHECK(r.iterations <= 3);
    CHECK_FALSE(r.converged);
    CHECK(r.residual > 0.0);
  }
}

TEST_SUITE("finite_diff_check") {
  TEST_CASE("quadratic error is tiny") {
    CHECK(finite_diff_check(diag_quadratic(v2(1, 3)), vec2(0.2, 0.9)).max_rel_error < 1e-8);
  }

  TEST_CASE("frozen segment is reported as zero-gradient") {
    std::mt19937_64 rng(12);
    auto theta = two_layer(rng);
    theta.segment("w2").trainable = false;
    const auto report = finite_diff_check(two_layer_loss(random_matrix(4, 6, rng), random_matrix(4, 1, rng)), theta, 1e-5);
    bool seen = false;
    for (const auto& s : report.segments) {
      if (s.name == "w2") {
        seen = true;
        CHECK(s.zero_gradient);
      } else {
        CHECK_FALSE(s.zero_gradient);
      }
    }
    CHECK(seen);
    CHECK(report.max_rel_error < 1e-4);
  }

  TEST_CASE("toy attention model gradients") {
    const auto report = checks::gradient_suite(1);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_SUITE("params") {
  TEST_CASE("flatten and unflatten are inverse") {
    std::mt19937_64 rng(14);
    auto p = two_layer(rng);
    const ad::Vector flat = p.flatten();
    CHECK(flat.size() == static_cast<Eigen::Index>(p.size()));
    auto q = p.zeros_like();
    CHECK(q.flatten().isZero(0.0));
    q.unflatten(flat);
    CHECK(q.flatten() == flat);
    CHECK(q.digest() == p.digest());
    const ad::Vector other = random_matrix(static_cast<int>(p.size()), 1, rng).reshaped();
    CHECK(p.with_values(other).flatten() == other);
  }

  TEST_CASE("names are unique and lengths checked") {
    ParamVector p;
    p.add("a", ad::Matrix::Zero(2, 2));
    CHECK_THROWS(p.add("a", ad::Matrix::Zero(1, 1)));
    CHECK_THROWS(p.unflatten(ad::Vector::Zero(3)));
  }

  TEST_CASE("digest changes with any value") {
    auto p = vec2(1, 2);
    const auto d = p.digest();
    p.at("theta")(0, 1) = std::nextafter(2.0, 3.0);
    CHECK(p.digest() != d);
  }

  TEST_CASE("trainable mask") {
    ParamVector p;
    p.add("a", ad::Matrix::Zero(1, 2));
    p.add("b", ad::Matrix::Zero(1, 3));
    p.set_trainable([](const std::string& n) { return n == "b"; });
    const ad::Vector m = p.trainable_mask();
    CHECK(m.head(2).isZero(0.0));
    CHECK(m.tail(3).isOnes(0.0));
  }

  TEST_CASE("sha-256 test vector") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    Sha256 h;
    h.update("a");
    h.update("bc");
    CHECK(h.hex() == sha256_hex("abc"));
  }
}

TEST_SUITE("optim") {
  TEST_CASE("adam descends a quadratic and skips frozen segments") {
    ParamVector p = vec2(3, -2);
    p.add("frozen", ad::Matrix::Constant(1, 1, 5.0), false);
    auto f = [](const BoundParams& b) { return ad::sum(ad::square(b["theta"])) + ad::sum(ad::square(b["frozen"])); };
    Adam opt(0.1);
    const double start = evaluate(f, p);
    for (int i = 0; i < 200; ++i) {
      opt.step(p, gradient(f, p));
    }
    CHECK(evaluate(f, p) < start);
    CHECK(p.at("theta").norm() < 0.1);
    CHECK(p.at("frozen")(0, 0) == 5.0);
    CHECK(opt.steps() == 200);
  }

  TEST_CASE("first adam step moves each coordinate by lr against the gradient sign") {
    ParamVector p = vec2(1, -1);
    Adam opt(0.01);
    opt.step(p, vec2(4, -0.5));
    CHECK(p.at("theta")(0, 0) == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(p.at("theta")(0, 1) == doctest::Approx(-0.99).epsilon(1e-9));
  }

  TEST_CASE("weight decay term is 0.5 c |theta|^2 over trainable segments") {
    ParamVector p = vec2(1, 2);
    p.add("frozen", ad::Matrix::Constant(1, 1, 7.0), false);
    ad::Tape tape;
    BoundParams b(tape, p);
    CHECK(weight_decay_term(b, p, 0.2).scalar() == doctest::Approx(0.5 * 0.2 * 5.0));
  }
}
