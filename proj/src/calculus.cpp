// SPDX-License-Identifier: Apache-2.0
#include "ial/calculus.hpp"

#include "ial/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ial {

double evaluate(const ScalarFunction& f, const ParamVector& theta) {
  ad::Tape tape(false);
  BoundParams bound(tape, theta);
  return f(bound).scalar();
}

std::pair<double, ParamVector> value_and_gradient(const ScalarFunction& f,
                                                  const ParamVector& theta) {
  ad::Tape tape;
  BoundParams bound(tape, theta);
  ad::Var loss = f(bound);
  const double value = loss.scalar();
  if (!std::isfinite(value)) {
    for (const auto& s : theta.segments()) {
      if (!s.values.allFinite()) {
        throw NonFiniteError("non-finite loss; segment '" + s.name + "' holds non-finite values");
      }
    }
    throw NonFiniteError("non-finite loss (" + std::to_string(value) + ") with finite parameters");
  }
  tape.backward(loss);
  ParamVector g = bound.gradients(theta);
  for (const auto& s : g.segments()) {
    if (!s.values.allFinite()) {
      throw NonFiniteError("non-finite gradient in segment '" + s.name + "'");
    }
  }
  return {value, std::move(g)};
}

ParamVector gradient(const ScalarFunction& f, const ParamVector& theta) {
  return value_and_gradient(f, theta).second;
}

ad::Vector hvp(const ScalarFunction& f, const ParamVector& theta, const ad::Vector& v_in) {
  if (v_in.size() != static_cast<Eigen::Index>(theta.size())) {
    throw ShapeError("hvp: direction has " + std::to_string(v_in.size()) + " entries, expected " +
                     std::to_string(theta.size()));
  }
  const ad::Vector v = v_in.cwiseProduct(theta.trainable_mask());
  const double norm = v.norm();
  if (norm == 0.0) {
    return ad::Vector::Zero(v.size());
  }
  const ad::Vector base = theta.flatten();
  const double eps = 1e-3 / std::max(1.0, norm);
  auto central = [&](double h) {
    const ad::Vector gp = gradient(f, theta.with_values(base + h * v)).flatten();
    const ad::Vector gm = gradient(f, theta.with_values(base - h * v)).flatten();
    return ad::Vector((gp - gm) / (2.0 * h));
  };
  const ad::Vector coarse = central(eps);
  const ad::Vector fine = central(0.5 * eps);
  ad::Vector out = (4.0 * fine - coarse) / 3.0;
  if (!out.allFinite()) {
    throw NonFiniteError("hvp: non-finite Hessian-vector product");
  }
  return out;
}

ParamVector hvp(const ScalarFunction& f, const ParamVector& theta, const ParamVector& v) {
  return theta.with_values(hvp(f, theta, v.flatten()));
}

CgResult cg_solve(const LinearOperator& hvp_fn, const ad::Vector& b, const CgOptions& opts) {
  if (opts.max_iter < 1) {
    throw PreconditionError("cg_solve: max_iter must be >= 1");
  }
  if (opts.damping < 0.0) {
    throw PreconditionError("cg_solve: damping must be nonnegative");
  }
  CgResult result;
  result.x = ad::Vector::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    result.converged = true;
    return result;
  }
  auto apply = [&](const ad::Vector& p) { return ad::Vector(hvp_fn(p) + opts.damping * p); };

  ad::Vector x = ad::Vector::Zero(b.size());
  ad::Vector r = b;
  ad::Vector p = r;
  double rr = r.squaredNorm();
  ad::Vector best_x = x;
  double best_res = 1.0;
  int since_best = 0;
  constexpr int kStallWindow = 10;

  for (int it = 1; it <= opts.max_iter; ++it) {
    const ad::Vector ap = apply(p);
    const double curvature = p.dot(ap);
    result.iterations = it;
    if (!(curvature > 0.0)) {
      result.stagnated = true;
      break;
    }
    const double alpha = rr / curvature;
    x += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    const double res = std::sqrt(rr_new) / bnorm;
    if (res < best_res) {
      best_res = res;
      best_x = x;
      since_best = 0;
    } else if (++since_best >= kStallWindow) {
      result.stagnated = true;
      break;
    }
    if (res <= opts.tol) {
      result.converged = true;
      break;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  result.x = best_x;
  // Recurrence residuals drift; report the true one.
  result.residual = (apply(best_x) - b).norm() / bnorm;
  result.converged = result.converged || result.residual <= opts.tol;
  return result;
}

FiniteDiffReport finite_diff_check(const ScalarFunction& f, const ParamVector& theta, double h,
                                   double rel_floor) {
  const ParamVector g = gradient(f, theta);
  FiniteDiffReport report;
  ParamVector probe = theta;
  for (auto& seg : probe.segments()) {
    SegmentCheck check{seg.name, 0.0, false};
    const ad::Matrix& analytic = g.at(seg.name);
    if (!seg.trainable) {
      check.zero_gradient = true;
      report.segments.push_back(check);
      continue;
    }
    check.zero_gradient = analytic.cwiseAbs().maxCoeff() == 0.0;
    for (Eigen::Index i = 0; i < seg.values.size(); ++i) {
      double& w = seg.values.data()[i];
      const double saved = w;
      w = saved + h;
      const double fp = evaluate(f, probe);
      w = saved - h;
      const double fm = evaluate(f, probe);
      w = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic.data()[i];
      const double denom = std::max({std::abs(an), std::abs(fd), rel_floor});
      check.max_rel_error = std::max(check.max_rel_error, std::abs(an - fd) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.segments.push_back(check);
  }
  return report;
}

}  // namespace ial
