// SPDX-License-Identifier: Apache-2.0
//
// Derivatives of scalar objectives over a ParamVector: gradients,
// Hessian-vector products, a damped conjugate-gradient solver for
// (H + damping I) x = b, and a central-difference gradient checker.

#pragma once

#include "ial/params.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ial {

/// A scalar objective recorded on a tape. The batch (and any noise seed) is
/// captured by the closure, so repeated calls with equal parameters must
/// produce equal values.
using ScalarFunction = std::function<ad::Var(const BoundParams&)>;

/// f(theta) without recording backward closures.
double evaluate(const ScalarFunction& f, const ParamVector& theta);

/// Gradient with the segment structure of theta; frozen segments are zero.
/// Throws NonFiniteError if the loss or any gradient entry is not finite.
ParamVector gradient(const ScalarFunction& f, const ParamVector& theta);

/// Loss value and gradient from one sweep.
std::pair<double, ParamVector> value_and_gradient(const ScalarFunction& f, const ParamVector& theta);

/// H v restricted to the trainable coordinates (frozen entries of v are
/// ignored). Central difference of gradients with one Richardson step, so the
/// truncation error is fourth order in the step.
ParamVector hvp(const ScalarFunction& f, const ParamVector& theta, const ParamVector& v);
ad::Vector hvp(const ScalarFunction& f, const ParamVector& theta, const ad::Vector& v);

struct CgOptions {
  double damping = 0.01;
  int max_iter = 100;
  double tol = 1e-6;
};

struct CgResult {
  ad::Vector x;
  int iterations = 0;
  /// ||(H + damping I) x - b|| / ||b|| of the returned iterate.
  double residual = 0.0;
  bool converged = false;
  /// Set when CG stalled or hit a non-positive curvature direction; x is the
  /// best iterate seen.
  bool stagnated = false;
};

using LinearOperator = std::function<ad::Vector(const ad::Vector&)>;

CgResult cg_solve(const LinearOperator& hvp_fn, const ad::Vector& b, const CgOptions& opts = {});

struct SegmentCheck {
  std::string name;
  double max_rel_error = 0.0;
  /// Analytic gradient of this segment is identically zero (e.g. frozen).
  bool zero_gradient = false;
};

struct FiniteDiffReport {
  std::vector<SegmentCheck> segments;
  double max_rel_error = 0.0;
};

/// Per-element error |g - fd| / max(|g|, |fd|, rel_floor) against central
/// differences with step h. Frozen segments are not perturbed; they are
/// reported with zero_gradient set.
FiniteDiffReport finite_diff_check(const ScalarFunction& f, const ParamVector& theta,
                                   double h = 1e-4, double rel_floor = 1e-3);

}  // namespace ial
