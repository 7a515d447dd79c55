// SPDX-License-Identifier: Apache-2.0
//
// Self-contained numerical checks shared by the CLI (`ial check`) and the
// acceptance suite.

#pragma once

#include "ial/calculus.hpp"
#include "ial/cer.hpp"
#include "ial/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ial::checks {

struct GradientCase {
  std::uint64_t seed = 0;
  std::string objective;  // "task" or "nap"
  double max_rel_error = 0.0;
  std::string worst_segment;
};

struct GradientReport {
  std::vector<GradientCase> cases;
  double max_rel_error = 0.0;
  double seconds = 0.0;
};

/// Autodiff gradients against central differences on seeded toy models
/// (T = 4, D = 6, hidden 8): the task loss and the full NAP loss with a fixed eps,
/// which together cover every parameter segment. The BCE on gamma^2 has large
/// third derivatives near gamma = 0, hence the small default step.
GradientReport gradient_suite(int models = 5, double h = 1e-6);

// Convex logistic regression used by the influence checks. Instances have
// T = 1; segments "w" (D x 1) and "b" (1 x 1).

struct LogisticData {
  Dataset train;
  Dataset valid;
  int D = 0;
};

LogisticData make_logistic_data(int n_train, int n_valid, int D, std::uint64_t seed);
ParamVector logistic_init(int D);
cer::BatchLoss logistic_loss();
/// Mean loss over train plus 0.5 * weight_decay * |theta|^2.
ScalarFunction logistic_objective(const Dataset& train, double weight_decay);
/// Newton iterations with an explicit Hessian until the gradient norm is below tol.
ParamVector logistic_fit(const Dataset& train, double weight_decay, ParamVector start,
                         double tol = 1e-12);
/// Exact Hessian of logistic_objective.
ad::Matrix logistic_hessian(const Dataset& train, const ParamVector& theta, double weight_decay);

struct HvpReport {
  double hvp_vs_exact = 0.0;  // max relative error against the analytic Hessian
  double hvp_vs_fd = 0.0;     // against central differences of gradients
  double cg_residual = 0.0;
  int cg_iterations = 0;
  bool cg_converged = false;
  double seconds = 0.0;
};

HvpReport hvp_suite(std::uint64_t seed = 7);

struct InfluenceReport {
  std::vector<double> influence;      // I(u_i) summed over the validation set
  std::vector<double> loo_delta;      // L_val(theta_-i) - L_val(theta)
  double spearman = 0.0;              // between influence and -loo_delta
  double pearson = 0.0;               // between -influence / N and loo_delta
  bool cg_converged = false;
  double seconds = 0.0;
};

/// N = 24 convex model: influence scores against exact leave-one-out refits.
InfluenceReport influence_loo_suite(std::uint64_t seed = 11, int n_train = 24, int n_valid = 40,
                                    int D = 5, double weight_decay = 0.01);

double spearman(const std::vector<double>& a, const std::vector<double>& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace ial::checks
