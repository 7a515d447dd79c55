// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ial/params.hpp"

namespace ial {

/// Adaptive-moment updates over the trainable coordinates of a ParamVector.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamVector& params, const ParamVector& grad);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  ad::Vector m_, v_;
};

/// 0.5 * coeff * sum of squares over trainable segments, on the tape.
ad::Var weight_decay_term(const BoundParams& p, const ParamVector& params, double coeff);

}  // namespace ial
