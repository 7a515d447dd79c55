// SPDX-License-Identifier: Apache-2.0
#include "ial/optim.hpp"

#include <cmath>

namespace ial {

void Adam::step(ParamVector& params, const ParamVector& grad) {
  ad::Vector theta = params.flatten();
  const ad::Vector g = grad.flatten().cwiseProduct(params.trainable_mask());
  if (m_.size() != theta.size()) {
    m_ = ad::Vector::Zero(theta.size());
    v_ = ad::Vector::Zero(theta.size());
    t_ = 0;
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * g;
  v_ = beta2_ * v_ + (1.0 - beta2_) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  theta.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  params.unflatten(theta);
}

ad::Var weight_decay_term(const BoundParams& p, const ParamVector& params, double coeff) {
  ad::Var total;
  for (const auto& s : params.segments()) {
    if (!s.trainable) {
      continue;
    }
    const ad::Var sq = ad::sum(ad::square(p[s.name]));
    total = total.valid() ? total + sq : sq;
  }
  if (!total.valid()) {
    return p.tape().constant(ad::Matrix::Zero(1, 1));
  }
  return (0.5 * coeff) * total;
}

}  // namespace ial
