// SPDX-License-Identifier: Apache-2.0
#include "ial/params.hpp"

#include "ial/digest.hpp"
#include "ial/errors.hpp"

#include <cstring>

namespace ial {

void ParamVector::add(std::string name, ad::Matrix values, bool trainable) {
  if (contains(name)) {
    throw ValidationError("duplicate parameter segment '" + name + "'");
  }
  index_[name] = segments_.size();
  segments_.push_back(Segment{std::move(name), std::move(values), trainable});
}

Segment& ParamVector::segment(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw NotFoundError("unknown parameter segment '" + name + "'");
  }
  return segments_[it->second];
}

const Segment& ParamVector::segment(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw NotFoundError("unknown parameter segment '" + name + "'");
  }
  return segments_[it->second];
}

std::size_t ParamVector::size() const {
  std::size_t n = 0;
  for (const auto& s : segments_) {
    n += static_cast<std::size_t>(s.values.size());
  }
  return n;
}

ad::Vector ParamVector::flatten() const {
  ad::Vector flat(static_cast<Eigen::Index>(size()));
  Eigen::Index at = 0;
  for (const auto& s : segments_) {
    flat.segment(at, s.values.size()) = Eigen::Map<const ad::Vector>(s.values.data(), s.values.size());
    at += s.values.size();
  }
  return flat;
}

void ParamVector::unflatten(const ad::Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(size())) {
    throw ShapeError("unflatten: expected " + std::to_string(size()) + " values, got " +
                     std::to_string(flat.size()));
  }
  Eigen::Index at = 0;
  for (auto& s : segments_) {
    Eigen::Map<ad::Vector>(s.values.data(), s.values.size()) = flat.segment(at, s.values.size());
    at += s.values.size();
  }
}

ParamVector ParamVector::with_values(const ad::Vector& flat) const {
  ParamVector out = *this;
  out.unflatten(flat);
  return out;
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out = *this;
  for (auto& s : out.segments_) {
    s.values.setZero();
  }
  return out;
}

ad::Vector ParamVector::trainable_mask() const {
  ad::Vector mask(static_cast<Eigen::Index>(size()));
  Eigen::Index at = 0;
  for (const auto& s : segments_) {
    mask.segment(at, s.values.size()).setConstant(s.trainable ? 1.0 : 0.0);
    at += s.values.size();
  }
  return mask;
}

void ParamVector::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& s : segments_) {
    s.trainable = pred(s.name);
  }
}

std::string ParamVector::digest() const {
  Sha256 h;
  for (const auto& s : segments_) {
    h.update(s.name);
    const std::int64_t shape[2] = {s.values.rows(), s.values.cols()};
    h.update(shape, sizeof(shape));
    h.update(s.values.data(), sizeof(double) * static_cast<std::size_t>(s.values.size()));
  }
  return h.hex();
}

BoundParams::BoundParams(ad::Tape& tape, const ParamVector& params) : tape_(&tape) {
  for (const auto& s : params.segments()) {
    vars_[s.name] = s.trainable ? tape.variable(s.values) : tape.constant(s.values);
  }
}

ad::Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) {
    throw NotFoundError("unbound parameter segment '" + name + "'");
  }
  return it->second;
}

ParamVector BoundParams::gradients(const ParamVector& like) const {
  ParamVector out = like;
  for (auto& s : out.segments()) {
    s.values = tape_->grad(vars_.at(s.name));
  }
  return out;
}

}  // namespace ial
