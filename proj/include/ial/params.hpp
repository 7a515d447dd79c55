// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ial/autodiff.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace ial {

/// One named block of parameters. Frozen segments are bound as constants.
struct Segment {
  std::string name;
  ad::Matrix values;
  bool trainable = true;
};

/// Ordered collection of named parameter matrices, flattened in insertion order.
class ParamVector {
 public:
  ParamVector() = default;

  void add(std::string name, ad::Matrix values, bool trainable = true);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Segment& segment(const std::string& name);
  const Segment& segment(const std::string& name) const;
  ad::Matrix& at(const std::string& name) { return segment(name).values; }
  const ad::Matrix& at(const std::string& name) const { return segment(name).values; }

  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<Segment>& segments() { return segments_; }

  /// Total scalar count (n_params).
  std::size_t size() const;

  ad::Vector flatten() const;
  void unflatten(const ad::Vector& flat);
  ParamVector with_values(const ad::Vector& flat) const;
  ParamVector zeros_like() const;

  /// 1 on trainable coordinates, 0 on frozen ones.
  ad::Vector trainable_mask() const;
  void set_trainable(const std::function<bool(const std::string&)>& pred);

  /// Hex SHA-256 over names, shapes and 64-bit values.
  std::string digest() const;

 private:
  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
};

/// ParamVector segments placed on a Tape.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamVector& params);

  ad::Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  ad::Tape& tape() const { return *tape_; }

  /// Adjoints of every segment after tape.backward(); frozen segments are zero.
  ParamVector gradients(const ParamVector& like) const;

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

}  // namespace ial
