// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ial/autodiff.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ial {

using IntGrid = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Task { binary, multiclass, regression };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);

/// One time-series point u = (x^(1:T), y), optionally with the synthetic
/// ground-truth relevance of each (t, d) cell.
struct TimeSeriesInstance {
  std::string id;
  ad::Matrix x;  // T x D
  ad::Vector y;  // L
  std::optional<IntGrid> relevance;
  std::optional<Eigen::VectorXi> relevance_time;

  bool operator==(const TimeSeriesInstance&) const = default;
};

struct Dataset {
  std::vector<TimeSeriesInstance> instances;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
  int T() const { return empty() ? 0 : static_cast<int>(instances.front().x.rows()); }
  int D() const { return empty() ? 0 : static_cast<int>(instances.front().x.cols()); }
  int L() const { return empty() ? 0 : static_cast<int>(instances.front().y.size()); }

  /// Index of the instance with this id, or nullopt.
  std::optional<std::size_t> find(std::string_view id) const;

  bool operator==(const Dataset&) const = default;
};

struct ModelConfig {
  int T = 0;
  int D = 0;
  int L = 1;
  int hidden_beta = 32;
  int hidden_gamma = 32;
  Task task = Task::binary;
  int latent_dim = 16;
  int r_dim = 32;

  bool operator==(const ModelConfig&) const = default;
};

/// Time attention beta (simplex over T), feature attention gamma in (-1, 1),
/// and the embedded inputs v they are applied to.
struct AttentionMap {
  ad::Vector beta;    // T
  ad::Matrix gamma;   // T x D
  ad::Matrix v;       // T x D
};

/// Ternary annotation: 1 attend, 0 not attend, -1 unknown.
struct AttentionMask {
  std::string instance_id;
  IntGrid feature_mask;       // T x D
  Eigen::VectorXi time_mask;  // T

  static AttentionMask unknown(std::string id, int T, int D);
  bool operator==(const AttentionMask&) const = default;
};

/// Throws ValidationError naming the first cell outside {-1, 0, 1}.
void validate_mask(const AttentionMask& mask);

}  // namespace ial
