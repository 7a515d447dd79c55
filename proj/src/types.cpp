// SPDX-License-Identifier: Apache-2.0
#include "ial/types.hpp"

#include "ial/errors.hpp"

namespace ial {

std::string_view to_string(Task task) {
  switch (task) {
    case Task::binary:
      return "binary";
    case Task::multiclass:
      return "multiclass";
    case Task::regression:
      return "regression";
  }
  return "binary";
}

Task parse_task(std::string_view name) {
  if (name == "binary") return Task::binary;
  if (name == "multiclass") return Task::multiclass;
  if (name == "regression") return Task::regression;
  throw ValidationError("unknown task '" + std::string(name) + "'");
}

std::optional<std::size_t> Dataset::find(std::string_view id) const {
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i].id == id) {
      return i;
    }
  }
  return std::nullopt;
}

AttentionMask AttentionMask::unknown(std::string id, int T, int D) {
  return AttentionMask{std::move(id), IntGrid::Constant(T, D, -1), Eigen::VectorXi::Constant(T, -1)};
}

void validate_mask(const AttentionMask& mask) {
  for (Eigen::Index t = 0; t < mask.feature_mask.rows(); ++t) {
    for (Eigen::Index d = 0; d < mask.feature_mask.cols(); ++d) {
      const int v = mask.feature_mask(t, d);
      if (v < -1 || v > 1) {
        throw ValidationError("mask value " + std::to_string(v) + " at (" + std::to_string(t) +
                              "," + std::to_string(d) + ") is not in {-1,0,1}");
      }
    }
  }
  for (Eigen::Index t = 0; t < mask.time_mask.size(); ++t) {
    const int v = mask.time_mask(t);
    if (v < -1 || v > 1) {
      throw ValidationError("time mask value " + std::to_string(v) + " at (" + std::to_string(t) +
                            ") is not in {-1,0,1}");
    }
  }
}

}  // namespace ial
