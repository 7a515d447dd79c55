// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data with known relevance, and the on-disk formats:
//   dataset      line-delimited JSON, one instance per line
//   annotations  line-delimited JSON, append-only, sparse masks
//   checkpoint   "IALCKPT" | u8 version | u32le manifest length | manifest
//                JSON | float32le payload in manifest segment order
//   records      line-delimited JSON (rerank reports, round metrics)

#pragma once

#include "ial/model.hpp"
#include "ial/nap.hpp"
#include "ial/params.hpp"
#include "ial/types.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ial::io {

using json = nlohmann::json;

struct SyntheticSpec {
  int N = 600;
  int T = 6;
  int D = 12;
  Task task = Task::binary;
  int classes = 3;  // multiclass only
  /// Number of truly relevant (t, d) cells.
  int sparsity = 8;
  double noise_std = 0.5;
  std::uint64_t seed = 0;
};

struct SyntheticTruth {
  IntGrid relevance;   // T x D indicator of the relevant cells
  ad::Matrix weights;  // T x D, zero off the relevant cells
  std::vector<double> thresholds;
};

/// x ~ N(0, 1); score = sum over relevant cells of w x + N(0, noise_std^2).
/// Binary labels threshold the score at its median, multiclass at quantiles,
/// regression uses the score itself.
Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticTruth* truth = nullptr);

json instance_to_json(const TimeSeriesInstance& inst);
TimeSeriesInstance instance_from_json(const json& j);

void dataset_write(const Dataset& ds, std::ostream& os);
/// Throws ParseError (with line number) or SchemaError (naming the id).
Dataset dataset_read(std::istream& is);
void dataset_save(const Dataset& ds, const std::filesystem::path& path);
Dataset dataset_load(const std::filesystem::path& path);

struct Split {
  Dataset train, valid, test;
};

/// Seeded shuffle into 70% / 10% / 20%.
Split split_dataset(const Dataset& ds, std::uint64_t seed);

/// Per-feature mean and standard deviation over every instance and timestep.
struct FeatureStats {
  ad::Vector mean;
  ad::Vector std;
};
FeatureStats feature_stats(const Dataset& ds);

// Checkpoints.

inline constexpr std::string_view kCheckpointMagic = "IALCKPT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointMeta {
  ModelConfig model;
  nap::NapLossWeights nap;
  int round = 0;
  std::uint64_t split_seed = 0;
  json extra = json::object();
};

struct Checkpoint {
  ParamVector params;
  CheckpointMeta meta;
};

std::string checkpoint_encode(const ParamVector& params, const CheckpointMeta& meta);
/// Throws FormatError (magic or version) or CorruptError (truncation,
/// shape or digest mismatch).
Checkpoint checkpoint_decode(const std::string& bytes);
void checkpoint_save(const std::filesystem::path& path, const ParamVector& params,
                     const CheckpointMeta& meta);
Checkpoint checkpoint_load(const std::filesystem::path& path);

// Annotations.

using SparseCells = std::vector<std::array<int, 3>>;  // (t, d, value)
using SparseSteps = std::vector<std::array<int, 2>>;  // (t, value)

SparseCells sparse_feature_mask(const IntGrid& mask);
SparseSteps sparse_time_mask(const Eigen::VectorXi& mask);
/// Dense T x D grid; cells not listed are -1. Validates values and ranges.
IntGrid dense_feature_mask(const SparseCells& cells, int T, int D);
Eigen::VectorXi dense_time_mask(const SparseSteps& steps, int T);

json annotation_to_json(const nap::StoreEntry& entry);
nap::StoreEntry annotation_from_json(const json& j, int T, int D);

/// Appends one record; rejects invalid values and duplicate (instance, round)
/// already present in the file.
void annotation_append(const std::filesystem::path& path, const nap::StoreEntry& entry, int T,
                       int D);
/// Missing file reads as an empty store.
nap::AnnotationStore annotation_load(const std::filesystem::path& path, int T, int D);
std::vector<nap::StoreEntry> annotation_query(const std::filesystem::path& path, int T, int D,
                                              std::optional<int> round,
                                              std::optional<std::string> instance_id);

// Generic record streams.

void record_append(const std::filesystem::path& path, const json& record);
std::vector<json> record_read(const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace ial::io
