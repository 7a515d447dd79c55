// SPDX-License-Identifier: Apache-2.0
//
// Cost-effective reranking: instance scores (influence, uncertainty) pick
// the training instances worth annotating, feature scores (influence,
// uncertainty, counterfactual) pick the cells to ask about.

#pragma once

#include "ial/calculus.hpp"
#include "ial/data_io.hpp"
#include "ial/model.hpp"
#include "ial/nap.hpp"
#include "ial/params.hpp"
#include "ial/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ial::cer {

enum class Scorer {
  inst_influence,
  inst_uncertainty,
  feat_influence,
  feat_uncertainty,
  feat_counterfactual,
  inst_random,
  feat_random,
};

std::string_view to_string(Scorer s);
Scorer parse_scorer(std::string_view name);
/// Accepts full names and the short forms "influence", "uncertainty",
/// "counterfactual", "random", resolved for the instance or feature level.
/// Throws ValidationError when the scorer belongs to the other level.
Scorer parse_scorer_for(std::string_view name, bool instance);
bool is_instance_scorer(Scorer s);

namespace flag {
inline constexpr const char* cg_not_converged = "CgNotConverged";
inline constexpr const char* constant_feature = "ConstantFeature";
}  // namespace flag

struct ScoreRecord {
  std::string instance_id;
  std::optional<std::pair<int, int>> cell;  // (t, d) for feature scores
  Scorer scorer = Scorer::inst_uncertainty;
  double value = 0.0;
  std::vector<std::string> flags;
};

// Shared latent context.

/// Mean-mode latent of the store over pool (T x d_z); zeros for an empty
/// store, which is the prior mean.
ad::Matrix mean_latent(const Dataset& pool, const nap::AnnotationStore& store,
                       const ParamVector& params, const ModelConfig& cfg);

/// Per-instance task loss under latent z (null for no conditioning).
std::vector<double> per_instance_loss(const Dataset& ds, const ParamVector& params,
                                      const ModelConfig& cfg, const ad::Matrix* z);

/// Indices of the P highest-loss instances, loss descending, index ascending
/// on ties. Throws PreconditionError for an empty set or P outside [1, M].
std::vector<std::size_t> select_validation_subset(const std::vector<double>& losses, int P);
std::vector<std::string> select_validation_subset(const Dataset& valid, const ParamVector& params,
                                                  const ModelConfig& cfg, const ad::Matrix* z,
                                                  int P);

// Influence.

/// Mean loss of a batch of instances on the tape.
using BatchLoss =
    std::function<ad::Var(const BoundParams&, std::span<const TimeSeriesInstance* const>)>;

/// Task loss of the attention model with a constant latent z (null for none).
BatchLoss model_batch_loss(const ModelConfig& cfg, const ad::Matrix* z);

struct InfluenceProblem {
  /// Parameters at the fitted optimum; the trainable mask selects the
  /// coordinates the Hessian is taken over.
  ParamVector params;
  BatchLoss loss;
  /// Training objective: mean loss over train plus 0.5 * weight_decay * |theta|^2.
  std::vector<const TimeSeriesInstance*> train;
  double weight_decay = 0.0;
  CgOptions cg;
};

/// I(u) = sum_p -grad L(val_p)^T (H + damping I)^-1 grad L(u). The inverse
/// Hessian is applied once to the summed validation gradient, which gives the
/// same sum as one solve per training point because H is symmetric.
class InfluenceScorer {
 public:
  InfluenceScorer(InfluenceProblem problem, std::span<const TimeSeriesInstance* const> validation);

  double score(const TimeSeriesInstance& u) const;
  ScoreRecord record(const TimeSeriesInstance& u) const;

  /// Feature influence: mean over delta in {-2s, -s, +s, +2s} of
  /// |I(u with x[t,d] += delta) - I(u)|, s = std[d]. Zero with the
  /// ConstantFeature flag when s = 0.
  ScoreRecord feature_record(const TimeSeriesInstance& u, int t, int d,
                             const io::FeatureStats& stats) const;
  /// All cells at once (T x D); flags are not reported here.
  ad::Matrix feature_grid(const TimeSeriesInstance& u, const io::FeatureStats& stats) const;

  const CgResult& solve() const { return solve_; }
  bool converged() const { return solve_.converged; }
  const ad::Vector& s_test() const { return solve_.x; }

 private:
  ad::Vector grad_of(const TimeSeriesInstance& u) const;

  InfluenceProblem problem_;
  ad::Vector mask_;
  CgResult solve_;
};

// Uncertainty.

/// Per instance: mean over output dims of the unbiased sample variance of
/// y_hat over S latent draws from N(mu, sigma^2). Draws are shared by all
/// instances and reproducible from seed.
std::vector<double> instance_uncertainty(const Dataset& ds, const ad::Matrix& mu,
                                         const ad::Matrix& sigma, const ParamVector& params,
                                         const ModelConfig& cfg, int S, std::uint64_t seed);

/// T x D sample variance of beta_t * gamma_td over S latent draws.
ad::Matrix feature_uncertainty(const TimeSeriesInstance& u, const ad::Matrix& mu,
                               const ad::Matrix& sigma, const ParamVector& params,
                               const ModelConfig& cfg, int S, std::uint64_t seed);

// Counterfactual.

struct Counterfactual {
  ad::Vector delta;  // predict - predict with gamma[t,d] = 0
  double score = 0.0;  // L2 norm of delta
};

Counterfactual counterfactual_score(const AttentionMap& attn, const ParamVector& params,
                                    const ModelConfig& cfg, int t, int d);
Counterfactual counterfactual_score(const TimeSeriesInstance& u, const ParamVector& params,
                                    const ModelConfig& cfg, const ad::Matrix* z, int t, int d);
/// T x D grid of scores.
ad::Matrix counterfactual_grid(const TimeSeriesInstance& u, const ParamVector& params,
                               const ModelConfig& cfg, const ad::Matrix* z);

// Random control.

std::vector<double> random_instance_scores(std::size_t n, std::uint64_t seed);
ad::Matrix random_feature_scores(int T, int D, std::uint64_t seed, std::size_t instance_index);

// Reranking.

struct CerConfig {
  int P = 20;
  int K = 16;
  int F = 4;
  Scorer inst_scorer = Scorer::inst_uncertainty;
  Scorer feat_scorer = Scorer::feat_counterfactual;
  int mc_samples = 30;
  /// Weight decay of the training objective whose Hessian the influence
  /// scores invert.
  double weight_decay = 1e-4;
  CgOptions cg;
  std::uint64_t seed = 0;
  /// Instances already in the store are scored but never selected again.
  bool exclude_annotated = true;
};

struct FeatureEntry {
  int t = 0;
  int d = 0;
  double score = 0.0;
  std::vector<std::string> flags;
};

struct RerankEntry {
  std::string instance_id;
  std::size_t index = 0;  // position in the training set
  double score = 0.0;
  std::vector<std::string> flags;
  std::vector<FeatureEntry> features;
};

struct RerankReport {
  int round = 0;
  int P = 0, K = 0, F = 0;
  Scorer inst_scorer = Scorer::inst_uncertainty;
  Scorer feat_scorer = Scorer::feat_counterfactual;
  std::uint64_t seed = 0;
  std::vector<std::string> validation_ids;
  std::vector<RerankEntry> entries;
  std::vector<std::string> warnings;
};

io::json report_to_json(const RerankReport& r);
RerankReport report_from_json(const io::json& j);

/// Indices of scores sorted by value descending, index ascending on ties.
std::vector<std::size_t> descending_order(const std::vector<double>& scores);

/// Top-P validation subset, instance scores over all of train, top-K, then
/// feature scores over every cell of each selected instance and top-F.
/// Throws PreconditionError when P, K or F are out of range.
RerankReport rerank(const Dataset& train, const Dataset& valid, const nap::AnnotationStore& store,
                    const ParamVector& params, const ModelConfig& cfg, const CerConfig& config,
                    int round);

}  // namespace ial::cer
