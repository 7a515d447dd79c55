// SPDX-License-Identifier: Apache-2.0
//
// The interactive loop: pretrain, then rounds of rerank -> annotate -> store
// append -> (adapt once at s = 1) -> evaluate.

#pragma once

#include "ial/cer.hpp"
#include "ial/errors.hpp"
#include "ial/nap.hpp"
#include "ial/params.hpp"
#include "ial/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ial::loop {

// Pretraining.

struct PretrainConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int max_epochs = 200;
  int patience = 10;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> train_loss;  // mean minibatch objective per epoch
  std::vector<double> valid_loss;  // task loss per epoch (train loss without a valid set)
  int best_epoch = 0;
  int epochs_run = 0;
};

struct PretrainResult {
  ParamVector params;
  PretrainLog log;
};

/// Raised when the objective stops being finite; carries the last parameters
/// that produced a finite loss.
class Diverged : public TrainingDiverged {
 public:
  Diverged(const std::string& what, ParamVector last)
      : TrainingDiverged(what), last_(std::move(last)) {}
  const ParamVector& last_params() const { return last_; }

 private:
  ParamVector last_;
};

/// Minibatch adaptive-moment training of the unconditioned model; latent
/// conditioning segments stay frozen. Early stopping keeps the parameters of
/// the best validation epoch. Throws PreconditionError for an empty train set.
PretrainResult pretrain(const Dataset& train, const Dataset* valid, const ModelConfig& cfg,
                        const PretrainConfig& config);
/// Continues from given parameters instead of a fresh initialization.
PretrainResult pretrain_from(ParamVector init, const Dataset& train, const Dataset* valid,
                             const ModelConfig& cfg, const PretrainConfig& config);

// Annotation.

struct OracleConfig {
  enum class Scope { requested, full_grid };
  double noise_rate = 0.0;
  double idk_rate = 0.0;
  Scope scope = Scope::requested;
};

/// Source of masks for the instances a report selects.
class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::vector<AttentionMask> annotate(const cer::RerankReport& report,
                                              const Dataset& train) = 0;
  virtual std::string name() const = 0;
};

/// Simulated annotator answering from ground-truth relevance. Each answered
/// cell is -1 with probability idk_rate, otherwise the relevance bit flipped
/// with probability noise_rate. With the requested scope only the ranked
/// cells (and their timesteps) are answered; the rest stay -1.
std::vector<AttentionMask> oracle_annotate(const cer::RerankReport& report, const Dataset& train,
                                           const OracleConfig& config, std::uint64_t seed);

class OracleAnnotator : public Annotator {
 public:
  OracleAnnotator(OracleConfig config, std::uint64_t seed) : config_(config), seed_(seed) {}
  std::vector<AttentionMask> annotate(const cer::RerankReport& report,
                                      const Dataset& train) override;
  std::string name() const override { return "oracle"; }

 private:
  OracleConfig config_;
  std::uint64_t seed_;
  int calls_ = 0;
};

// Evaluation.

/// Area under the ROC curve; tied scores count one half. Throws
/// UndefinedMetric when only one class is present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);
/// mean |y - y_hat| / (|y| + 1e-8)
double mape(const std::vector<double>& predicted, const std::vector<double>& targets);

struct Metrics {
  std::string name;  // "auroc", "accuracy" or "mape"
  double value = 0.0;
  std::size_t count = 0;
};

/// Task metric on ds with the mean latent of store (resolved against pool).
Metrics evaluate_model(const ParamVector& params, const ModelConfig& cfg, const Dataset& pool,
                       const nap::AnnotationStore& store, const Dataset& ds);

// Rounds.

struct RoundState {
  int s = 0;
  std::optional<cer::RerankReport> report;
  std::vector<std::string> pending;
  std::optional<Metrics> valid_metrics;
  std::optional<Metrics> test_metrics;
  std::string params_hash;
  std::string store_digest;
  bool open = false;
};

struct SessionConfig {
  nap::AdaptConfig adapt;
  /// Keep the adaptation step with the best validation task metric rather
  /// than the final step.
  bool select_by_metric = false;
  std::uint64_t seed = 0;
};

/// One run of the loop over a fixed split. Not thread-safe; callers serialize.
class Session {
 public:
  /// s is the last completed round (0 right after pretraining).
  Session(Dataset train, Dataset valid, Dataset test, ParamVector params, ModelConfig cfg,
          SessionConfig config, nap::AnnotationStore store = {}, int s = 0);

  const RoundState& state() const { return state_; }
  const ParamVector& params() const { return params_; }
  const nap::AnnotationStore& store() const { return store_; }
  const ModelConfig& model_config() const { return cfg_; }
  const Dataset& train() const { return train_; }
  const Dataset& valid() const { return valid_; }
  const Dataset& test() const { return test_; }

  /// Opens round s + 1 with a fresh rerank. Throws ConflictError if a round
  /// is already open.
  const cer::RerankReport& begin_round(cer::CerConfig config);
  /// The rerank begin_round would run, without changing state.
  cer::RerankReport plan_round(cer::CerConfig config) const;
  /// Opens round s + 1 with a report from plan_round.
  const cer::RerankReport& open_round(cer::RerankReport report);
  /// Records a mask for a pending instance. Throws ConflictError without an
  /// open round, NotFoundError for an instance that is not pending, and
  /// DuplicateError for a repeat.
  void submit(const AttentionMask& mask, const std::string& annotator = "oracle");
  /// Appends nothing further; adapts at s = 1, evaluates and closes the
  /// round. Pending instances left unanswered are dropped.
  const RoundState& complete_round();
  /// begin_round, annotate every entry, complete_round.
  const RoundState& run_round(const cer::CerConfig& config, Annotator& annotator);

  /// Metrics of the current parameters and store without changing state.
  void refresh_metrics();

  /// Log of the adaptation run, once round 1 has completed in this session.
  const std::optional<nap::AdaptLog>& adapt_log() const { return adapt_log_; }

 private:
  Dataset train_, valid_, test_;
  ParamVector params_;
  ModelConfig cfg_;
  SessionConfig config_;
  nap::AnnotationStore store_;
  RoundState state_;
  std::optional<nap::AdaptLog> adapt_log_;
};

/// Seed for round s derived from a base seed.
std::uint64_t round_seed(std::uint64_t base, int s);

}  // namespace ial::loop
