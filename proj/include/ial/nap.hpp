// SPDX-License-Identifier: Apache-2.0
//
// Neural attention process: the annotation store is encoded by a recurrent
// encoder, averaged over annotations per timestep, and mapped to a Gaussian
// latent z^(1:T) that conditions the attention heads of every instance. After
// one adaptation run, new annotations change attention through this forward
// path alone; parameters stay fixed.

#pragma once

#include "ial/model.hpp"
#include "ial/params.hpp"
#include "ial/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ial::nap {

struct StoreEntry {
  int round = 0;
  AttentionMask mask;
  std::string annotator = "oracle";
  std::string ts;

  bool operator==(const StoreEntry&) const = default;
};

/// Append-only list of annotations; at most one entry per (instance, round).
class AnnotationStore {
 public:
  /// Throws ValidationError for values outside {-1,0,1} and DuplicateError for
  /// a repeated (instance, round).
  void append(StoreEntry entry);
  void append(int round, AttentionMask mask, std::string annotator = "oracle");

  const std::vector<StoreEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::vector<StoreEntry> by_round(int round) const;
  std::vector<StoreEntry> by_instance(const std::string& id) const;
  bool contains_instance(const std::string& id) const;
  std::vector<AttentionMask> masks() const;

  std::string digest() const;

 private:
  std::vector<StoreEntry> entries_;
};

enum class LatentMode { sample, mean };

struct LatentSummary {
  ad::Matrix mu;     // T x d_z
  ad::Matrix sigma;  // T x d_z, > 0
  ad::Matrix z;      // T x d_z
  int context_size = 0;
};

/// An annotation paired with the instance it annotates.
struct Annotated {
  const TimeSeriesInstance* instance = nullptr;
  const AttentionMask* mask = nullptr;
};

/// Pairs masks with instances of pool, in canonical (instance id, mask) order
/// so that summaries do not depend on store order. Throws
/// MissingInstanceError for an unknown id.
std::vector<Annotated> resolve(const Dataset& pool, std::span<const AttentionMask> masks);

// Tape-level building blocks.

/// r_k^(t) for every annotation, as T matrices [K x r_dim].
std::vector<ad::Var> encode_on_tape(const BoundParams& p, const ModelConfig& cfg,
                                    std::span<const Annotated> context);

struct LatentVars {
  std::vector<ad::Var> mu;     // T x [1 x d_z]
  std::vector<ad::Var> sigma;  // T x [1 x d_z]
  bool prior = false;
};

/// Posterior parameters from the context, or the standard-normal prior when
/// the context is empty.
LatentVars latent_on_tape(const BoundParams& p, const ModelConfig& cfg,
                          std::span<const Annotated> context);

/// z_t = mu_t + sigma_t * eps_t (eps given as T x d_z), or mu_t in mean mode.
model::LatentRows latent_rows(const LatentVars& lv, LatentMode mode, const ad::Matrix* eps);

/// sum_t KL(N(mu_t, sigma_t^2) || N(0, I)) on the tape.
ad::Var kl_on_tape(const LatentVars& lv);

// Plain operations.

/// r_k^(1:T) per annotation: K matrices of shape T x r_dim.
std::vector<ad::Matrix> encode_annotations(const Dataset& pool,
                                           std::span<const AttentionMask> masks,
                                           const ParamVector& params, const ModelConfig& cfg);

/// Per-timestep mean over annotations; nullopt when there are none (empty
/// context).
std::optional<ad::Matrix> summarize(std::span<const ad::Matrix> r);

/// (mu, sigma) = (r W_mu + b_mu, softplus(r W_sigma + b_sigma)) per timestep,
/// or (0, 1) for an empty context.
std::pair<ad::Matrix, ad::Matrix> latent_params(const std::optional<ad::Matrix>& r_bar,
                                                const ParamVector& params,
                                                const ModelConfig& cfg);

ad::Matrix sample_latent(const ad::Matrix& mu, const ad::Matrix& sigma, LatentMode mode,
                         std::uint64_t seed);
/// S independent draws from one seeded stream.
std::vector<ad::Matrix> sample_latents(const ad::Matrix& mu, const ad::Matrix& sigma, int count,
                                       std::uint64_t seed);

LatentSummary summarize_store(const Dataset& pool, const AnnotationStore& store,
                              const ParamVector& params, const ModelConfig& cfg, LatentMode mode,
                              std::uint64_t seed = 0);

/// Attention of one instance under the dataset-level latent of the store.
AttentionMap conditioned_attention(const TimeSeriesInstance& instance, const Dataset& pool,
                                   const AnnotationStore& store, const ParamVector& params,
                                   const ModelConfig& cfg, LatentMode mode, std::uint64_t seed = 0);

/// Closed-form sum over entries of KL(N(mu, sigma^2) || N(0, 1)).
double kl_standard_normal(const ad::Matrix& mu, const ad::Matrix& sigma);

// Adaptation training.

/// How a ternary feature mask supervises gamma in (-1, 1).
enum class MaskTarget {
  /// BCE(gamma^2, m): "attend" drives |gamma| to 1, "not attend" drives it to 0.
  magnitude,
  /// BCE((gamma + 1) / 2, m): "not attend" drives gamma to -1.
  rescaled,
};

struct NapLossWeights {
  double mask = 1.0;
  double kl = 0.1;
  MaskTarget target = MaskTarget::magnitude;
  /// Divide the KL term by the number of instances in the loss (batch plus
  /// targets), matching the per-instance means of the other two terms.
  bool kl_per_instance = true;
};

/// Mask supervision of the attention of targets (rows of attn match masks).
/// Feature term: masked BCE over annotated cells, averaged per instance. Time
/// term: -mean_{m=1} log beta - mean_{m=0} log(1 - beta). Each mean is over a
/// nonempty set or contributes 0; the sum is averaged over instances.
ad::Var mask_supervision(const model::BatchAttention& attn,
                         std::span<const AttentionMask* const> masks, MaskTarget target);

struct NapLossTerms {
  ad::Var total, task, mask, kl;
};

/// task + w.mask * mask + w.kl * KL (KL / n with kl_per_instance), with z drawn from the context posterior
/// (reparameterized with eps in sample mode) and shared by the task batch and
/// the targets.
NapLossTerms nap_loss_on_tape(const BoundParams& p, const ModelConfig& cfg,
                              std::span<const TimeSeriesInstance* const> batch,
                              std::span<const Annotated> context,
                              std::span<const Annotated> targets, const NapLossWeights& w,
                              LatentMode mode, const ad::Matrix* eps);

struct NapLossValue {
  double total = 0, task = 0, mask = 0, kl = 0;
};

/// Evaluates nap_loss_on_tape; eps is drawn from seed in sample mode.
NapLossValue nap_loss(const ParamVector& params, const ModelConfig& cfg,
                      std::span<const TimeSeriesInstance* const> batch,
                      std::span<const Annotated> context, std::span<const Annotated> targets,
                      const NapLossWeights& w, LatentMode mode, std::uint64_t seed);

/// Which segments the single adaptation pass updates.
enum class AdaptScope {
  conditioning,  // NAP encoder, latent heads and the z columns of the attention heads
  all,           // every segment
};

struct AdaptConfig {
  int steps = 300;
  double lr = 1e-2;
  int batch_size = 32;
  double weight_decay = 1e-4;
  NapLossWeights weights;
  AdaptScope scope = AdaptScope::conditioning;
  std::uint64_t seed = 0;
  /// Every this many steps, record the full-store loss and the monitored
  /// value (validation task loss when a validation set is given).
  int eval_every = 10;
  /// Replaces the validation task loss as the monitored value (lower is
  /// better). Called with the current parameters every eval_every steps.
  std::function<double(const ParamVector&)> monitor;
  /// Return the parameters with the lowest monitored value instead of the
  /// final ones.
  bool select_best = false;
};

struct AdaptLog {
  std::vector<double> step_loss;
  std::vector<int> context_sizes;
  std::vector<double> full_store_loss;  // mean mode, full store as context
  std::vector<double> valid_loss;
  int best_step = 0;
};

struct AdaptResult {
  ParamVector params;
  AdaptLog log;
};

/// Meta-trains the conditioned network once. Each step draws a context size
/// c ~ U{1..K}, takes c random annotations as context, and uses every
/// annotated instance as a target plus a task minibatch from train.
/// config.scope selects the updated segments. Throws PreconditionError for an
/// empty store.
AdaptResult adapt_train(const Dataset& train, const AnnotationStore& store, ParamVector params,
                        const ModelConfig& cfg, const AdaptConfig& config,
                        const Dataset* valid = nullptr);

}  // namespace ial::nap
