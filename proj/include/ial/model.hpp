// SPDX-License-Identifier: Apache-2.0
//
// Two-level attention predictor for multivariate time series.
//
//   v = x W_emb                        (T x D, same width as x)
//   o = GRU_beta(v),  h = GRU_gamma(v)
//   e_t = o_t w_beta + b_beta  [+ z_t u_beta]
//   q_t = h_t W_gamma + b_gamma [+ z_t U_gamma]
//   beta = softmax(e),  gamma_t = tanh(q_t)
//   y_hat = link(sum_t beta_t (gamma_t * v_t) W_out + b_out)
//
// The bracketed terms are present only when a latent summary z is supplied;
// writing them as a separate z-projection is the same as feeding [o_t ; z_t]
// to a head whose weight is stacked as [w_beta ; u_beta].

#pragma once

#include "ial/params.hpp"
#include "ial/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace ial::model {

/// Identifier of the contribution decomposition implemented below.
inline constexpr std::string_view kContributionScheme = "retain-style-contribution/v1";
inline constexpr std::string_view kCellType = "gru";

namespace seg {
inline constexpr const char* embed = "embed.weight";
inline constexpr const char* head_beta_w = "head_beta.weight";
inline constexpr const char* head_beta_b = "head_beta.bias";
inline constexpr const char* head_beta_z = "head_beta.z_weight";
inline constexpr const char* head_gamma_w = "head_gamma.weight";
inline constexpr const char* head_gamma_b = "head_gamma.bias";
inline constexpr const char* head_gamma_z = "head_gamma.z_weight";
inline constexpr const char* out_w = "output.weight";
inline constexpr const char* out_b = "output.bias";
inline constexpr const char* rnn_beta = "rnn_beta";
inline constexpr const char* rnn_gamma = "rnn_gamma";
}  // namespace seg

/// Segments that belong to the latent-conditioning path (frozen during
/// pretraining).
bool is_conditioning_segment(const std::string& name);

/// Adds the four segments of a GRU cell named prefix.{w_input,w_hidden,w_candidate,bias}.
/// The first hidden/4 units start as input-independent leaky integrators with
/// update gates spread over [0.2, 0.9], so h_t carries the step index even
/// when the inputs are exchangeable across time.
void add_gru_segments(std::map<std::string, ad::Matrix>& out, const std::string& prefix,
                      int input, int hidden, std::mt19937_64& rng);

/// Runs a GRU over per-timestep inputs [B x input]; returns hidden states [B x hidden].
std::vector<ad::Var> run_gru(const BoundParams& p, const std::string& prefix,
                             std::span<const ad::Var> inputs);

/// All parameters (model and NAP), in canonical sorted-name order.
ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Validates that params carry every segment with the shapes cfg implies.
void check_params(const ParamVector& params, const ModelConfig& cfg);

/// Per-timestep latent rows z_t [1 x d_z] on the same tape.
using LatentRows = std::vector<ad::Var>;

struct BatchAttention {
  std::vector<ad::Var> v;      // T x [B x D]
  ad::Var beta;                // [B x T]
  std::vector<ad::Var> gamma;  // T x [B x D]
};

struct BatchOutput {
  BatchAttention attention;
  ad::Var logits;  // [B x L], pre-link
};

/// Stacks instances into per-timestep inputs [B x D].
std::vector<ad::Matrix> stack_timesteps(std::span<const TimeSeriesInstance* const> batch);
ad::Matrix stack_labels(std::span<const TimeSeriesInstance* const> batch);

/// Attention from embedded inputs v_t [B x D].
BatchAttention attention_from_embedded(const BoundParams& p, const ModelConfig& cfg,
                                       std::vector<ad::Var> v, const LatentRows* z);
BatchAttention attention_batch(const BoundParams& p, const ModelConfig& cfg,
                               std::span<const ad::Matrix> x_steps, const LatentRows* z);
BatchOutput forward_batch(const BoundParams& p, const ModelConfig& cfg,
                          std::span<const TimeSeriesInstance* const> batch, const LatentRows* z);

/// Mean task loss of a batch on the tape.
ad::Var task_loss_batch(ad::Var logits, const ad::Matrix& labels, Task task);

/// Applies the task link to pre-activations (row-wise).
ad::Matrix apply_link(const ad::Matrix& logits, Task task);

struct BatchPrediction {
  ad::Matrix logits;               // B x L
  ad::Matrix y_hat;                // B x L, after the link
  ad::Matrix beta;                 // B x T
  std::vector<ad::Matrix> gamma;   // T x [B x D]
};

/// Inference over many instances at once; z is T x d_z or null.
BatchPrediction infer_batch(const ParamVector& params, const ModelConfig& cfg,
                            std::span<const TimeSeriesInstance* const> batch,
                            const ad::Matrix* z);

/// Pointers to every instance of ds, in order.
std::vector<const TimeSeriesInstance*> pointers(const Dataset& ds);

// Single-instance operations.

/// v = x W_emb. Throws ShapeError if x is not T x D.
ad::Matrix embed_inputs(const ad::Matrix& x, const ParamVector& params, const ModelConfig& cfg);

/// Attention from embedded inputs; z (T x d_z) conditions both heads when given.
AttentionMap forward_attention(const ad::Matrix& v, const ParamVector& params,
                               const ModelConfig& cfg, const ad::Matrix* z = nullptr);

ad::Vector predict(const AttentionMap& attn, const ParamVector& params, const ModelConfig& cfg);

/// predict() with gamma zeroed at every (t, d) in off. Duplicates are harmless.
ad::Vector predict_with_override(const AttentionMap& attn, const ParamVector& params,
                                 const ModelConfig& cfg,
                                 std::span<const std::pair<int, int>> off);

/// Pre-activations, without the link.
ad::Vector logits(const AttentionMap& attn, const ParamVector& params, const ModelConfig& cfg);

/// Contribution of input cell x^(t)_j to pre-activation `output`:
///   beta_t * x^(t)_j * sum_d W_emb[j, d] gamma^(t)_d W_out[d, output]
/// The grid plus the output bias reconstructs the pre-activation.
ad::Matrix contribution(const ad::Matrix& x, const AttentionMap& attn, const ParamVector& params,
                        const ModelConfig& cfg, int output = 0);
/// One grid per output (per class for multiclass).
std::vector<ad::Matrix> contribution_all(const ad::Matrix& x, const AttentionMap& attn,
                                         const ParamVector& params, const ModelConfig& cfg);

/// Per-instance loss. Binary: cross-entropy with probabilities clipped to
/// [1e-7, 1 - 1e-7]; multiclass: categorical cross-entropy; regression: MSE.
/// Throws ValidationError for labels outside the task's range.
double task_loss(const ad::Vector& y_hat, const ad::Vector& y, Task task);
void validate_label(const ad::Vector& y, Task task);

inline constexpr double kProbClip = 1e-7;

}  // namespace ial::model
