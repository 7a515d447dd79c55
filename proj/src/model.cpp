// SPDX-License-Identifier: Apache-2.0
#include "ial/model.hpp"

#include "ial/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ial::model {

namespace {

ad::Matrix uniform(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = dist(rng);
  }
  return m;
}

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// Inverse softplus of 1: the bias that makes an untrained sigma head emit 1.
constexpr double kSoftplusInvOne = 0.5413248546129181;

}  // namespace

bool is_conditioning_segment(const std::string& name) {
  return name == seg::head_beta_z || name == seg::head_gamma_z || name.rfind("nap.", 0) == 0;
}

void add_gru_segments(std::map<std::string, ad::Matrix>& out, const std::string& prefix, int input,
                      int hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  out[prefix + ".w_input"] = uniform(input, 3 * hidden, bound, rng);
  out[prefix + ".w_hidden"] = uniform(hidden, 2 * hidden, bound, rng);
  out[prefix + ".w_candidate"] = uniform(hidden, hidden, bound, rng);
  out[prefix + ".bias"] = ad::Matrix::Zero(1, 3 * hidden);

  const int clocks = hidden / 4;
  ad::Matrix& w_in = out[prefix + ".w_input"];
  ad::Matrix& w_hid = out[prefix + ".w_hidden"];
  ad::Matrix& w_cand = out[prefix + ".w_candidate"];
  ad::Matrix& bias = out[prefix + ".bias"];
  for (int j = 0; j < clocks; ++j) {
    const double a = 0.2 + 0.7 * j / std::max(1, clocks - 1);
    for (int block = 0; block < 3; ++block) w_in.col(block * hidden + j).setZero();
    w_hid.col(j).setZero();
    w_hid.col(hidden + j).setZero();
    w_cand.col(j).setZero();
    bias(0, j) = std::log(a / (1.0 - a));  // h_t = tanh(1) * (1 - a^t)
    bias(0, 2 * hidden + j) = 1.0;
  }
}

std::vector<ad::Var> run_gru(const BoundParams& p, const std::string& prefix,
                             std::span<const ad::Var> inputs) {
  const ad::Var w_in = p[prefix + ".w_input"];
  const ad::Var w_hid = p[prefix + ".w_hidden"];
  const ad::Var w_cand = p[prefix + ".w_candidate"];
  const ad::Var bias = p[prefix + ".bias"];
  const Eigen::Index H = w_cand.rows();
  ad::Tape& tape = p.tape();

  std::vector<ad::Var> states;
  states.reserve(inputs.size());
  if (inputs.empty()) {
    return states;
  }
  ad::Var h = tape.constant(ad::Matrix::Zero(inputs.front().rows(), H));
  for (const ad::Var& x : inputs) {
    const ad::Var xin = ad::add_row(ad::matmul(x, w_in), bias);
    const ad::Var hzr = ad::matmul(h, w_hid);
    const ad::Var update = ad::sigmoid(ad::slice_cols(xin, 0, H) + ad::slice_cols(hzr, 0, H));
    const ad::Var reset = ad::sigmoid(ad::slice_cols(xin, H, H) + ad::slice_cols(hzr, H, H));
    const ad::Var cand =
        ad::tanh(ad::slice_cols(xin, 2 * H, H) + ad::matmul(reset * h, w_cand));
    h = cand + update * (h - cand);
    states.push_back(h);
  }
  return states;
}

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.T < 1 || cfg.D < 1 || cfg.L < 1 || cfg.hidden_beta < 1 || cfg.hidden_gamma < 1 ||
      cfg.latent_dim < 1 || cfg.r_dim < 1) {
    throw ValidationError("model config dimensions must be positive");
  }
  if (cfg.task == Task::binary && cfg.L != 1) {
    throw ValidationError("binary task requires L = 1");
  }
  std::mt19937_64 rng(seed);
  const int D = cfg.D, L = cfg.L, Hb = cfg.hidden_beta, Hg = cfg.hidden_gamma;
  const int dz = cfg.latent_dim, R = cfg.r_dim;

  std::map<std::string, ad::Matrix> segs;
  segs[seg::embed] = ad::Matrix::Identity(D, D) + uniform(D, D, 0.1 / std::sqrt(D), rng);
  add_gru_segments(segs, seg::rnn_beta, D, Hb, rng);
  add_gru_segments(segs, seg::rnn_gamma, D, Hg, rng);
  segs[seg::head_beta_w] = uniform(Hb, 1, 1.0 / std::sqrt(Hb), rng);
  segs[seg::head_beta_b] = ad::Matrix::Zero(1, 1);
  segs[seg::head_beta_z] = uniform(dz, 1, 0.1 / std::sqrt(dz), rng);
  segs[seg::head_gamma_w] = uniform(Hg, D, 1.0 / std::sqrt(Hg), rng);
  segs[seg::head_gamma_b] = ad::Matrix::Zero(1, D);
  segs[seg::head_gamma_z] = uniform(dz, D, 0.1 / std::sqrt(dz), rng);
  segs[seg::out_w] = uniform(D, L, 1.0 / std::sqrt(D), rng);
  segs[seg::out_b] = ad::Matrix::Zero(1, L);

  // Annotation encoder input per step: [v_t | feature mask_t | time mask_t].
  add_gru_segments(segs, "nap.encoder", 2 * D + 1, R, rng);
  segs["nap.mu.weight"] = uniform(R, dz, 0.1 / std::sqrt(R), rng);
  segs["nap.mu.bias"] = ad::Matrix::Zero(1, dz);
  segs["nap.sigma.weight"] = uniform(R, dz, 0.1 / std::sqrt(R), rng);
  segs["nap.sigma.bias"] = ad::Matrix::Constant(1, dz, kSoftplusInvOne);

  ParamVector params;
  for (auto& [name, values] : segs) {
    params.add(name, std::move(values));
  }
  return params;
}

void check_params(const ParamVector& params, const ModelConfig& cfg) {
  const ParamVector expected = init_params(cfg, 0);
  for (const auto& s : expected.segments()) {
    if (!params.contains(s.name)) {
      throw SchemaError("missing parameter segment '" + s.name + "'");
    }
    const auto& got = params.at(s.name);
    if (got.rows() != s.values.rows() || got.cols() != s.values.cols()) {
      throw ShapeError("segment '" + s.name + "' has shape " + shape_str(got.rows(), got.cols()) +
                       ", expected " + shape_str(s.values.rows(), s.values.cols()));
    }
  }
}

std::vector<ad::Matrix> stack_timesteps(std::span<const TimeSeriesInstance* const> batch) {
  if (batch.empty()) {
    throw PreconditionError("empty batch");
  }
  const Eigen::Index T = batch.front()->x.rows(), D = batch.front()->x.cols();
  std::vector<ad::Matrix> steps(static_cast<std::size_t>(T), ad::Matrix(batch.size(), D));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const ad::Matrix& x = batch[b]->x;
    if (x.rows() != T || x.cols() != D) {
      throw ShapeError("instance '" + batch[b]->id + "' has shape " + shape_str(x.rows(), x.cols()) +
                       ", expected " + shape_str(T, D));
    }
    for (Eigen::Index t = 0; t < T; ++t) {
      steps[static_cast<std::size_t>(t)].row(static_cast<Eigen::Index>(b)) = x.row(t);
    }
  }
  return steps;
}

ad::Matrix stack_labels(std::span<const TimeSeriesInstance* const> batch) {
  const Eigen::Index L = batch.front()->y.size();
  ad::Matrix y(batch.size(), L);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    y.row(static_cast<Eigen::Index>(b)) = batch[b]->y.transpose();
  }
  return y;
}

BatchAttention attention_from_embedded(const BoundParams& p, const ModelConfig& cfg,
                                       std::vector<ad::Var> v, const LatentRows* z) {
  const std::size_t T = v.size();
  if (z != nullptr && z->size() != T) {
    throw ShapeError("latent summary has " + std::to_string(z->size()) + " steps, expected " +
                     std::to_string(T));
  }
  const std::vector<ad::Var> o = run_gru(p, seg::rnn_beta, v);
  const std::vector<ad::Var> h = run_gru(p, seg::rnn_gamma, v);

  const ad::Var wb = p[seg::head_beta_w], bb = p[seg::head_beta_b];
  const ad::Var wg = p[seg::head_gamma_w], bg = p[seg::head_gamma_b];
  std::vector<ad::Var> energies;
  std::vector<ad::Var> gamma;
  energies.reserve(T);
  gamma.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    ad::Var e = ad::add_row(ad::matmul(o[t], wb), bb);
    ad::Var q = ad::add_row(ad::matmul(h[t], wg), bg);
    if (z != nullptr) {
      const ad::Var zt = (*z)[t];
      if (zt.cols() != cfg.latent_dim) {
        throw ShapeError("latent width " + std::to_string(zt.cols()) + ", expected " +
                         std::to_string(cfg.latent_dim));
      }
      e = ad::add_row(e, ad::matmul(zt, p[seg::head_beta_z]));
      q = ad::add_row(q, ad::matmul(zt, p[seg::head_gamma_z]));
    }
    energies.push_back(e);
    gamma.push_back(ad::tanh(q));
  }
  BatchAttention out;
  out.beta = ad::softmax_rows(ad::concat_cols(energies));
  out.gamma = std::move(gamma);
  out.v = std::move(v);
  return out;
}

BatchAttention attention_batch(const BoundParams& p, const ModelConfig& cfg,
                               std::span<const ad::Matrix> x_steps, const LatentRows* z) {
  if (static_cast<int>(x_steps.size()) != cfg.T) {
    throw ShapeError("expected " + std::to_string(cfg.T) + " timesteps, got " +
                     std::to_string(x_steps.size()));
  }
  const ad::Var w_emb = p[seg::embed];
  std::vector<ad::Var> v;
  v.reserve(x_steps.size());
  for (const ad::Matrix& x : x_steps) {
    if (x.cols() != cfg.D) {
      throw ShapeError("expected " + std::to_string(cfg.D) + " features, got " +
                       std::to_string(x.cols()));
    }
    v.push_back(ad::matmul(p.tape().constant(x), w_emb));
  }
  return attention_from_embedded(p, cfg, std::move(v), z);
}

BatchOutput forward_batch(const BoundParams& p, const ModelConfig& cfg,
                          std::span<const TimeSeriesInstance* const> batch, const LatentRows* z) {
  const std::vector<ad::Matrix> steps = stack_timesteps(batch);
  BatchOutput out;
  out.attention = attention_batch(p, cfg, steps, z);
  const auto& a = out.attention;
  ad::Var context;
  for (std::size_t t = 0; t < a.v.size(); ++t) {
    const ad::Var weighted = ad::scale_rows(a.gamma[t] * a.v[t],
                                            ad::slice_cols(a.beta, static_cast<Eigen::Index>(t), 1));
    context = context.valid() ? context + weighted : weighted;
  }
  out.logits = ad::add_row(ad::matmul(context, p[seg::out_w]), p[seg::out_b]);
  return out;
}

ad::Var task_loss_batch(ad::Var logits, const ad::Matrix& labels, Task task) {
  ad::Tape& tape = *logits.tape();
  const ad::Var y = tape.constant(labels);
  const double batch = static_cast<double>(labels.rows());
  switch (task) {
    case Task::binary: {
      const ad::Var prob = ad::clamp(ad::sigmoid(logits), kProbClip, 1.0 - kProbClip);
      const ad::Var ll = y * ad::log(prob) + (1.0 - y) * ad::log(1.0 - prob);
      return (-1.0 / batch) * ad::sum(ll);
    }
    case Task::multiclass:
      return (-1.0 / batch) * ad::sum(y * ad::log_softmax_rows(logits));
    case Task::regression:
      return ad::mean(ad::square(logits - y));
  }
  throw ValidationError("unknown task");
}

ad::Matrix apply_link(const ad::Matrix& logits, Task task) {
  ad::Matrix out = logits;
  switch (task) {
    case Task::binary:
      for (Eigen::Index i = 0; i < out.size(); ++i) {
        const double x = out.data()[i];
        out.data()[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      }
      break;
    case Task::multiclass:
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
      }
      break;
    case Task::regression:
      break;
  }
  return out;
}

BatchPrediction infer_batch(const ParamVector& params, const ModelConfig& cfg,
                            std::span<const TimeSeriesInstance* const> batch,
                            const ad::Matrix* z) {
  ad::Tape tape(false);
  BoundParams p(tape, params);
  LatentRows zrows;
  if (z != nullptr) {
    for (Eigen::Index t = 0; t < z->rows(); ++t) {
      zrows.push_back(tape.constant(z->row(t)));
    }
  }
  const BatchOutput out = forward_batch(p, cfg, batch, z ? &zrows : nullptr);
  BatchPrediction pred;
  pred.logits = out.logits.value();
  pred.y_hat = apply_link(pred.logits, cfg.task);
  pred.beta = out.attention.beta.value();
  for (const auto& g : out.attention.gamma) {
    pred.gamma.push_back(g.value());
  }
  return pred;
}

std::vector<const TimeSeriesInstance*> pointers(const Dataset& ds) {
  std::vector<const TimeSeriesInstance*> out;
  out.reserve(ds.size());
  for (const auto& inst : ds.instances) {
    out.push_back(&inst);
  }
  return out;
}

ad::Matrix embed_inputs(const ad::Matrix& x, const ParamVector& params, const ModelConfig& cfg) {
  if (x.rows() != cfg.T || x.cols() != cfg.D) {
    throw ShapeError("input has shape " + shape_str(x.rows(), x.cols()) + ", expected " +
                     shape_str(cfg.T, cfg.D));
  }
  return x * params.at(seg::embed);
}

AttentionMap forward_attention(const ad::Matrix& v, const ParamVector& params,
                               const ModelConfig& cfg, const ad::Matrix* z) {
  if (v.rows() != cfg.T || v.cols() != cfg.D) {
    throw ShapeError("embedded input has shape " + shape_str(v.rows(), v.cols()) + ", expected " +
                     shape_str(cfg.T, cfg.D));
  }
  if (z != nullptr && (z->rows() != cfg.T || z->cols() != cfg.latent_dim)) {
    throw ShapeError("latent summary has shape " + shape_str(z->rows(), z->cols()) +
                     ", expected " + shape_str(cfg.T, cfg.latent_dim));
  }
  ad::Tape tape(false);
  BoundParams p(tape, params);
  std::vector<ad::Var> vv;
  LatentRows zrows;
  for (Eigen::Index t = 0; t < cfg.T; ++t) {
    vv.push_back(tape.constant(v.row(t)));
    if (z != nullptr) {
      zrows.push_back(tape.constant(z->row(t)));
    }
  }
  const BatchAttention a = attention_from_embedded(p, cfg, std::move(vv), z ? &zrows : nullptr);
  AttentionMap out;
  out.beta = a.beta.value().row(0).transpose();
  out.gamma.resize(cfg.T, cfg.D);
  for (Eigen::Index t = 0; t < cfg.T; ++t) {
    out.gamma.row(t) = a.gamma[static_cast<std::size_t>(t)].value().row(0);
  }
  out.v = v;
  return out;
}

ad::Vector logits(const AttentionMap& attn, const ParamVector& params, const ModelConfig& cfg) {
  (void)cfg;
  ad::Matrix weighted = attn.gamma.cwiseProduct(attn.v);
  const ad::Matrix context = attn.beta.transpose() * weighted;  // 1 x D
  return (context * params.at(seg::out_w) + params.at(seg::out_b)).row(0).transpose();
}

ad::Vector predict_with_override(const AttentionMap& attn, const ParamVector& params,
                                 const ModelConfig& cfg,
                                 std::span<const std::pair<int, int>> off) {
  const ad::Vector z = [&] {
    if (off.empty()) {
      return logits(attn, params, cfg);
    }
    AttentionMap edited = attn;
    for (const auto& [t, d] : off) {
      if (t < 0 || t >= edited.gamma.rows() || d < 0 || d >= edited.gamma.cols()) {
        throw ValidationError("override cell (" + std::to_string(t) + "," + std::to_string(d) +
                              ") out of range");
      }
      edited.gamma(t, d) = 0.0;
    }
    return logits(edited, params, cfg);
  }();
  return apply_link(z.transpose(), cfg.task).row(0).transpose();
}

ad::Vector predict(const AttentionMap& attn, const ParamVector& params, const ModelConfig& cfg) {
  return predict_with_override(attn, params, cfg, {});
}

ad::Matrix contribution(const ad::Matrix& x, const AttentionMap& attn, const ParamVector& params,
                        const ModelConfig& cfg, int output) {
  if (output < 0 || output >= cfg.L) {
    throw ValidationError("output index " + std::to_string(output) + " out of range");
  }
  const ad::Matrix& w_emb = params.at(seg::embed);
  const ad::Vector w_out = params.at(seg::out_w).col(output);
  ad::Matrix grid(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const ad::Vector gated = attn.gamma.row(t).transpose().cwiseProduct(w_out);
    const ad::Vector per_input = w_emb * gated;
    grid.row(t) = attn.beta(t) * x.row(t).cwiseProduct(per_input.transpose());
  }
  return grid;
}

std::vector<ad::Matrix> contribution_all(const ad::Matrix& x, const AttentionMap& attn,
                                         const ParamVector& params, const ModelConfig& cfg) {
  std::vector<ad::Matrix> out;
  for (int l = 0; l < cfg.L; ++l) {
    out.push_back(contribution(x, attn, params, cfg, l));
  }
  return out;
}

void validate_label(const ad::Vector& y, Task task) {
  if (!y.allFinite()) {
    throw ValidationError("label contains non-finite values");
  }
  switch (task) {
    case Task::binary:
      if (y.size() != 1 || (y(0) != 0.0 && y(0) != 1.0)) {
        throw ValidationError("binary label must be a single 0 or 1");
      }
      break;
    case Task::multiclass: {
      const bool binary_entries =
          (y.array() == 0.0 || y.array() == 1.0).all();
      if (!binary_entries || y.sum() != 1.0) {
        throw ValidationError("multiclass label must be one-hot");
      }
      break;
    }
    case Task::regression:
      break;
  }
}

double task_loss(const ad::Vector& y_hat, const ad::Vector& y, Task task) {
  if (y_hat.size() != y.size()) {
    throw ShapeError("prediction has " + std::to_string(y_hat.size()) + " outputs, label has " +
                     std::to_string(y.size()));
  }
  validate_label(y, task);
  switch (task) {
    case Task::binary: {
      const double p = std::clamp(y_hat(0), kProbClip, 1.0 - kProbClip);
      return -(y(0) * std::log(p) + (1.0 - y(0)) * std::log(1.0 - p));
    }
    case Task::multiclass: {
      double loss = 0.0;
      for (Eigen::Index k = 0; k < y.size(); ++k) {
        if (y(k) != 0.0) {
          loss -= y(k) * std::log(std::clamp(y_hat(k), kProbClip, 1.0));
        }
      }
      return loss;
    }
    case Task::regression:
      return (y_hat - y).squaredNorm() / static_cast<double>(y.size());
  }
  throw ValidationError("unknown task");
}

}  // namespace ial::model
