// SPDX-License-Identifier: Apache-2.0
#include "ial/nap.hpp"

#include "ial/digest.hpp"
#include "ial/errors.hpp"
#include "ial/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

namespace ial::nap {

namespace {

constexpr const char* kEncoder = "nap.encoder";

bool mask_less(const AttentionMask& a, const AttentionMask& b) {
  if (a.instance_id != b.instance_id) {
    return a.instance_id < b.instance_id;
  }
  const auto fa = std::span(a.feature_mask.data(), a.feature_mask.size());
  const auto fb = std::span(b.feature_mask.data(), b.feature_mask.size());
  if (!std::equal(fa.begin(), fa.end(), fb.begin(), fb.end())) {
    return std::lexicographical_compare(fa.begin(), fa.end(), fb.begin(), fb.end());
  }
  const auto ta = std::span(a.time_mask.data(), a.time_mask.size());
  const auto tb = std::span(b.time_mask.data(), b.time_mask.size());
  return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
}

std::vector<const TimeSeriesInstance*> instances_of(std::span<const Annotated> items) {
  std::vector<const TimeSeriesInstance*> out;
  out.reserve(items.size());
  for (const auto& a : items) {
    out.push_back(a.instance);
  }
  return out;
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

}  // namespace

void AnnotationStore::append(StoreEntry entry) {
  validate_mask(entry.mask);
  for (const auto& e : entries_) {
    if (e.round == entry.round && e.mask.instance_id == entry.mask.instance_id) {
      throw DuplicateError("instance '" + entry.mask.instance_id + "' already annotated in round " +
                           std::to_string(entry.round));
    }
  }
  entries_.push_back(std::move(entry));
}

void AnnotationStore::append(int round, AttentionMask mask, std::string annotator) {
  append(StoreEntry{round, std::move(mask), std::move(annotator), {}});
}

std::vector<StoreEntry> AnnotationStore::by_round(int round) const {
  std::vector<StoreEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [round](const StoreEntry& e) { return e.round == round; });
  return out;
}

std::vector<StoreEntry> AnnotationStore::by_instance(const std::string& id) const {
  std::vector<StoreEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [&id](const StoreEntry& e) { return e.mask.instance_id == id; });
  return out;
}

bool AnnotationStore::contains_instance(const std::string& id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&id](const StoreEntry& e) { return e.mask.instance_id == id; });
}

std::vector<AttentionMask> AnnotationStore::masks() const {
  std::vector<AttentionMask> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    out.push_back(e.mask);
  }
  return out;
}

std::string AnnotationStore::digest() const {
  Sha256 h;
  for (const auto& e : entries_) {
    h.update(e.mask.instance_id);
    h.update(&e.round, sizeof(e.round));
    h.update(e.mask.feature_mask.data(), sizeof(int) * static_cast<std::size_t>(e.mask.feature_mask.size()));
    h.update(e.mask.time_mask.data(), sizeof(int) * static_cast<std::size_t>(e.mask.time_mask.size()));
  }
  return h.hex();
}

static std::vector<Annotated> resolve_ordered(const Dataset& pool, std::span<const AttentionMask> masks) {
  std::vector<Annotated> out;
  out.reserve(masks.size());
  for (const auto& m : masks) {
    const auto idx = pool.find(m.instance_id);
    if (!idx) {
      throw MissingInstanceError("annotation refers to unknown instance '" + m.instance_id + "'");
    }
    const auto& inst = pool.instances[*idx];
    if (m.feature_mask.rows() != inst.x.rows() || m.feature_mask.cols() != inst.x.cols() ||
        m.time_mask.size() != inst.x.rows()) {
      throw ShapeError("mask for '" + m.instance_id + "' does not match the instance shape");
    }
    out.push_back(Annotated{&inst, &m});
  }
  return out;
}

std::vector<Annotated> resolve(const Dataset& pool, std::span<const AttentionMask> masks) {
  std::vector<Annotated> out = resolve_ordered(pool, masks);
  std::stable_sort(out.begin(), out.end(),
                   [](const Annotated& a, const Annotated& b) { return mask_less(*a.mask, *b.mask); });
  return out;
}

std::vector<ad::Var> encode_on_tape(const BoundParams& p, const ModelConfig& cfg,
                                    std::span<const Annotated> context) {
  const auto batch = instances_of(context);
  const std::vector<ad::Matrix> x_steps = model::stack_timesteps(batch);
  const ad::Var w_emb = p[model::seg::embed];
  const Eigen::Index K = static_cast<Eigen::Index>(context.size());
  ad::Tape& tape = p.tape();

  std::vector<ad::Var> inputs;
  inputs.reserve(x_steps.size());
  for (int t = 0; t < cfg.T; ++t) {
    ad::Matrix fm(K, cfg.D);
    ad::Matrix tm(K, 1);
    for (Eigen::Index k = 0; k < K; ++k) {
      const AttentionMask& m = *context[static_cast<std::size_t>(k)].mask;
      fm.row(k) = m.feature_mask.row(t).cast<double>();
      tm(k, 0) = static_cast<double>(m.time_mask(t));
    }
    const ad::Var v = ad::matmul(tape.constant(x_steps[static_cast<std::size_t>(t)]), w_emb);
    const ad::Var parts[] = {v, tape.constant(std::move(fm)), tape.constant(std::move(tm))};
    inputs.push_back(ad::concat_cols(parts));
  }
  return model::run_gru(p, kEncoder, inputs);
}

LatentVars latent_on_tape(const BoundParams& p, const ModelConfig& cfg,
                          std::span<const Annotated> context) {
  LatentVars lv;
  ad::Tape& tape = p.tape();
  if (context.empty()) {
    lv.prior = true;
    for (int t = 0; t < cfg.T; ++t) {
      lv.mu.push_back(tape.constant(ad::Matrix::Zero(1, cfg.latent_dim)));
      lv.sigma.push_back(tape.constant(ad::Matrix::Ones(1, cfg.latent_dim)));
    }
    return lv;
  }
  const std::vector<ad::Var> r = encode_on_tape(p, cfg, context);
  const ad::Var wm = p["nap.mu.weight"], bm = p["nap.mu.bias"];
  const ad::Var ws = p["nap.sigma.weight"], bs = p["nap.sigma.bias"];
  for (const ad::Var& rt : r) {
    const ad::Var r_bar = ad::mean_rows(rt);
    lv.mu.push_back(ad::add_row(ad::matmul(r_bar, wm), bm));
    lv.sigma.push_back(ad::softplus(ad::add_row(ad::matmul(r_bar, ws), bs)));
  }
  return lv;
}

model::LatentRows latent_rows(const LatentVars& lv, LatentMode mode, const ad::Matrix* eps) {
  if (mode == LatentMode::mean) {
    return lv.mu;
  }
  if (eps == nullptr || eps->rows() != static_cast<Eigen::Index>(lv.mu.size())) {
    throw PreconditionError("sample mode needs one noise row per timestep");
  }
  model::LatentRows z;
  z.reserve(lv.mu.size());
  for (std::size_t t = 0; t < lv.mu.size(); ++t) {
    ad::Tape& tape = *lv.mu[t].tape();
    const ad::Var e = tape.constant(eps->row(static_cast<Eigen::Index>(t)));
    z.push_back(lv.mu[t] + lv.sigma[t] * e);
  }
  return z;
}

ad::Var kl_on_tape(const LatentVars& lv) {
  ad::Tape& tape = *lv.mu.front().tape();
  if (lv.prior) {
    return tape.constant(ad::Matrix::Zero(1, 1));
  }
  ad::Var total;
  double count = 0.0;
  for (std::size_t t = 0; t < lv.mu.size(); ++t) {
    const ad::Var term = ad::square(lv.sigma[t]) + ad::square(lv.mu[t]) - 2.0 * ad::log(lv.sigma[t]);
    const ad::Var s = ad::sum(term);
    total = total.valid() ? total + s : s;
    count += static_cast<double>(lv.mu[t].value().size());
  }
  return 0.5 * (total + (-count));
}

std::vector<ad::Matrix> encode_annotations(const Dataset& pool,
                                           std::span<const AttentionMask> masks,
                                           const ParamVector& params, const ModelConfig& cfg) {
  if (masks.empty()) {
    throw PreconditionError("encode_annotations: no annotations");
  }
  const std::vector<Annotated> context = resolve_ordered(pool, masks);
  ad::Tape tape(false);
  BoundParams p(tape, params);
  const std::vector<ad::Var> r = encode_on_tape(p, cfg, context);
  std::vector<ad::Matrix> out(context.size(), ad::Matrix(cfg.T, cfg.r_dim));
  for (int t = 0; t < cfg.T; ++t) {
    const ad::Matrix& rt = r[static_cast<std::size_t>(t)].value();
    for (std::size_t k = 0; k < context.size(); ++k) {
      out[k].row(t) = rt.row(static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

std::optional<ad::Matrix> summarize(std::span<const ad::Matrix> r) {
  if (r.empty()) {
    return std::nullopt;
  }
  ad::Matrix acc = r.front();
  for (std::size_t k = 1; k < r.size(); ++k) {
    acc += r[k];
  }
  return acc / static_cast<double>(r.size());
}

std::pair<ad::Matrix, ad::Matrix> latent_params(const std::optional<ad::Matrix>& r_bar,
                                                const ParamVector& params,
                                                const ModelConfig& cfg) {
  if (!r_bar) {
    return {ad::Matrix::Zero(cfg.T, cfg.latent_dim), ad::Matrix::Ones(cfg.T, cfg.latent_dim)};
  }
  ad::Matrix mu = (*r_bar * params.at("nap.mu.weight")).rowwise() +
                  params.at("nap.mu.bias").row(0);
  ad::Matrix pre = (*r_bar * params.at("nap.sigma.weight")).rowwise() +
                   params.at("nap.sigma.bias").row(0);
  return {std::move(mu), pre.unaryExpr([](double x) { return softplus(x); })};
}

ad::Matrix sample_latent(const ad::Matrix& mu, const ad::Matrix& sigma, LatentMode mode,
                         std::uint64_t seed) {
  if (mode == LatentMode::mean) {
    return mu;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Matrix z(mu.rows(), mu.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = mu.data()[i] + sigma.data()[i] * normal(rng);
  }
  return z;
}

std::vector<ad::Matrix> sample_latents(const ad::Matrix& mu, const ad::Matrix& sigma, int count,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ad::Matrix> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int s = 0; s < count; ++s) {
    ad::Matrix z(mu.rows(), mu.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      z.data()[i] = mu.data()[i] + sigma.data()[i] * normal(rng);
    }
    out.push_back(std::move(z));
  }
  return out;
}

LatentSummary summarize_store(const Dataset& pool, const AnnotationStore& store,
                              const ParamVector& params, const ModelConfig& cfg, LatentMode mode,
                              std::uint64_t seed) {
  const std::vector<AttentionMask> masks = store.masks();
  const std::vector<Annotated> context = resolve(pool, masks);
  ad::Tape tape(false);
  BoundParams p(tape, params);
  const LatentVars lv = latent_on_tape(p, cfg, context);
  LatentSummary out;
  out.mu.resize(cfg.T, cfg.latent_dim);
  out.sigma.resize(cfg.T, cfg.latent_dim);
  for (int t = 0; t < cfg.T; ++t) {
    out.mu.row(t) = lv.mu[static_cast<std::size_t>(t)].value().row(0);
    out.sigma.row(t) = lv.sigma[static_cast<std::size_t>(t)].value().row(0);
  }
  out.z = sample_latent(out.mu, out.sigma, mode, seed);
  out.context_size = static_cast<int>(context.size());
  return out;
}

AttentionMap conditioned_attention(const TimeSeriesInstance& instance, const Dataset& pool,
                                   const AnnotationStore& store, const ParamVector& params,
                                   const ModelConfig& cfg, LatentMode mode, std::uint64_t seed) {
  const LatentSummary summary = summarize_store(pool, store, params, cfg, mode, seed);
  const ad::Matrix v = model::embed_inputs(instance.x, params, cfg);
  return model::forward_attention(v, params, cfg, &summary.z);
}

double kl_standard_normal(const ad::Matrix& mu, const ad::Matrix& sigma) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double m = mu.data()[i], s = sigma.data()[i];
    kl += 0.5 * (s * s + m * m - 1.0) - std::log(s);
  }
  return kl;
}

ad::Var mask_supervision(const model::BatchAttention& attn,
                         std::span<const AttentionMask* const> masks, MaskTarget target) {
  ad::Tape& tape = *attn.beta.tape();
  const Eigen::Index K = attn.beta.rows();
  const Eigen::Index T = attn.beta.cols();
  if (static_cast<Eigen::Index>(masks.size()) != K) {
    throw ShapeError("mask_supervision: " + std::to_string(masks.size()) + " masks for " +
                     std::to_string(K) + " instances");
  }
  const Eigen::Index D = attn.gamma.front().cols();

  std::vector<double> feat_weight(static_cast<std::size_t>(K), 0.0);
  ad::Matrix w1 = ad::Matrix::Zero(K, T), w0 = ad::Matrix::Zero(K, T);
  for (Eigen::Index k = 0; k < K; ++k) {
    const AttentionMask& m = *masks[static_cast<std::size_t>(k)];
    const auto known = (m.feature_mask.array() != -1).count();
    feat_weight[static_cast<std::size_t>(k)] = known > 0 ? 1.0 / static_cast<double>(known) : 0.0;
    const auto n1 = (m.time_mask.array() == 1).count();
    const auto n0 = (m.time_mask.array() == 0).count();
    for (Eigen::Index t = 0; t < T; ++t) {
      if (m.time_mask(t) == 1) w1(k, t) = 1.0 / static_cast<double>(n1);
      if (m.time_mask(t) == 0) w0(k, t) = 1.0 / static_cast<double>(n0);
    }
  }

  ad::Var total;
  auto add = [&total](ad::Var term) { total = total.valid() ? total + term : term; };
  constexpr double lo = model::kProbClip, hi = 1.0 - model::kProbClip;

  for (Eigen::Index t = 0; t < T; ++t) {
    ad::Matrix weight = ad::Matrix::Zero(K, D);
    ad::Matrix label = ad::Matrix::Zero(K, D);
    for (Eigen::Index k = 0; k < K; ++k) {
      const AttentionMask& m = *masks[static_cast<std::size_t>(k)];
      for (Eigen::Index d = 0; d < D; ++d) {
        const int v = m.feature_mask(t, d);
        if (v != -1) {
          weight(k, d) = feat_weight[static_cast<std::size_t>(k)];
          label(k, d) = static_cast<double>(v);
        }
      }
    }
    if (weight.isZero(0.0)) {
      continue;
    }
    const ad::Var g = attn.gamma[static_cast<std::size_t>(t)];
    const ad::Var prob = ad::clamp(
        target == MaskTarget::magnitude ? ad::square(g) : 0.5 * (g + 1.0), lo, hi);
    const ad::Var y = tape.constant(std::move(label));
    const ad::Var ll = y * ad::log(prob) + (1.0 - y) * ad::log(1.0 - prob);
    add(-1.0 * ad::sum(tape.constant(std::move(weight)) * ll));
  }

  const ad::Var beta = ad::clamp(attn.beta, lo, hi);
  if (!w1.isZero(0.0)) {
    add(-1.0 * ad::sum(tape.constant(w1) * ad::log(beta)));
  }
  if (!w0.isZero(0.0)) {
    add(-1.0 * ad::sum(tape.constant(w0) * ad::log(1.0 - beta)));
  }
  if (!total.valid()) {
    return tape.constant(ad::Matrix::Zero(1, 1));
  }
  return (1.0 / static_cast<double>(K)) * total;
}

NapLossTerms nap_loss_on_tape(const BoundParams& p, const ModelConfig& cfg,
                              std::span<const TimeSeriesInstance* const> batch,
                              std::span<const Annotated> context,
                              std::span<const Annotated> targets, const NapLossWeights& w,
                              LatentMode mode, const ad::Matrix* eps) {
  ad::Tape& tape = p.tape();
  const LatentVars lv = latent_on_tape(p, cfg, context);
  const model::LatentRows z = latent_rows(lv, mode, eps);

  NapLossTerms terms;
  if (batch.empty()) {
    terms.task = tape.constant(ad::Matrix::Zero(1, 1));
  } else {
    const model::BatchOutput out = model::forward_batch(p, cfg, batch, &z);
    terms.task = model::task_loss_batch(out.logits, model::stack_labels(batch), cfg.task);
  }
  if (targets.empty()) {
    terms.mask = tape.constant(ad::Matrix::Zero(1, 1));
  } else {
    const auto target_instances = instances_of(targets);
    const auto steps = model::stack_timesteps(target_instances);
    const model::BatchAttention attn = model::attention_batch(p, cfg, steps, &z);
    std::vector<const AttentionMask*> masks;
    for (const auto& a : targets) {
      masks.push_back(a.mask);
    }
    terms.mask = mask_supervision(attn, masks, w.target);
  }
  terms.kl = kl_on_tape(lv);
  double kl_weight = w.kl;
  if (w.kl_per_instance) {
    kl_weight /= static_cast<double>(std::max<std::size_t>(1, batch.size() + targets.size()));
  }
  terms.total = terms.task + w.mask * terms.mask + kl_weight * terms.kl;
  return terms;
}

namespace {

ad::Matrix draw_eps(const ModelConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Matrix eps(cfg.T, cfg.latent_dim);
  for (Eigen::Index i = 0; i < eps.size(); ++i) {
    eps.data()[i] = normal(rng);
  }
  return eps;
}

double valid_task_loss(const ParamVector& params, const ModelConfig& cfg, const Dataset& valid,
                       std::span<const Annotated> context) {
  ad::Tape tape(false);
  BoundParams p(tape, params);
  const LatentVars lv = latent_on_tape(p, cfg, context);
  const model::LatentRows z = latent_rows(lv, LatentMode::mean, nullptr);
  const auto batch = model::pointers(valid);
  const model::BatchOutput out = model::forward_batch(p, cfg, batch, &z);
  return model::task_loss_batch(out.logits, model::stack_labels(batch), cfg.task).scalar();
}

}  // namespace

NapLossValue nap_loss(const ParamVector& params, const ModelConfig& cfg,
                      std::span<const TimeSeriesInstance* const> batch,
                      std::span<const Annotated> context, std::span<const Annotated> targets,
                      const NapLossWeights& w, LatentMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ad::Matrix eps = draw_eps(cfg, rng);
  ad::Tape tape(false);
  BoundParams p(tape, params);
  const NapLossTerms t = nap_loss_on_tape(p, cfg, batch, context, targets, w, mode, &eps);
  return NapLossValue{t.total.scalar(), t.task.scalar(), t.mask.scalar(), t.kl.scalar()};
}

AdaptResult adapt_train(const Dataset& train, const AnnotationStore& store, ParamVector params,
                        const ModelConfig& cfg, const AdaptConfig& config, const Dataset* valid) {
  if (store.empty()) {
    throw PreconditionError("adapt_train needs at least one annotation");
  }
  if (config.steps < 1 || config.batch_size < 1) {
    throw PreconditionError("adapt_train: steps and batch size must be positive");
  }
  const std::vector<AttentionMask> masks = store.masks();
  const std::vector<Annotated> annotated = resolve(train, masks);
  const std::size_t K = annotated.size();
  const auto train_ptrs = model::pointers(train);

  if (config.scope == AdaptScope::conditioning) {
    params.set_trainable(model::is_conditioning_segment);
  } else {
    params.set_trainable([](const std::string&) { return true; });
  }
  std::mt19937_64 rng(config.seed);
  Adam adam(config.lr);
  AdaptResult result;
  AdaptLog& log = result.log;

  std::vector<std::size_t> order(train_ptrs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const auto full_store_loss = [&](const ParamVector& p) {
    const auto targets = instances_of(annotated);
    return nap_loss(p, cfg, targets, annotated, annotated, config.weights, LatentMode::mean, 0)
        .total;
  };
  log.full_store_loss.push_back(full_store_loss(params));
  std::optional<double> best_valid;
  ParamVector best = params;

  std::vector<std::size_t> pick(K);
  for (int step = 1; step <= config.steps; ++step) {
    const int c = std::uniform_int_distribution<int>(1, static_cast<int>(K))(rng);
    std::iota(pick.begin(), pick.end(), 0);
    std::shuffle(pick.begin(), pick.end(), rng);
    std::vector<std::size_t> chosen(pick.begin(), pick.begin() + c);
    std::sort(chosen.begin(), chosen.end());
    std::vector<Annotated> context;
    for (std::size_t i : chosen) {
      context.push_back(annotated[i]);
    }

    std::vector<const TimeSeriesInstance*> batch;
    for (int b = 0; b < config.batch_size && !train_ptrs.empty(); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(train_ptrs[order[cursor++]]);
    }
    const ad::Matrix eps = draw_eps(cfg, rng);

    ad::Tape tape;
    BoundParams p(tape, params);
    const NapLossTerms terms = nap_loss_on_tape(p, cfg, batch, context, annotated, config.weights,
                                                LatentMode::sample, &eps);
    const ad::Var loss = terms.total + weight_decay_term(p, params, config.weight_decay);
    if (!std::isfinite(loss.scalar())) {
      throw TrainingDiverged("adaptation loss became non-finite at step " + std::to_string(step));
    }
    tape.backward(loss);
    adam.step(params, p.gradients(params));
    log.step_loss.push_back(terms.total.scalar());
    log.context_sizes.push_back(c);

    if (config.eval_every > 0 && step % config.eval_every == 0) {
      log.full_store_loss.push_back(full_store_loss(params));
      if (config.monitor || (valid != nullptr && !valid->empty())) {
        const double vl = config.monitor ? config.monitor(params)
                                         : valid_task_loss(params, cfg, *valid, annotated);
        log.valid_loss.push_back(vl);
        if (!best_valid || vl < *best_valid) {
          best_valid = vl;
          best = params;
          log.best_step = step;
        }
      }
    }
  }
  if (best_valid && config.select_best) {
    result.params = std::move(best);
  } else {
    result.params = std::move(params);
    log.best_step = config.steps;
  }
  result.params.set_trainable([](const std::string&) { return true; });
  return result;
}

}  // namespace ial::nap
