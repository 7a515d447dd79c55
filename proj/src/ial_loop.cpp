// SPDX-License-Identifier: Apache-2.0
#include "ial/ial_loop.hpp"

#include "ial/calculus.hpp"
#include "ial/data_io.hpp"
#include "ial/errors.hpp"
#include "ial/model.hpp"
#include "ial/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ial::loop {

namespace {

double mean_task_loss(const ParamVector& params, const ModelConfig& cfg, const Dataset& ds) {
  const auto losses = cer::per_instance_loss(ds, params, cfg, nullptr);
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

}  // namespace

std::uint64_t round_seed(std::uint64_t base, int s) {
  return base * 1000003ULL + static_cast<std::uint64_t>(s) * 7919ULL;
}

PretrainResult pretrain(const Dataset& train, const Dataset* valid, const ModelConfig& cfg,
                        const PretrainConfig& config) {
  return pretrain_from(model::init_params(cfg, config.seed), train, valid, cfg, config);
}

PretrainResult pretrain_from(ParamVector params, const Dataset& train, const Dataset* valid,
                             const ModelConfig& cfg, const PretrainConfig& config) {
  if (train.empty()) {
    throw PreconditionError("pretraining needs a nonempty training set");
  }
  if (config.batch_size < 1 || config.max_epochs < 1) {
    throw PreconditionError("batch_size and max_epochs must be positive");
  }
  model::check_params(params, cfg);
  params.set_trainable([](const std::string& n) { return !model::is_conditioning_segment(n); });

  const Dataset& monitor = (valid != nullptr && !valid->empty()) ? *valid : train;
  Adam adam(config.lr);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<const TimeSeriesInstance*> order = model::pointers(train);

  PretrainResult result;
  ParamVector best = params;
  double best_loss = mean_task_loss(params, cfg, monitor);
  int since_best = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::span<const TimeSeriesInstance* const> batch(order.data() + start, end - start);
      const ScalarFunction f = [&](const BoundParams& p) {
        const model::BatchOutput out = model::forward_batch(p, cfg, batch, nullptr);
        ad::Var l = model::task_loss_batch(out.logits, model::stack_labels(batch), cfg.task);
        if (config.weight_decay > 0.0) l = l + weight_decay_term(p, params, config.weight_decay);
        return l;
      };
      std::pair<double, ParamVector> vg;
      try {
        vg = value_and_gradient(f, params);
      } catch (const NonFiniteError& e) {
        throw Diverged("pretraining diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                       params);
      }
      ParamVector before = params;
      adam.step(params, vg.second);
      if (!params.flatten().allFinite()) {
        throw Diverged("pretraining produced non-finite parameters at epoch " +
                           std::to_string(epoch),
                       std::move(before));
      }
      epoch_loss += vg.first;
      ++batches;
    }
    result.log.train_loss.push_back(epoch_loss / batches);
    const double vl = mean_task_loss(params, cfg, monitor);
    if (!std::isfinite(vl)) {
      throw Diverged("validation loss is not finite at epoch " + std::to_string(epoch), best);
    }
    result.log.valid_loss.push_back(vl);
    result.log.epochs_run = epoch + 1;
    if (vl < best_loss) {
      best_loss = vl;
      best = params;
      result.log.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  result.params = std::move(best);
  return result;
}

std::vector<AttentionMask> oracle_annotate(const cer::RerankReport& report, const Dataset& train,
                                           const OracleConfig& config, std::uint64_t seed) {
  if (config.noise_rate < 0.0 || config.idk_rate < 0.0 || config.noise_rate > 1.0 ||
      config.idk_rate > 1.0 || config.noise_rate + config.idk_rate > 1.0) {
    throw ValidationError("oracle needs noise_rate, idk_rate in [0, 1] with sum <= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto answer = [&](int truth) {
    if (u01(rng) < config.idk_rate) return -1;
    return u01(rng) < config.noise_rate ? 1 - truth : truth;
  };

  std::vector<AttentionMask> out;
  for (const auto& entry : report.entries) {
    const auto idx = train.find(entry.instance_id);
    if (!idx) {
      throw MissingInstanceError("instance '" + entry.instance_id + "' is not in the training set");
    }
    const TimeSeriesInstance& inst = train.instances[*idx];
    if (!inst.relevance || !inst.relevance_time) {
      throw PreconditionError("instance '" + inst.id + "' carries no relevance grid");
    }
    const int T = static_cast<int>(inst.x.rows());
    const int D = static_cast<int>(inst.x.cols());
    AttentionMask m = AttentionMask::unknown(inst.id, T, D);
    if (config.scope == OracleConfig::Scope::full_grid) {
      for (int t = 0; t < T; ++t) {
        for (int d = 0; d < D; ++d) m.feature_mask(t, d) = answer((*inst.relevance)(t, d));
      }
      for (int t = 0; t < T; ++t) m.time_mask(t) = answer((*inst.relevance_time)(t));
    } else {
      std::vector<int> steps;
      for (const auto& f : entry.features) {
        m.feature_mask(f.t, f.d) = answer((*inst.relevance)(f.t, f.d));
        if (std::find(steps.begin(), steps.end(), f.t) == steps.end()) steps.push_back(f.t);
      }
      std::sort(steps.begin(), steps.end());
      for (int t : steps) m.time_mask(t) = answer((*inst.relevance_time)(t));
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<AttentionMask> OracleAnnotator::annotate(const cer::RerankReport& report,
                                                     const Dataset& train) {
  return oracle_annotate(report, train, config_, round_seed(seed_, ++calls_));
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("auroc: scores and labels differ in length");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks for ties.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) {
    throw UndefinedMetric("AUROC needs both classes present");
  }
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("accuracy: lengths differ");
  }
  if (labels.empty()) {
    throw UndefinedMetric("accuracy of an empty set");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double mape(const std::vector<double>& predicted, const std::vector<double>& targets) {
  if (predicted.size() != targets.size()) {
    throw ShapeError("mape: lengths differ");
  }
  if (targets.empty()) {
    throw UndefinedMetric("MAPE of an empty set");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    acc += std::abs(targets[i] - predicted[i]) / (std::abs(targets[i]) + 1e-8);
  }
  return acc / static_cast<double>(targets.size());
}

Metrics evaluate_model(const ParamVector& params, const ModelConfig& cfg, const Dataset& pool,
                       const nap::AnnotationStore& store, const Dataset& ds) {
  const ad::Matrix z = cer::mean_latent(pool, store, params, cfg);
  const auto batch = model::pointers(ds);
  if (batch.empty()) {
    throw UndefinedMetric("evaluation set is empty");
  }
  const model::BatchPrediction pred = model::infer_batch(params, cfg, batch, &z);
  Metrics m;
  m.count = batch.size();
  switch (cfg.task) {
    case Task::binary: {
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        s.push_back(pred.y_hat(static_cast<Eigen::Index>(i), 0));
        y.push_back(batch[i]->y(0) > 0.5 ? 1 : 0);
      }
      m.name = "auroc";
      m.value = auroc(s, y);
      break;
    }
    case Task::multiclass: {
      std::vector<int> p, y;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Eigen::Index a = 0, b = 0;
        pred.y_hat.row(static_cast<Eigen::Index>(i)).maxCoeff(&a);
        batch[i]->y.maxCoeff(&b);
        p.push_back(static_cast<int>(a));
        y.push_back(static_cast<int>(b));
      }
      m.name = "accuracy";
      m.value = accuracy(p, y);
      break;
    }
    case Task::regression: {
      std::vector<double> p, y;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        p.push_back(pred.y_hat(static_cast<Eigen::Index>(i), 0));
        y.push_back(batch[i]->y(0));
      }
      m.name = "mape";
      m.value = mape(p, y);
      break;
    }
  }
  return m;
}

Session::Session(Dataset train, Dataset valid, Dataset test, ParamVector params, ModelConfig cfg,
                 SessionConfig config, nap::AnnotationStore store, int s)
    : train_(std::move(train)),
      valid_(std::move(valid)),
      test_(std::move(test)),
      params_(std::move(params)),
      cfg_(cfg),
      config_(config),
      store_(std::move(store)) {
  if (s < 0) {
    throw PreconditionError("round index must be nonnegative");
  }
  model::check_params(params_, cfg_);
  state_.s = s;
  state_.params_hash = params_.digest();
  state_.store_digest = store_.digest();
}

void Session::refresh_metrics() {
  if (!valid_.empty()) state_.valid_metrics = evaluate_model(params_, cfg_, train_, store_, valid_);
  if (!test_.empty()) state_.test_metrics = evaluate_model(params_, cfg_, train_, store_, test_);
}

cer::RerankReport Session::plan_round(cer::CerConfig config) const {
  const int next = state_.s + 1;
  config.seed = round_seed(config_.seed, next);
  return cer::rerank(train_, valid_, store_, params_, cfg_, config, next);
}

const cer::RerankReport& Session::open_round(cer::RerankReport report) {
  if (state_.open) {
    throw ConflictError("round " + std::to_string(state_.s) + " is still open");
  }
  if (report.round != state_.s + 1) {
    throw ConflictError("report is for round " + std::to_string(report.round) + ", expected " +
                        std::to_string(state_.s + 1));
  }
  state_.s = report.round;
  state_.pending.clear();
  for (const auto& e : report.entries) state_.pending.push_back(e.instance_id);
  state_.report = std::move(report);
  state_.open = true;
  return *state_.report;
}

const cer::RerankReport& Session::begin_round(cer::CerConfig config) {
  if (state_.open) {
    throw ConflictError("round " + std::to_string(state_.s) + " is still open");
  }
  return open_round(plan_round(std::move(config)));
}

void Session::submit(const AttentionMask& mask, const std::string& annotator) {
  if (!state_.open) {
    throw ConflictError("no round is open");
  }
  const auto it = std::find(state_.pending.begin(), state_.pending.end(), mask.instance_id);
  if (it == state_.pending.end()) {
    for (const auto& e : store_.by_round(state_.s)) {
      if (e.mask.instance_id == mask.instance_id) {
        throw DuplicateError("instance '" + mask.instance_id + "' already annotated in round " +
                             std::to_string(state_.s));
      }
    }
    throw NotFoundError("instance '" + mask.instance_id + "' is not pending in round " +
                        std::to_string(state_.s));
  }
  if (mask.feature_mask.rows() != cfg_.T || mask.feature_mask.cols() != cfg_.D ||
      mask.time_mask.size() != cfg_.T) {
    throw ShapeError("mask shape does not match the model");
  }
  nap::StoreEntry entry{state_.s, mask, annotator, io::utc_timestamp()};
  store_.append(std::move(entry));
  state_.pending.erase(it);
  state_.store_digest = store_.digest();
}

const RoundState& Session::complete_round() {
  if (!state_.open) {
    throw ConflictError("no round is open");
  }
  if (state_.s == 1 && !store_.empty()) {
    nap::AdaptConfig ac = config_.adapt;
    ac.seed = round_seed(config_.seed, 1) ^ 0xADA97ULL;
    if (config_.select_by_metric && !valid_.empty()) {
      ac.monitor = [this](const ParamVector& p) {
        const double v = evaluate_model(p, cfg_, train_, store_, valid_).value;
        return cfg_.task == Task::regression ? v : -v;
      };
      ac.select_best = true;
    }
    nap::AdaptResult r = nap::adapt_train(train_, store_, params_, cfg_, ac, &valid_);
    params_ = std::move(r.params);
    adapt_log_ = std::move(r.log);
  }
  state_.pending.clear();
  state_.open = false;
  state_.params_hash = params_.digest();
  state_.store_digest = store_.digest();
  refresh_metrics();
  return state_;
}

const RoundState& Session::run_round(const cer::CerConfig& config, Annotator& annotator) {
  const cer::RerankReport& report = begin_round(config);
  for (const AttentionMask& m : annotator.annotate(report, train_)) {
    submit(m, annotator.name());
  }
  return complete_round();
}

}  // namespace ial::loop
