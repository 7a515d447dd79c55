// SPDX-License-Identifier: Apache-2.0
#include "ial/data_io.hpp"

#include "ial/digest.hpp"
#include "ial/errors.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace ial::io {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload encoding assumes a little-endian host");

namespace {

std::string instance_name(int i, int n) {
  const int width = std::max(4, static_cast<int>(std::to_string(std::max(n - 1, 0)).size()));
  std::string num = std::to_string(i);
  return "u" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open '" + path.string() + "' for reading");
  }
  return in;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode) {
  std::ofstream out(path, mode);
  if (!out) {
    throw Error("cannot open '" + path.string() + "' for writing");
  }
  return out;
}

json model_config_to_json(const ModelConfig& c) {
  return json{{"T", c.T},
              {"D", c.D},
              {"L", c.L},
              {"hidden_beta", c.hidden_beta},
              {"hidden_gamma", c.hidden_gamma},
              {"task", std::string(to_string(c.task))},
              {"latent_dim", c.latent_dim},
              {"r_dim", c.r_dim}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.T = j.at("T").get<int>();
  c.D = j.at("D").get<int>();
  c.L = j.at("L").get<int>();
  c.hidden_beta = j.at("hidden_beta").get<int>();
  c.hidden_gamma = j.at("hidden_gamma").get<int>();
  c.task = parse_task(j.at("task").get<std::string>());
  c.latent_dim = j.at("latent_dim").get<int>();
  c.r_dim = j.at("r_dim").get<int>();
  return c;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec, SyntheticTruth* truth) {
  if (spec.N < 0 || spec.T < 1 || spec.D < 1) {
    throw ValidationError("synthetic spec needs N >= 0, T >= 1, D >= 1");
  }
  if (spec.sparsity < 1 || spec.sparsity > spec.T * spec.D) {
    throw ValidationError("sparsity must lie in [1, T*D]");
  }
  if (spec.task == Task::multiclass && spec.classes < 2) {
    throw ValidationError("multiclass needs at least two classes");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);

  std::vector<int> cells(static_cast<std::size_t>(spec.T * spec.D));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  IntGrid relevance = IntGrid::Zero(spec.T, spec.D);
  ad::Matrix weights = ad::Matrix::Zero(spec.T, spec.D);
  for (int k = 0; k < spec.sparsity; ++k) {
    const int c = cells[static_cast<std::size_t>(k)];
    relevance(c / spec.D, c % spec.D) = 1;
    const double sign = (rng() & 1U) ? 1.0 : -1.0;
    weights(c / spec.D, c % spec.D) = sign * magnitude(rng);
  }
  Eigen::VectorXi relevance_time(spec.T);
  for (int t = 0; t < spec.T; ++t) {
    relevance_time(t) = relevance.row(t).maxCoeff() > 0 ? 1 : 0;
  }

  Dataset ds;
  std::vector<double> scores;
  for (int i = 0; i < spec.N; ++i) {
    TimeSeriesInstance inst;
    inst.id = instance_name(i, spec.N);
    inst.x.resize(spec.T, spec.D);
    for (Eigen::Index k = 0; k < inst.x.size(); ++k) {
      inst.x.data()[k] = normal(rng);
    }
    double score = inst.x.cwiseProduct(weights).sum();
    if (spec.noise_std > 0.0) {
      score += spec.noise_std * normal(rng);
    }
    scores.push_back(score);
    inst.relevance = relevance;
    inst.relevance_time = relevance_time;
    ds.instances.push_back(std::move(inst));
  }

  std::vector<double> thresholds;
  const int L = spec.task == Task::multiclass ? spec.classes : 1;
  if (spec.task != Task::regression && !scores.empty()) {
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const int bins = spec.task == Task::binary ? 2 : spec.classes;
    for (int b = 1; b < bins; ++b) {
      // Midpoint between order statistics, so ties cannot straddle a bin edge.
      const std::size_t hi = sorted.size() * static_cast<std::size_t>(b) / static_cast<std::size_t>(bins);
      const std::size_t lo = hi == 0 ? 0 : hi - 1;
      thresholds.push_back(0.5 * (sorted[lo] + sorted[hi]));
    }
  }
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    auto& y = ds.instances[i].y;
    const double s = scores[i];
    switch (spec.task) {
      case Task::binary:
        y = ad::Vector::Constant(1, s > thresholds.front() ? 1.0 : 0.0);
        break;
      case Task::multiclass: {
        const auto cls = std::upper_bound(thresholds.begin(), thresholds.end(), s) - thresholds.begin();
        y = ad::Vector::Zero(L);
        y(cls) = 1.0;
        break;
      }
      case Task::regression:
        y = ad::Vector::Constant(1, s);
        break;
    }
  }
  if (truth != nullptr) {
    truth->relevance = relevance;
    truth->weights = weights;
    truth->thresholds = thresholds;
  }
  return ds;
}

json instance_to_json(const TimeSeriesInstance& inst) {
  json x = json::array();
  for (Eigen::Index t = 0; t < inst.x.rows(); ++t) {
    json row = json::array();
    for (Eigen::Index d = 0; d < inst.x.cols(); ++d) {
      row.push_back(inst.x(t, d));
    }
    x.push_back(std::move(row));
  }
  json y = json::array();
  for (Eigen::Index l = 0; l < inst.y.size(); ++l) {
    y.push_back(inst.y(l));
  }
  json j{{"id", inst.id}, {"x", std::move(x)}, {"y", std::move(y)}};
  if (inst.relevance) {
    json rel = json::array();
    for (Eigen::Index t = 0; t < inst.relevance->rows(); ++t) {
      json row = json::array();
      for (Eigen::Index d = 0; d < inst.relevance->cols(); ++d) {
        row.push_back((*inst.relevance)(t, d));
      }
      rel.push_back(std::move(row));
    }
    j["relevance"] = std::move(rel);
  }
  if (inst.relevance_time) {
    json rt = json::array();
    for (Eigen::Index t = 0; t < inst.relevance_time->size(); ++t) {
      rt.push_back((*inst.relevance_time)(t));
    }
    j["relevance_time"] = std::move(rt);
  }
  return j;
}

TimeSeriesInstance instance_from_json(const json& j) {
  TimeSeriesInstance inst;
  inst.id = j.at("id").get<std::string>();
  const json& x = j.at("x");
  const auto T = static_cast<Eigen::Index>(x.size());
  const auto D = T > 0 ? static_cast<Eigen::Index>(x.at(0).size()) : 0;
  inst.x.resize(T, D);
  for (Eigen::Index t = 0; t < T; ++t) {
    const json& row = x.at(static_cast<std::size_t>(t));
    if (static_cast<Eigen::Index>(row.size()) != D) {
      throw SchemaError("instance '" + inst.id + "' has ragged rows in x");
    }
    for (Eigen::Index d = 0; d < D; ++d) {
      inst.x(t, d) = row.at(static_cast<std::size_t>(d)).get<double>();
    }
  }
  if (!inst.x.allFinite()) {
    throw SchemaError("instance '" + inst.id + "' has non-finite inputs");
  }
  const json& y = j.at("y");
  inst.y.resize(static_cast<Eigen::Index>(y.size()));
  for (std::size_t l = 0; l < y.size(); ++l) {
    inst.y(static_cast<Eigen::Index>(l)) = y.at(l).get<double>();
  }
  if (j.contains("relevance")) {
    const json& rel = j.at("relevance");
    if (static_cast<Eigen::Index>(rel.size()) != T) {
      throw SchemaError("instance '" + inst.id + "' relevance grid does not match x");
    }
    IntGrid g(T, D);
    for (Eigen::Index t = 0; t < T; ++t) {
      const json& row = rel.at(static_cast<std::size_t>(t));
      if (static_cast<Eigen::Index>(row.size()) != D) {
        throw SchemaError("instance '" + inst.id + "' relevance grid does not match x");
      }
      for (Eigen::Index d = 0; d < D; ++d) {
        g(t, d) = row.at(static_cast<std::size_t>(d)).get<int>();
      }
    }
    inst.relevance = std::move(g);
  }
  if (j.contains("relevance_time")) {
    const json& rt = j.at("relevance_time");
    if (static_cast<Eigen::Index>(rt.size()) != T) {
      throw SchemaError("instance '" + inst.id + "' relevance_time does not match x");
    }
    Eigen::VectorXi v(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      v(t) = rt.at(static_cast<std::size_t>(t)).get<int>();
    }
    inst.relevance_time = std::move(v);
  }
  return inst;
}

void dataset_write(const Dataset& ds, std::ostream& os) {
  for (const auto& inst : ds.instances) {
    os << instance_to_json(inst).dump() << '\n';
  }
}

Dataset dataset_read(std::istream& is) {
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    TimeSeriesInstance inst;
    try {
      inst = instance_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!ds.empty()) {
      const auto& first = ds.instances.front();
      if (inst.x.rows() != first.x.rows() || inst.x.cols() != first.x.cols() ||
          inst.y.size() != first.y.size()) {
        throw SchemaError("instance '" + inst.id + "' (line " + std::to_string(lineno) +
                          ") has shape " + std::to_string(inst.x.rows()) + "x" +
                          std::to_string(inst.x.cols()) + ", dataset uses " +
                          std::to_string(first.x.rows()) + "x" + std::to_string(first.x.cols()));
      }
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

void dataset_save(const Dataset& ds, const std::filesystem::path& path) {
  auto out = open_out(path, std::ios::binary | std::ios::trunc);
  dataset_write(ds, out);
}

Dataset dataset_load(const std::filesystem::path& path) {
  auto in = open_in(path);
  return dataset_read(in);
}

Split split_dataset(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n = static_cast<double>(ds.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * n));
  const auto n_valid = static_cast<std::size_t>(std::llround(0.1 * n));
  Split s;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& inst = ds.instances[idx[k]];
    if (k < n_train) {
      s.train.instances.push_back(inst);
    } else if (k < n_train + n_valid) {
      s.valid.instances.push_back(inst);
    } else {
      s.test.instances.push_back(inst);
    }
  }
  return s;
}

FeatureStats feature_stats(const Dataset& ds) {
  const int D = ds.D();
  FeatureStats st{ad::Vector::Zero(D), ad::Vector::Zero(D)};
  double count = 0.0;
  for (const auto& inst : ds.instances) {
    st.mean += inst.x.colwise().sum().transpose();
    count += static_cast<double>(inst.x.rows());
  }
  if (count == 0.0) {
    return st;
  }
  st.mean /= count;
  for (const auto& inst : ds.instances) {
    st.std += (inst.x.rowwise() - st.mean.transpose()).cwiseAbs2().colwise().sum().transpose();
  }
  st.std = (st.std / count).cwiseSqrt();
  return st;
}

std::string checkpoint_encode(const ParamVector& params, const CheckpointMeta& meta) {
  std::vector<const Segment*> order;
  for (const auto& s : params.segments()) {
    order.push_back(&s);
  }
  std::sort(order.begin(), order.end(),
            [](const Segment* a, const Segment* b) { return a->name < b->name; });

  std::string payload;
  json segments = json::array();
  for (const Segment* s : order) {
    segments.push_back(json{{"name", s->name}, {"shape", {s->values.rows(), s->values.cols()}}});
    for (Eigen::Index i = 0; i < s->values.size(); ++i) {
      const float f = static_cast<float>(s->values.data()[i]);
      char buf[sizeof(float)];
      std::memcpy(buf, &f, sizeof(float));
      payload.append(buf, sizeof(float));
    }
  }
  json manifest{{"format", "ial-checkpoint"},
                {"segments", std::move(segments)},
                {"cell", std::string(model::kCellType)},
                {"contribution", std::string(model::kContributionScheme)},
                {"model", model_config_to_json(meta.model)},
                {"nap",
                 {{"latent_dim", meta.model.latent_dim},
                  {"r_dim", meta.model.r_dim},
                  {"lambda_mask", meta.nap.mask},
                  {"lambda_kl", meta.nap.kl},
                  {"kl_per_instance", meta.nap.kl_per_instance},
                  {"mask_target",
                   meta.nap.target == nap::MaskTarget::magnitude ? "magnitude" : "rescaled"}}},
                {"round", meta.round},
                {"split_seed", meta.split_seed},
                {"extra", meta.extra},
                {"payload_sha256", sha256_hex(payload)}};
  const std::string text = manifest.dump();
  const auto len = static_cast<std::uint32_t>(text.size());

  std::string out(kCheckpointMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  for (int b = 0; b < 4; ++b) {
    out.push_back(static_cast<char>((len >> (8 * b)) & 0xFFU));
  }
  out += text;
  out += payload;
  return out;
}

Checkpoint checkpoint_decode(const std::string& bytes) {
  const std::size_t header = kCheckpointMagic.size() + 1 + 4;
  if (bytes.size() < kCheckpointMagic.size() ||
      bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
    throw FormatError("not a checkpoint (magic mismatch)");
  }
  if (bytes.size() < header) {
    throw CorruptError("checkpoint truncated inside the header");
  }
  const auto version = static_cast<std::uint8_t>(bytes[kCheckpointMagic.size()]);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) {
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[kCheckpointMagic.size() + 1 + b]))
           << (8 * b);
  }
  if (bytes.size() < header + len) {
    throw CorruptError("checkpoint truncated inside the manifest");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.substr(header, len));
  } catch (const json::exception& e) {
    throw CorruptError(std::string("checkpoint manifest unreadable: ") + e.what());
  }
  const std::string payload = bytes.substr(header + len);

  Checkpoint ck;
  try {
    std::size_t expected = 0;
    for (const auto& s : manifest.at("segments")) {
      expected += s.at("shape").at(0).get<std::size_t>() * s.at("shape").at(1).get<std::size_t>();
    }
    if (payload.size() != expected * sizeof(float)) {
      throw CorruptError("checkpoint payload has " + std::to_string(payload.size()) +
                         " bytes, manifest implies " + std::to_string(expected * sizeof(float)));
    }
    if (sha256_hex(payload) != manifest.at("payload_sha256").get<std::string>()) {
      throw CorruptError("checkpoint payload digest mismatch");
    }
    std::size_t at = 0;
    for (const auto& s : manifest.at("segments")) {
      const auto rows = s.at("shape").at(0).get<Eigen::Index>();
      const auto cols = s.at("shape").at(1).get<Eigen::Index>();
      ad::Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        float f;
        std::memcpy(&f, payload.data() + at, sizeof(float));
        at += sizeof(float);
        m.data()[i] = static_cast<double>(f);
      }
      ck.params.add(s.at("name").get<std::string>(), std::move(m));
    }
    ck.meta.model = model_config_from_json(manifest.at("model"));
    const json& nj = manifest.at("nap");
    ck.meta.nap.mask = nj.at("lambda_mask").get<double>();
    ck.meta.nap.kl = nj.at("lambda_kl").get<double>();
    ck.meta.nap.kl_per_instance = nj.value("kl_per_instance", true);
    ck.meta.nap.target = nj.at("mask_target").get<std::string>() == "rescaled"
                             ? nap::MaskTarget::rescaled
                             : nap::MaskTarget::magnitude;
    ck.meta.round = manifest.at("round").get<int>();
    ck.meta.split_seed = manifest.at("split_seed").get<std::uint64_t>();
    ck.meta.extra = manifest.value("extra", json::object());
  } catch (const json::exception& e) {
    throw CorruptError(std::string("checkpoint manifest invalid: ") + e.what());
  }
  return ck;
}

void checkpoint_save(const std::filesystem::path& path, const ParamVector& params,
                     const CheckpointMeta& meta) {
  const std::string bytes = checkpoint_encode(params, meta);
  auto out = open_out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_decode(ss.str());
}

SparseCells sparse_feature_mask(const IntGrid& mask) {
  SparseCells out;
  for (Eigen::Index t = 0; t < mask.rows(); ++t) {
    for (Eigen::Index d = 0; d < mask.cols(); ++d) {
      if (mask(t, d) != -1) {
        out.push_back({static_cast<int>(t), static_cast<int>(d), mask(t, d)});
      }
    }
  }
  return out;
}

SparseSteps sparse_time_mask(const Eigen::VectorXi& mask) {
  SparseSteps out;
  for (Eigen::Index t = 0; t < mask.size(); ++t) {
    if (mask(t) != -1) {
      out.push_back({static_cast<int>(t), mask(t)});
    }
  }
  return out;
}

IntGrid dense_feature_mask(const SparseCells& cells, int T, int D) {
  IntGrid g = IntGrid::Constant(T, D, -1);
  for (const auto& [t, d, v] : cells) {
    const std::string at = "(" + std::to_string(t) + "," + std::to_string(d) + ")";
    if (t < 0 || t >= T || d < 0 || d >= D) {
      throw ValidationError("mask cell " + at + " out of range");
    }
    if (v < -1 || v > 1) {
      throw ValidationError("mask value " + std::to_string(v) + " at " + at + " is not in {-1,0,1}");
    }
    g(t, d) = v;
  }
  return g;
}

Eigen::VectorXi dense_time_mask(const SparseSteps& steps, int T) {
  Eigen::VectorXi m = Eigen::VectorXi::Constant(T, -1);
  for (const auto& [t, v] : steps) {
    if (t < 0 || t >= T) {
      throw ValidationError("time mask step (" + std::to_string(t) + ") out of range");
    }
    if (v < -1 || v > 1) {
      throw ValidationError("time mask value " + std::to_string(v) + " at (" + std::to_string(t) +
                            ") is not in {-1,0,1}");
    }
    m(t) = v;
  }
  return m;
}

json annotation_to_json(const nap::StoreEntry& entry) {
  json fm = json::array();
  for (const auto& c : sparse_feature_mask(entry.mask.feature_mask)) {
    fm.push_back({c[0], c[1], c[2]});
  }
  json tm = json::array();
  for (const auto& s : sparse_time_mask(entry.mask.time_mask)) {
    tm.push_back({s[0], s[1]});
  }
  return json{{"instance_id", entry.mask.instance_id},
              {"round", entry.round},
              {"annotator", entry.annotator},
              {"feature_mask", std::move(fm)},
              {"time_mask", std::move(tm)},
              {"ts", entry.ts}};
}

nap::StoreEntry annotation_from_json(const json& j, int T, int D) {
  nap::StoreEntry e;
  e.mask.instance_id = j.at("instance_id").get<std::string>();
  e.round = j.at("round").get<int>();
  e.annotator = j.value("annotator", std::string("unknown"));
  e.ts = j.value("ts", std::string());
  SparseCells cells;
  for (const auto& c : j.at("feature_mask")) {
    cells.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
  }
  SparseSteps steps;
  for (const auto& s : j.value("time_mask", json::array())) {
    steps.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  }
  e.mask.feature_mask = dense_feature_mask(cells, T, D);
  e.mask.time_mask = dense_time_mask(steps, T);
  return e;
}

nap::AnnotationStore annotation_load(const std::filesystem::path& path, int T, int D) {
  nap::AnnotationStore store;
  if (!std::filesystem::exists(path)) {
    return store;
  }
  auto in = open_in(path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      store.append(annotation_from_json(json::parse(line), T, D));
    } catch (const json::exception& e) {
      throw ParseError("annotation line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

void annotation_append(const std::filesystem::path& path, const nap::StoreEntry& entry, int T,
                       int D) {
  nap::AnnotationStore existing = annotation_load(path, T, D);
  existing.append(entry);  // validates and rejects duplicates
  auto out = open_out(path, std::ios::binary | std::ios::app);
  out << annotation_to_json(entry).dump() << '\n';
}

std::vector<nap::StoreEntry> annotation_query(const std::filesystem::path& path, int T, int D,
                                              std::optional<int> round,
                                              std::optional<std::string> instance_id) {
  const nap::AnnotationStore store = annotation_load(path, T, D);
  std::vector<nap::StoreEntry> out;
  for (const auto& e : store.entries()) {
    if (round && e.round != *round) continue;
    if (instance_id && e.mask.instance_id != *instance_id) continue;
    out.push_back(e);
  }
  return out;
}

void record_append(const std::filesystem::path& path, const json& record) {
  auto out = open_out(path, std::ios::binary | std::ios::app);
  out << record.dump() << '\n';
}

std::vector<json> record_read(const std::filesystem::path& path) {
  std::vector<json> out;
  if (!std::filesystem::exists(path)) {
    return out;
  }
  auto in = open_in(path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError("record line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace ial::io
