#include "distdnas/model_train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace distdnas {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'D', 'N', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kProbClamp = 1e-15;

json bits_rows(const std::vector<OpBits>& bits) {
  json rows = json::array();
  for (const auto& b : bits) {
    json row = json::array();
    for (bool v : b) row.push_back(v ? 1 : 0);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

void to_json(json& j, const ModelSpec& s) {
  j = json{{"config", s.config},
           {"dense_bits", bits_rows(s.arch.dense)},
           {"sparse_bits", bits_rows(s.arch.sparse)},
           {"M", s.M},
           {"supernet_uniform", s.supernet_uniform},
           {"init_seed", s.init_seed}};
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.config = j.at("config").get<SupernetConfig>();
  s.arch = binary_arch_from_json(j);
  s.M = j.value("M", Index{1});
  s.supernet_uniform = j.value("supernet_uniform", false);
  s.init_seed = j.value("init_seed", std::uint64_t{1});
  return s;
}

Model::Model(ModelSpec spec)
    : spec_(std::move(spec)),
      net_(spec_.config, spec_.supernet_uniform ? BinaryArch::all_enabled(spec_.config.blocks) : spec_.arch, spec_.M,
           spec_.init_seed) {
  if (spec_.supernet_uniform) spec_.arch = BinaryArch::all_enabled(spec_.config.blocks);
}

ad::Var Model::forward(ad::Tape& tape, const Batch& batch, bool train) const {
  ForwardOptions opts;
  opts.train_weights = train;
  opts.train_embeddings = train;
  std::vector<BlockMixing> mixing;
  if (spec_.supernet_uniform) {
    const Tensor uniform(Shape{static_cast<Index>(kOps)}, 1.0 / static_cast<double>(kOps));
    for (Index i = 0; i < spec_.config.blocks; ++i)
      mixing.push_back(BlockMixing{tape.constant(uniform), tape.constant(uniform)});
    opts.mixing = mixing;
  }
  return net_.forward(tape, batch, opts);
}

std::vector<double> Model::predict(const Batch& batch) const {
  ad::Tape tape(false);
  return sigmoid_values(forward(tape, batch, false).value());
}

std::vector<double> Model::predict(const DayShard& shard, Index chunk) const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(shard.size()));
  std::vector<Index> rows;
  for (Index start = 0; start < shard.size(); start += chunk) {
    rows.clear();
    for (Index r = start; r < std::min(shard.size(), start + chunk); ++r) rows.push_back(r);
    const auto p = predict(shard.gather(rows));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::unique_ptr<Model> build_model(const ModelSpec& spec) { return std::make_unique<Model>(spec); }

double warmup_lr(double lr, Index step, Index warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return lr;
  return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

Index warmup_steps_for(double fraction, Index total_steps) {
  return static_cast<Index>(std::ceil(fraction * static_cast<double>(total_steps)));
}

void Adam::step(std::span<ad::Param* const> params, double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (ad::Param* p : params) {
    auto it = state_.find(p->id);
    if (it == state_.end())
      it = state_.emplace(p->id, Moments{Tensor(p->value.shape(), 0.0), Tensor(p->value.shape(), 0.0)}).first;
    Moments& mo = it->second;
    double* w = p->value.data();
    const double* g = p->grad.data();
    double* m = mo.m.data();
    double* v = mo.v.data();
    for (Index i = 0; i < p->value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void SparseAdagrad::step(std::span<ad::Param* const> tables, double lr) {
  for (ad::Param* t : tables) {
    auto it = accumulators_.find(t->id);
    if (it == accumulators_.end()) it = accumulators_.emplace(t->id, Tensor(t->value.shape(), 0.0)).first;
    Tensor& acc = it->second;
    const Index width = t->value.shape().last();
    for (Index r : t->touched_rows) {
      double* w = t->value.data() + r * width;
      const double* g = t->grad.data() + r * width;
      double* a = acc.data() + r * width;
      for (Index d = 0; d < width; ++d) {
        a[d] += g[d] * g[d];
        w[d] -= lr * g[d] / (std::sqrt(a[d]) + eps_);
      }
    }
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"dense_lr", c.dense_lr},
           {"sparse_lr", c.sparse_lr},
           {"warmup_fraction", c.warmup_fraction},
           {"beta1", c.adam.beta1},
           {"beta2", c.adam.beta2},
           {"adam_eps", c.adam.eps},
           {"adagrad_eps", c.adagrad_eps},
           {"shuffle", c.shuffle},
           {"check_finite", c.check_finite},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.dense_lr = j.value("dense_lr", d.dense_lr);
  c.sparse_lr = j.value("sparse_lr", d.sparse_lr);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.adam.beta1 = j.value("beta1", d.adam.beta1);
  c.adam.beta2 = j.value("beta2", d.adam.beta2);
  c.adam.eps = j.value("adam_eps", d.adam.eps);
  c.adagrad_eps = j.value("adagrad_eps", d.adagrad_eps);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.check_finite = j.value("check_finite", d.check_finite);
  c.seed = j.value("seed", d.seed);
}

TrainResult train_model(Model& model, std::span<const DayShard* const> shards, const TrainConfig& config) {
  if (config.batch_size < 1) throw Error("train: batch_size must be >= 1");
  if (config.dense_lr < 0.0 || config.sparse_lr < 0.0) throw Error("train: learning rates must be >= 0");
  for (std::size_t k = 1; k < shards.size(); ++k)
    if (shards[k]->day <= shards[k - 1]->day) throw Error("train: shards must be in increasing day order");

  std::vector<ad::Param*> dense, tables;
  for (const auto& p : model.params().all()) (p->row_sparse ? tables : dense).push_back(p.get());
  Adam adam(config.adam);
  SparseAdagrad adagrad(config.adagrad_eps);

  Index total_steps = 0;
  for (const DayShard* s : shards) total_steps += (s->size() + config.batch_size - 1) / config.batch_size;
  const Index warmup = warmup_steps_for(config.warmup_fraction, total_steps);

  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(total_steps));
  Index step = 0;
  Batch batch;
  model.params().zero_grad();
  for (const DayShard* shard : shards) {
    BatchIterator it(*shard, config.batch_size,
                     derive_seed(config.seed, "train.shuffle", static_cast<std::uint64_t>(shard->day)), config.shuffle);
    while (it.next(batch)) {
      double loss = 0.0;
      try {
        ad::Tape tape(config.check_finite);
        ad::Var out = ad::bce_with_logits(model.forward(tape, batch, true), batch.label_tensor());
        loss = out.value()[0];
        if (!std::isfinite(loss)) throw NonFiniteError("loss is not finite");
        tape.backward(out);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + " (day " +
                              std::to_string(shard->day) + "): " + e.what());
      }
      adam.step(dense, warmup_lr(config.dense_lr, step, warmup));
      adagrad.step(tables, warmup_lr(config.sparse_lr, step, warmup));
      model.params().zero_grad();
      result.losses.push_back(loss);
      result.examples += batch.size;
      ++step;
    }
  }
  return result;
}

double log_loss(std::span<const double> p, std::span<const double> y) {
  if (p.size() != y.size() || p.empty()) throw Error("log_loss: predictions and labels must be non-empty and equal length");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    acc -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return acc / static_cast<double>(p.size());
}

double auc_score(std::span<const double> scores, std::span<const double> y) {
  if (scores.size() != y.size()) throw Error("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0, positives = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (y[order[k]] > 0.5) {
        rank_sum += midrank;
        positives += 1.0;
      }
    i = j + 1;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0) throw Error("auc: labels are single-class");
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

double binary_entropy(double q) {
  if (q <= 0.0 || q >= 1.0) return 0.0;
  return -(q * std::log(q) + (1.0 - q) * std::log(1.0 - q));
}

Metrics compute_metrics(std::span<const double> p, std::span<const double> y, std::optional<double> baseline_ne) {
  const double rate = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  if (rate <= 0.0 || rate >= 1.0) throw Error("evaluation shard is single-class; AUC and NE are undefined");
  Metrics m;
  m.examples = static_cast<Index>(p.size());
  m.logloss = log_loss(p, y);
  m.auc = auc_score(p, y);
  m.ne = m.logloss / binary_entropy(rate);
  if (baseline_ne) {
    if (!(*baseline_ne > 0.0)) throw Error("baseline NE must be > 0");
    m.relative_ne = 100.0 * (m.ne - *baseline_ne) / *baseline_ne;
  }
  return m;
}

Metrics evaluate_model(const Model& model, const DayShard& shard, std::optional<double> baseline_ne) {
  if (shard.size() == 0) throw Error("evaluation shard is empty");
  return compute_metrics(model.predict(shard), shard.labels, baseline_ne);
}

std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string metrics_csv_header() { return "run_id,mode,M,flops,params,logloss,auc,ne,relative_ne"; }

std::string metrics_csv_line(const MetricsRow& r) {
  return r.run_id + "," + r.mode + "," + std::to_string(r.M) + "," + std::to_string(r.flops) + "," +
         std::to_string(r.params) + "," + format_g6(r.metrics.logloss) + "," + format_g6(r.metrics.auc) + "," +
         format_g6(r.metrics.ne) + "," + (r.metrics.relative_ne ? format_g6(*r.metrics.relative_ne) : "");
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const json& extra) {
  json params = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.params().all()) {
    const Shape& s = p->value.shape();
    json shape = json::array();
    for (int a = 0; a < s.rank; ++a) shape.push_back(s[a]);
    params.push_back({{"name", p->name}, {"shape", shape}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size());
  }
  const json header{{"spec", model.spec()}, {"params", params}, {"scalars", offset}, {"optimizer", nullptr},
                    {"extra", extra}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& p : model.params().all())
    os.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * 8));
  if (!os) throw IoError("failed writing " + path.string());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, json* extra) {
  static_assert(std::endian::native == std::endian::little, "checkpoints store little-endian doubles");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, sizeof magic);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IoError(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion) throw IoError(path.string() + ": unsupported checkpoint version");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path.string() + ": truncated header");
  const json header = json::parse(text);
  auto model = build_model(model_spec_from_json(header.at("spec")));
  const auto& all = model->params().all();
  const json& entries = header.at("params");
  if (entries.size() != all.size()) throw IoError(path.string() + ": parameter count does not match the spec");
  for (std::size_t k = 0; k < all.size(); ++k) {
    ad::Param& p = *all[k];
    if (entries[k].at("name").get<std::string>() != p.name)
      throw IoError(path.string() + ": parameter '" + entries[k].at("name").get<std::string>() + "' where '" +
                    p.name + "' was expected");
    is.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 8));
    if (!is) throw IoError(path.string() + ": truncated parameter data");
  }
  if (extra != nullptr) *extra = header.value("extra", json::object());
  return model;
}

}  // namespace distdnas
