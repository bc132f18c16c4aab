#include "distdnas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace distdnas {

using nlohmann::json;
using ad::Var;

namespace {

constexpr int kArchDocVersion = 1;

json matrix_json(const Tensor& t) {
  json rows = json::array();
  for (Index i = 0; i < t.shape()[0]; ++i) {
    json row = json::array();
    for (Index j = 0; j < t.shape()[1]; ++j) row.push_back(t.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor matrix_from_json(const json& rows, const char* field) {
  if (!rows.is_array() || rows.empty()) throw Error(std::string("arch document: '") + field + "' must be a non-empty array");
  const auto n = static_cast<Index>(rows.size());
  Tensor t(Shape{n, static_cast<Index>(kOps)});
  for (Index i = 0; i < n; ++i) {
    const json& row = rows[static_cast<std::size_t>(i)];
    if (!row.is_array() || row.size() != kOps)
      throw Error(std::string("arch document: each row of '") + field + "' must hold 5 values");
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) t.at(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return t;
}

json bits_json(const std::vector<OpBits>& bits) {
  json rows = json::array();
  for (const OpBits& b : bits) {
    json row = json::array();
    for (bool v : b) row.push_back(v ? 1 : 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<OpBits> bits_from_json(const json& rows, const char* field) {
  std::vector<OpBits> out;
  if (!rows.is_array()) throw Error(std::string("arch document: '") + field + "' must be an array");
  for (const json& row : rows) {
    if (!row.is_array() || row.size() != kOps)
      throw Error(std::string("arch document: each row of '") + field + "' must hold 5 bits");
    OpBits b{};
    for (std::size_t j = 0; j < kOps; ++j) b[j] = row[j].get<int>() != 0;
    out.push_back(b);
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  for (Index i = 0; i < logits.shape()[0]; ++i) {
    std::vector<double> row(kOps);
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) row[static_cast<std::size_t>(j)] = logits.at(i, j);
    const auto probs = mixing_probabilities(row, 1.0);
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) p.at(i, j) = probs[static_cast<std::size_t>(j)];
  }
  return p;
}

std::vector<OpBits> threshold(const Tensor& p, double theta) {
  std::vector<OpBits> out;
  for (Index i = 0; i < p.shape()[0]; ++i) {
    OpBits b{};
    bool any = false;
    Index best = 0;
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) {
      b[static_cast<std::size_t>(j)] = p.at(i, j) >= theta;
      any = any || b[static_cast<std::size_t>(j)];
      if (p.at(i, j) > p.at(i, best)) best = j;
    }
    if (!any) b[static_cast<std::size_t>(best)] = true;
    out.push_back(b);
  }
  return out;
}

Var mixing_weights(Var logits, double temperature, const Tensor* noise) {
  Var z = ad::reshape(logits, Shape{static_cast<Index>(kOps)});
  if (noise != nullptr) z = ad::add(z, z.tape()->constant(noise->reshaped(Shape{static_cast<Index>(kOps)})));
  return ad::softmax(ad::scale(z, 1.0 / temperature), 0);
}

Var combine(std::span<const Var> outputs, Var weights) {
  if (weights.valid()) return ad::weighted_sum(outputs, weights);
  Var acc = outputs[0];
  for (std::size_t j = 1; j < outputs.size(); ++j) acc = ad::add(acc, outputs[j]);
  return acc;
}

}  // namespace

SupernetConfig SupernetConfig::paper_scale() {
  SupernetConfig c;
  c.dim_d = 256;
  c.dim_s = 16;
  c.slots = 16;
  return c;
}

std::vector<Index> SupernetConfig::rows() const {
  if (!table_rows.empty()) return table_rows;
  return std::vector<Index>(static_cast<std::size_t>(sparse_features), default_table_rows);
}

void SupernetConfig::validate() const {
  if (blocks < 1) throw Error("supernet: blocks must be >= 1");
  if (dim_d < 1 || dim_s < 1 || slots < 1) throw Error("supernet: dims must be >= 1");
  if (!(temperature > 0.0)) throw Error("supernet: temperature must be > 0");
  if (heads < 1 || dim_s % heads != 0) throw Error("supernet: dim_s must be divisible by heads");
  if (dense_features < 1 || sparse_features < 1) throw Error("supernet: feature counts must be >= 1");
  if (!table_rows.empty() && static_cast<Index>(table_rows.size()) != sparse_features)
    throw Error("supernet: table_rows must have one entry per sparse feature");
  for (Index r : rows())
    if (r < 1) throw Error("supernet: table rows must be >= 1");
}

ops::DenseShape SupernetConfig::dense_shape(Index block) const {
  return ops::DenseShape{2 * dim_d, dim_d, sparse_slots_in(block), dim_s, dim_d};
}

ops::SparseShape SupernetConfig::sparse_shape(Index block) const {
  return ops::SparseShape{sparse_slots_in(block) + 1, dim_s, slots, heads};
}

void to_json(json& j, const SupernetConfig& c) {
  j = json{{"blocks", c.blocks},
           {"dim_d", c.dim_d},
           {"dim_s", c.dim_s},
           {"slots", c.slots},
           {"heads", c.heads},
           {"temperature", c.temperature},
           {"dense_features", c.dense_features},
           {"sparse_features", c.sparse_features},
           {"table_rows", c.table_rows},
           {"default_table_rows", c.default_table_rows},
           {"seed", c.seed}};
}

void from_json(const json& j, SupernetConfig& c) {
  const SupernetConfig d;
  c.blocks = j.value("blocks", d.blocks);
  c.dim_d = j.value("dim_d", d.dim_d);
  c.dim_s = j.value("dim_s", d.dim_s);
  c.slots = j.value("slots", d.slots);
  c.heads = j.value("heads", d.heads);
  c.temperature = j.value("temperature", d.temperature);
  c.dense_features = j.value("dense_features", d.dense_features);
  c.sparse_features = j.value("sparse_features", d.sparse_features);
  c.table_rows = j.value("table_rows", d.table_rows);
  c.default_table_rows = j.value("default_table_rows", d.default_table_rows);
  c.seed = j.value("seed", d.seed);
}

ArchWeights ArchWeights::zeros(Index blocks) {
  return ArchWeights{Tensor(Shape{blocks, static_cast<Index>(kOps)}, 0.0),
                     Tensor(Shape{blocks, static_cast<Index>(kOps)}, 0.0)};
}

ArchProbs ArchProbs::uniform(Index blocks) {
  const double u = 1.0 / static_cast<double>(kOps);
  return ArchProbs{Tensor(Shape{blocks, static_cast<Index>(kOps)}, u), Tensor(Shape{blocks, static_cast<Index>(kOps)}, u)};
}

BinaryArch BinaryArch::all_enabled(Index blocks) {
  OpBits on{};
  on.fill(true);
  const auto n = static_cast<std::size_t>(blocks);
  return BinaryArch{std::vector<OpBits>(n, on), std::vector<OpBits>(n, on)};
}

BinaryArch BinaryArch::single(Index blocks, ops::DenseOpKind d, ops::SparseOpKind s) {
  OpBits db{}, sb{};
  db[static_cast<std::size_t>(d)] = true;
  sb[static_cast<std::size_t>(s)] = true;
  const auto n = static_cast<std::size_t>(blocks);
  return BinaryArch{std::vector<OpBits>(n, db), std::vector<OpBits>(n, sb)};
}

void BinaryArch::validate(Index blocks) const {
  if (static_cast<Index>(dense.size()) != blocks || static_cast<Index>(sparse.size()) != blocks)
    throw Error("invalid architecture: expected " + std::to_string(blocks) + " blocks, got " +
                std::to_string(dense.size()) + " dense / " + std::to_string(sparse.size()) + " sparse");
  for (std::size_t i = 0; i < dense.size(); ++i) {
    auto any = [](const OpBits& b) { return std::any_of(b.begin(), b.end(), [](bool v) { return v; }); };
    if (!any(dense[i])) throw Error("invalid architecture: block " + std::to_string(i + 1) + " has no dense op");
    if (!any(sparse[i])) throw Error("invalid architecture: block " + std::to_string(i + 1) + " has no sparse op");
  }
}

std::string BinaryArch::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    os << "block " << i + 1 << ":";
    for (std::size_t j = 0; j < kOps; ++j)
      if (dense[i][j]) os << ' ' << ops::name(ops::kDenseRoster[j]);
    os << " |";
    for (std::size_t j = 0; j < kOps; ++j)
      if (sparse[i][j]) os << ' ' << ops::name(ops::kSparseRoster[j]);
    os << '\n';
  }
  return os.str();
}

Tensor gumbel_sample(Shape shape, Rng& rng) {
  Tensor g(shape);
  for (Index i = 0; i < g.size(); ++i) g[i] = -std::log(-std::log(rng.uniform()));
  return g;
}

Tensor gumbel_sample(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return gumbel_sample(shape, rng);
}

std::vector<double> mixing_probabilities(std::span<const double> logits, double temperature,
                                         std::span<const double> noise) {
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  if (!noise.empty() && noise.size() != logits.size()) throw ShapeError("noise and logits differ in length");
  std::vector<double> z(logits.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = (logits[j] + (noise.empty() ? 0.0 : noise[j])) / temperature;
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

Var gumbel_mix(Var logits, std::span<const Var> candidates, double temperature, const Tensor* noise) {
  if (candidates.size() != kOps) throw ShapeError("gumbel_mix: expected 5 candidates");
  if (!(temperature > 0.0)) throw Error("gumbel_mix: temperature must be > 0");
  return ad::weighted_sum(candidates, mixing_weights(logits, temperature, noise));
}

ArchProbs normalized_arch(const ArchWeights& arch) {
  return ArchProbs{softmax_rows(arch.dense), softmax_rows(arch.sparse)};
}

BinaryArch discretize(const ArchProbs& probs, double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw Error("discretize: theta must be in (0, 1)");
  return BinaryArch{threshold(probs.dense, theta), threshold(probs.sparse, theta)};
}

json arch_document(const SupernetConfig& config, const ArchWeights* weights, const ArchProbs* probs,
                   const BinaryArch* bits) {
  json names_d = json::array(), names_s = json::array();
  for (auto k : ops::kDenseRoster) names_d.push_back(std::string(ops::name(k)));
  for (auto k : ops::kSparseRoster) names_s.push_back(std::string(ops::name(k)));
  json doc{{"version", kArchDocVersion},
           {"config", {{"blocks", config.blocks},
                       {"dim_d", config.dim_d},
                       {"dim_s", config.dim_s},
                       {"slots", config.slots},
                       {"temperature", config.temperature}}},
           {"dense_ops", names_d},
           {"sparse_ops", names_s}};
  if (weights != nullptr) {
    doc["dense_logits"] = matrix_json(weights->dense);
    doc["sparse_logits"] = matrix_json(weights->sparse);
  }
  if (probs != nullptr) {
    doc["dense_probs"] = matrix_json(probs->dense);
    doc["sparse_probs"] = matrix_json(probs->sparse);
  }
  if (bits != nullptr) {
    doc["dense_bits"] = bits_json(bits->dense);
    doc["sparse_bits"] = bits_json(bits->sparse);
  }
  return doc;
}

ArchWeights arch_weights_from_json(const json& doc) {
  if (!doc.contains("dense_logits") || !doc.contains("sparse_logits"))
    throw Error("arch document has no dense_logits/sparse_logits");
  return ArchWeights{matrix_from_json(doc.at("dense_logits"), "dense_logits"),
                     matrix_from_json(doc.at("sparse_logits"), "sparse_logits")};
}

ArchProbs arch_probs_from_json(const json& doc) {
  if (doc.contains("dense_probs") && doc.contains("sparse_probs"))
    return ArchProbs{matrix_from_json(doc.at("dense_probs"), "dense_probs"),
                     matrix_from_json(doc.at("sparse_probs"), "sparse_probs")};
  return normalized_arch(arch_weights_from_json(doc));
}

BinaryArch binary_arch_from_json(const json& doc) {
  if (!doc.contains("dense_bits") || !doc.contains("sparse_bits"))
    throw Error("arch document has no dense_bits/sparse_bits");
  return BinaryArch{bits_from_json(doc.at("dense_bits"), "dense_bits"),
                    bits_from_json(doc.at("sparse_bits"), "sparse_bits")};
}

ChoiceNetwork::ChoiceNetwork(const SupernetConfig& config, const BinaryArch& enabled, Index stacks,
                             std::uint64_t init_seed)
    : config_(config), enabled_(enabled), stacks_(stacks) {
  config_.validate();
  enabled_.validate(config_.blocks);
  if (stacks < 1) throw Error("model: M must be >= 1");
  Rng rng(init_seed);
  stem_ = ops::LinearMap::create(params_, rng, "stem", config_.dense_features, config_.dim_d, true);
  const std::vector<Index> rows = config_.rows();
  embeddings_ = EmbeddingTables(params_, rows, config_.dim_s, rng);
  for (Index m = 0; m < stacks; ++m) {
    std::vector<Block> blocks;
    for (Index i = 0; i < config_.blocks; ++i) {
      const std::string prefix = "s" + std::to_string(m) + ".b" + std::to_string(i + 1);
      Block b;
      b.merge = std::make_unique<ops::DenseToSparseMerge>(2 * config_.dim_d, config_.dim_s, params_, rng, prefix);
      for (std::size_t j = 0; j < kOps; ++j) {
        if (enabled_.dense[static_cast<std::size_t>(i)][j])
          b.dense[j] = std::make_unique<ops::DenseOp>(ops::kDenseRoster[j], config_.dense_shape(i), params_, rng,
                                                      prefix);
        if (enabled_.sparse[static_cast<std::size_t>(i)][j])
          b.sparse[j] = std::make_unique<ops::SparseOp>(ops::kSparseRoster[j], config_.sparse_shape(i), params_,
                                                        rng, prefix);
      }
      blocks.push_back(std::move(b));
    }
    stacks_blocks_.push_back(std::move(blocks));
  }
  head_ = ops::LinearMap::create(params_, rng, "head", stacks * config_.dim_d, 1, true);
}

Var ChoiceNetwork::run_stack(ad::Tape& tape, std::span<const Block> blocks, Var stem, Var embedded,
                             const ForwardOptions& options) const {
  (void)tape;
  const bool tw = options.train_weights;
  Var prev1 = stem, prev2 = stem, xs = embedded;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    const BlockMixing* mix = options.mixing.empty() ? nullptr : &options.mixing[i];
    try {
      const std::array<Var, 2> parts{prev1, prev2};
      Var joined = ad::concat(parts, 1);
      const ops::DenseInputs in{joined, prev1, prev2, xs};
      std::vector<Var> dense_out;
      for (const auto& op : b.dense)
        if (op) dense_out.push_back(op->forward(in, tw));
      Var merged = b.merge->forward(joined, xs, tw);
      std::vector<Var> sparse_out;
      for (const auto& op : b.sparse)
        if (op) sparse_out.push_back(op->forward(merged, tw));
      Var wd = mix ? mix->dense : Var{};
      Var ws = mix ? mix->sparse : Var{};
      if ((wd.valid() && dense_out.size() != kOps) || (ws.valid() && sparse_out.size() != kOps))
        throw Error("mixing weights need all five ops enabled");
      Var yd = combine(dense_out, wd);
      Var ys = combine(sparse_out, ws);
      prev2 = prev1;
      prev1 = yd;
      xs = ys;
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("block " + std::to_string(i + 1) + ": " + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError("block " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return prev1;
}

Var ChoiceNetwork::forward(ad::Tape& tape, const Batch& batch, const ForwardOptions& options) const {
  if (batch.dense_features != config_.dense_features || batch.sparse_features != config_.sparse_features)
    throw ShapeError("batch has " + std::to_string(batch.dense_features) + " dense / " +
                     std::to_string(batch.sparse_features) + " sparse features, model expects " +
                     std::to_string(config_.dense_features) + " / " + std::to_string(config_.sparse_features));
  if (!options.mixing.empty() && static_cast<Index>(options.mixing.size()) != config_.blocks)
    throw Error("mixing weights must cover every block");
  const bool tw = options.train_weights;
  Var dense = tape.input("dense", batch.dense_tensor());
  Var stem = ad::relu(stem_.apply(dense, tw));
  Var embedded = embeddings_.lookup(tape, batch, options.train_embeddings);
  std::vector<Var> finals;
  for (const auto& blocks : stacks_blocks_) finals.push_back(run_stack(tape, blocks, stem, embedded, options));
  Var top = finals.size() == 1 ? finals[0] : ad::concat(finals, 1);
  return head_.apply(top, tw);
}

std::uint64_t ChoiceNetwork::stem_flops() const {
  return 2 * static_cast<std::uint64_t>(config_.dense_features * config_.dim_d);
}

std::uint64_t ChoiceNetwork::head_flops() const { return 2 * static_cast<std::uint64_t>(stacks_ * config_.dim_d); }

std::uint64_t ChoiceNetwork::merge_flops() const {
  return static_cast<std::uint64_t>(stacks_ * config_.blocks) * ops::merge_flops(2 * config_.dim_d, config_.dim_s);
}

std::uint64_t ChoiceNetwork::interaction_flops() const {
  std::uint64_t total = 0;
  for (const auto& blocks : stacks_blocks_)
    for (const Block& b : blocks) {
      for (const auto& op : b.dense)
        if (op) total += op->flops();
      for (const auto& op : b.sparse)
        if (op) total += op->flops();
    }
  return total;
}

std::uint64_t ChoiceNetwork::flops() const { return stem_flops() + merge_flops() + interaction_flops() + head_flops(); }

Supernet::Supernet(const SupernetConfig& config)
    : network_(config, BinaryArch::all_enabled(config.blocks), 1, derive_seed(config.seed, "supernet.init")) {
  dense_logits_ = &arch_params_.create("arch.dense", Tensor(Shape{config.blocks, static_cast<Index>(kOps)}, 0.0));
  sparse_logits_ = &arch_params_.create("arch.sparse", Tensor(Shape{config.blocks, static_cast<Index>(kOps)}, 0.0));
}

Var Supernet::forward(ad::Tape& tape, const Batch& batch, ForwardMode mode, Rng* noise_rng, bool train_weights,
                      bool train_arch, std::vector<BlockMixing>* mixing_out) {
  const SupernetConfig& c = network_.config();
  if (mode == ForwardMode::Search && noise_rng == nullptr) throw Error("search-mode forward needs a noise stream");
  Var ld = tape.param(*dense_logits_, train_arch);
  Var ls = tape.param(*sparse_logits_, train_arch);
  std::vector<BlockMixing> mixing;
  for (Index i = 0; i < c.blocks; ++i) {
    std::optional<Tensor> nd, ns;
    if (mode == ForwardMode::Search) {
      nd = gumbel_sample(Shape{static_cast<Index>(kOps)}, *noise_rng);
      ns = gumbel_sample(Shape{static_cast<Index>(kOps)}, *noise_rng);
    }
    mixing.push_back(BlockMixing{mixing_weights(ad::slice(ld, 0, i, 1), c.temperature, nd ? &*nd : nullptr),
                                 mixing_weights(ad::slice(ls, 0, i, 1), c.temperature, ns ? &*ns : nullptr)});
  }
  ForwardOptions opts;
  opts.train_weights = train_weights;
  opts.train_embeddings = train_weights;
  opts.mixing = mixing;
  Var out = network_.forward(tape, batch, opts);
  if (mixing_out != nullptr) *mixing_out = std::move(mixing);
  return out;
}

std::vector<double> Supernet::predict(const Batch& batch) {
  ad::Tape tape;
  return sigmoid_values(forward(tape, batch, ForwardMode::Eval, nullptr, false, false).value());
}

ArchWeights Supernet::arch() const { return ArchWeights{dense_logits_->value, sparse_logits_->value}; }

void Supernet::set_arch(const ArchWeights& arch) {
  if (!(arch.dense.shape() == dense_logits_->value.shape()) || !(arch.sparse.shape() == sparse_logits_->value.shape()))
    throw ShapeError("set_arch: logits shape mismatch");
  dense_logits_->value = arch.dense;
  sparse_logits_->value = arch.sparse;
}

std::vector<double> sigmoid_values(const Tensor& logits) {
  std::vector<double> p(static_cast<std::size_t>(logits.size()));
  for (Index i = 0; i < logits.size(); ++i) p[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-logits[i]));
  return p;
}

}  // namespace distdnas
