#include "distdnas/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace distdnas {

static_assert(std::endian::native == std::endian::little, "shard cache assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kShardMagic[8] = {'D', 'D', 'N', 'S', 'S', 'H', 'R', 'D'};
constexpr std::uint32_t kShardVersion = 1;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

template <class T>
void write_array(std::ostream& os, const std::vector<T>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
void read_array(std::istream& is, std::vector<T>& v, std::size_t n, const std::filesystem::path& path) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw IoError("shard cache " + path.string() + " is truncated");
}

}  // namespace

Tensor Batch::dense_tensor() const { return Tensor(Shape{size, dense_features}, dense); }
Tensor Batch::label_tensor() const { return Tensor(Shape{size, 1}, labels); }

Batch DayShard::gather(std::span<const Index> rows) const {
  Batch b;
  b.size = static_cast<Index>(rows.size());
  b.dense_features = dense_features;
  b.sparse_features = sparse_features;
  b.dense.resize(static_cast<std::size_t>(b.size * dense_features));
  b.ids.resize(static_cast<std::size_t>(b.size * sparse_features));
  b.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i];
    std::copy_n(dense.begin() + r * dense_features, dense_features,
                b.dense.begin() + static_cast<Index>(i) * dense_features);
    std::copy_n(ids.begin() + r * sparse_features, sparse_features,
                b.ids.begin() + static_cast<Index>(i) * sparse_features);
    b.labels[i] = labels[static_cast<std::size_t>(r)];
  }
  return b;
}

Batch DayShard::all() const {
  std::vector<Index> rows(static_cast<std::size_t>(size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return gather(rows);
}

double DayShard::positive_rate() const {
  if (labels.empty()) return 0.0;
  return std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(labels.size());
}

Index SynthConfig::cardinality_of(Index feature) const {
  return cardinalities.empty() ? cardinality : cardinalities.at(static_cast<std::size_t>(feature));
}

std::vector<Index> SynthConfig::table_rows() const {
  std::vector<Index> rows;
  for (Index f = 0; f < sparse_features; ++f) rows.push_back(std::min(cardinality_of(f), table_cap));
  return rows;
}

void SynthConfig::validate() const {
  if (dense_features < 1 || sparse_features < 1) throw Error("synth: feature counts must be >= 1");
  if (!cardinalities.empty() && static_cast<Index>(cardinalities.size()) != sparse_features)
    throw Error("synth: cardinalities must list one entry per sparse feature");
  for (Index f = 0; f < sparse_features; ++f)
    if (cardinality_of(f) < 2) throw Error("synth: cardinalities must be >= 2");
  if (table_cap < 2) throw Error("synth: table_cap must be >= 2");
  if (drift < 0.0) throw Error("synth: drift must be >= 0");
  if (label_noise < 0.0 || label_noise >= 0.5) throw Error("synth: label_noise must be in [0, 0.5)");
  if (latent_dim < 1) throw Error("synth: latent_dim must be >= 1");
  if (examples_per_day < 1 || days < 1) throw Error("synth: examples_per_day and days must be >= 1");
  for (const PlantedPair& p : planted)
    if (p.first < 0 || p.second < 0 || p.first >= sparse_features || p.second >= sparse_features ||
        p.first == p.second)
      throw Error("synth: planted pair (" + std::to_string(p.first) + ", " + std::to_string(p.second) +
                  ") is not a pair of distinct sparse features");
}

void to_json(json& j, const SynthConfig& c) {
  json pairs = json::array();
  for (const auto& p : c.planted) pairs.push_back({p.first, p.second});
  j = json{{"dense_features", c.dense_features},
           {"sparse_features", c.sparse_features},
           {"cardinalities", c.cardinalities},
           {"cardinality", c.cardinality},
           {"table_cap", c.table_cap},
           {"drift", c.drift},
           {"zipf_exponent", c.zipf_exponent},
           {"planted", pairs},
           {"latent_dim", c.latent_dim},
           {"interaction_scale", c.interaction_scale},
           {"dense_scale", c.dense_scale},
           {"category_scale", c.category_scale},
           {"bias", c.bias},
           {"label_noise", c.label_noise},
           {"examples_per_day", c.examples_per_day},
           {"days", c.days},
           {"seed", c.seed}};
}

void from_json(const json& j, SynthConfig& c) {
  SynthConfig d;
  c.dense_features = j.value("dense_features", d.dense_features);
  c.sparse_features = j.value("sparse_features", d.sparse_features);
  c.cardinalities = j.value("cardinalities", d.cardinalities);
  c.cardinality = j.value("cardinality", d.cardinality);
  c.table_cap = j.value("table_cap", d.table_cap);
  c.drift = j.value("drift", d.drift);
  c.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
  if (j.contains("planted")) {
    c.planted.clear();
    for (const auto& p : j.at("planted")) c.planted.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  } else {
    c.planted = d.planted;
  }
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.interaction_scale = j.value("interaction_scale", d.interaction_scale);
  c.dense_scale = j.value("dense_scale", d.dense_scale);
  c.category_scale = j.value("category_scale", d.category_scale);
  c.bias = j.value("bias", d.bias);
  c.label_noise = j.value("label_noise", d.label_noise);
  c.examples_per_day = j.value("examples_per_day", d.examples_per_day);
  c.days = j.value("days", d.days);
  c.seed = j.value("seed", d.seed);
}

SyntheticWorld::SyntheticWorld(SynthConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, "synth.world"));
  for (Index i = 0; i < config_.dense_features; ++i) dense_weights_.push_back(config_.dense_scale * rng.normal());
  for (Index f = 0; f < config_.sparse_features; ++f) {
    const Index card = config_.cardinality_of(f);
    std::vector<double> effects(static_cast<std::size_t>(card));
    for (double& e : effects) e = config_.category_scale * rng.normal();
    category_effects_.push_back(std::move(effects));
    std::vector<double> lat(static_cast<std::size_t>(card * config_.latent_dim));
    for (double& v : lat) v = rng.normal();
    latents_.push_back(std::move(lat));
  }
}

double SyntheticWorld::logit(std::span<const double> dense, std::span<const std::int32_t> ids) const {
  double z = config_.bias;
  for (std::size_t i = 0; i < dense_weights_.size(); ++i) z += dense_weights_[i] * dense[i];
  for (std::size_t f = 0; f < category_effects_.size(); ++f)
    z += category_effects_[f][static_cast<std::size_t>(ids[f])];
  const auto k = static_cast<std::size_t>(config_.latent_dim);
  const double norm = config_.interaction_scale / std::sqrt(static_cast<double>(k));
  for (const PlantedPair& p : config_.planted) {
    const double* a = latents_[static_cast<std::size_t>(p.first)].data() + ids[static_cast<std::size_t>(p.first)] * k;
    const double* b =
        latents_[static_cast<std::size_t>(p.second)].data() + ids[static_cast<std::size_t>(p.second)] * k;
    double dot = 0.0;
    for (std::size_t d = 0; d < k; ++d) dot += a[d] * b[d];
    z += norm * dot;
  }
  return z;
}

double SyntheticWorld::bayes_probability(std::span<const double> dense, std::span<const std::int32_t> ids) const {
  const double e = config_.label_noise;
  return (1.0 - 2.0 * e) * sigmoid(logit(dense, ids)) + e;
}

DayShard SyntheticWorld::generate_day(int day) const {
  if (day < 1) throw Error("synth: day must be >= 1, got " + std::to_string(day));
  const SynthConfig& c = config_;
  const auto t = static_cast<std::uint64_t>(day);

  // Day-level drift: a unit direction for dense features and a tilt on the
  // category frequencies, both scaled by delta.
  Rng drift_rng(derive_seed(c.seed, "synth.drift", t));
  std::vector<double> direction(static_cast<std::size_t>(c.dense_features));
  double norm = 0.0;
  for (double& v : direction) {
    v = drift_rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : direction) v = c.drift * v / norm;

  std::vector<std::vector<double>> cdfs;
  for (Index f = 0; f < c.sparse_features; ++f) {
    const Index card = c.cardinality_of(f);
    std::vector<double> cdf(static_cast<std::size_t>(card));
    double acc = 0.0;
    for (Index k = 0; k < card; ++k) {
      const double tilt = drift_rng.normal();
      acc += std::pow(static_cast<double>(k + 1), -c.zipf_exponent) * std::exp(c.drift * tilt);
      cdf[static_cast<std::size_t>(k)] = acc;
    }
    for (double& v : cdf) v /= acc;
    cdfs.push_back(std::move(cdf));
  }

  DayShard shard;
  shard.day = day;
  shard.source = "synthetic";
  shard.dense_features = c.dense_features;
  shard.sparse_features = c.sparse_features;
  const Index n = c.examples_per_day;
  shard.dense.resize(static_cast<std::size_t>(n * c.dense_features));
  shard.ids.resize(static_cast<std::size_t>(n * c.sparse_features));
  shard.labels.resize(static_cast<std::size_t>(n));
  const std::vector<Index> rows = c.table_rows();

  Rng rng(derive_seed(c.seed, "synth.examples", t));
  std::vector<std::int32_t> category(static_cast<std::size_t>(c.sparse_features));
  for (Index i = 0; i < n; ++i) {
    double* x = shard.dense.data() + i * c.dense_features;
    for (Index d = 0; d < c.dense_features; ++d) x[d] = rng.normal() + direction[static_cast<std::size_t>(d)];
    for (Index f = 0; f < c.sparse_features; ++f) {
      const auto& cdf = cdfs[static_cast<std::size_t>(f)];
      const double u = rng.uniform();
      const auto k = std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
      category[static_cast<std::size_t>(f)] =
          static_cast<std::int32_t>(std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(cdf.size()) - 1));
      shard.ids[static_cast<std::size_t>(i * c.sparse_features + f)] =
          static_cast<std::int32_t>(category[static_cast<std::size_t>(f)] % rows[static_cast<std::size_t>(f)]);
    }
    const double p = bayes_probability(std::span<const double>(x, static_cast<std::size_t>(c.dense_features)),
                                       category);
    shard.labels[static_cast<std::size_t>(i)] = rng.uniform() < p ? 1.0 : 0.0;
  }
  return shard;
}

DayShard generate_synthetic_day(const SynthConfig& config, int day) { return SyntheticWorld(config).generate_day(day); }

double normalize_integer(double x) { return std::log1p(std::max(x, 0.0)); }

std::int32_t hash_categorical(std::string_view value, Index table_rows) {
  if (table_rows < 2) throw Error("hash_categorical: table needs >= 2 rows");
  if (value.empty()) return 0;
  return static_cast<std::int32_t>(1 + fnv1a64(value) % static_cast<std::uint64_t>(table_rows - 1));
}

DayShard parse_criteo_lines(std::istream& in, Index table_rows, int day) {
  constexpr Index kDense = 13, kSparse = 26, kFields = 1 + kDense + kSparse;
  DayShard shard;
  shard.day = day;
  shard.source = "tsv";
  shard.dense_features = kDense;
  shard.sparse_features = kSparse;
  std::string line;
  Index line_no = 0;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fields.clear();
    std::string_view rest(line);
    while (true) {
      const auto tab = rest.find('\t');
      fields.push_back(rest.substr(0, tab));
      if (tab == std::string_view::npos) break;
      rest.remove_prefix(tab + 1);
    }
    auto fail = [&](const std::string& what) {
      throw ParseError("line " + std::to_string(line_no) + ": " + what);
    };
    if (static_cast<Index>(fields.size()) != kFields)
      fail("expected " + std::to_string(kFields) + " tab-separated fields, got " + std::to_string(fields.size()));
    if (fields[0] != "0" && fields[0] != "1") fail("label must be 0 or 1, got '" + std::string(fields[0]) + "'");
    shard.labels.push_back(fields[0] == "1" ? 1.0 : 0.0);
    for (Index d = 1; d <= kDense; ++d) {
      const std::string_view f = fields[static_cast<std::size_t>(d)];
      long long v = 0;
      if (!f.empty()) {
        const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (ec != std::errc() || ptr != f.data() + f.size())
          fail("integer field " + std::to_string(d) + " is not an integer: '" + std::string(f) + "'");
      }
      shard.dense.push_back(normalize_integer(static_cast<double>(v)));
    }
    for (Index s = 1 + kDense; s < kFields; ++s)
      shard.ids.push_back(hash_categorical(fields[static_cast<std::size_t>(s)], table_rows));
  }
  return shard;
}

DayShard parse_criteo_tsv(const std::filesystem::path& path, Index table_rows, int day) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return parse_criteo_lines(in, table_rows, day);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_shard_cache(const std::filesystem::path& path, const DayShard& shard, const json& header_extra) {
  json header{{"day", shard.day},
              {"source", shard.source},
              {"examples", shard.size()},
              {"dense_features", shard.dense_features},
              {"sparse_features", shard.sparse_features},
              {"extra", header_extra}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kShardMagic, sizeof kShardMagic);
  const std::uint32_t version = kShardVersion;
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_array(os, shard.dense);
  write_array(os, shard.ids);
  write_array(os, shard.labels);
  if (!os) throw IoError("failed writing " + path.string());
}

DayShard read_shard_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, sizeof magic);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, kShardMagic, sizeof magic) != 0)
    throw IoError(path.string() + " is not a shard cache");
  if (version != kShardVersion)
    throw IoError(path.string() + ": unsupported shard cache version " + std::to_string(version));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("shard cache " + path.string() + " is truncated");
  const json header = json::parse(text);
  DayShard s;
  s.day = header.at("day").get<int>();
  s.source = header.at("source").get<std::string>();
  s.dense_features = header.at("dense_features").get<Index>();
  s.sparse_features = header.at("sparse_features").get<Index>();
  const auto n = header.at("examples").get<std::size_t>();
  read_array(is, s.dense, n * static_cast<std::size_t>(s.dense_features), path);
  read_array(is, s.ids, n * static_cast<std::size_t>(s.sparse_features), path);
  read_array(is, s.labels, n, path);
  return s;
}

BatchIterator::BatchIterator(const DayShard& shard, Index batch_size, std::uint64_t shuffle_seed, bool shuffle)
    : shard_(&shard), batch_size_(batch_size), order_(static_cast<std::size_t>(shard.size())) {
  if (batch_size < 1) throw Error("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), Index{0});
  if (shuffle) {
    Rng rng(shuffle_seed);
    rng.shuffle(order_.begin(), order_.end());
  }
}

Index BatchIterator::batches() const {
  return (static_cast<Index>(order_.size()) + batch_size_ - 1) / batch_size_;
}

void BatchIterator::reset() { cursor_ = 0; }

bool BatchIterator::next(Batch& out) {
  const auto n = static_cast<Index>(order_.size());
  if (cursor_ >= n) return false;
  const Index len = std::min(batch_size_, n - cursor_);
  out = shard_->gather(std::span<const Index>(order_.data() + cursor_, static_cast<std::size_t>(len)));
  cursor_ += len;
  return true;
}

EmbeddingTables::EmbeddingTables(ad::ParamSet& params, std::span<const Index> rows, Index dim, Rng& rng,
                                 const std::string& prefix)
    : dim_(dim) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t f = 0; f < rows.size(); ++f) {
    Tensor init(Shape{rows[f], dim});
    for (Index i = 0; i < init.size(); ++i) init[i] = rng.uniform(-bound, bound);
    tables_.push_back(&params.create(prefix + "." + std::to_string(f), std::move(init), true));
  }
}

ad::Var EmbeddingTables::lookup(ad::Tape& tape, const Batch& batch, bool trainable) const {
  return embedding_lookup(tape, tables_, batch, trainable);
}

ad::Var embedding_lookup(ad::Tape& tape, std::span<ad::Param* const> tables, const Batch& batch, bool trainable) {
  if (static_cast<Index>(tables.size()) != batch.sparse_features)
    throw ShapeError("embedding_lookup: " + std::to_string(tables.size()) + " tables for " +
                     std::to_string(batch.sparse_features) + " sparse features");
  return ad::gather(tape, tables, batch.ids, batch.size, trainable);
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw Error("ks_statistic: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

}  // namespace distdnas
