#include "distdnas/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <Eigen/QR>

namespace distdnas {

using nlohmann::json;

double CostTable::total() const {
  double t = 0.0;
  for (const auto& row : flops)
    for (auto v : row) t += static_cast<double>(v);
  return t;
}

CostTable build_cost_table(const SupernetConfig& config) {
  config.validate();
  CostTable table;
  for (Index i = 0; i < config.blocks; ++i) {
    std::array<std::uint64_t, kCostColumns> row{};
    for (std::size_t j = 0; j < kOps; ++j) {
      row[j] = ops::dense_op_flops(ops::kDenseRoster[j], config.dense_shape(i));
      row[kOps + j] = ops::sparse_op_flops(ops::kSparseRoster[j], config.sparse_shape(i));
    }
    table.flops.push_back(row);
  }
  return table;
}

FlopsBreakdown count_flops(const BinaryArch& arch, const SupernetConfig& config, Index stacks) {
  arch.validate(config.blocks);
  const CostTable table = build_cost_table(config);
  const auto m = static_cast<std::uint64_t>(stacks);
  FlopsBreakdown f;
  f.stem = 2 * static_cast<std::uint64_t>(config.dense_features * config.dim_d);
  f.head = 2 * m * static_cast<std::uint64_t>(config.dim_d);
  f.merge = m * static_cast<std::uint64_t>(config.blocks) * ops::merge_flops(2 * config.dim_d, config.dim_s);
  for (std::size_t i = 0; i < arch.dense.size(); ++i)
    for (std::size_t j = 0; j < kOps; ++j) {
      if (arch.dense[i][j]) f.interactions += m * table.flops[i][j];
      if (arch.sparse[i][j]) f.interactions += m * table.flops[i][kOps + j];
    }
  return f;
}

std::vector<CostSample> sample_cost_pairs(Index n, const SupernetConfig& config, std::uint64_t seed) {
  if (n < 1) throw Error("sample_cost_pairs: n must be >= 1");
  Rng rng(derive_seed(seed, "cost.samples"));
  std::vector<CostSample> out;
  out.reserve(static_cast<std::size_t>(n));
  auto draw = [&](OpBits& b) {
    bool any = false;
    for (bool& v : b) {
      v = rng.bernoulli(0.5);
      any = any || v;
    }
    if (!any) b[rng.below(kOps)] = true;
  };
  for (Index s = 0; s < n; ++s) {
    CostSample sample;
    sample.arch.dense.resize(static_cast<std::size_t>(config.blocks));
    sample.arch.sparse.resize(static_cast<std::size_t>(config.blocks));
    for (Index i = 0; i < config.blocks; ++i) {
      draw(sample.arch.dense[static_cast<std::size_t>(i)]);
      draw(sample.arch.sparse[static_cast<std::size_t>(i)]);
    }
    sample.flops = count_flops(sample.arch, config).total();
    out.push_back(std::move(sample));
  }
  return out;
}

std::vector<double> arch_features(const BinaryArch& arch) {
  std::vector<double> x;
  x.reserve(arch.dense.size() * kCostColumns);
  for (std::size_t i = 0; i < arch.dense.size(); ++i) {
    for (bool v : arch.dense[i]) x.push_back(v ? 1.0 : 0.0);
    for (bool v : arch.sparse[i]) x.push_back(v ? 1.0 : 0.0);
  }
  return x;
}

double CostRegressor::predict(const std::vector<double>& features) const {
  if (features.size() != coefficients.size()) throw ShapeError("cost map: feature length mismatch");
  double y = intercept;
  for (std::size_t j = 0; j < features.size(); ++j) y += coefficients[j] * features[j];
  return y;
}

double CostRegressor::predict(const BinaryArch& arch) const { return predict(arch_features(arch)); }

bool CostRegressor::has_constant_columns() const {
  return std::any_of(constant_columns.begin(), constant_columns.end(), [](bool v) { return v; });
}

CostRegressor fit_cost_map(const std::vector<CostSample>& samples) {
  if (samples.empty()) throw Error("fit_cost_map: no samples");
  const auto n = static_cast<Index>(samples.size());
  const auto p = static_cast<Index>(arch_features(samples[0].arch).size());
  Eigen::MatrixXd x(n, p);
  Eigen::VectorXd y(n);
  for (Index r = 0; r < n; ++r) {
    const auto f = arch_features(samples[static_cast<std::size_t>(r)].arch);
    if (static_cast<Index>(f.size()) != p) throw ShapeError("fit_cost_map: samples differ in block count");
    for (Index c = 0; c < p; ++c) x(r, c) = f[static_cast<std::size_t>(c)];
    y(r) = static_cast<double>(samples[static_cast<std::size_t>(r)].flops);
  }

  CostRegressor reg;
  reg.coefficients.assign(static_cast<std::size_t>(p), 0.0);
  reg.constant_columns.assign(static_cast<std::size_t>(p), false);
  std::vector<Index> kept;
  for (Index c = 0; c < p; ++c) {
    const bool constant = (x.col(c).array() == x(0, c)).all();
    reg.constant_columns[static_cast<std::size_t>(c)] = constant;
    if (!constant) kept.push_back(c);
  }

  // Constant columns are dropped; the intercept column absorbs them.
  Eigen::MatrixXd design(n, static_cast<Index>(kept.size()) + 1);
  design.col(0).setOnes();
  for (std::size_t k = 0; k < kept.size(); ++k) design.col(static_cast<Index>(k) + 1) = x.col(kept[k]);
  const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < design.cols())
    throw Error("fit_cost_map: design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                std::to_string(design.cols()) + "); sample more diverse architectures");
  const Eigen::VectorXd beta = qr.solve(y / scale) * scale;
  reg.intercept = beta(0);
  for (std::size_t k = 0; k < kept.size(); ++k)
    reg.coefficients[static_cast<std::size_t>(kept[k])] = beta(static_cast<Index>(k) + 1);
  reg.training_rmse = std::sqrt((design * beta - y).squaredNorm() / static_cast<double>(n));
  return reg;
}

Tensor CostImportance::dense_part() const {
  Tensor t(Shape{blocks(), static_cast<Index>(kOps)});
  for (Index i = 0; i < blocks(); ++i)
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) t.at(i, j) = s.at(i, j);
  return t;
}

Tensor CostImportance::sparse_part() const {
  Tensor t(Shape{blocks(), static_cast<Index>(kOps)});
  for (Index i = 0; i < blocks(); ++i)
    for (Index j = 0; j < static_cast<Index>(kOps); ++j) t.at(i, j) = s.at(i, static_cast<Index>(kOps) + j);
  return t;
}

CostImportance permutation_importance(const CostRegressor& regressor, const std::vector<CostSample>& samples,
                                      std::uint64_t seed, Index repeats) {
  if (samples.empty()) throw Error("permutation_importance: no samples");
  if (repeats < 1) throw Error("permutation_importance: repeats must be >= 1");
  const std::size_t n = samples.size();
  const std::size_t p = regressor.coefficients.size();
  std::vector<std::vector<double>> features;
  std::vector<double> target;
  for (const auto& s : samples) {
    features.push_back(arch_features(s.arch));
    target.push_back(static_cast<double>(s.flops));
  }
  auto mse = [&](const std::vector<std::vector<double>>& xs) {
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double e = regressor.predict(xs[r]) - target[r];
      acc += e * e;
    }
    return acc / static_cast<double>(n);
  };
  const double base = mse(features);

  const auto blocks = static_cast<Index>(p / kCostColumns);
  CostImportance imp;
  imp.raw = Tensor(Shape{blocks, static_cast<Index>(kCostColumns)}, 0.0);
  std::vector<std::vector<double>> shuffled = features;
  std::vector<double> column(n);
  for (std::size_t j = 0; j < p; ++j) {
    double increase = 0.0;
    for (Index r = 0; r < repeats; ++r) {
      for (std::size_t k = 0; k < n; ++k) column[k] = features[k][j];
      Rng rng(derive_seed(seed, "cost.permutation", j * static_cast<std::size_t>(repeats) + static_cast<std::size_t>(r)));
      rng.shuffle(column.begin(), column.end());
      for (std::size_t k = 0; k < n; ++k) shuffled[k][j] = column[k];
      increase += mse(shuffled) - base;
    }
    for (std::size_t k = 0; k < n; ++k) shuffled[k][j] = features[k][j];
    imp.raw[static_cast<Index>(j)] = std::max(0.0, increase / static_cast<double>(repeats));
  }
  const double total = std::accumulate(imp.raw.storage().begin(), imp.raw.storage().end(), 0.0);
  if (!(total > 0.0)) throw Error("permutation_importance: every column has zero importance");
  imp.s = imp.raw;
  for (Index i = 0; i < imp.s.size(); ++i) imp.s[i] /= total;
  return imp;
}

std::vector<std::string> cost_labels(Index blocks) {
  std::vector<std::string> out;
  for (Index i = 0; i < blocks; ++i) {
    for (auto k : ops::kDenseRoster) out.push_back("b" + std::to_string(i + 1) + "." + std::string(ops::name(k)));
    for (auto k : ops::kSparseRoster) out.push_back("b" + std::to_string(i + 1) + "." + std::string(ops::name(k)));
  }
  return out;
}

json importance_document(const CostImportance& imp) {
  json order = json::array();
  for (auto k : ops::kDenseRoster) order.push_back(std::string(ops::name(k)));
  for (auto k : ops::kSparseRoster) order.push_back(std::string(ops::name(k)));
  json s = json::array();
  for (Index i = 0; i < imp.blocks(); ++i) {
    json row = json::array();
    for (Index j = 0; j < static_cast<Index>(kCostColumns); ++j) row.push_back(imp.s.at(i, j));
    s.push_back(std::move(row));
  }
  return json{{"version", 1}, {"gamma", imp.gamma}, {"op_order", order}, {"s", s}};
}

CostImportance importance_from_json(const json& doc) {
  CostImportance imp;
  imp.gamma = doc.value("gamma", 0.0);
  const json& s = doc.at("s");
  const auto blocks = static_cast<Index>(s.size());
  if (blocks < 1) throw Error("importance document: 's' is empty");
  imp.s = Tensor(Shape{blocks, static_cast<Index>(kCostColumns)});
  for (Index i = 0; i < blocks; ++i) {
    const json& row = s.at(static_cast<std::size_t>(i));
    if (row.size() != kCostColumns) throw Error("importance document: each row of 's' must hold 10 values");
    for (Index j = 0; j < static_cast<Index>(kCostColumns); ++j) imp.s.at(i, j) = row.at(static_cast<std::size_t>(j)).get<double>();
  }
  imp.raw = imp.s;
  return imp;
}

std::string importance_csv(const CostImportance& imp) {
  std::ostringstream os;
  os << "op,importance\n" << std::setprecision(6);
  const auto labels = cost_labels(imp.blocks());
  for (std::size_t k = 0; k < labels.size(); ++k) os << labels[k] << ',' << imp.s[static_cast<Index>(k)] << '\n';
  return os.str();
}

RegularizerValue cost_regularizer(const ArchWeights& arch, const CostImportance& imp, double gamma) {
  if (gamma < 0.0) throw Error("cost_regularizer: gamma must be >= 0");
  if (arch.blocks() != imp.blocks()) throw ShapeError("cost_regularizer: block count mismatch");
  const ArchProbs p = normalized_arch(arch);
  const Tensor sd = imp.dense_part(), ss = imp.sparse_part();
  RegularizerValue r;
  r.dense_grad = Tensor(arch.dense.shape(), 0.0);
  r.sparse_grad = Tensor(arch.sparse.shape(), 0.0);
  auto family = [&](const Tensor& probs, const Tensor& s, Tensor& grad) {
    for (Index i = 0; i < probs.shape()[0]; ++i) {
      double expected = 0.0;
      for (Index j = 0; j < static_cast<Index>(kOps); ++j) expected += probs.at(i, j) * s.at(i, j);
      r.value += gamma * expected;
      for (Index j = 0; j < static_cast<Index>(kOps); ++j)
        grad.at(i, j) = gamma * probs.at(i, j) * (s.at(i, j) - expected);
    }
  };
  family(p.dense, sd, r.dense_grad);
  family(p.sparse, ss, r.sparse_grad);
  return r;
}

ad::Var cost_regularizer(ad::Var dense_logits, ad::Var sparse_logits, const CostImportance& imp, double gamma) {
  if (gamma < 0.0) throw Error("cost_regularizer: gamma must be >= 0");
  ad::Tape& tape = *dense_logits.tape();
  ad::Var rd = ad::sum(ad::mul(ad::softmax(dense_logits, 1), tape.constant(imp.dense_part())));
  ad::Var rs = ad::sum(ad::mul(ad::softmax(sparse_logits, 1), tape.constant(imp.sparse_part())));
  return ad::scale(ad::add(rd, rs), gamma);
}

}  // namespace distdnas
