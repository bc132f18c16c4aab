#include "distdnas/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

namespace distdnas {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void add_into(Tensor& dst, const Tensor& src) {
  for (Index i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string_view mode_name(SearchMode m) {
  switch (m) {
    case SearchMode::SupernetOnly: return "supernet_only";
    case SearchMode::OneShot: return "oneshot";
    case SearchMode::Freshness: return "freshness";
    case SearchMode::Distributed: return "distributed";
    case SearchMode::DistDNAS: return "distdnas";
  }
  throw Error("unknown search mode");
}

SearchMode mode_from_name(std::string_view s) {
  for (SearchMode m : {SearchMode::SupernetOnly, SearchMode::OneShot, SearchMode::Freshness, SearchMode::Distributed,
                       SearchMode::DistDNAS})
    if (mode_name(m) == s) return m;
  throw Error("unknown search mode '" + std::string(s) +
              "' (expected supernet_only, oneshot, freshness, distributed or distdnas)");
}

void SearchConfig::validate() const {
  if (batch_size < 1) throw Error("search: batch_size must be >= 1");
  if (gamma < 0.0) throw Error("search: gamma must be >= 0");
  if (mode == SearchMode::Distributed && gamma != 0.0)
    throw Error("search: mode distributed runs without cost regularization (set gamma = 0)");
  if (mode == SearchMode::DistDNAS && !(gamma > 0.0))
    throw Error("search: mode distdnas needs gamma > 0");
  if (max_steps && *max_steps < 0) throw Error("search: max_steps must be >= 0");
  if (dense_lr < 0.0 || sparse_lr < 0.0 || arch_lr < 0.0) throw Error("search: learning rates must be >= 0");
}

void to_json(json& j, const SearchConfig& c) {
  j = json{{"mode", std::string(mode_name(c.mode))},
           {"batch_size", c.batch_size},
           {"gamma", c.gamma},
           {"dense_lr", c.dense_lr},
           {"sparse_lr", c.sparse_lr},
           {"arch_lr", c.arch_lr},
           {"warmup_fraction", c.warmup_fraction},
           {"seed", c.seed}};
  j["max_steps"] = c.max_steps ? json(*c.max_steps) : json(nullptr);
}

void from_json(const json& j, SearchConfig& c) {
  const SearchConfig d;
  c.mode = mode_from_name(j.value("mode", std::string(mode_name(d.mode))));
  c.batch_size = j.value("batch_size", d.batch_size);
  c.gamma = j.value("gamma", d.gamma);
  c.dense_lr = j.value("dense_lr", d.dense_lr);
  c.sparse_lr = j.value("sparse_lr", d.sparse_lr);
  c.arch_lr = j.value("arch_lr", d.arch_lr);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.seed = j.value("seed", d.seed);
  if (j.contains("max_steps") && !j.at("max_steps").is_null()) c.max_steps = j.at("max_steps").get<Index>();
}

ShardResult search_shard(std::span<const DayShard* const> data, const SupernetConfig& config,
                         const SearchConfig& search, const CostImportance* importance) {
  if (data.empty()) throw Error("search_shard: no data");
  search.validate();
  const bool regularized = search.regularized();
  if (regularized && importance == nullptr) throw Error("search_shard: distdnas mode needs cost importance");
  if (regularized && importance->blocks() != config.blocks)
    throw Error("search_shard: cost importance covers " + std::to_string(importance->blocks()) + " blocks, supernet has " +
                std::to_string(config.blocks));

  const auto t0 = Clock::now();
  ShardResult result;
  result.day = data[0]->day;
  result.config = config;

  Supernet net(config);
  Index total_steps = 0;
  for (const DayShard* s : data) total_steps += (s->size() + search.batch_size - 1) / search.batch_size;
  if (search.max_steps) total_steps = std::min(total_steps, *search.max_steps);
  const Index warmup = warmup_steps_for(search.warmup_fraction, total_steps);

  std::vector<ad::Param*> dense, tables;
  for (const auto& p : net.network().params().all()) (p->row_sparse ? tables : dense).push_back(p.get());
  std::vector<ad::Param*> logits{&net.dense_logits(), &net.sparse_logits()};
  Adam weight_opt(AdamConfig{search.dense_lr});
  SparseAdagrad table_opt;
  Adam arch_opt(AdamConfig{search.arch_lr});

  Rng noise(derive_seed(search.seed, "search.noise", static_cast<std::uint64_t>(result.day)));
  net.network().params().zero_grad();
  net.arch_params().zero_grad();
  Index step = 0;
  Batch batch;
  for (const DayShard* shard : data) {
    if (step >= total_steps) break;
    BatchIterator it(*shard, search.batch_size,
                     derive_seed(search.seed, "search.shuffle", static_cast<std::uint64_t>(shard->day)));
    while (step < total_steps && it.next(batch)) {
      const bool arch_step = step % 2 == 0;  // steps are 1-based odd/even
      double loss = 0.0;
      try {
        ad::Tape tape(false);
        ad::Var out = ad::bce_with_logits(
            net.forward(tape, batch, ForwardMode::Search, &noise, !arch_step, arch_step), batch.label_tensor());
        loss = out.value()[0];
        tape.backward(out);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("search diverged at step " + std::to_string(step + 1) + " (day " +
                              std::to_string(shard->day) + "): " + e.what());
      }
      if (regularized) {
        const RegularizerValue r = cost_regularizer(net.arch(), *importance, search.gamma);
        loss += r.value;
        if (arch_step) {
          add_into(net.dense_logits().grad, r.dense_grad);
          add_into(net.sparse_logits().grad, r.sparse_grad);
        }
      }
      if (!std::isfinite(loss))
        throw DivergenceError("search diverged at step " + std::to_string(step + 1) + ": non-finite loss");
      if (arch_step) {
        arch_opt.step(logits, warmup_lr(search.arch_lr, step, warmup));
        net.arch_params().zero_grad();
      } else {
        weight_opt.step(dense, warmup_lr(search.dense_lr, step, warmup));
        table_opt.step(tables, warmup_lr(search.sparse_lr, step, warmup));
        net.network().params().zero_grad();
      }
      result.losses.push_back(loss);
      result.examples += batch.size;
      ++step;
    }
  }
  result.arch = net.arch();
  result.seconds = seconds_since(t0);
  return result;
}

ArchProbs aggregate(std::span<const ShardResult> results) {
  if (results.empty()) throw Error("aggregate: no shard results");
  for (const ShardResult& r : results)
    if (!(r.config == results[0].config)) throw Error("aggregate: shard results come from different supernet configs");
  std::vector<ArchProbs> probs;
  for (const ShardResult& r : results) probs.push_back(normalized_arch(r.arch));
  ArchProbs out = ArchProbs::uniform(results[0].arch.blocks());
  // Sorting each entry's values and summing in extended precision makes the
  // mean independent of shard order and exact for identical inputs.
  std::vector<double> vals(probs.size());
  auto mean_into = [&](Tensor ArchProbs::*field) {
    Tensor& dst = out.*field;
    for (Index i = 0; i < dst.size(); ++i) {
      for (std::size_t k = 0; k < probs.size(); ++k) vals[k] = (probs[k].*field)[i];
      std::sort(vals.begin(), vals.end());
      long double acc = 0.0L;
      for (double v : vals) acc += v;
      dst[i] = static_cast<double>(acc / static_cast<long double>(vals.size()));
    }
  };
  mean_into(&ArchProbs::dense);
  mean_into(&ArchProbs::sparse);
  return out;
}

json SearchOutcome::report() const {
  json shards_json = json::array();
  json shard_seconds = json::array();
  for (const ShardResult& r : shards) {
    shards_json.push_back({{"day", r.day},
                           {"steps", r.losses.size()},
                           {"examples", r.examples},
                           {"final_loss", r.losses.empty() ? json(nullptr) : json(r.losses.back())},
                           {"seconds", r.seconds}});
    shard_seconds.push_back(r.seconds);
  }
  return json{{"mode", std::string(mode_name(mode))},
              {"train_supernet", train_supernet},
              {"parallelism", parallelism},
              {"shards", shards_json},
              {"shard_seconds", shard_seconds},
              {"total_seconds", total_seconds}};
}

SearchOutcome run_search(std::span<const DayShard* const> shards, const SupernetConfig& config,
                         const SearchConfig& search, Index parallelism, const CostImportance* importance) {
  if (shards.empty()) throw Error("run_search: no shards");
  if (parallelism < 1) throw Error("run_search: parallelism must be >= 1");
  search.validate();
  for (std::size_t k = 1; k < shards.size(); ++k)
    if (shards[k]->day <= shards[k - 1]->day) throw Error("run_search: shard days must be unique and increasing");

  const auto t0 = Clock::now();
  SearchOutcome out;
  out.mode = search.mode;
  out.parallelism = parallelism;
  switch (search.mode) {
    case SearchMode::SupernetOnly:
      out.probs = ArchProbs::uniform(config.blocks);
      out.train_supernet = true;
      break;
    case SearchMode::OneShot:
      out.shards.push_back(search_shard(shards, config, search, importance));
      out.probs = aggregate(out.shards);
      break;
    case SearchMode::Freshness:
      out.shards.push_back(search_shard(shards.subspan(shards.size() - 1), config, search, importance));
      out.probs = aggregate(out.shards);
      break;
    case SearchMode::Distributed:
    case SearchMode::DistDNAS: {
      const std::size_t n = shards.size();
      std::vector<ShardResult> results(n);
      std::vector<std::exception_ptr> errors(n);
      std::atomic<std::size_t> next{0};
      auto worker = [&] {
        for (std::size_t k = next++; k < n; k = next++) {
          try {
            results[k] = search_shard(shards.subspan(k, 1), config, search, importance);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      };
      const auto workers = static_cast<std::size_t>(std::min<Index>(parallelism, static_cast<Index>(n)));
      std::vector<std::thread> pool;
      for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
      worker();
      for (auto& t : pool) t.join();
      for (std::size_t k = 0; k < n; ++k) {
        if (!errors[k]) continue;
        const std::string tag = "day " + std::to_string(shards[k]->day) + ": ";
        try {
          std::rethrow_exception(errors[k]);
        } catch (const DivergenceError& e) {
          throw DivergenceError(tag + e.what());
        } catch (const std::exception& e) {
          throw Error(tag + e.what());
        }
      }
      out.shards = std::move(results);
      out.probs = aggregate(out.shards);
      break;
    }
  }
  out.total_seconds = seconds_since(t0);
  return out;
}

CostImportance default_cost_importance(const SupernetConfig& config, std::uint64_t seed, Index samples) {
  const auto pairs = sample_cost_pairs(samples, config, derive_seed(seed, "importance.samples"));
  CostImportance imp = permutation_importance(fit_cost_map(pairs), pairs, derive_seed(seed, "importance.permute"));
  return imp;
}

}  // namespace distdnas
