#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "distdnas/search.hpp"

using namespace distdnas;

namespace {

SupernetConfig tiny_config() {
  SupernetConfig c;
  c.blocks = 3;
  c.dim_d = 8;
  c.dim_s = 4;
  c.slots = 3;
  c.default_table_rows = 32;
  return c;
}

std::vector<DayShard> tiny_days(int days, Index n, std::uint64_t seed = 1) {
  SynthConfig s;
  s.examples_per_day = n;
  s.table_cap = 32;
  s.seed = seed;
  const SyntheticWorld world(s);
  std::vector<DayShard> out;
  for (int d = 1; d <= days; ++d) out.push_back(world.generate_day(d));
  return out;
}

std::vector<const DayShard*> pointers(const std::vector<DayShard>& days) {
  std::vector<const DayShard*> out;
  for (const auto& d : days) out.push_back(&d);
  return out;
}

SearchConfig fast_search(SearchMode mode, double gamma) {
  SearchConfig s;
  s.mode = mode;
  s.gamma = gamma;
  s.batch_size = 32;
  return s;
}

ShardResult fake_result(const SupernetConfig& cfg, std::initializer_list<double> first_row) {
  ShardResult r;
  r.config = cfg;
  r.arch = ArchWeights::zeros(cfg.blocks);
  Index j = 0;
  for (double v : first_row) r.arch.dense.at(0, j++) = v;
  return r;
}

}  // namespace

TEST_CASE("search config validation ties gamma to the mode") {
  CHECK_NOTHROW(fast_search(SearchMode::Distributed, 0.0).validate());
  CHECK_THROWS_AS(fast_search(SearchMode::Distributed, 0.004).validate(), Error);
  CHECK_THROWS_AS(fast_search(SearchMode::DistDNAS, 0.0).validate(), Error);
  CHECK(fast_search(SearchMode::DistDNAS, 0.004).regularized());
  CHECK_FALSE(fast_search(SearchMode::OneShot, 0.004).regularized());
  CHECK(mode_from_name("freshness") == SearchMode::Freshness);
  CHECK_THROWS_AS(mode_from_name("fresh"), Error);

  SearchConfig s = fast_search(SearchMode::Freshness, 0.0);
  s.max_steps = 7;
  nlohmann::json j = s;
  const SearchConfig back = j.get<SearchConfig>();
  CHECK(back.mode == SearchMode::Freshness);
  CHECK(back.max_steps == 7);
  CHECK(back.batch_size == 32);
}

TEST_CASE("zero-step search returns the initial logits") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(1, 64);
  SearchConfig s = fast_search(SearchMode::Distributed, 0.0);
  s.max_steps = 0;
  const auto data = pointers(days);
  const ShardResult r = search_shard(data, cfg, s, nullptr);
  CHECK(r.losses.empty());
  for (Index i = 0; i < r.arch.dense.size(); ++i) {
    CHECK(r.arch.dense[i] == 0.0);
    CHECK(r.arch.sparse[i] == 0.0);
  }
}

TEST_CASE("shard search is deterministic and logs one loss per step") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(1, 200);
  const auto data = pointers(days);
  const SearchConfig s = fast_search(SearchMode::Distributed, 0.0);
  const ShardResult a = search_shard(data, cfg, s, nullptr);
  const ShardResult b = search_shard(data, cfg, s, nullptr);
  CHECK(a.losses.size() == 7);
  CHECK(a.examples == 200);
  CHECK(a.losses == b.losses);
  CHECK(max_abs_diff(a.arch.dense, b.arch.dense) == 0.0);
  CHECK(max_abs_diff(a.arch.sparse, b.arch.sparse) == 0.0);
  double moved = 0.0;
  for (Index i = 0; i < a.arch.dense.size(); ++i) moved += std::abs(a.arch.dense[i]);
  CHECK(moved > 0.0);
}

TEST_CASE("aggregator algebra") {
  const SupernetConfig cfg = tiny_config();
  const ShardResult a = fake_result(cfg, {2.0, -1.0, 0.5, 0.0, 3.0});
  const ShardResult b = fake_result(cfg, {-0.3, 0.8, 1.5, 0.0, -2.0});
  const ShardResult c = fake_result(cfg, {0.1, 0.2, 0.3, 0.4, 0.5});

  const std::vector<ShardResult> same{a, a, a};
  const ArchProbs idem = aggregate(same);
  const ArchProbs single = normalized_arch(a.arch);
  CHECK(max_abs_diff(idem.dense, single.dense) == 0.0);
  CHECK(max_abs_diff(idem.sparse, single.sparse) == 0.0);

  const std::vector<ShardResult> abc{a, b, c};
  const std::vector<ShardResult> cab{c, a, b};
  const std::vector<ShardResult> bca{b, c, a};
  const ArchProbs p1 = aggregate(abc);
  CHECK(max_abs_diff(p1.dense, aggregate(cab).dense) == 0.0);
  CHECK(max_abs_diff(p1.dense, aggregate(bca).dense) == 0.0);

  ShardResult one_hot_a = fake_result(cfg, {});
  ShardResult one_hot_b = fake_result(cfg, {});
  // Large logit gaps give probabilities that are exactly one-hot in double precision.
  one_hot_a.arch.dense.at(0, 0) = 1000.0;
  one_hot_b.arch.dense.at(0, 1) = 1000.0;
  const std::vector<ShardResult> pair{one_hot_a, one_hot_b};
  const ArchProbs half = aggregate(pair);
  CHECK(half.dense.at(0, 0) == 0.5);
  CHECK(half.dense.at(0, 1) == 0.5);
  CHECK(half.dense.at(0, 2) == 0.0);
  CHECK(half.dense.at(0, 3) == 0.0);
  CHECK(half.dense.at(0, 4) == 0.0);

  ShardResult other = a;
  other.config.dim_d = 16;
  const std::vector<ShardResult> mismatch{a, other};
  CHECK_THROWS_AS(aggregate(mismatch), Error);
  CHECK_THROWS_AS(aggregate(std::vector<ShardResult>{}), Error);
}

TEST_CASE("distributed and oneshot agree on a single shard") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(1, 160);
  const auto data = pointers(days);
  const SearchOutcome d = run_search(data, cfg, fast_search(SearchMode::Distributed, 0.0), 1, nullptr);
  const SearchOutcome o = run_search(data, cfg, fast_search(SearchMode::OneShot, 0.0), 1, nullptr);
  CHECK(max_abs_diff(d.probs.dense, o.probs.dense) == 0.0);
  CHECK(max_abs_diff(d.probs.sparse, o.probs.sparse) == 0.0);
}

TEST_CASE("freshness equals a search of the last shard alone") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(3, 96);
  const auto data = pointers(days);
  const SearchConfig s = fast_search(SearchMode::Freshness, 0.0);
  const SearchOutcome f = run_search(data, cfg, s, 1, nullptr);
  const std::vector<const DayShard*> last{data.back()};
  const ShardResult alone = search_shard(last, cfg, s, nullptr);
  REQUIRE(f.shards.size() == 1);
  CHECK(f.shards[0].day == 3);
  CHECK(max_abs_diff(f.probs.dense, normalized_arch(alone.arch).dense) == 0.0);
  CHECK(max_abs_diff(f.probs.sparse, normalized_arch(alone.arch).sparse) == 0.0);
}

TEST_CASE("parallel workers reproduce the sequential result bitwise") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(4, 96);
  const auto data = pointers(days);
  const CostImportance imp = default_cost_importance(cfg, 1, 300);
  const SearchConfig s = fast_search(SearchMode::DistDNAS, 0.004);
  const SearchOutcome seq = run_search(data, cfg, s, 1, &imp);
  const SearchOutcome par = run_search(data, cfg, s, 4, &imp);
  CHECK(max_abs_diff(seq.probs.dense, par.probs.dense) == 0.0);
  CHECK(max_abs_diff(seq.probs.sparse, par.probs.sparse) == 0.0);
  REQUIRE(par.shards.size() == 4);
  Index examples = 0;
  for (const auto& r : par.shards) examples += r.examples;
  CHECK(examples == 4 * 96);

  const nlohmann::json report = par.report();
  CHECK(report["mode"] == "distdnas");
  CHECK(report["shard_seconds"].size() == 4);
  CHECK(report.contains("total_seconds"));
}

TEST_CASE("supernet_only skips search") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(2, 32);
  const auto data = pointers(days);
  const SearchOutcome o = run_search(data, cfg, fast_search(SearchMode::SupernetOnly, 0.0), 1, nullptr);
  CHECK(o.train_supernet);
  CHECK(o.shards.empty());
  CHECK(max_abs_diff(o.probs.dense, ArchProbs::uniform(cfg.blocks).dense) == 0.0);
}

TEST_CASE("shard failures are tagged with the day and discard all results") {
  const SupernetConfig cfg = tiny_config();
  auto days = tiny_days(3, 64);
  days[1].dense[0] = std::numeric_limits<double>::quiet_NaN();
  const auto data = pointers(days);
  try {
    run_search(data, cfg, fast_search(SearchMode::Distributed, 0.0), 2, nullptr);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).rfind("day 2: ", 0) == 0);
  }
  const SearchConfig dn = fast_search(SearchMode::DistDNAS, 0.004);
  CHECK_THROWS_AS(run_search(data, cfg, dn, 1, nullptr), Error);
  std::vector<const DayShard*> unordered{data[1], data[0]};
  CHECK_THROWS_AS(run_search(unordered, cfg, fast_search(SearchMode::Distributed, 0.0), 1, nullptr), Error);
}

TEST_CASE("a dominant cost penalty concentrates mass on the cheapest ops") {
  const SupernetConfig cfg = tiny_config();
  const auto days = tiny_days(8, 6400);
  const auto data = pointers(days);
  const CostImportance imp = default_cost_importance(cfg, 3, 500);
  // Normalized costs of the cheap ops differ by about 1e-4, so the penalty only dominates the
  // log loss once gamma times that gap is well above the loss gradient.
  SearchConfig s = fast_search(SearchMode::DistDNAS, 1e4);
  s.arch_lr = 0.2;
  const ShardResult r = search_shard(data, cfg, s, &imp);
  const ArchProbs p = normalized_arch(r.arch);
  const Tensor dense_s = imp.dense_part();
  const Tensor sparse_s = imp.sparse_part();
  for (Index i = 0; i < cfg.blocks; ++i) {
    for (const auto& [probs, cost] : {std::pair{&p.dense, &dense_s}, std::pair{&p.sparse, &sparse_s}}) {
      double lo = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < 5; ++j) lo = std::min(lo, cost->at(i, j));
      double cheap_mass = 0.0;
      for (Index j = 0; j < 5; ++j)
        if (cost->at(i, j) <= 1.1 * lo) cheap_mass += probs->at(i, j);
      CHECK(cheap_mass > 0.9);
    }
  }
}
