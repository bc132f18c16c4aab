#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "distdnas/data.hpp"

using namespace distdnas;

namespace {

SynthConfig small_config(Index n = 2000) {
  SynthConfig c;
  c.examples_per_day = n;
  return c;
}

std::string criteo_line(const std::string& label, const std::vector<std::string>& ints,
                        const std::vector<std::string>& cats) {
  std::string line = label;
  for (const auto& v : ints) line += "\t" + v;
  for (const auto& v : cats) line += "\t" + v;
  return line;
}

std::vector<double> dense_column(const DayShard& s, Index feature) {
  std::vector<double> out;
  for (Index i = 0; i < s.size(); ++i) out.push_back(s.dense[static_cast<std::size_t>(i * s.dense_features + feature)]);
  return out;
}

}  // namespace

TEST_CASE("synthetic days are deterministic per (seed, day)") {
  const SynthConfig c = small_config(500);
  const DayShard a = generate_synthetic_day(c, 2);
  const DayShard b = generate_synthetic_day(c, 2);
  CHECK(a.dense == b.dense);
  CHECK(a.ids == b.ids);
  CHECK(a.labels == b.labels);
  const DayShard other = generate_synthetic_day(c, 3);
  CHECK(a.dense != other.dense);
}

TEST_CASE("synthetic shard respects table capacity and binary labels") {
  SynthConfig c = small_config(1000);
  c.table_cap = 64;
  const DayShard s = generate_synthetic_day(c, 1);
  CHECK(s.size() == 1000);
  CHECK(s.source == "synthetic");
  for (auto id : s.ids) {
    CHECK(id >= 0);
    CHECK(id < 64);
  }
  for (double y : s.labels) CHECK((y == 0.0 || y == 1.0));
  const double rate = s.positive_rate();
  CHECK(rate > 0.05);
  CHECK(rate < 0.95);
}

TEST_CASE("without drift consecutive days share dense marginals") {
  SynthConfig c = small_config(10000);
  c.drift = 0.0;
  const DayShard d1 = generate_synthetic_day(c, 1);
  const DayShard d2 = generate_synthetic_day(c, 2);
  std::vector<double> a, b;
  for (Index f = 0; f < c.dense_features; ++f) {
    const auto ca = dense_column(d1, f);
    const auto cb = dense_column(d2, f);
    a.insert(a.end(), ca.begin(), ca.end());
    b.insert(b.end(), cb.begin(), cb.end());
  }
  CHECK(ks_statistic(a, b) < 0.02);
}

TEST_CASE("drift moves the dense marginals") {
  SynthConfig c = small_config(10000);
  c.drift = 1.0;
  const DayShard d1 = generate_synthetic_day(c, 1);
  const DayShard d2 = generate_synthetic_day(c, 2);
  double worst = 0.0;
  for (Index f = 0; f < c.dense_features; ++f)
    worst = std::max(worst, ks_statistic(dense_column(d1, f), dense_column(d2, f)));
  CHECK(worst > 0.05);
}

TEST_CASE("ks statistic closed forms") {
  CHECK(ks_statistic({1, 2, 3}, {1, 2, 3}) == doctest::Approx(0.0));
  CHECK(ks_statistic({0, 0, 0}, {1, 1, 1}) == doctest::Approx(1.0));
  CHECK(ks_statistic({1, 2, 3, 4}, {3, 4, 5, 6}) == doctest::Approx(0.5));
}

TEST_CASE("bayes probability folds in symmetric label noise") {
  SynthConfig c = small_config(10);
  c.label_noise = 0.1;
  const SyntheticWorld w(c);
  const DayShard s = w.generate_day(1);
  for (Index i = 0; i < s.size(); ++i) {
    std::span<const double> x(s.dense.data() + i * c.dense_features, static_cast<std::size_t>(c.dense_features));
    std::span<const std::int32_t> ids(s.ids.data() + i * c.sparse_features, static_cast<std::size_t>(c.sparse_features));
    const double sig = 1.0 / (1.0 + std::exp(-w.logit(x, ids)));
    CHECK(w.bayes_probability(x, ids) == doctest::Approx(0.8 * sig + 0.1).epsilon(1e-12));
  }
}

TEST_CASE("planted interactions reach the true logit only through planted pairs") {
  SynthConfig with = small_config(10);
  SynthConfig without = with;
  without.planted.clear();
  const SyntheticWorld a(with);
  const SyntheticWorld b(without);
  const DayShard s = a.generate_day(1);
  std::span<const double> x(s.dense.data(), static_cast<std::size_t>(with.dense_features));
  std::vector<std::int32_t> ids(s.ids.begin(), s.ids.begin() + with.sparse_features);
  const double base = b.logit(x, ids);
  ids[10] = (ids[10] + 1) % 100;  // feature 10 is not part of any planted pair
  const double diff_unplanted = a.logit(x, ids) - b.logit(x, ids);
  ids[10] = s.ids[10];
  const double diff_original = a.logit(x, ids) - base;
  CHECK(diff_unplanted == doctest::Approx(diff_original).epsilon(1e-12));
}

TEST_CASE("synth config validation and json round trip") {
  SynthConfig c;
  c.drift = 0.35;
  c.planted = {{1, 4}};
  c.seed = 99;
  nlohmann::json j = c;
  const SynthConfig back = j.get<SynthConfig>();
  CHECK(back.drift == 0.35);
  CHECK(back.seed == 99);
  REQUIRE(back.planted.size() == 1);
  CHECK(back.planted[0].second == 4);

  SynthConfig bad;
  bad.drift = -1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = SynthConfig{};
  bad.cardinality = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = SynthConfig{};
  bad.planted = {{0, 40}};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("criteo line parsing") {
  std::vector<std::string> ints(13, "0");
  ints[0] = "3";
  ints[1] = "";
  ints[2] = "-5";
  std::vector<std::string> cats(26, "ffab12cd");
  cats[3] = "";
  std::stringstream in;
  in << criteo_line("1", ints, cats) << "\n" << criteo_line("0", ints, cats) << "\n";
  const DayShard s = parse_criteo_lines(in, 1024, 5);
  REQUIRE(s.size() == 2);
  CHECK(s.day == 5);
  CHECK(s.source == "tsv");
  CHECK(s.labels[0] == 1.0);
  CHECK(s.labels[1] == 0.0);
  CHECK(s.dense[0] == doctest::Approx(std::log(4.0)));
  CHECK(s.dense[1] == 0.0);
  CHECK(s.dense[2] == 0.0);
  CHECK(s.dense[3] == 0.0);
  CHECK(s.ids[0] == s.ids[26]);
  CHECK(s.ids[0] == s.ids[1]);
  CHECK(s.ids[3] == 0);
  CHECK(s.ids[0] != 0);
}

TEST_CASE("criteo parse errors carry the line number") {
  std::vector<std::string> ints(13, "1");
  std::vector<std::string> cats(26, "a1");
  std::stringstream short_line;
  short_line << criteo_line("1", ints, cats) << "\n" << "1\t2\t3\n";
  try {
    parse_criteo_lines(short_line, 100);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::stringstream bad_label;
  bad_label << criteo_line("7", ints, cats) << "\n";
  CHECK_THROWS_AS(parse_criteo_lines(bad_label, 100), ParseError);
  ints[4] = "12abc";
  std::stringstream bad_int;
  bad_int << criteo_line("0", ints, cats) << "\n";
  CHECK_THROWS_AS(parse_criteo_lines(bad_int, 100), ParseError);
  CHECK_THROWS_AS(parse_criteo_tsv("/nonexistent/file.tsv", 100), IoError);
}

TEST_CASE("categorical hashing is stable and in range") {
  CHECK(hash_categorical("", 100) == 0);
  const auto h = hash_categorical("68fd1e64", 100);
  CHECK(h == hash_categorical("68fd1e64", 100));
  CHECK(h >= 1);
  CHECK(h < 100);
  CHECK(hash_categorical("68fd1e64", 1 << 20) ==
        static_cast<std::int32_t>(1 + fnv1a64("68fd1e64") % ((1 << 20) - 1)));
  CHECK(normalize_integer(0.0) == 0.0);
  CHECK(normalize_integer(-3.0) == 0.0);
}

TEST_CASE("shard cache round trip") {
  const DayShard s = generate_synthetic_day(small_config(300), 3);
  const auto path = std::filesystem::temp_directory_path() / "distdnas_test_shard.bin";
  write_shard_cache(path, s, {{"note", "test"}});
  const DayShard back = read_shard_cache(path);
  CHECK(back.day == 3);
  CHECK(back.dense == s.dense);
  CHECK(back.ids == s.ids);
  CHECK(back.labels == s.labels);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_shard_cache(path), IoError);

  const auto junk = std::filesystem::temp_directory_path() / "distdnas_test_junk.bin";
  { std::ofstream(junk) << "not a shard"; }
  CHECK_THROWS_AS(read_shard_cache(junk), Error);
  std::filesystem::remove(junk);
}

TEST_CASE("batch iterator partitions the shard") {
  const DayShard s = generate_synthetic_day(small_config(10), 1);
  BatchIterator it(s, 4, 17);
  CHECK(it.batches() == 3);
  std::vector<Index> sizes;
  std::multiset<double> seen;
  Batch b;
  while (it.next(b)) {
    sizes.push_back(b.size);
    for (Index i = 0; i < b.size; ++i) seen.insert(b.dense[static_cast<std::size_t>(i * b.dense_features)]);
  }
  CHECK(sizes == std::vector<Index>{4, 4, 2});
  std::multiset<double> all;
  for (Index i = 0; i < s.size(); ++i) all.insert(s.dense[static_cast<std::size_t>(i * s.dense_features)]);
  CHECK(seen == all);

  BatchIterator a(s, 3, 5), c(s, 3, 5);
  Batch ba, bc;
  while (a.next(ba)) {
    REQUIRE(c.next(bc));
    CHECK(ba.ids == bc.ids);
  }
  CHECK_THROWS(BatchIterator(s, 0, 1));
}

TEST_CASE("embedding lookup recovers constant rows and accumulates sparse grads") {
  ad::ParamSet params;
  Rng rng(3);
  const std::vector<Index> rows{5, 5};
  EmbeddingTables tables(params, rows, 2, rng);
  for (ad::Param* p : tables.tables())
    for (Index r = 0; r < 5; ++r)
      for (Index d = 0; d < 2; ++d) p->value.at(r, d) = 10.0 * r + d;
  Batch b;
  b.size = 2;
  b.dense_features = 0;
  b.sparse_features = 2;
  b.ids = {1, 3, 1, 4};
  b.labels = {0, 1};
  ad::Tape tape;
  ad::Var out = tables.lookup(tape, b);
  CHECK(out.value().at(0, 0, 0) == 10.0);
  CHECK(out.value().at(0, 1, 1) == 31.0);
  CHECK(out.value().at(1, 1, 0) == 40.0);
  tape.backward(ad::sum(out));
  ad::Param& t0 = *tables.tables()[0];
  ad::Param& t1 = *tables.tables()[1];
  CHECK(t0.grad.at(1, 0) == 2.0);
  CHECK(t0.touched_rows.size() == 1);
  CHECK(t1.touched_rows.size() == 2);
  CHECK(t1.grad.at(0, 0) == 0.0);
  t1.zero_grad();
  CHECK(t1.touched_rows.empty());
  CHECK(t1.grad.at(3, 0) == 0.0);

  b.ids = {1, 7, 1, 4};
  ad::Tape tape2;
  CHECK_THROWS(tables.lookup(tape2, b));
}
