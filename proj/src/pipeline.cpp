#include "distdnas/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace distdnas {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kRunConfigKeys{
    "supernet", "search",     "synth",      "train",    "theta",     "gamma",    "M",
    "seed",     "shards",     "parallelism", "train_days", "eval_day", "importance_samples", "t_range",
    "run_id",   "out",        "data_dir",   "tsv",      "checkpoint", "baseline", "metrics"};

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  if (is.bad()) throw IoError("cannot read " + path.string());
  return ss.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) return out;
    start = comma + 1;
  }
}

template <class T>
T parse_number(const std::string& field, const std::string& where) {
  T value{};
  const char* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ParseError(where + ": '" + field + "' is not a number");
  return value;
}

}  // namespace

DayRange parse_day_range(std::string_view text) {
  const std::string s(text);
  const auto dots = s.find("..");
  auto number = [&](const std::string& part) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size())
      throw ConfigError("t-range: expected a..b, got '" + s + "'");
    return v;
  };
  DayRange r;
  if (dots == std::string::npos) {
    r.first = r.last = number(s);
  } else {
    r.first = number(s.substr(0, dots));
    r.last = number(s.substr(dots + 2));
  }
  if (r.first < 1 || r.last < r.first) throw ConfigError("t-range: need 1 <= a <= b, got '" + s + "'");
  return r;
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(theta > 0.0 && theta < 1.0, "theta must lie in (0, 1)");
  check(gamma >= 0.0, "gamma must be >= 0");
  check(M >= 1, "M must be >= 1");
  check(shards >= 1, "shards must be >= 1");
  check(parallelism >= 1, "parallelism must be >= 1");
  check(train_days >= 1, "train_days must be >= 1");
  check(eval_day >= 1, "eval_day must be >= 1");
  check(importance_samples > static_cast<Index>(kCostColumns) * supernet.blocks,
        "importance_samples must exceed the number of cost columns (10 per block)");
  check(t_range.first >= 1 && t_range.last >= t_range.first, "t_range must satisfy 1 <= first <= last");
  check(!run_id.empty() && run_id.find_first_of(",\n") == std::string::npos,
        "run_id must be non-empty and contain no comma or newline");
  check(!out.empty(), "out must be a directory path");
  try {
    supernet.validate();
    synth.validate();
    SearchConfig effective = search;
    effective.gamma = search.mode == SearchMode::DistDNAS ? gamma : 0.0;
    effective.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (train.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (train.dense_lr < 0.0 || train.sparse_lr < 0.0) throw ConfigError("train: learning rates must be >= 0");
  if (train.warmup_fraction < 0.0 || train.warmup_fraction > 1.0)
    throw ConfigError("train: warmup_fraction must lie in [0, 1]");
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.synth.seed = derive_seed(seed, "run.synth");
  r.supernet.seed = derive_seed(seed, "run.supernet");
  r.search.seed = derive_seed(seed, "run.search");
  r.train.seed = derive_seed(seed, "run.train");
  r.search.gamma = r.search.mode == SearchMode::DistDNAS ? gamma : 0.0;
  if (tsv.empty()) {
    r.supernet.dense_features = synth.dense_features;
    r.supernet.sparse_features = synth.sparse_features;
    r.supernet.table_rows = synth.table_rows();
  } else {
    r.supernet.dense_features = 13;
    r.supernet.sparse_features = 26;
    r.supernet.table_rows.clear();
  }
  return r;
}

void to_json(json& j, const RunConfig& c) {
  auto paths = [](const std::vector<fs::path>& v) {
    json a = json::array();
    for (const auto& p : v) a.push_back(p.string());
    return a;
  };
  j = json{{"supernet", c.supernet},
           {"search", c.search},
           {"synth", c.synth},
           {"train", c.train},
           {"theta", c.theta},
           {"gamma", c.gamma},
           {"M", c.M},
           {"seed", c.seed},
           {"shards", c.shards},
           {"parallelism", c.parallelism},
           {"train_days", c.train_days},
           {"eval_day", c.eval_day},
           {"importance_samples", c.importance_samples},
           {"t_range", std::to_string(c.t_range.first) + ".." + std::to_string(c.t_range.last)},
           {"run_id", c.run_id},
           {"out", c.out.string()},
           {"data_dir", c.data_dir.string()},
           {"tsv", paths(c.tsv)},
           {"checkpoint", c.checkpoint.string()},
           {"baseline", c.baseline.string()},
           {"metrics", paths(c.metrics)}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be an object");
  for (const auto& [key, _] : j.items())
    if (!kRunConfigKeys.contains(key)) throw ConfigError("unknown run config key '" + key + "'");
  const RunConfig d;
  c.supernet = j.value("supernet", json::object()).get<SupernetConfig>();
  c.search = j.value("search", json::object()).get<SearchConfig>();
  c.synth = j.value("synth", json::object()).get<SynthConfig>();
  c.train = j.value("train", json::object()).get<TrainConfig>();
  c.theta = j.value("theta", d.theta);
  c.gamma = j.value("gamma", d.gamma);
  c.M = j.value("M", d.M);
  c.seed = j.value("seed", d.seed);
  c.shards = j.value("shards", d.shards);
  c.parallelism = j.value("parallelism", d.parallelism);
  c.train_days = j.value("train_days", d.train_days);
  c.eval_day = j.value("eval_day", d.eval_day);
  c.importance_samples = j.value("importance_samples", d.importance_samples);
  c.t_range = j.contains("t_range") ? parse_day_range(j.at("t_range").get<std::string>()) : d.t_range;
  c.run_id = j.value("run_id", d.run_id);
  c.out = j.value("out", d.out.string());
  c.data_dir = j.value("data_dir", std::string());
  c.tsv.clear();
  for (const auto& p : j.value("tsv", json::array())) c.tsv.emplace_back(p.get<std::string>());
  c.checkpoint = j.value("checkpoint", std::string());
  c.baseline = j.value("baseline", std::string());
  c.metrics.clear();
  for (const auto& p : j.value("metrics", json::array())) c.metrics.emplace_back(p.get<std::string>());
}

RunConfig load_run_config(const fs::path& path) {
  const std::string text = read_file(path);
  RunConfig c;
  try {
    json doc = json::parse(text);
    if (doc.is_object() && doc.contains("manifest_version")) doc = doc.at("config");
    c = doc.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t config_hash(const RunConfig& config) {
  json j = config.resolved();
  j.erase("out");
  return fnv1a64(j.dump());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_checksum(const fs::path& path) { return fnv1a64(read_file(path)); }

std::string recurring_csv_header() { return "t,train_days,test_day,examples,logloss,auc,ne,baseline_ne,relative_ne"; }

std::string recurring_csv_line(const RecurringRow& r) {
  return std::to_string(r.t) + ",1.." + std::to_string(r.t) + "," + std::to_string(r.t + 1) + "," +
         std::to_string(r.metrics.examples) + "," + format_g6(r.metrics.logloss) + "," + format_g6(r.metrics.auc) +
         "," + format_g6(r.metrics.ne) + "," + (r.baseline_ne ? format_g6(*r.baseline_ne) : "") + "," +
         (r.metrics.relative_ne ? format_g6(*r.metrics.relative_ne) : "");
}

Pipeline::Pipeline(const RunConfig& config) : config_(config.resolved()) { config_.validate(); }

DayShard Pipeline::load_day(int day) const {
  if (day < 1) throw ConfigError("day numbers start at 1");
  if (!config_.tsv.empty()) {
    if (static_cast<std::size_t>(day) > config_.tsv.size())
      throw ConfigError("day " + std::to_string(day) + " requested but only " + std::to_string(config_.tsv.size()) +
                        " tsv files are configured");
    return parse_criteo_tsv(config_.tsv[static_cast<std::size_t>(day - 1)], config_.supernet.default_table_rows, day);
  }
  const fs::path cache = config_.data_path() / ("day_" + std::to_string(day) + "-" +
                                                hex64(fnv1a64(json(config_.synth).dump())).substr(0, 8) + ".bin");
  if (fs::exists(cache)) return read_shard_cache(cache);
  return generate_synthetic_day(config_.synth, day);
}

std::vector<DayShard> Pipeline::load_days(int first, int last) const {
  std::vector<DayShard> out;
  for (int d = first; d <= last; ++d) out.push_back(load_day(d));
  return out;
}

void Pipeline::record(const fs::path& path) {
  const fs::path rel = path.lexically_relative(config_.out);
  const bool inside = !rel.empty() && *rel.begin() != "..";
  artifacts_[(inside ? rel : path).generic_string()] = file_checksum(path);
}

void Pipeline::write_text(const fs::path& rel, const std::string& text) {
  const fs::path path = rel.is_absolute() ? rel : config_.out / rel;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("cannot write " + path.string());
  }
  record(path);
}

void Pipeline::write_json(const fs::path& rel, const json& doc) { write_text(rel, doc.dump(2) + "\n"); }

json Pipeline::read_json(const fs::path& rel) const {
  const fs::path path = config_.out / rel;
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void Pipeline::synth() {
  if (!config_.tsv.empty()) throw ConfigError("synth: the run is configured with tsv inputs");
  const SyntheticWorld world(config_.synth);
  const std::string tag = hex64(fnv1a64(json(config_.synth).dump())).substr(0, 8);
  fs::create_directories(config_.data_path());
  for (int d = 1; d <= config_.synth.days; ++d) {
    const fs::path path = config_.data_path() / ("day_" + std::to_string(d) + "-" + tag + ".bin");
    write_shard_cache(path, world.generate_day(d), {{"synth", config_.synth}});
    record(path);
  }
}

CostImportance Pipeline::importance() {
  CostImportance imp =
      default_cost_importance(config_.supernet, derive_seed(config_.seed, "run.importance"), config_.importance_samples);
  imp.gamma = config_.gamma;
  write_json("importance.json", importance_document(imp));
  write_text("importance.csv", importance_csv(imp));
  return imp;
}

SearchOutcome Pipeline::search() {
  const auto days = load_days(1, static_cast<int>(config_.shards));
  std::vector<const DayShard*> data;
  for (const auto& d : days) data.push_back(&d);
  std::optional<CostImportance> imp;
  if (config_.search.regularized()) imp = importance();
  SearchOutcome outcome =
      run_search(data, config_.supernet, config_.search, config_.parallelism, imp ? &*imp : nullptr);

  for (const ShardResult& r : outcome.shards) {
    const ArchProbs p = normalized_arch(r.arch);
    json doc = arch_document(config_.supernet, &r.arch, &p, nullptr);
    doc["day"] = r.day;
    write_json(fs::path("search") / ("shard_day" + std::to_string(r.day) + ".json"), doc);
  }
  json arch = arch_document(config_.supernet, nullptr, &outcome.probs, nullptr);
  arch["mode"] = std::string(mode_name(outcome.mode));
  arch["train_supernet"] = outcome.train_supernet;
  write_json("arch.json", arch);

  json report = outcome.report();
  json timing{{"shard_seconds", report["shard_seconds"]}, {"total_seconds", report["total_seconds"]}};
  report.erase("shard_seconds");
  report.erase("total_seconds");
  for (auto& s : report["shards"]) s.erase("seconds");
  write_json("search_report.json", report);
  // Timings vary run to run, so they stay out of the checksummed artifact set.
  {
    std::ofstream os(config_.out / "timing.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (config_.out / "timing.json").string());
    os << timing.dump(2) << "\n";
  }
  return outcome;
}

BinaryArch Pipeline::discretize() {
  const json arch = read_json("arch.json");
  const ArchProbs probs = arch_probs_from_json(arch);
  if (probs.blocks() != config_.supernet.blocks)
    throw ConfigError("arch.json has " + std::to_string(probs.blocks()) + " blocks, config has " +
                      std::to_string(config_.supernet.blocks));
  const bool supernet = arch.value("train_supernet", false);
  const BinaryArch bits = supernet ? BinaryArch::all_enabled(probs.blocks()) : distdnas::discretize(probs, config_.theta);
  json doc = arch_document(config_.supernet, nullptr, &probs, &bits);
  doc["theta"] = config_.theta;
  doc["mode"] = arch.value("mode", std::string(mode_name(config_.search.mode)));
  doc["train_supernet"] = supernet;
  write_json("binary_arch.json", doc);
  return bits;
}

ModelSpec Pipeline::discovered_spec(Index M) const {
  const json doc = read_json("binary_arch.json");
  ModelSpec spec;
  spec.arch = binary_arch_from_json(doc);
  spec.config = config_.supernet;
  spec.M = M;
  spec.supernet_uniform = doc.value("train_supernet", false);
  spec.init_seed = derive_seed(config_.seed, "run.model");
  return spec;
}

std::optional<double> Pipeline::stored_baseline_ne(const DayShard& test) const {
  if (config_.baseline.empty()) return std::nullopt;
  return evaluate_model(*load_checkpoint(config_.baseline), test).ne;
}

std::optional<double> Pipeline::retrained_baseline_ne(std::span<const DayShard* const> train_days,
                                                      const DayShard& test) const {
  if (config_.baseline.empty()) return std::nullopt;
  auto fresh = build_model(load_checkpoint(config_.baseline)->spec());
  train_model(*fresh, train_days, config_.train);
  return evaluate_model(*fresh, test).ne;
}

MetricsRow Pipeline::train() {
  const ModelSpec spec = discovered_spec(config_.M);
  auto model = build_model(spec);
  const auto days = load_days(1, static_cast<int>(config_.train_days));
  std::vector<const DayShard*> data;
  for (const auto& d : days) data.push_back(&d);
  train_model(*model, data, config_.train);

  const DayShard test = load_day(config_.eval_day);
  const json doc = read_json("binary_arch.json");
  MetricsRow row;
  row.run_id = config_.run_id;
  row.mode = doc.value("mode", std::string(mode_name(config_.search.mode)));
  row.M = config_.M;
  row.flops = model->flops();
  row.params = model->param_count();
  row.metrics = evaluate_model(*model, test, stored_baseline_ne(test));

  const fs::path ckpt = config_.checkpoint_path();
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, *model,
                  {{"run_id", config_.run_id}, {"mode", row.mode}, {"train_days", config_.train_days}});
  record(ckpt);
  write_text("metrics.csv", metrics_csv_header() + "\n" + metrics_csv_line(row) + "\n");
  return row;
}

MetricsRow Pipeline::eval() {
  json extra;
  const auto model = load_checkpoint(config_.checkpoint_path(), &extra);
  const DayShard test = load_day(config_.eval_day);
  MetricsRow row;
  row.run_id = extra.value("run_id", config_.run_id);
  row.mode = extra.value("mode", std::string(mode_name(config_.search.mode)));
  row.M = model->spec().M;
  row.flops = model->flops();
  row.params = model->param_count();
  row.metrics = evaluate_model(*model, test, stored_baseline_ne(test));
  write_text("eval.csv", metrics_csv_header() + "\n" + metrics_csv_line(row) + "\n");
  return row;
}

std::vector<RecurringRow> Pipeline::recurring() {
  const ModelSpec spec = discovered_spec(config_.M);
  const auto days = load_days(1, config_.t_range.last + 1);
  std::vector<RecurringRow> rows;
  std::string csv = recurring_csv_header() + "\n";
  for (int t = config_.t_range.first; t <= config_.t_range.last; ++t) {
    std::vector<const DayShard*> data;
    for (int d = 1; d <= t; ++d) data.push_back(&days[static_cast<std::size_t>(d - 1)]);
    const DayShard& test = days[static_cast<std::size_t>(t)];
    auto model = build_model(spec);
    train_model(*model, data, config_.train);
    RecurringRow row;
    row.t = t;
    row.baseline_ne = retrained_baseline_ne(data, test);
    row.metrics = evaluate_model(*model, test, row.baseline_ne);
    csv += recurring_csv_line(row) + "\n";
    rows.push_back(row);
  }
  write_text("recurring.csv", csv);
  return rows;
}

std::string Pipeline::frontier() {
  struct Row {
    std::vector<std::string> fields;
    std::uint64_t flops = 0;
    double auc = 0.0;
  };
  std::vector<fs::path> inputs = config_.metrics;
  if (inputs.empty()) inputs.push_back(config_.out / "metrics.csv");
  const std::string header = metrics_csv_header();
  std::vector<Row> rows;
  for (const fs::path& path : inputs) {
    std::istringstream in(read_file(path));
    std::string line;
    Index number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      if (line == header) continue;
      const std::string where = path.string() + " line " + std::to_string(number);
      if (number == 1) throw ParseError(where + ": missing metrics header");
      Row r;
      r.fields = split_csv(line);
      if (r.fields.size() != 9) throw ParseError(where + ": expected 9 fields");
      r.flops = parse_number<std::uint64_t>(r.fields[3], where);
      r.auc = parse_number<double>(r.fields[6], where);
      rows.push_back(std::move(r));
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.flops != b.flops) return a.flops < b.flops;
    return a.fields[0] < b.fields[0];
  });
  std::string out = "run_id,mode,M,flops,params,auc,logloss,ne,relative_ne,pareto\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    bool dominated = false;
    for (std::size_t k = 0; k < rows.size() && !dominated; ++k) {
      if (k == i) continue;
      const Row& o = rows[k];
      const Row& r = rows[i];
      dominated = o.flops <= r.flops && o.auc >= r.auc && (o.flops < r.flops || o.auc > r.auc);
    }
    const auto& f = rows[i].fields;
    out += f[0] + "," + f[1] + "," + f[2] + "," + f[3] + "," + f[4] + "," + f[6] + "," + f[5] + "," + f[7] + "," +
           f[8] + "," + (dominated ? "0" : "1") + "\n";
  }
  write_text("frontier.csv", out);
  return out;
}

void Pipeline::write_manifest(const std::string& command) const {
  json artifacts = json::object();
  for (const auto& [path, sum] : artifacts_) artifacts[path] = hex64(sum);
  const json doc{{"manifest_version", 1},
                 {"command", command},
                 {"config_hash", hex64(config_hash(config_))},
                 {"seed", config_.seed},
                 {"config", config_},
                 {"artifacts", artifacts}};
  fs::create_directories(config_.out);
  const fs::path path = config_.out / ("manifest-" + command + ".json");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << doc.dump(2) << "\n";
}

}  // namespace distdnas
