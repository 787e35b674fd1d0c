#pragma once

// Experiment configuration (one JSON document) and the orchestration behind
// the `tasml` command line: run, ablate, bench and gen-tasks. Needs
// nlohmann/json on the include path.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tasml/checkpoint.hpp"
#include "tasml/driver.hpp"
#include "tasml/errors.hpp"
#include "tasml/taskgen.hpp"

namespace tasml {

using Json = nlohmann::ordered_json;

enum class SourceKind { synthetic, embeddings };

struct TaskSource {
  SourceKind kind = SourceKind::synthetic;
  GeneratorConfig generator; // seed is replaced by the run seed
  std::string train_path;
  std::string test_path;
  int ways = 5;
  int shots = 5;
  int query_per_class = 15;
};

struct ExperimentConfig {
  std::string experiment = "tasml";
  TaskSource source;
  KernelConfig kernel;
  double lambda = 1e-8;
  double lambda_theta = 0.1;
  double learning_rate = 1e-4;
  std::optional<double> init_learning_rate; // defaults to learning_rate
  std::size_t n_train = 30000;
  std::size_t n_test = 200;
  std::optional<std::size_t> top_m = 500; // empty means auto
  int steps = 100;
  int long_steps = 500;
  double beta1 = 1.0;
  double beta2 = 1.0;
  double l2_theta = 1e-4;
  int p = 64;
  int init_steps = 1000;
  bool random_init = false;
  std::size_t meta_batch = 12;
  OptimizerMode optimizer = OptimizerMode::adam;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "out";
  bool record_timing = false;
  bool trace_eval = true;
  std::size_t bench_tasks = 5;
  bool write_checkpoints = true;
};

/// M for N training tasks when the config says "auto": the reference 500 of
/// 30000, scaled to N, at least 5.
inline std::size_t auto_top_m(std::size_t n_train) {
  return std::max<std::size_t>(5, static_cast<std::size_t>(std::llround(500.0 * static_cast<double>(n_train) / 30000.0)));
}

inline std::size_t resolved_top_m(const ExperimentConfig& c) { return c.top_m ? *c.top_m : auto_top_m(c.n_train); }

inline double resolved_init_lr(const ExperimentConfig& c) {
  return c.init_learning_rate ? *c.init_learning_rate : c.learning_rate;
}

inline void validate(const ExperimentConfig& c) {
  if (c.experiment.empty()) throw ConfigInvalid("experiment", "must not be empty");
  if (c.n_train < 1) throw ConfigInvalid("n_train", "must be >= 1");
  if (c.n_test < 1) throw ConfigInvalid("n_test", "must be >= 1");
  if (c.top_m && *c.top_m < 1) throw ConfigInvalid("top_m", "must be >= 1 or \"auto\"");
  if (c.steps < 0) throw ConfigInvalid("steps", "must be >= 0");
  if (c.long_steps < 0) throw ConfigInvalid("long_steps", "must be >= 0");
  if (!(c.lambda > 0.0) || !std::isfinite(c.lambda)) throw ConfigInvalid("lambda", "must be > 0");
  if (!(c.lambda_theta > 0.0) || !std::isfinite(c.lambda_theta)) throw ConfigInvalid("lambda_theta", "must be > 0");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) throw ConfigInvalid("learning_rate", "must be > 0");
  if (c.init_learning_rate && !(*c.init_learning_rate > 0.0))
    throw ConfigInvalid("init_learning_rate", "must be > 0");
  if (!(c.beta1 >= 0.0)) throw ConfigInvalid("beta1", "must be >= 0");
  if (!(c.beta2 >= 0.0)) throw ConfigInvalid("beta2", "must be >= 0");
  if (!(c.l2_theta >= 0.0)) throw ConfigInvalid("l2_theta", "must be >= 0");
  if (c.p < 1) throw ConfigInvalid("p", "must be >= 1");
  if (c.init_steps < 0) throw ConfigInvalid("init_steps", "must be >= 0");
  if (c.meta_batch < 1) throw ConfigInvalid("meta_batch", "must be >= 1");
  if (c.seeds.empty()) throw ConfigInvalid("seeds", "must list at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    throw ConfigInvalid("seeds", "seeds must be distinct");
  if (c.bench_tasks < 5) throw ConfigInvalid("bench_tasks", "must be >= 5");
  validate(c.kernel);
  if (c.source.kind == SourceKind::synthetic) {
    GeneratorConfig g = c.source.generator;
    g.dim = c.p;
    validate(g);
  } else {
    if (c.source.train_path.empty()) throw ConfigInvalid("source.train", "path required for embedding sources");
    if (c.source.test_path.empty()) throw ConfigInvalid("source.test", "path required for embedding sources");
    if (c.source.ways < 2) throw ConfigInvalid("source.ways", "must be >= 2");
    if (c.source.shots < 1) throw ConfigInvalid("source.shots", "must be >= 1");
    if (c.source.query_per_class < 1) throw ConfigInvalid("source.query_per_class", "must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

class JsonReader {
public:
  JsonReader(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigInvalid(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  std::string field(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const Json& raw(const std::string& key) const {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const Json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigInvalid(field(key), "expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigInvalid(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
            throw ConfigInvalid(field(key), "must be >= 0");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigInvalid(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigInvalid(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigInvalid(field(key), e.what());
    }
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigInvalid(field(it.key()), "unknown field");
  }

private:
  const Json& j_;
  std::string prefix_;
  mutable std::set<std::string> seen_;
};

inline void read_generator(const JsonReader& r, GeneratorConfig& g) {
  r.get("n_modes", g.n_modes);
  r.get("ways", g.ways);
  r.get("shots", g.shots);
  r.get("query_per_class", g.query_per_class);
  r.get("cluster_spread", g.cluster_spread);
  r.get("signal_dims", g.signal_dims);
  r.get("nuisance_dims", g.nuisance_dims);
  r.get("nuisance_spread", g.nuisance_spread);
  r.get("mode_offset", g.mode_offset);
  r.get("prototype_scale", g.prototype_scale);
  r.get("class_jitter", g.class_jitter);
  r.get("classes_per_slot", g.classes_per_slot);
  if (r.has("mode_permutations")) {
    const Json& v = r.raw("mode_permutations");
    try {
      g.mode_permutations = v.get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigInvalid(r.field("mode_permutations"), "expected a list of integer lists");
    }
  }
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
  ExperimentConfig c;
  detail::JsonReader r(j, "");
  r.get("experiment", c.experiment);

  if (r.has("source")) {
    detail::JsonReader s(r.raw("source"), "source");
    std::string type = "synthetic";
    s.get("type", type);
    if (type == "synthetic") {
      c.source.kind = SourceKind::synthetic;
      detail::read_generator(s, c.source.generator);
    } else if (type == "embeddings") {
      c.source.kind = SourceKind::embeddings;
      s.get("train", c.source.train_path);
      s.get("test", c.source.test_path);
      s.get("ways", c.source.ways);
      s.get("shots", c.source.shots);
      s.get("query_per_class", c.source.query_per_class);
    } else {
      throw ConfigInvalid("source.type", "expected \"synthetic\" or \"embeddings\"");
    }
    s.reject_unknown();
  }

  if (r.has("kernel")) {
    detail::JsonReader k(r.raw("kernel"), "kernel");
    std::string family = to_string(c.kernel.family);
    k.get("family", family);
    c.kernel.family = parse_kernel_family(family);
    if (k.has("sigma")) {
      const Json& v = k.raw("sigma");
      if (v.is_string() && v.get<std::string>() == "median") {
        c.kernel.median_bandwidth = true;
      } else if (v.is_number()) {
        c.kernel.sigma = v.get<double>();
        c.kernel.median_bandwidth = false;
      } else {
        throw ConfigInvalid("kernel.sigma", "expected a number or \"median\"");
      }
    }
    k.get("c", c.kernel.c);
    std::string fm = "identity";
    k.get("feature_map", fm);
    if (fm == "identity") c.kernel.feature_map = FeatureMapKind::identity;
    else if (fm == "random_projection") c.kernel.feature_map = FeatureMapKind::random_projection;
    else throw ConfigInvalid("kernel.feature_map", "expected \"identity\" or \"random_projection\"");
    k.get("projection_dim", c.kernel.projection_dim);
    k.reject_unknown();
  }

  r.get("lambda", c.lambda);
  r.get("lambda_theta", c.lambda_theta);
  r.get("learning_rate", c.learning_rate);
  if (r.has("init_learning_rate")) {
    double v = 0.0;
    r.get("init_learning_rate", v);
    c.init_learning_rate = v;
  }
  r.get("n_train", c.n_train);
  r.get("n_test", c.n_test);
  if (r.has("top_m")) {
    const Json& v = r.raw("top_m");
    if (v.is_string() && v.get<std::string>() == "auto") c.top_m.reset();
    else if (v.is_number_integer() && v.get<std::int64_t>() >= 1) c.top_m = v.get<std::size_t>();
    else throw ConfigInvalid("top_m", "expected a positive integer or \"auto\"");
  }
  r.get("steps", c.steps);
  r.get("long_steps", c.long_steps);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("l2_theta", c.l2_theta);
  r.get("p", c.p);
  r.get("init_steps", c.init_steps);
  r.get("random_init", c.random_init);
  r.get("meta_batch", c.meta_batch);
  if (r.has("optimizer")) {
    const Json& v = r.raw("optimizer");
    if (!v.is_string()) throw ConfigInvalid("optimizer", "expected \"adam\" or \"sgd\"");
    c.optimizer = parse_optimizer_mode(v.get<std::string>());
  }
  if (r.has("seeds")) {
    const Json& v = r.raw("seeds");
    try {
      c.seeds = v.get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigInvalid("seeds", "expected a list of non-negative integers");
    }
  }
  r.get("output_dir", c.output_dir);
  r.get("record_timing", c.record_timing);
  r.get("trace_eval", c.trace_eval);
  r.get("bench_tasks", c.bench_tasks);
  r.get("write_checkpoints", c.write_checkpoints);
  r.reject_unknown();

  if (c.kernel.feature_map == FeatureMapKind::random_projection) c.kernel.projection_seed = 0x9e3779b9u;
  validate(c);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigInvalid("<file>", "cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigInvalid("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

/// Fully resolved config as canonical JSON (fixed key order, every field).
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["experiment"] = c.experiment;
  Json s;
  if (c.source.kind == SourceKind::synthetic) {
    const auto& g = c.source.generator;
    s["type"] = "synthetic";
    s["n_modes"] = g.n_modes;
    s["ways"] = g.ways;
    s["shots"] = g.shots;
    s["query_per_class"] = g.query_per_class;
    s["cluster_spread"] = g.cluster_spread;
    s["signal_dims"] = g.signal_dims;
    s["nuisance_dims"] = g.nuisance_dims;
    s["nuisance_spread"] = g.nuisance_spread;
    s["mode_offset"] = g.mode_offset;
    s["prototype_scale"] = g.prototype_scale;
    s["class_jitter"] = g.class_jitter;
    s["classes_per_slot"] = g.classes_per_slot;
    s["mode_permutations"] = g.mode_permutations;
  } else {
    s["type"] = "embeddings";
    s["train"] = c.source.train_path;
    s["test"] = c.source.test_path;
    s["ways"] = c.source.ways;
    s["shots"] = c.source.shots;
    s["query_per_class"] = c.source.query_per_class;
  }
  j["source"] = s;
  Json k;
  k["family"] = to_string(c.kernel.family);
  if (c.kernel.median_bandwidth) k["sigma"] = "median";
  else k["sigma"] = c.kernel.sigma;
  k["c"] = c.kernel.c;
  k["feature_map"] = c.kernel.feature_map == FeatureMapKind::identity ? "identity" : "random_projection";
  k["projection_dim"] = c.kernel.projection_dim;
  j["kernel"] = k;
  j["lambda"] = c.lambda;
  j["lambda_theta"] = c.lambda_theta;
  j["learning_rate"] = c.learning_rate;
  j["init_learning_rate"] = resolved_init_lr(c);
  j["n_train"] = c.n_train;
  j["n_test"] = c.n_test;
  j["top_m"] = resolved_top_m(c);
  j["steps"] = c.steps;
  j["long_steps"] = c.long_steps;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["l2_theta"] = c.l2_theta;
  j["p"] = c.p;
  j["init_steps"] = c.init_steps;
  j["random_init"] = c.random_init;
  j["meta_batch"] = c.meta_batch;
  j["optimizer"] = to_string(c.optimizer);
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["record_timing"] = c.record_timing;
  j["trace_eval"] = c.trace_eval;
  j["bench_tasks"] = c.bench_tasks;
  j["write_checkpoints"] = c.write_checkpoints;
  return j;
}

inline std::string canonical_json(const ExperimentConfig& c) { return to_json(c).dump(); }

// ---------------------------------------------------------------------------
// Task sets and system construction

struct SeedData {
  std::shared_ptr<const MetaSet> train;
  MetaSet test;
};

namespace detail {

/// Embeddings wider than p are mapped to p coordinates with a fixed
/// orthonormal projection; narrower ones are rejected.
inline EmbeddingFile fit_width(EmbeddingFile file, int p, const std::string& field) {
  if (static_cast<int>(file.dim) == p) return file;
  if (static_cast<int>(file.dim) < p)
    throw ConfigInvalid(field, "embedding dim " + std::to_string(file.dim) + " is smaller than p=" + std::to_string(p));
  const Matrix proj = make_projection(p, file.dim, 0x5eedu);
  for (auto& cls : file.classes) cls.examples = cls.examples * proj.transpose();
  file.dim = static_cast<std::uint32_t>(p);
  return file;
}

} // namespace detail

inline GeneratorConfig generator_for(const ExperimentConfig& c, std::uint64_t seed) {
  GeneratorConfig g = c.source.generator;
  g.dim = c.p;
  g.seed = seed;
  return g;
}

inline SeedData make_seed_data(const ExperimentConfig& c, std::uint64_t seed) {
  SeedData d;
  if (c.source.kind == SourceKind::synthetic) {
    const auto g = generator_for(c, seed);
    d.train = std::make_shared<const MetaSet>(sample_multimodal_tasks(g, c.n_train, Split::train));
    d.test = sample_multimodal_tasks(g, c.n_test, Split::test);
    return d;
  }
  const auto train_file = detail::fit_width(read_embedding_file(c.source.train_path), c.p, "source.train");
  const auto test_file = detail::fit_width(read_embedding_file(c.source.test_path), c.p, "source.test");
  std::set<std::uint32_t> train_ids;
  for (const auto& cls : train_file.classes) train_ids.insert(cls.class_id);
  for (const auto& cls : test_file.classes)
    if (train_ids.count(cls.class_id))
      throw ConfigInvalid("source.test", "class " + std::to_string(cls.class_id) + " also appears in source.train");
  EpisodeSpec spec{c.source.ways, c.source.shots, c.source.query_per_class, c.n_train, seed};
  d.train = std::make_shared<const MetaSet>(episodes_from_embeddings(train_file, spec, Split::train));
  spec.n_tasks = c.n_test;
  d.test = episodes_from_embeddings(test_file, spec, Split::test);
  return d;
}

inline DriverConfig driver_config(const ExperimentConfig& c, std::uint64_t seed) {
  DriverConfig d;
  d.kernel = c.kernel;
  d.lambda = c.lambda;
  d.lambda_theta = c.lambda_theta;
  d.l2_theta = c.l2_theta;
  d.learning_rate = c.learning_rate;
  d.init_learning_rate = resolved_init_lr(c);
  d.init_steps = c.init_steps;
  d.random_init = c.random_init;
  d.meta_batch = c.meta_batch;
  d.optimizer = c.optimizer;
  d.seed = seed;
  return d;
}

inline AdaptOptions adapt_options(const ExperimentConfig& c) {
  AdaptOptions o;
  o.steps = c.steps;
  o.top_m = resolved_top_m(c);
  o.beta1 = c.beta1;
  o.beta2 = c.beta2;
  o.trace_eval = c.trace_eval;
  return o;
}

// ---------------------------------------------------------------------------
// Runs and output files

struct VariantSpec {
  std::string label;
  ExperimentConfig config;
};

struct SeedResult {
  std::string variant;
  std::uint64_t seed = 0;
  EvaluationSummary summary;
  double wall_seconds = 0.0;
};

struct RunReport {
  std::string experiment;
  std::vector<SeedResult> rows; // ordered by (variant, seed)
  bool record_timing = false;
};

inline std::string format_fixed(double v, int precision = 4) {
  if (!std::isfinite(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

/// Runs every variant for every seed. Each (variant, seed) pair meta-trains
/// its own system; checkpoints are written when a directory is given.
inline RunReport run_variants(const std::string& experiment, const std::vector<VariantSpec>& variants,
                              const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                              unsigned threads = worker_count()) {
  RunReport report;
  report.experiment = experiment;
  report.record_timing = !variants.empty() && variants.front().config.record_timing;
  for (const auto& v : variants) {
    for (auto seed : v.config.seeds) {
      const auto start = std::chrono::steady_clock::now();
      const SeedData data = make_seed_data(v.config, seed);
      const TrainedSystem sys = meta_train(data.train, driver_config(v.config, seed));
      if (checkpoint_dir && v.config.write_checkpoints) {
        std::filesystem::create_directories(*checkpoint_dir);
        auto name = "checkpoint_" + v.label + "_seed" + std::to_string(seed) + ".bin";
        for (auto& ch : name)
          if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '.' && ch != '-') ch = '_';
        save_checkpoint((*checkpoint_dir / name).string(), sys, canonical_json(v.config));
      }
      SeedResult r;
      r.variant = v.label;
      r.seed = seed;
      r.summary = evaluate(sys, data.test, adapt_options(v.config), threads);
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      report.rows.push_back(std::move(r));
    }
  }
  return report;
}

inline constexpr const char* kResultsHeader = "experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s";
inline constexpr const char* kTracesHeader = "variant,seed,task,step,objective_loss,query_acc_pct";
inline constexpr const char* kCurveHeader = "variant,step,mean_acc_pct,std_acc_pct,n_tasks";

/// Variants in first-appearance order.
inline std::vector<std::string> variant_labels(const RunReport& r) {
  std::vector<std::string> out;
  for (const auto& row : r.rows)
    if (std::find(out.begin(), out.end(), row.variant) == out.end()) out.push_back(row.variant);
  return out;
}

/// One row per (variant, seed) and an aggregate row per variant (seed
/// "all") holding the population mean and std of the per-seed means.
inline std::string results_csv(const RunReport& r) {
  std::ostringstream os;
  os << kResultsHeader << '\n';
  for (const auto& label : variant_labels(r)) {
    std::vector<double> means, sps, wall;
    for (const auto& row : r.rows) {
      if (row.variant != label) continue;
      means.push_back(100.0 * row.summary.mean_final);
      sps.push_back(row.summary.steps_per_sec);
      wall.push_back(row.wall_seconds);
      os << r.experiment << ',' << label << ',' << row.seed << ',' << format_fixed(100.0 * row.summary.mean_final)
         << ',' << format_fixed(100.0 * row.summary.std_final) << ','
         << (r.record_timing ? format_fixed(row.summary.steps_per_sec, 2) : "n/a") << ','
         << (r.record_timing ? format_fixed(row.wall_seconds, 3) : "n/a") << '\n';
    }
    const auto [m, s] = mean_std(means);
    os << r.experiment << ',' << label << ",all," << format_fixed(m) << ',' << format_fixed(s) << ','
       << (r.record_timing ? format_fixed(mean_std(sps).first, 2) : "n/a") << ','
       << (r.record_timing ? format_fixed(mean_std(wall).first, 3) : "n/a") << '\n';
  }
  return os.str();
}

inline std::string traces_csv(const RunReport& r) {
  std::ostringstream os;
  os << kTracesHeader << '\n';
  for (const auto& row : r.rows)
    for (std::size_t t = 0; t < row.summary.traces.size(); ++t)
      for (const auto& rec : row.summary.traces[t].records)
        os << row.variant << ',' << row.seed << ',' << t << ',' << rec.step << ',' << format_fixed(rec.objective, 8)
           << ',' << (rec.accuracy ? format_fixed(100.0 * *rec.accuracy) : "n/a") << '\n';
  return os.str();
}

/// Mean and std of query accuracy per step over all tasks of all seeds.
inline std::string curve_csv(const RunReport& r) {
  std::ostringstream os;
  os << kCurveHeader << '\n';
  for (const auto& label : variant_labels(r)) {
    std::vector<std::vector<double>> per_step;
    for (const auto& row : r.rows) {
      if (row.variant != label) continue;
      for (const auto& tr : row.summary.traces)
        for (const auto& rec : tr.records) {
          if (!rec.accuracy) continue;
          if (per_step.size() <= static_cast<std::size_t>(rec.step)) per_step.resize(static_cast<std::size_t>(rec.step) + 1);
          per_step[static_cast<std::size_t>(rec.step)].push_back(100.0 * *rec.accuracy);
        }
    }
    for (std::size_t s = 0; s < per_step.size(); ++s) {
      const auto [m, sd] = mean_std(per_step[s]);
      os << label << ',' << s << ',' << format_fixed(m) << ',' << format_fixed(sd) << ',' << per_step[s].size() << '\n';
    }
  }
  return os.str();
}

inline Json summary_json(const RunReport& r, const ExperimentConfig& base) {
  Json j;
  j["experiment"] = r.experiment;
  j["config"] = to_json(base);
  Json variants = Json::array();
  for (const auto& label : variant_labels(r)) {
    Json v;
    v["variant"] = label;
    Json seeds = Json::array();
    std::vector<double> finals, initials, retrieval;
    for (const auto& row : r.rows) {
      if (row.variant != label) continue;
      const auto& s = row.summary;
      Json sj;
      sj["seed"] = row.seed;
      sj["mean_acc_pct"] = 100.0 * s.mean_final;
      sj["std_acc_pct"] = 100.0 * s.std_final;
      sj["baseline_mean_acc_pct"] = 100.0 * s.mean_initial;
      sj["baseline_std_acc_pct"] = 100.0 * s.std_initial;
      if (s.mode_retrieval) {
        sj["mode_retrieval"] = *s.mode_retrieval;
        retrieval.push_back(*s.mode_retrieval);
      }
      finals.push_back(100.0 * s.mean_final);
      initials.push_back(100.0 * s.mean_initial);
      seeds.push_back(sj);
    }
    v["seeds"] = seeds;
    v["mean_acc_pct"] = mean_std(finals).first;
    v["std_acc_pct"] = mean_std(finals).second;
    v["baseline_mean_acc_pct"] = mean_std(initials).first;
    v["baseline_std_acc_pct"] = mean_std(initials).second;
    if (!retrieval.empty()) v["mode_retrieval"] = mean_std(retrieval).first;
    variants.push_back(v);
  }
  j["variants"] = variants;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

inline void write_report(const RunReport& r, const ExperimentConfig& base, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "results.csv", results_csv(r));
  write_text(dir / "traces.csv", traces_csv(r));
  write_text(dir / "curve.csv", curve_csv(r));
  write_text(dir / "summary.json", summary_json(r, base).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

inline RunReport cmd_run(const ExperimentConfig& c, unsigned threads = worker_count()) {
  const std::filesystem::path dir = c.output_dir;
  auto report = run_variants(c.experiment, {{"tasml", c}}, dir, threads);
  write_report(report, c, dir);
  return report;
}

enum class Ablation { kernel, topm, beta, steps, init };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "kernel") return Ablation::kernel;
  if (s == "topm") return Ablation::topm;
  if (s == "beta") return Ablation::beta;
  if (s == "steps") return Ablation::steps;
  if (s == "init") return Ablation::init;
  throw ConfigInvalid("which", "expected kernel, topm, beta, steps or init");
}

inline const char* to_string(Ablation a) {
  switch (a) {
  case Ablation::kernel: return "kernel";
  case Ablation::topm: return "topm";
  case Ablation::beta: return "beta";
  case Ablation::steps: return "steps";
  case Ablation::init: return "init";
  }
  return "?";
}

/// The reference M grid {100, 500, 1000, 10000, 30000} of 30000 tasks, scaled to
/// n_train, floored at 3, capped at n_train and deduplicated.
inline std::vector<std::size_t> topm_grid(std::size_t n_train) {
  std::vector<std::size_t> out;
  for (double m : {100.0, 500.0, 1000.0, 10000.0, 30000.0}) {
    auto v = static_cast<std::size_t>(std::llround(m * static_cast<double>(n_train) / 30000.0));
    v = std::min(std::max<std::size_t>(v, 3), n_train);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

inline std::string format_beta(double b) {
  std::ostringstream os;
  os << b;
  return os.str();
}

inline std::vector<VariantSpec> ablation_variants(const ExperimentConfig& c, Ablation which) {
  std::vector<VariantSpec> v;
  switch (which) {
  case Ablation::kernel:
    for (auto f : {KernelFamily::gaussian, KernelFamily::linear, KernelFamily::laplace}) {
      auto cc = c;
      cc.kernel.family = f;
      v.push_back({to_string(f), cc});
    }
    break;
  case Ablation::topm:
    for (auto m : topm_grid(c.n_train)) {
      auto cc = c;
      cc.top_m = m;
      v.push_back({"M=" + std::to_string(m), cc});
    }
    break;
  case Ablation::beta:
    for (auto [b1, b2] : {std::pair{0.0, 1.0}, {1.0, 0.0}, {1.0, 1.0}, {1.0, 2.0}}) {
      auto cc = c;
      cc.beta1 = b1;
      cc.beta2 = b2;
      v.push_back({"beta1=" + format_beta(b1) + " beta2=" + format_beta(b2), cc});
    }
    break;
  case Ablation::steps: {
    auto cc = c;
    cc.steps = c.long_steps;
    cc.trace_eval = true;
    v.push_back({"J=" + std::to_string(c.long_steps), cc});
    break;
  }
  case Ablation::init: {
    auto with = c;
    with.random_init = false;
    auto without = c;
    without.random_init = true;
    v.push_back({"with-init", with});
    v.push_back({"random-init", without});
    break;
  }
  }
  return v;
}

inline RunReport cmd_ablate(const ExperimentConfig& c, Ablation which, unsigned threads = worker_count()) {
  const std::filesystem::path dir = std::filesystem::path(c.output_dir) / (std::string("ablate_") + to_string(which));
  auto report = run_variants(c.experiment + "-" + to_string(which), ablation_variants(c, which), std::nullopt, threads);
  write_report(report, c, dir);
  return report;
}

struct BenchReport {
  std::vector<double> steps_per_sec; // per task; empty when J = 0
  std::vector<double> scoring_seconds;
  int steps = 0;
  std::size_t n_train = 0;
  int p = 0;
};

/// Times the adaptation loop on bench_tasks test tasks of the first seed,
/// one task at a time and with trace evaluation off.
inline BenchReport cmd_bench(const ExperimentConfig& c) {
  const auto seed = c.seeds.front();
  const SeedData data = make_seed_data(c, seed);
  const TrainedSystem sys = meta_train(data.train, driver_config(c, seed));
  AdaptOptions o = adapt_options(c);
  o.trace_eval = false;
  BenchReport b;
  b.steps = c.steps;
  b.n_train = c.n_train;
  b.p = c.p;
  const std::size_t n = std::min(c.bench_tasks, data.test.size());
  for (std::size_t i = 0; i < n; ++i) {
    o.task_key = i;
    const auto tr = adapt(sys, data.test.tasks[i], o);
    b.scoring_seconds.push_back(tr.scoring_seconds);
    if (c.steps > 0 && tr.loop_seconds > 0.0) b.steps_per_sec.push_back(c.steps / tr.loop_seconds);
  }
  return b;
}

inline std::string bench_text(const BenchReport& b) {
  std::ostringstream os;
  const auto [sm, ss] = mean_std(b.scoring_seconds);
  os << "tasks: " << b.scoring_seconds.size() << "  N: " << b.n_train << "  p: " << b.p << "  J: " << b.steps << '\n';
  if (b.steps_per_sec.empty()) {
    os << "steps/sec: n/a\n";
  } else {
    const auto [m, s] = mean_std(b.steps_per_sec);
    os << "steps/sec: " << format_fixed(m, 2) << " +- " << format_fixed(s, 2) << '\n';
  }
  os << "scoring latency (s): " << format_fixed(sm, 6) << " +- " << format_fixed(ss, 6) << '\n';
  return os.str();
}

/// Writes the synthetic generator of the first seed as an embedding file.
inline EmbeddingFile cmd_gen_tasks(const ExperimentConfig& c, const std::filesystem::path& out, Split split) {
  if (c.source.kind != SourceKind::synthetic) throw ConfigInvalid("source.type", "gen-tasks needs a synthetic source");
  const auto g = generator_for(c, c.seeds.front());
  auto file = synthesize_embedding_file(g, split, g.shots + g.query_per_class);
  write_embedding_file(out, file);
  return file;
}

} // namespace tasml
