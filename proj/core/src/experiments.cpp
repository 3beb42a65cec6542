// SPDX-License-Identifier: Apache-2.0
#include "curvloc/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "curvloc/binary_io.hpp"
#include "curvloc/gaussian.hpp"
#include "curvloc/oracle_models.hpp"
#include "curvloc/random.hpp"

namespace curvloc::experiments {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using curvature::MetricKind;
using diffusion::ConfigError;

namespace {

// ---- JSON helpers --------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; });
    if (!known) throw ConfigError("unknown configuration key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_u64(const json& j, const char* key, std::uint64_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0 && !v.is_number_unsigned())) {
    throw ConfigError(where + "." + key + " must be a nonnegative integer");
  }
  out = v.get<std::uint64_t>();
}

void read_vector(const json& j, const char* key, Vector& out, const std::string& where) {
  std::vector<double> v;
  if (!j.contains(key)) return;
  read(j, key, v, where);
  out = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json mat_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- misc helpers --------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first failing
/// index (lowest i) determines which exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto pool = static_cast<std::size_t>(std::max(1, workers));
  if (pool == 1 || n <= 1) {
    run();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < std::min(pool, n); ++w) threads.emplace_back(run);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

model::MlpConfig model_config(const RunConfig& config, const data::Dataset& ds) {
  model::MlpConfig m;
  m.dim = ds.dim();
  m.num_conditions = ds.num_conditions();
  m.hidden = config.model.hidden;
  m.time_embed_dim = config.model.time_embed_dim;
  m.cond_embed_dim = config.model.cond_embed_dim;
  m.validate();
  return m;
}

fs::path dataset_path(const RunConfig& config) { return config.manifest_dir() / "dataset.clds"; }

data::Dataset load_run_dataset(const RunConfig& config) {
  const fs::path p = dataset_path(config);
  if (!fs::exists(p)) throw io::MissingInputError("dataset container " + p.string() + " not found; run 'train' first");
  return data::load_dataset(p);
}

model::Checkpoint load_step(const RunConfig& config, std::uint64_t step) {
  const fs::path p = checkpoint_path(config, step);
  if (!fs::exists(p)) throw io::MissingInputError("checkpoint " + p.string() + " not found");
  return model::load_checkpoint(p);
}

void require_schedule(const model::Checkpoint& ckpt, const diffusion::NoiseSchedule& schedule) {
  if (ckpt.schedule_fingerprint != schedule.fingerprint()) {
    throw ConfigError("checkpoint at step " + std::to_string(ckpt.step) +
                      " was trained under a different noise schedule than the configuration");
  }
}

diffusion::SamplerConfig sampler_config(const RunConfig& config, const diffusion::NoiseSchedule& schedule) {
  diffusion::SamplerConfig s;
  s.inference_steps = config.sampler.inference_steps;
  s.cfg_scale = config.sampler.cfg_scale;
  s.stop_timestep = config.sampler.stop_timestep;
  if (config.sampler.stop_step_index) {
    s.stop_timestep = diffusion::timestep_for_step_index(schedule.steps(), s.inference_steps,
                                                         *config.sampler.stop_step_index);
  }
  s.seed = config.master_seed;
  s.validate(schedule);
  return s;
}

HeatmapRender render_options(const RunConfig& config, MetricKind kind) {
  HeatmapRender r;
  r.percentile = config.render.percentile;
  r.clip_negative = kind == MetricKind::DhUncond || kind == MetricKind::DhBaseline;
  r.upscale = config.render.upscale;
  return r;
}

std::string sample_stem(int condition, int seed_index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%04d_s%02d", condition, seed_index);
  return buf;
}

/// Renders maps with per-map or per-metric shared scaling.
int render_all(const RunConfig& config, const std::vector<LocalizeEntry>& entries,
               const std::vector<curvature::SpatialMap>& maps) {
  const bool shared = config.render.scaling == "shared_per_column";
  std::map<MetricKind, RenderRange> ranges;
  if (shared) {
    std::map<MetricKind, std::vector<const curvature::SpatialMap*>> by_metric;
    for (std::size_t i = 0; i < entries.size(); ++i) by_metric[entries[i].metric].push_back(&maps[i]);
    for (auto& [kind, group] : by_metric) ranges[kind] = render_range(group, render_options(config, kind));
  }
  int degenerate = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto opts = render_options(config, entries[i].metric);
    const RenderRange* range = shared ? &ranges.at(entries[i].metric) : nullptr;
    if (!render_heatmap(maps[i], opts, config.run_dir() / entries[i].render_file, range)) ++degenerate;
  }
  return degenerate;
}

double percentile_of(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

}  // namespace

// ---- configuration -------------------------------------------------------

diffusion::NoiseSchedule ScheduleSection::build() const { return diffusion::make_linear_schedule(T, beta_start, beta_end); }

data::Dataset DatasetSection::generate() const {
  if (kind == "duplicated_outlier") return data::gen_duplicated_outlier(outlier);
  if (kind == "toy_memorization") return data::gen_toy_memorization(toy);
  if (kind == "linear_gaussian") {
    if (A.size() == 0) throw ConfigError("linear_gaussian dataset needs a matrix A");
    return data::gen_linear_gaussian(A, sigma, n, seed);
  }
  throw ConfigError("unknown dataset kind '" + kind + "'");
}

int RunConfig::resolved_workers() const {
  if (workers > 0) return workers;
  return static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
}

RunConfig RunConfig::parse(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  RunConfig c;
  check_keys(root, {"name", "output_dir", "master_seed", "workers", "schedule", "dataset", "model", "train",
                    "dynamics", "sampler", "localize", "evaluate", "render", "oracle"},
             "config");
  read(root, "name", c.name, "config");
  if (root.contains("output_dir")) {
    std::string dir;
    read(root, "output_dir", dir, "config");
    c.output_dir = dir;
  }
  read_u64(root, "master_seed", c.master_seed, "config");
  read(root, "workers", c.workers, "config");
  if (c.name.empty() || c.name.find('/') != std::string::npos) throw ConfigError("config.name must be a plain name");

  c.dataset.outlier.seed = c.master_seed;
  c.dataset.toy.seed = c.master_seed;
  c.dataset.seed = c.master_seed;

  if (root.contains("schedule")) {
    const auto& j = root["schedule"];
    check_keys(j, {"T", "beta_start", "beta_end"}, "schedule");
    read(j, "T", c.schedule.T, "schedule");
    read(j, "beta_start", c.schedule.beta_start, "schedule");
    read(j, "beta_end", c.schedule.beta_end, "schedule");
  }
  if (root.contains("dataset")) {
    const auto& j = root["dataset"];
    if (!j.is_object()) throw ConfigError("dataset must be an object");
    read(j, "kind", c.dataset.kind, "dataset");
    const std::string w = "dataset";
    if (c.dataset.kind == "duplicated_outlier") {
      check_keys(j, {"kind", "N", "rho", "A_row", "sigma_data", "x_dup", "sigma_dup", "seed"}, w);
      auto& s = c.dataset.outlier;
      read(j, "N", s.N, w);
      read(j, "rho", s.rho, w);
      read_vector(j, "A_row", s.A_row, w);
      read(j, "sigma_data", s.sigma_data, w);
      read_vector(j, "x_dup", s.x_dup, w);
      read(j, "sigma_dup", s.sigma_dup, w);
      read_u64(j, "seed", s.seed, w);
    } else if (c.dataset.kind == "toy_memorization") {
      check_keys(j, {"kind", "channels", "height", "width", "n_template", "n_global", "n_nonmem",
                     "samples_per_condition", "template_std", "template_scale", "free_rank", "free_factor_scale",
                     "free_noise_std", "condition_mean_std", "background_rows_min", "background_rows_max", "background_std",
                     "template_row_min", "rect_min", "rect_max", "seed"},
                 w);
      auto& s = c.dataset.toy;
      read(j, "channels", s.channels, w);
      read(j, "height", s.height, w);
      read(j, "width", s.width, w);
      read(j, "n_template", s.n_template, w);
      read(j, "n_global", s.n_global, w);
      read(j, "n_nonmem", s.n_nonmem, w);
      read(j, "samples_per_condition", s.samples_per_condition, w);
      read(j, "template_std", s.template_std, w);
      read(j, "template_scale", s.template_scale, w);
      read(j, "free_rank", s.free_rank, w);
      read(j, "free_factor_scale", s.free_factor_scale, w);
      read(j, "free_noise_std", s.free_noise_std, w);
      read(j, "condition_mean_std", s.condition_mean_std, w);
      read(j, "background_rows_min", s.background_rows_min, w);
      read(j, "background_rows_max", s.background_rows_max, w);
      read(j, "background_std", s.background_std, w);
      read(j, "template_row_min", s.template_row_min, w);
      read(j, "rect_min", s.rect_min, w);
      read(j, "rect_max", s.rect_max, w);
      read_u64(j, "seed", s.seed, w);
    } else if (c.dataset.kind == "linear_gaussian") {
      check_keys(j, {"kind", "A", "sigma", "n", "seed"}, w);
      std::vector<std::vector<double>> rows;
      read(j, "A", rows, w);
      if (!rows.empty()) {
        c.dataset.A.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != rows[0].size()) throw ConfigError("dataset.A rows have unequal length");
          for (std::size_t k = 0; k < rows[r].size(); ++k) {
            c.dataset.A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
          }
        }
      }
      read(j, "sigma", c.dataset.sigma, w);
      read(j, "n", c.dataset.n, w);
      read_u64(j, "seed", c.dataset.seed, w);
    } else {
      throw ConfigError("unknown dataset kind '" + c.dataset.kind + "'");
    }
  }
  if (root.contains("model")) {
    const auto& j = root["model"];
    check_keys(j, {"hidden", "time_embed_dim", "cond_embed_dim"}, "model");
    read(j, "hidden", c.model.hidden, "model");
    read(j, "time_embed_dim", c.model.time_embed_dim, "model");
    read(j, "cond_embed_dim", c.model.cond_embed_dim, "model");
  }
  if (root.contains("train")) {
    const auto& j = root["train"];
    check_keys(j, {"total_steps", "checkpoint_steps", "batch_size", "learning_rate", "cond_dropout", "log_interval",
                   "resume_from", "lr_schedule", "final_lr_fraction"},
               "train");
    read_u64(j, "total_steps", c.train.total_steps, "train");
    read(j, "checkpoint_steps", c.train.checkpoint_steps, "train");
    read(j, "batch_size", c.train.batch_size, "train");
    read(j, "learning_rate", c.train.learning_rate, "train");
    read(j, "cond_dropout", c.train.cond_dropout, "train");
    read(j, "lr_schedule", c.train.lr_schedule, "train");
    read(j, "final_lr_fraction", c.train.final_lr_fraction, "train");
    if (c.train.lr_schedule != "constant" && c.train.lr_schedule != "cosine") {
      throw ConfigError("train.lr_schedule must be 'constant' or 'cosine'");
    }
    if (!(c.train.final_lr_fraction >= 0.0 && c.train.final_lr_fraction <= 1.0)) {
      throw ConfigError("train.final_lr_fraction must lie in [0, 1]");
    }
    read_u64(j, "log_interval", c.train.log_interval, "train");
    read(j, "resume_from", c.train.resume_from, "train");
  }
  if (root.contains("dynamics")) {
    const auto& j = root["dynamics"];
    check_keys(j, {"t_eval", "x_1d", "x_dup", "steps"}, "dynamics");
    read(j, "t_eval", c.dynamics.t_eval, "dynamics");
    read_vector(j, "x_1d", c.dynamics.x_1d, "dynamics");
    if (j.contains("x_dup")) {
      Vector v;
      read_vector(j, "x_dup", v, "dynamics");
      c.dynamics.x_dup = v;
    }
    read(j, "steps", c.dynamics.steps, "dynamics");
  }
  if (root.contains("sampler")) {
    const auto& j = root["sampler"];
    check_keys(j, {"inference_steps", "cfg_scale", "stop_timestep", "stop_step_index"}, "sampler");
    read(j, "inference_steps", c.sampler.inference_steps, "sampler");
    read(j, "cfg_scale", c.sampler.cfg_scale, "sampler");
    read(j, "stop_timestep", c.sampler.stop_timestep, "sampler");
    if (j.contains("stop_step_index")) {
      int k = 0;
      read(j, "stop_step_index", k, "sampler");
      c.sampler.stop_step_index = k;
    }
  }
  if (root.contains("localize")) {
    const auto& j = root["localize"];
    check_keys(j, {"metrics", "K", "seeds_per_condition", "theta_step", "baseline_step", "allow_same_baseline",
                   "conditions"},
               "localize");
    if (j.contains("metrics")) {
      std::vector<std::string> names;
      read(j, "metrics", names, "localize");
      c.localize.metrics.clear();
      for (const auto& n : names) {
        try {
          c.localize.metrics.push_back(curvature::parse_metric(n));
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("localize.metrics: ") + e.what());
        }
      }
    }
    read(j, "K", c.localize.K, "localize");
    read(j, "seeds_per_condition", c.localize.seeds_per_condition, "localize");
    read_u64(j, "theta_step", c.localize.theta_step, "localize");
    read_u64(j, "baseline_step", c.localize.baseline_step, "localize");
    read(j, "allow_same_baseline", c.localize.allow_same_baseline, "localize");
    read(j, "conditions", c.localize.conditions, "localize");
  }
  if (root.contains("evaluate")) {
    const auto& j = root["evaluate"];
    check_keys(j, {"mean_filter", "balance", "per_sample_best", "num_thresholds"}, "evaluate");
    read(j, "mean_filter", c.evaluate.mean_filter, "evaluate");
    read(j, "balance", c.evaluate.balance, "evaluate");
    read(j, "per_sample_best", c.evaluate.per_sample_best, "evaluate");
    read(j, "num_thresholds", c.evaluate.num_thresholds, "evaluate");
  }
  if (root.contains("render")) {
    const auto& j = root["render"];
    check_keys(j, {"percentile", "scaling", "upscale"}, "render");
    read(j, "percentile", c.render.percentile, "render");
    read(j, "scaling", c.render.scaling, "render");
    read(j, "upscale", c.render.upscale, "render");
  }
  if (root.contains("oracle")) {
    const auto& j = root["oracle"];
    check_keys(j, {"prop1_instances", "prop2_instances", "prop2_samples", "hutchinson_probes", "coupled_probes",
                   "inject_prop1_sign_error"},
               "oracle");
    read(j, "prop1_instances", c.oracle.prop1_instances, "oracle");
    read(j, "prop2_instances", c.oracle.prop2_instances, "oracle");
    read(j, "prop2_samples", c.oracle.prop2_samples, "oracle");
    read(j, "hutchinson_probes", c.oracle.hutchinson_probes, "oracle");
    read(j, "coupled_probes", c.oracle.coupled_probes, "oracle");
    read(j, "inject_prop1_sign_error", c.oracle.inject_prop1_sign_error, "oracle");
  }

  if (c.localize.K < 1) throw ConfigError("localize.K must be at least 1");
  if (c.localize.seeds_per_condition < 1) throw ConfigError("localize.seeds_per_condition must be at least 1");
  if (c.evaluate.mean_filter < 1 || c.evaluate.mean_filter % 2 == 0) {
    throw ConfigError("evaluate.mean_filter must be odd and positive");
  }
  if (!(c.render.percentile > 0.0 && c.render.percentile <= 100.0)) {
    throw ConfigError("render.percentile must lie in (0, 100]");
  }
  if (c.render.scaling != "per_map" && c.render.scaling != "shared_per_column") {
    throw ConfigError("render.scaling must be per_map or shared_per_column");
  }
  if (c.render.upscale < 1) throw ConfigError("render.upscale must be positive");
  if (c.dynamics.x_1d.size() != 2) throw ConfigError("dynamics.x_1d must have two entries");
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw io::MissingInputError("configuration file " + path.string() + " not found");
  const auto bytes = io::read_file_bytes(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

std::string RunConfig::to_json() const {
  json j;
  j["name"] = name;
  j["output_dir"] = output_dir.string();
  j["master_seed"] = master_seed;
  j["workers"] = workers;
  j["schedule"] = {{"T", schedule.T}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};
  json d;
  d["kind"] = dataset.kind;
  if (dataset.kind == "duplicated_outlier") {
    const auto& s = dataset.outlier;
    d["N"] = s.N;
    d["rho"] = s.rho;
    d["A_row"] = vec_json(s.A_row);
    d["sigma_data"] = s.sigma_data;
    d["x_dup"] = vec_json(s.x_dup);
    d["sigma_dup"] = s.sigma_dup;
    d["seed"] = s.seed;
  } else if (dataset.kind == "toy_memorization") {
    const auto& s = dataset.toy;
    d["channels"] = s.channels;
    d["height"] = s.height;
    d["width"] = s.width;
    d["n_template"] = s.n_template;
    d["n_global"] = s.n_global;
    d["n_nonmem"] = s.n_nonmem;
    d["samples_per_condition"] = s.samples_per_condition;
    d["template_std"] = s.template_std;
    d["template_scale"] = s.template_scale;
    d["free_rank"] = s.free_rank;
    d["free_factor_scale"] = s.free_factor_scale;
    d["free_noise_std"] = s.free_noise_std;
    d["condition_mean_std"] = s.condition_mean_std;
    d["background_rows_min"] = s.background_rows_min;
    d["background_rows_max"] = s.background_rows_max;
    d["background_std"] = s.background_std;
    d["template_row_min"] = s.template_row_min;
    d["rect_min"] = s.rect_min;
    d["rect_max"] = s.rect_max;
    d["seed"] = s.seed;
  } else {
    d["A"] = mat_json(dataset.A);
    d["sigma"] = dataset.sigma;
    d["n"] = dataset.n;
    d["seed"] = dataset.seed;
  }
  j["dataset"] = d;
  j["model"] = {{"hidden", model.hidden}, {"time_embed_dim", model.time_embed_dim}, {"cond_embed_dim", model.cond_embed_dim}};
  j["train"] = {{"total_steps", train.total_steps},     {"checkpoint_steps", train.checkpoint_steps},
                {"batch_size", train.batch_size},       {"learning_rate", train.learning_rate},
                {"cond_dropout", train.cond_dropout},   {"log_interval", train.log_interval},
                {"lr_schedule", train.lr_schedule},     {"final_lr_fraction", train.final_lr_fraction},
                {"resume_from", train.resume_from}};
  json dyn = {{"t_eval", dynamics.t_eval}, {"x_1d", vec_json(dynamics.x_1d)}, {"steps", dynamics.steps}};
  if (dynamics.x_dup) dyn["x_dup"] = vec_json(*dynamics.x_dup);
  j["dynamics"] = dyn;
  json smp = {{"inference_steps", sampler.inference_steps}, {"cfg_scale", sampler.cfg_scale},
              {"stop_timestep", sampler.stop_timestep}};
  if (sampler.stop_step_index) smp["stop_step_index"] = *sampler.stop_step_index;
  j["sampler"] = smp;
  std::vector<std::string> metrics;
  for (auto m : localize.metrics) metrics.emplace_back(curvature::metric_name(m));
  j["localize"] = {{"metrics", metrics},
                   {"K", localize.K},
                   {"seeds_per_condition", localize.seeds_per_condition},
                   {"theta_step", localize.theta_step},
                   {"baseline_step", localize.baseline_step},
                   {"allow_same_baseline", localize.allow_same_baseline},
                   {"conditions", localize.conditions}};
  j["evaluate"] = {{"mean_filter", evaluate.mean_filter},
                   {"balance", evaluate.balance},
                   {"per_sample_best", evaluate.per_sample_best},
                   {"num_thresholds", evaluate.num_thresholds}};
  j["render"] = {{"percentile", render.percentile}, {"scaling", render.scaling}, {"upscale", render.upscale}};
  j["oracle"] = {{"prop1_instances", oracle.prop1_instances},
                 {"prop2_instances", oracle.prop2_instances},
                 {"prop2_samples", oracle.prop2_samples},
                 {"hutchinson_probes", oracle.hutchinson_probes},
                 {"coupled_probes", oracle.coupled_probes},
                 {"inject_prop1_sign_error", oracle.inject_prop1_sign_error}};
  return j.dump(2) + "\n";
}

// ---- oracle --------------------------------------------------------------

bool OracleReport::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const OracleCheck& c) { return c.pass; });
}

OracleReport cmd_oracle(const RunConfig& config, std::ostream* log) {
  OracleReport report;
  const auto& oc = config.oracle;
  auto add = [&](OracleCheck c) {
    if (log != nullptr) {
      *log << (c.pass ? "PASS " : "FAIL ") << c.name << "  measured=" << fmt_g(c.measured)
           << "  tolerance=" << fmt_g(c.tolerance);
      if (!c.detail.empty()) *log << "  (" << c.detail << ")";
      *log << '\n';
    }
    report.checks.push_back(std::move(c));
  };

  // Curvature/covariance identity against direct Gaussian conditioning.
  {
    Rng rng = make_rng(config.master_seed, {0x0A1});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    int violations = 0;
    for (int i = 0; i < oc.prop1_instances; ++i) {
      const int d = 2 + static_cast<int>(rng() % 5);
      const int k = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(d));
      gaussian::LinearGaussianModel m{standard_normal(d, k, rng), 0.05 + 0.95 * u(rng)};
      const double a = 0.1 + 0.89 * u(rng);
      const double s = std::sqrt(1.0 - a * a);
      Matrix H = gaussian::gaussian_hessian(gaussian::diffuse(gaussian::density_of(m), a, s));
      if (oc.inject_prop1_sign_error) H = -H;
      const Matrix sigma0 = gaussian::marginal_cov(m);
      Matrix prec = gaussian::spd_inverse(sigma0);
      prec.diagonal().array() += a * a / (s * s);
      const Matrix target = gaussian::spd_inverse(prec);
      double err = 0.0;
      try {
        err = (gaussian::posterior_cov_prop1(H, a, s) - target).norm() / target.norm();
      } catch (const gaussian::PropositionViolation&) {
        err = std::numeric_limits<double>::infinity();
        ++violations;
      }
      worst = std::max(worst, err);
      if (log != nullptr) {
        *log << "  prop1 instance " << i << ": d=" << d << " k=" << k << " rel_err=" << fmt_g(err) << '\n';
      }
    }
    report.prop1_instances = oc.prop1_instances;
    add({"prop1_conditional_covariance", worst < 1e-9, worst, 1e-9,
         std::to_string(oc.prop1_instances) + " instances" +
             (violations > 0 ? ", " + std::to_string(violations) + " non-PSD results" : "")});
  }

  // Fisher identity by Monte Carlo.
  {
    Rng rng = make_rng(config.master_seed, {0x0A2});
    double worst = 0.0;
    for (int i = 0; i < oc.prop2_instances; ++i) {
      const int m = 1 + static_cast<int>(rng() % 4);
      const int d = 1 + static_cast<int>(rng() % 4);
      const Matrix B = standard_normal(m, d, rng);
      const Matrix L = standard_normal(m, m, rng);
      Matrix noise = L * L.transpose();
      noise.diagonal().array() += 0.1;
      const Vector x = standard_normal(d, rng);
      const auto fc = gaussian::fisher_identity_check(B, noise, x, oc.prop2_samples, derive_seed(config.master_seed, {0x0A2, static_cast<std::uint64_t>(i)}));
      for (Eigen::Index j = 0; j < d; ++j) {
        const double diff = std::abs(fc.mc_diag(j) - fc.analytic_diag(j));
        const double z = fc.mc_stderr(j) > 0.0 ? diff / fc.mc_stderr(j) : (diff == 0.0 ? 0.0 : INFINITY);
        worst = std::max(worst, z);
      }
    }
    add({"prop2_fisher_identity", worst <= 5.0, worst, 5.0,
         std::to_string(oc.prop2_instances) + " instances, " + std::to_string(oc.prop2_samples) +
             " samples, max deviation in standard errors"});
  }

  // Hutchinson: exact on diagonal matrices, unbiased on dense ones.
  {
    Rng rng = make_rng(config.master_seed, {0x0A3});
    const Vector diag = standard_normal(8, rng);
    const Matrix D = diag.asDiagonal();
    const Vector est = curvature::hutchinson_diag([&](const Vector& v) { Vector r = D * v; return r; }, 8,
                                                  {1, derive_seed(config.master_seed, {0x0A3, 1})});
    const bool exact = (est.array() == diag.array()).all();
    add({"hutchinson_diagonal_exact", exact, (est - diag).cwiseAbs().maxCoeff(), 0.0, "single probe, d=8"});

    const Matrix A = standard_normal(16, 16, rng);
    const Vector dense = curvature::hutchinson_diag([&](const Vector& v) { Vector r = A * v; return r; }, 16,
                                                    {oc.hutchinson_probes, derive_seed(config.master_seed, {0x0A3, 2})});
    double worst = 0.0;
    for (Eigen::Index i = 0; i < 16; ++i) {
      const double off = A.row(i).squaredNorm() - A(i, i) * A(i, i);
      const double se = std::sqrt(off / static_cast<double>(oc.hutchinson_probes));
      worst = std::max(worst, std::abs(dense(i) - A(i, i)) / se);
    }
    add({"hutchinson_dense_unbiased", worst <= 5.0, worst, 5.0,
         "16x16, K=" + std::to_string(oc.hutchinson_probes) + ", max deviation in standard errors"});
  }

  // Coupled curvature-difference estimator on a Gaussian conditional/marginal pair.
  {
    Rng rng = make_rng(config.master_seed, {0x0A4});
    const int d = 4;
    const auto sched = config.schedule.build();
    const auto marginal = gaussian::density_of({standard_normal(d, 2, rng), 0.3});
    gaussian::GaussianDensity cond{standard_normal(d, rng), gaussian::marginal_cov({standard_normal(d, 2, rng), 0.05})};
    const oracle::GaussianEpsModel om(marginal, {cond}, sched);
    const int t = 50;
    const Vector x = standard_normal(d, rng);
    const curvature::HutchinsonConfig hc{oc.coupled_probes, derive_seed(config.master_seed, {0x0A4, 1})};
    const auto map = curvature::dh_map(om, nullptr, x, t, 0, sched, hc);
    const Matrix M = gaussian::spd_inverse(om.diffused(t, 0).cov) - gaussian::spd_inverse(om.diffused(t, -1).cov);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double off = M.row(i).squaredNorm() - M(i, i) * M(i, i);
      const double se = std::sqrt(off / static_cast<double>(hc.K));
      worst = std::max(worst, std::abs(map.values(i) - M(i, i)) / se);
    }
    add({"coupled_estimator_mean", worst <= 5.0, worst, 5.0, "K=" + std::to_string(hc.K) + ", max deviation in standard errors"});
    const auto same = curvature::dh_map(om, &om, x, t, 0, sched, hc);
    const double zero = same.values.cwiseAbs().maxCoeff();
    add({"coupled_estimator_identical_models", zero == 0.0, zero, 0.0, "map must be exactly zero"});
  }

  // Four-pixel verbatim and concept constructions.
  {
    const auto kv = gaussian::coord_curvature(gaussian::verbatim_model(0.1));
    const double fixed_err = std::max(std::abs(kv(2) - 100.0), std::abs(kv(3) - 100.0));
    const bool free_ok = kv(0) < 1.0 && kv(1) < 1.0;
    add({"verbatim_fixed_coordinates", fixed_err < 1e-9 && free_ok, fixed_err, 1e-9, "curvature 1/sigma^2 on zero rows"});
    const auto kc = gaussian::coord_curvature(gaussian::concept_model(0.1));
    const double ratio = kc.maxCoeff() / kc.minCoeff();
    add({"concept_curvature_spread", ratio < 2.0, ratio, 2.0, "max/min coordinate curvature"});
  }

  // Posterior mean by Tweedie's formula against direct conditioning.
  {
    Rng rng = make_rng(config.master_seed, {0x0A5});
    std::uniform_real_distribution<double> u(0.1, 0.99);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const int d = 2 + static_cast<int>(rng() % 4);
      const auto dens = gaussian::density_of({standard_normal(d, 2, rng), 0.2});
      const double a = u(rng);
      const double s = std::sqrt(1.0 - a * a);
      const Vector xt = standard_normal(d, rng);
      const Vector m1 = gaussian::posterior_mean_tweedie(dens, xt, a, s);
      const Vector m2 = gaussian::posterior_mean_conditioning(dens, xt, a, s);
      worst = std::max(worst, (m1 - m2).norm() / std::max(1e-300, m2.norm()));
    }
    add({"tweedie_posterior_mean", worst < 1e-9, worst, 1e-9, "20 instances"});
  }
  return report;
}

// ---- training ------------------------------------------------------------

fs::path checkpoint_path(const RunConfig& config, std::uint64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "step_%010llu.ckpt", static_cast<unsigned long long>(step));
  return config.checkpoint_dir() / buf;
}

std::vector<std::uint64_t> list_checkpoints(const RunConfig& config) {
  std::vector<std::uint64_t> steps;
  if (!fs::exists(config.checkpoint_dir())) return steps;
  for (const auto& e : fs::directory_iterator(config.checkpoint_dir())) {
    const std::string name = e.path().filename().string();
    if (name.size() == 20 && name.rfind("step_", 0) == 0 && e.path().extension() == ".ckpt") {
      steps.push_back(std::stoull(name.substr(5, 10)));
    }
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

TrainSummary cmd_train(const RunConfig& config, std::ostream* log) {
  const auto schedule = config.schedule.build();
  const auto ds = config.dataset.generate();
  data::save_dataset(ds, dataset_path(config));
  io::write_text_file(config.manifest_dir() / "dataset.json", data::dataset_manifest(ds));
  io::write_text_file(config.manifest_dir() / "config.json", config.to_json());

  const auto mcfg = model_config(config, ds);
  auto net = model::init_model(mcfg, derive_seed(config.master_seed, {0x1417}), schedule.fingerprint());

  model::TrainOptions opts;
  opts.total_steps = config.train.total_steps;
  opts.checkpoint_steps = config.train.checkpoint_steps;
  opts.batch_size = config.train.batch_size;
  opts.cond_dropout = config.train.cond_dropout;
  opts.adam.learning_rate = config.train.learning_rate;
  opts.lr_schedule = config.train.lr_schedule == "cosine" ? model::LrSchedule::Cosine : model::LrSchedule::Constant;
  opts.final_lr_fraction = config.train.final_lr_fraction;
  opts.seed = derive_seed(config.master_seed, {0x7241});
  opts.log_interval = config.train.log_interval;

  std::optional<model::Checkpoint> resume;
  if (!config.train.resume_from.empty()) {
    const fs::path p = config.train.resume_from;
    if (!fs::exists(p)) throw io::MissingInputError("resume checkpoint " + p.string() + " not found");
    resume = model::load_checkpoint(p);
  }

  TrainSummary summary;
  const std::uint64_t report_every = std::max<std::uint64_t>(1, opts.total_steps / 10);
  auto result = model::train(net, ds.samples, ds.conds, schedule, opts, resume ? &*resume : nullptr,
                             [&](const model::Checkpoint& c) {
                               const fs::path p = checkpoint_path(config, c.step);
                               model::save_checkpoint(c, p);
                               summary.checkpoints.push_back(p);
                               if (log != nullptr) *log << "checkpoint step " << c.step << " -> " << p.string() << '\n';
                             });
  if (log != nullptr) {
    for (const auto& r : result.log) {
      if (r.step % report_every == 0) *log << "step " << r.step << " loss " << fmt_g(r.loss) << '\n';
    }
  }
  std::ostringstream csv;
  csv << "step,loss\n";
  for (const auto& r : result.log) csv << r.step << ',' << fmt_g(r.loss) << '\n';
  io::write_text_file(config.csv_dir() / "train_log.csv", csv.str());
  summary.log = std::move(result.log);
  return summary;
}

// ---- dynamics ------------------------------------------------------------

double kappa_star(double sigma_data, double sigma_t) { return 1.0 / (sigma_data * sigma_data + sigma_t * sigma_t); }

std::vector<DynamicsRow> cmd_dynamics(const RunConfig& config) {
  if (config.dataset.kind != "duplicated_outlier") {
    throw ConfigError("dynamics needs the duplicated_outlier dataset");
  }
  const auto& spec = config.dataset.outlier;
  if (spec.A_row.size() != 2) throw ConfigError("dynamics probes need a two-dimensional dataset");
  const auto schedule = config.schedule.build();
  const Vector x_dup = config.dynamics.x_dup.value_or(spec.x_dup);
  if (x_dup.size() != 2) throw ConfigError("dynamics.x_dup must have two entries");
  for (int t : config.dynamics.t_eval) {
    if (t < 1 || t > schedule.steps()) throw ConfigError("dynamics.t_eval entries must lie in [1, T]");
  }

  std::vector<std::uint64_t> steps = config.dynamics.steps.empty() ? list_checkpoints(config) : config.dynamics.steps;
  if (steps.empty()) throw io::MissingInputError("no checkpoints found in " + config.checkpoint_dir().string());

  std::vector<DynamicsRow> rows;
  for (auto step : steps) {
    const auto ckpt = load_step(config, step);
    require_schedule(ckpt, schedule);
    const auto net = ckpt.to_model();
    for (int t : config.dynamics.t_eval) {
      DynamicsRow r;
      r.step = step;
      r.t_eval = t;
      r.kappa1_dup = curvature::kappa1(net, x_dup, t, schedule);
      r.kappa1_1d = curvature::kappa1(net, config.dynamics.x_1d, t, schedule);
      r.kappa_star = kappa_star(spec.sigma_data, schedule.noise_std(t));
      if (!std::isfinite(r.kappa1_dup) || !std::isfinite(r.kappa1_1d)) {
        throw ad::NumericError("non-finite kappa_1 at step " + std::to_string(step));
      }
      rows.push_back(r);
    }
  }
  std::ostringstream csv;
  csv << "step,t_eval,kappa1_dup,kappa1_1d,kappa_star\n";
  for (const auto& r : rows) {
    csv << r.step << ',' << r.t_eval << ',' << fmt_g(r.kappa1_dup) << ',' << fmt_g(r.kappa1_1d) << ','
        << fmt_g(r.kappa_star) << '\n';
  }
  io::write_text_file(config.csv_dir() / "dynamics.csv", csv.str());
  return rows;
}

// ---- localization --------------------------------------------------------

std::vector<LocalizeEntry> cmd_localize(const RunConfig& config, std::ostream* log) {
  const auto schedule = config.schedule.build();
  const auto ds = load_run_dataset(config);
  if (ds.num_conditions() == 0) throw ConfigError("localization needs a conditional dataset");
  const auto sampler = sampler_config(config, schedule);
  if (sampler.stop_timestep < 1) throw ConfigError("localization needs a stop timestep of at least 1");

  const auto steps = list_checkpoints(config);
  if (steps.empty()) throw io::MissingInputError("no checkpoints found in " + config.checkpoint_dir().string());
  const std::uint64_t theta_step = config.localize.theta_step != 0 ? config.localize.theta_step : steps.back();
  const auto theta_ckpt = load_step(config, theta_step);
  require_schedule(theta_ckpt, schedule);
  const auto theta = theta_ckpt.to_model();

  const bool need_baseline = std::any_of(config.localize.metrics.begin(), config.localize.metrics.end(),
                                         curvature::needs_baseline_checkpoint);
  std::optional<model::MlpDenoiser> baseline;
  std::uint64_t baseline_step = 0;
  if (need_baseline) {
    baseline_step = config.localize.baseline_step != 0 ? config.localize.baseline_step : steps.front();
    const fs::path bp = checkpoint_path(config, baseline_step);
    if (!fs::exists(bp)) throw io::MissingInputError("baseline checkpoint " + bp.string() + " not found");
    const auto base_ckpt = model::load_checkpoint(bp);
    if (baseline_step == theta_step && config.localize.allow_same_baseline) {
      if (base_ckpt.schedule_fingerprint != theta_ckpt.schedule_fingerprint) {
        throw model::CheckpointError("baseline checkpoint was trained under a different noise schedule");
      }
    } else {
      model::check_baseline_pair(theta_ckpt, base_ckpt);
    }
    baseline = base_ckpt.to_model();
  }

  std::vector<int> conds = config.localize.conditions;
  if (conds.empty()) {
    for (int c = 0; c < ds.num_conditions(); ++c) conds.push_back(c);
  }
  for (int c : conds) {
    if (c < 0 || c >= ds.num_conditions()) throw ConfigError("localize.conditions refers to unknown condition");
  }

  const curvature::GridLayout layout{ds.channels, ds.height, ds.width};
  const int S = config.localize.seeds_per_condition;
  const auto& metrics = config.localize.metrics;
  const std::size_t tasks = conds.size() * static_cast<std::size_t>(S);
  std::vector<LocalizeEntry> entries(tasks * metrics.size());
  std::vector<curvature::SpatialMap> spatial(entries.size());
  std::mutex log_mutex;

  parallel_for(tasks, config.resolved_workers(), [&](std::size_t task) {
    const int c = conds[task / static_cast<std::size_t>(S)];
    const int s = static_cast<int>(task % static_cast<std::size_t>(S));
    const auto uc = static_cast<std::uint64_t>(c);
    const auto us = static_cast<std::uint64_t>(s);
    Rng rng = make_rng(config.master_seed, {0x10C, uc, us});
    const auto sample = diffusion::ddim_sample_cfg(theta, c, schedule, sampler, rng);
    const int t = sample.timestep;
    const curvature::HutchinsonConfig hutch{config.localize.K, derive_seed(config.master_seed, {0x4C7, uc, us})};

    for (std::size_t mi = 0; mi < metrics.size(); ++mi) {
      curvature::LocalizationMap map;
      switch (metrics[mi]) {
        case MetricKind::RawCurv:
          map = curvature::raw_curvature_map(theta, sample.state, t, c, schedule, hutch, layout);
          break;
        case MetricKind::DhUncond:
          map = curvature::dh_map(theta, nullptr, sample.state, t, c, schedule, hutch, layout);
          break;
        case MetricKind::DhBaseline:
          map = curvature::dh_map(theta, &*baseline, sample.state, t, c, schedule, hutch, layout);
          break;
        case MetricKind::DsUncond:
          map = curvature::ds_map(curvature::score_diff_uncond(theta, sample.state, t, c, schedule),
                                  MetricKind::DsUncond, layout, t);
          break;
        case MetricKind::DsBaseline:
          map = curvature::ds_map(curvature::score_diff_baseline(theta, *baseline, sample.state, t, c, schedule),
                                  MetricKind::DsBaseline, layout, t);
          break;
      }
      const std::string metric = curvature::metric_name(metrics[mi]);
      LocalizeEntry e;
      e.condition = c;
      e.seed_index = s;
      e.metric = metrics[mi];
      e.timestep = t;
      e.map_file = fs::path("maps") / metric / (sample_stem(c, s) + ".clmp");
      e.render_file = fs::path("renders") / metric / (sample_stem(c, s) + ".pgm");
      curvature::save_map(map, {c, s}, config.run_dir() / e.map_file);
      spatial[task * metrics.size() + mi] = curvature::channel_aggregate(map);
      entries[task * metrics.size() + mi] = std::move(e);
    }
    if (log != nullptr) {
      std::lock_guard<std::mutex> lock(log_mutex);
      *log << "localized condition " << c << " seed " << s << " at t=" << t << '\n';
    }
  });

  const int degenerate = render_all(config, entries, spatial);
  if (log != nullptr && degenerate > 0) *log << "warning: " << degenerate << " maps had a degenerate value range\n";

  json manifest;
  manifest["theta_step"] = theta_step;
  manifest["baseline_step"] = baseline_step;
  manifest["timestep"] = sampler.stop_timestep;
  manifest["K"] = config.localize.K;
  manifest["seeds_per_condition"] = S;
  json list = json::array();
  for (const auto& e : entries) {
    list.push_back({{"condition", e.condition},
                    {"seed", e.seed_index},
                    {"metric", curvature::metric_name(e.metric)},
                    {"category", data::category_name(ds.categories[static_cast<std::size_t>(e.condition)])},
                    {"timestep", e.timestep},
                    {"map", e.map_file.generic_string()},
                    {"render", e.render_file.generic_string()}});
  }
  manifest["entries"] = std::move(list);
  io::write_text_file(config.manifest_dir() / "localize.json", manifest.dump(2) + "\n");
  return entries;
}

std::vector<LocalizeEntry> read_localize_manifest(const RunConfig& config) {
  const fs::path p = config.manifest_dir() / "localize.json";
  if (!fs::exists(p)) throw io::MissingInputError("localization manifest " + p.string() + " not found; run 'localize' first");
  const auto bytes = io::read_file_bytes(p);
  std::vector<LocalizeEntry> out;
  try {
    const auto j = json::parse(bytes.begin(), bytes.end());
    for (const auto& e : j.at("entries")) {
      LocalizeEntry le;
      le.condition = e.at("condition").get<int>();
      le.seed_index = e.at("seed").get<int>();
      le.metric = curvature::parse_metric(e.at("metric").get<std::string>());
      le.timestep = e.at("timestep").get<int>();
      le.map_file = e.at("map").get<std::string>();
      le.render_file = e.at("render").get<std::string>();
      out.push_back(std::move(le));
    }
  } catch (const std::exception& e) {
    throw io::FormatError(p.string() + ": " + e.what());
  }
  return out;
}

// ---- evaluation ----------------------------------------------------------

EvaluateSummary cmd_evaluate(const RunConfig& config) {
  const auto ds = load_run_dataset(config);
  const auto entries = read_localize_manifest(config);
  const curvature::GridLayout layout{ds.channels, ds.height, ds.width};

  // Maps keyed by metric, then by (condition, seed).
  std::vector<MetricKind> metric_order;
  std::map<MetricKind, std::map<std::pair<int, int>, curvature::SpatialMap>> maps;
  for (const auto& e : entries) {
    const fs::path p = config.run_dir() / e.map_file;
    if (!fs::exists(p)) throw io::MissingInputError("map file " + p.string() + " not found");
    curvature::MapFileHeader h;
    const auto m = curvature::load_map(p, &h);
    if (!(m.layout == layout) || h.condition != e.condition || h.seed_index != e.seed_index || m.kind != e.metric) {
      throw io::FormatError(p.string() + ": map does not match its manifest entry or the dataset grid");
    }
    if (std::find(metric_order.begin(), metric_order.end(), e.metric) == metric_order.end()) {
      metric_order.push_back(e.metric);
    }
    maps[e.metric][{e.condition, e.seed_index}] = curvature::channel_aggregate(m);
  }
  if (metric_order.empty()) throw io::MissingInputError("localization manifest lists no maps");

  std::set<int> localized;
  for (const auto& e : entries) localized.insert(e.condition);
  auto split = [&](std::vector<data::Category> include) {
    std::vector<int> conds;
    if (config.evaluate.balance) {
      conds = data::balanced_conditions(ds, include, derive_seed(config.master_seed, {0xE7A}));
    } else {
      for (int c = 0; c < ds.num_conditions(); ++c) {
        if (std::find(include.begin(), include.end(), ds.categories[static_cast<std::size_t>(c)]) != include.end()) {
          conds.push_back(c);
        }
      }
    }
    std::vector<int> kept;
    for (int c : conds) {
      if (localized.count(c) != 0) kept.push_back(c);
    }
    return kept;
  };

  eval::SweepOptions sweep;
  sweep.num_thresholds = config.evaluate.num_thresholds;
  sweep.per_sample_best = config.evaluate.per_sample_best;

  auto evaluate_split = [&](const std::vector<int>& conds) {
    std::vector<eval::EvalResult> rows;
    if (conds.empty()) return rows;
    const auto& first = maps.at(metric_order.front());
    std::vector<std::pair<int, int>> keys;
    for (const auto& [key, _] : first) {
      if (std::find(conds.begin(), conds.end(), key.first) != conds.end()) keys.push_back(key);
    }
    std::vector<data::Mask> gt;
    for (const auto& k : keys) gt.push_back(eval::spatial_mask(ds.masks[static_cast<std::size_t>(k.first)], layout));
    const std::size_t cells = static_cast<std::size_t>(layout.height * layout.width);
    rows.push_back(eval::evaluate_fixed("all_ones", std::vector<data::Mask>(keys.size(), data::Mask(cells, 1)), gt));
    rows.push_back(eval::evaluate_fixed("all_zeros", std::vector<data::Mask>(keys.size(), data::Mask(cells, 0)), gt));

    auto sweep_row = [&](const std::string& name, const std::vector<curvature::SpatialMap>& raw) {
      try {
        auto r = eval::threshold_sweep(eval::global_normalize(raw), gt, sweep);
        r.metric = name;
        rows.push_back(std::move(r));
      } catch (const eval::DegenerateRangeError&) {
        eval::EvalResult r;
        r.metric = name;
        r.samples = raw.size();
        r.tau_iou = r.mean_iou = r.tau_acc = r.mean_acc = std::numeric_limits<double>::quiet_NaN();
        rows.push_back(std::move(r));
      }
    };
    for (auto kind : metric_order) {
      std::vector<curvature::SpatialMap> raw;
      for (const auto& k : keys) {
        const auto it = maps.at(kind).find(k);
        if (it == maps.at(kind).end()) throw io::FormatError("metric maps do not cover the same samples");
        raw.push_back(it->second);
      }
      sweep_row(curvature::metric_name(kind), raw);
      if (!curvature::is_curvature_metric(kind) && config.evaluate.mean_filter > 1) {
        for (auto& m : raw) m = curvature::mean_filter(m, config.evaluate.mean_filter);
        sweep_row(std::string(curvature::metric_name(kind)) + "_mf" + std::to_string(config.evaluate.mean_filter), raw);
      }
    }
    return rows;
  };

  using data::Category;
  EvaluateSummary out;
  out.tv = evaluate_split(split({Category::TemplateVerbatim}));
  out.tv_nonmem = evaluate_split(split({Category::TemplateVerbatim, Category::NonMem}));
  const auto all_conds = split({Category::TemplateVerbatim, Category::GlobalMem, Category::NonMem});
  out.all = evaluate_split(all_conds);

  for (auto kind : metric_order) {
    std::map<int, std::pair<double, int>> per_cond;  // condition -> (score sum, seeds)
    for (const auto& [key, m] : maps.at(kind)) {
      if (std::find(all_conds.begin(), all_conds.end(), key.first) == all_conds.end()) continue;
      auto& acc = per_cond[key.first];
      acc.first += eval::detection_score(m);
      acc.second += 1;
    }
    std::vector<double> pos;
    std::vector<double> neg;
    int seeds = 0;
    for (const auto& [c, acc] : per_cond) {
      const double score = acc.first / static_cast<double>(acc.second);
      seeds = std::max(seeds, acc.second);
      (ds.categories[static_cast<std::size_t>(c)] == Category::NonMem ? neg : pos).push_back(score);
    }
    if (pos.empty() || neg.empty()) continue;
    out.detection.push_back(eval::detect(curvature::metric_name(kind), std::move(pos), std::move(neg), seeds));
  }

  io::write_text_file(config.csv_dir() / "localization_tv.csv", eval::localization_csv(out.tv));
  io::write_text_file(config.csv_dir() / "localization_tv_nonmem.csv", eval::localization_csv(out.tv_nonmem));
  io::write_text_file(config.csv_dir() / "localization_all.csv", eval::localization_csv(out.all));
  io::write_text_file(config.csv_dir() / "detection.csv", eval::detection_csv(out.detection));
  return out;
}

// ---- rendering -----------------------------------------------------------

RenderRange render_range(const std::vector<const curvature::SpatialMap*>& maps, const HeatmapRender& opts) {
  std::vector<double> values;
  for (const auto* m : maps) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double v = m->data()[i];
      values.push_back(opts.clip_negative ? std::max(v, 0.0) : v);
    }
  }
  RenderRange r;
  if (values.empty()) return r;
  r.lo = *std::min_element(values.begin(), values.end());
  r.hi = percentile_of(values, opts.percentile);
  return r;
}

std::vector<std::uint8_t> heatmap_pixels(const curvature::SpatialMap& map, const HeatmapRender& opts,
                                         const RenderRange& range) {
  const auto H = static_cast<int>(map.rows());
  const auto W = static_cast<int>(map.cols());
  const int up = std::max(1, opts.upscale);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(H * up) * static_cast<std::size_t>(W * up), 0);
  if (range.degenerate()) return px;
  for (int r = 0; r < H * up; ++r) {
    for (int c = 0; c < W * up; ++c) {
      double v = map(r / up, c / up);
      if (opts.clip_negative) v = std::max(v, 0.0);
      const double unit = std::clamp((v - range.lo) / (range.hi - range.lo), 0.0, 1.0);
      px[static_cast<std::size_t>(r) * static_cast<std::size_t>(W * up) + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::lround(unit * 255.0));
    }
  }
  return px;
}

bool render_heatmap(const curvature::SpatialMap& map, const HeatmapRender& opts, const fs::path& path,
                    const RenderRange* shared_range) {
  if (!map.allFinite()) throw ad::NumericError("render_heatmap: non-finite map value");
  if (!(opts.percentile > 0.0 && opts.percentile <= 100.0)) throw ConfigError("render percentile must lie in (0, 100]");
  const RenderRange range = shared_range != nullptr ? *shared_range : render_range({&map}, opts);
  const auto px = heatmap_pixels(map, opts, range);
  const int up = std::max(1, opts.upscale);
  const std::string header = "P5\n" + std::to_string(map.cols() * up) + " " + std::to_string(map.rows() * up) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), px.begin(), px.end());
  io::write_file_bytes(path, bytes);
  return !range.degenerate();
}

int cmd_render(const RunConfig& config) {
  const auto entries = read_localize_manifest(config);
  std::vector<curvature::SpatialMap> maps;
  maps.reserve(entries.size());
  for (const auto& e : entries) {
    const fs::path p = config.run_dir() / e.map_file;
    if (!fs::exists(p)) throw io::MissingInputError("map file " + p.string() + " not found");
    maps.push_back(curvature::channel_aggregate(curvature::load_map(p)));
  }
  return render_all(config, entries, maps);
}

}  // namespace curvloc::experiments
