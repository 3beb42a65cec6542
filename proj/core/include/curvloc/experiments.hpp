// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "curvloc/curvature.hpp"
#include "curvloc/diffusion.hpp"
#include "curvloc/evaluation.hpp"
#include "curvloc/score_model.hpp"
#include "curvloc/synthetic_data.hpp"

/// Run configuration and the commands behind the `curvloc` tool. Every
/// command is a function of its configuration and the files already present
/// in the run directory.
namespace curvloc::experiments {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfigError = 2,
  kExitMissingInput = 3,
  kExitNumericFailure = 4,
  kExitCheckFailure = 5,
};

struct ScheduleSection {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  [[nodiscard]] diffusion::NoiseSchedule build() const;
};

struct DatasetSection {
  std::string kind = "duplicated_outlier";  ///< duplicated_outlier | toy_memorization | linear_gaussian
  data::DuplicatedOutlierSpec outlier;
  data::ToyMemSpec toy;
  Matrix A;  ///< linear_gaussian only
  double sigma = 0.1;
  std::size_t n = 1000;
  std::uint64_t seed = 0;

  [[nodiscard]] data::Dataset generate() const;
};

struct ModelSection {
  std::vector<int> hidden{128, 128, 128};
  int time_embed_dim = 32;
  int cond_embed_dim = 16;
};

struct TrainSection {
  std::uint64_t total_steps = 60000;
  std::vector<std::uint64_t> checkpoint_steps{20000};
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::string lr_schedule = "constant";  ///< constant | cosine
  double final_lr_fraction = 0.0;        ///< cosine only
  double cond_dropout = 0.1;
  std::uint64_t log_interval = 100;
  /// Checkpoint to continue from; it must carry optimizer state for a
  /// bitwise-identical continuation.
  std::string resume_from;
};

struct DynamicsSection {
  std::vector<int> t_eval{3, 20, 200, 800};
  Vector x_1d = Vector::Zero(2);
  std::optional<Vector> x_dup;  ///< defaults to the dataset's duplicate center
  std::vector<std::uint64_t> steps;  ///< empty: every checkpoint in the run
};

struct SamplerSection {
  int inference_steps = 50;
  double cfg_scale = 7.5;
  int stop_timestep = 1;
  /// When set, overrides stop_timestep with the timestep reached after this
  /// many DDIM updates.
  std::optional<int> stop_step_index;
};

struct LocalizeSection {
  std::vector<curvature::MetricKind> metrics{curvature::MetricKind::DhUncond, curvature::MetricKind::DsUncond,
                                             curvature::MetricKind::DhBaseline, curvature::MetricKind::DsBaseline,
                                             curvature::MetricKind::RawCurv};
  int K = 16;
  int seeds_per_condition = 4;
  std::uint64_t theta_step = 0;     ///< 0: latest checkpoint
  std::uint64_t baseline_step = 0;  ///< 0: earliest checkpoint
  /// Permit theta-tilde == theta (a diagnostic; the maps are then zero).
  bool allow_same_baseline = false;
  std::vector<int> conditions;  ///< empty: every condition
};

struct RenderSection {
  double percentile = 99.0;
  std::string scaling = "per_map";  ///< per_map | shared_per_column
  int upscale = 8;
};

struct EvaluateSection {
  int mean_filter = 3;
  bool balance = true;
  bool per_sample_best = false;
  int num_thresholds = 1001;
};

struct OracleSection {
  int prop1_instances = 50;
  int prop2_instances = 20;
  std::size_t prop2_samples = 100000;
  int hutchinson_probes = 10000;
  int coupled_probes = 1000;
  /// Flip the sign of the Hessian fed to the curvature/covariance identity.
  bool inject_prop1_sign_error = false;
};

struct RunConfig {
  std::string name = "run";
  std::filesystem::path output_dir = "runs";
  std::uint64_t master_seed = 0;
  int workers = 0;  ///< 0: hardware concurrency
  ScheduleSection schedule;
  DatasetSection dataset;
  ModelSection model;
  TrainSection train;
  DynamicsSection dynamics;
  SamplerSection sampler;
  LocalizeSection localize;
  EvaluateSection evaluate;
  RenderSection render;
  OracleSection oracle;

  /// Parses a JSON document; unknown keys and ill-typed values raise ConfigError.
  static RunConfig parse(const std::string& json_text);
  static RunConfig load(const std::filesystem::path& path);
  [[nodiscard]] std::string to_json() const;

  [[nodiscard]] std::filesystem::path run_dir() const { return output_dir / name; }
  [[nodiscard]] std::filesystem::path checkpoint_dir() const { return run_dir() / "checkpoints"; }
  [[nodiscard]] std::filesystem::path maps_dir() const { return run_dir() / "maps"; }
  [[nodiscard]] std::filesystem::path renders_dir() const { return run_dir() / "renders"; }
  [[nodiscard]] std::filesystem::path csv_dir() const { return run_dir() / "csv"; }
  [[nodiscard]] std::filesystem::path manifest_dir() const { return run_dir() / "manifest"; }
  [[nodiscard]] int resolved_workers() const;
};

/// A numbered check inside `cmd_oracle`.
struct OracleCheck {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct OracleReport {
  std::vector<OracleCheck> checks;
  int prop1_instances = 0;
  [[nodiscard]] bool all_pass() const;
};

[[nodiscard]] OracleReport cmd_oracle(const RunConfig& config, std::ostream* log = nullptr);

struct TrainSummary {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<model::LossRecord> log;
};

[[nodiscard]] std::filesystem::path checkpoint_path(const RunConfig& config, std::uint64_t step);
/// Steps of every checkpoint in the run, ascending.
[[nodiscard]] std::vector<std::uint64_t> list_checkpoints(const RunConfig& config);

/// Generates the dataset, trains, and writes checkpoints, the dataset
/// container and manifest, and csv/train_log.csv.
TrainSummary cmd_train(const RunConfig& config, std::ostream* log = nullptr);

struct DynamicsRow {
  std::uint64_t step;
  int t_eval;
  double kappa1_dup;
  double kappa1_1d;
  double kappa_star;
};

/// kappa_1 at the duplicate center and the manifold probe for every
/// (checkpoint, t_eval); writes csv/dynamics.csv.
std::vector<DynamicsRow> cmd_dynamics(const RunConfig& config);
[[nodiscard]] double kappa_star(double sigma_data, double sigma_t);

struct LocalizeEntry {
  int condition = 0;
  int seed_index = 0;
  curvature::MetricKind metric = curvature::MetricKind::RawCurv;
  int timestep = 0;
  std::filesystem::path map_file;     ///< relative to the run directory
  std::filesystem::path render_file;  ///< relative to the run directory
};

/// Samples x_{t*} for every (condition, seed), computes every configured
/// metric there, and writes map files, renders and manifest/localize.json.
std::vector<LocalizeEntry> cmd_localize(const RunConfig& config, std::ostream* log = nullptr);
[[nodiscard]] std::vector<LocalizeEntry> read_localize_manifest(const RunConfig& config);

struct EvaluateSummary {
  std::vector<eval::EvalResult> tv;         ///< template-verbatim conditions only
  std::vector<eval::EvalResult> tv_nonmem;  ///< balanced TV + NonMem
  std::vector<eval::EvalResult> all;        ///< balanced TV + GlobalMem + NonMem
  std::vector<eval::DetectionResult> detection;
};

/// Localization and detection protocol over the maps of `cmd_localize`;
/// writes csv/localization_{tv,tv_nonmem,all}.csv and csv/detection.csv.
EvaluateSummary cmd_evaluate(const RunConfig& config);

struct HeatmapRender {
  double percentile = 99.0;
  bool clip_negative = false;
  int upscale = 1;
};

struct RenderRange {
  double lo = 0.0;
  double hi = 0.0;
  [[nodiscard]] bool degenerate() const { return !(hi > lo); }
};

/// lo = min and hi = the percentile of the (optionally negative-clipped) values.
[[nodiscard]] RenderRange render_range(const std::vector<const curvature::SpatialMap*>& maps,
                                       const HeatmapRender& opts);
/// 8-bit pixels, row-major, of size (H * upscale) x (W * upscale).
[[nodiscard]] std::vector<std::uint8_t> heatmap_pixels(const curvature::SpatialMap& map, const HeatmapRender& opts,
                                                       const RenderRange& range);
/// Writes a binary PGM ("P5"). Returns false, and writes an all-zero image,
/// when the value range is degenerate.
bool render_heatmap(const curvature::SpatialMap& map, const HeatmapRender& opts, const std::filesystem::path& path,
                    const RenderRange* shared_range = nullptr);

/// Re-renders every map listed in manifest/localize.json with the render
/// section's options. Returns the number of degenerate maps.
int cmd_render(const RunConfig& config);

}  // namespace curvloc::experiments
