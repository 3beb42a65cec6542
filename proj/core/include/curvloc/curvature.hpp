// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "curvloc/autodiff.hpp"
#include "curvloc/diffusion.hpp"

namespace curvloc::curvature {

using diffusion::CondId;
using diffusion::EpsModel;
using diffusion::NoiseSchedule;

enum class MetricKind : std::uint8_t { RawCurv, DhUncond, DhBaseline, DsUncond, DsBaseline };

[[nodiscard]] const char* metric_name(MetricKind kind);
[[nodiscard]] MetricKind parse_metric(const std::string& name);
/// Hutchinson-based metrics (as opposed to squared score differences).
[[nodiscard]] bool is_curvature_metric(MetricKind kind);
[[nodiscard]] bool needs_baseline_checkpoint(MetricKind kind);

struct GridLayout {
  int channels = 1;
  int height = 1;
  int width = 1;

  [[nodiscard]] int size() const { return channels * height * width; }
  /// A flat vector of length d laid out as 1 x 1 x d.
  static GridLayout flat(int d) { return {1, 1, d}; }
  bool operator==(const GridLayout&) const = default;
};

struct LocalizationMap {
  MetricKind kind = MetricKind::RawCurv;
  Vector values;  ///< C x H x W, channel-major then row-major
  GridLayout layout;
  int timestep = 0;
  int probes = 0;  ///< Hutchinson sample count; 0 for score-based maps

  void validate() const;
};

/// H x W map after channel aggregation.
using SpatialMap = Matrix;

struct HutchinsonConfig {
  int K = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

/// d x K Rademacher probes; column k depends only on (seed, k).
[[nodiscard]] Matrix hutchinson_probes(Eigen::Index d, const HutchinsonConfig& config);

/// (1/K) sum_k z_k (.) (A z_k) for the probes of `config`.
[[nodiscard]] Vector hutchinson_diag(const std::function<Vector(const Vector&)>& matvec, Eigen::Index d,
                                     const HutchinsonConfig& config);

/// s(x, t, c) = -eps(x, t, c) / sigma_t.
[[nodiscard]] Vector model_score(const EpsModel& model, const Vector& x, int t, CondId c,
                                 const NoiseSchedule& schedule);
/// s(x, t, c) - s(x, t, null).
[[nodiscard]] Vector score_diff_uncond(const EpsModel& theta, const Vector& x, int t, CondId c,
                                       const NoiseSchedule& schedule);
/// s_theta(x, t, c) - s_baseline(x, t, c).
[[nodiscard]] Vector score_diff_baseline(const EpsModel& theta, const EpsModel& baseline, const Vector& x,
                                         int t, CondId c, const NoiseSchedule& schedule);

/// Throws std::invalid_argument when both models carry nonzero schedule
/// fingerprints that differ.
void require_compatible(const EpsModel& theta, const EpsModel& baseline);

/// Elementwise square of a score difference.
[[nodiscard]] LocalizationMap ds_map(const Vector& s_diff, MetricKind kind = MetricKind::DsUncond,
                                     GridLayout layout = {}, int timestep = 0);

/// Coupled Hutchinson estimate of diag(-d s_diff / dx) with
/// s_diff = s_theta(x, t, c) - s_base(x, t, c_base), where the baseline is
/// theta with the null condition (`baseline == nullptr`) or the given
/// checkpoint with condition c. Both terms share the probes.
[[nodiscard]] LocalizationMap dh_map(const EpsModel& theta, const EpsModel* baseline, const Vector& x, int t,
                                     CondId c, const NoiseSchedule& schedule, const HutchinsonConfig& hutch,
                                     GridLayout layout = {});

/// Hutchinson estimate of diag(-d s_theta(x, t, c) / dx).
[[nodiscard]] LocalizationMap raw_curvature_map(const EpsModel& theta, const Vector& x, int t, CondId c,
                                                const NoiseSchedule& schedule, const HutchinsonConfig& hutch,
                                                GridLayout layout = {});

/// ||s_diff||_2.
[[nodiscard]] double wen_metric(const Vector& s_diff);

/// Entry (1, 1) of -d s / dx for the score at (x, t) under condition `c`,
/// from a central-difference Jacobian with step `h`.
[[nodiscard]] double kappa1(const EpsModel& model, const Vector& x, int t, const NoiseSchedule& schedule,
                            CondId c = diffusion::kNullCondition, double h = 1e-4);

/// Sum over channels, giving an H x W map.
[[nodiscard]] SpatialMap channel_aggregate(const LocalizationMap& map);
[[nodiscard]] SpatialMap channel_aggregate(const Vector& values, const GridLayout& layout);

/// k x k box filter with edge replication; k must be odd.
[[nodiscard]] SpatialMap mean_filter(const SpatialMap& map, int k);

/// Map file: "CLMP", version, metric tag, timestep, K, condition, seed index,
/// C, H, W, then C*H*W little-endian doubles.
struct MapFileHeader {
  CondId condition = diffusion::kNullCondition;
  int seed_index = 0;
};
void save_map(const LocalizationMap& map, const MapFileHeader& header, const std::filesystem::path& path);
[[nodiscard]] LocalizationMap load_map(const std::filesystem::path& path, MapFileHeader* header = nullptr);

}  // namespace curvloc::curvature
