// SPDX-License-Identifier: Apache-2.0
#include "curvloc/curvature.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "curvloc/binary_io.hpp"
#include "curvloc/random.hpp"

namespace curvloc::curvature {

namespace {

constexpr std::uint32_t kMapVersion = 1;

GridLayout resolve_layout(const GridLayout& layout, Eigen::Index d) {
  if (layout.size() == d) return layout;
  if (layout == GridLayout{}) return GridLayout::flat(static_cast<int>(d));
  throw ad::ShapeError("grid layout " + std::to_string(layout.size()) + " does not match dimension " +
                       std::to_string(d));
}

Matrix replicate(const Vector& x, Eigen::Index k) { return x.replicate(1, k); }

/// -eps / sigma_t for K copies of x recorded on `tape`.
ad::NodeId score_node(ad::Tape& tape, const EpsModel& model, ad::NodeId x, int t, CondId c, double sigma) {
  const auto K = static_cast<std::size_t>(tape.value(x).cols());
  const std::vector<int> ts(K, t);
  const std::vector<CondId> cs(K, c);
  return tape.scale(model.build_eps(tape, x, ts, cs), -1.0 / sigma);
}

/// d = (1/K) sum_k z_k (.) grad_x (s(x) . z_k), computed in one batched pass.
Vector coupled_probe_diag(const std::function<ad::NodeId(ad::Tape&, ad::NodeId)>& s, const Vector& x,
                          const HutchinsonConfig& hutch) {
  hutch.validate();
  const Matrix Z = hutchinson_probes(x.size(), hutch);
  ad::Tape tape;
  const ad::NodeId X = tape.variable(replicate(x, hutch.K));
  const ad::NodeId out = s(tape, X);
  tape.backward(tape.dot(out, tape.constant(Z)));
  const Matrix G = tape.grad(X);
  Vector acc = Vector::Zero(x.size());
  for (int k = 0; k < hutch.K; ++k) {
    if (!G.col(k).allFinite()) throw ad::NumericError("non-finite VJP for Hutchinson probe " + std::to_string(k));
    acc += Z.col(k).cwiseProduct(G.col(k));
  }
  return acc / static_cast<double>(hutch.K);
}

}  // namespace

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::RawCurv: return "raw_curv";
    case MetricKind::DhUncond: return "dh_uncond";
    case MetricKind::DhBaseline: return "dh_baseline";
    case MetricKind::DsUncond: return "ds_uncond";
    case MetricKind::DsBaseline: return "ds_baseline";
  }
  return "unknown";
}

MetricKind parse_metric(const std::string& name) {
  for (auto k : {MetricKind::RawCurv, MetricKind::DhUncond, MetricKind::DhBaseline, MetricKind::DsUncond,
                 MetricKind::DsBaseline}) {
    if (name == metric_name(k)) return k;
  }
  throw std::invalid_argument("unknown metric '" + name + "'");
}

bool is_curvature_metric(MetricKind kind) { return kind == MetricKind::RawCurv || kind == MetricKind::DhUncond || kind == MetricKind::DhBaseline; }

bool needs_baseline_checkpoint(MetricKind kind) { return kind == MetricKind::DhBaseline || kind == MetricKind::DsBaseline; }

void LocalizationMap::validate() const {
  if (values.size() != layout.size()) throw ad::ShapeError("map values do not match the grid layout");
  if (!values.allFinite()) throw ad::NumericError("map contains non-finite values");
  if ((kind == MetricKind::DsUncond || kind == MetricKind::DsBaseline) && values.minCoeff() < 0.0) {
    throw std::invalid_argument("score-difference map has negative entries");
  }
}

void HutchinsonConfig::validate() const {
  if (K < 1) throw diffusion::ConfigError("Hutchinson K must be at least 1");
}

Matrix hutchinson_probes(Eigen::Index d, const HutchinsonConfig& config) {
  config.validate();
  Matrix Z(d, config.K);
  for (int k = 0; k < config.K; ++k) {
    Rng rng = make_rng(config.seed, {0x2B, static_cast<std::uint64_t>(k)});
    Z.col(k) = rademacher(d, 1, rng).col(0);
  }
  return Z;
}

Vector hutchinson_diag(const std::function<Vector(const Vector&)>& matvec, Eigen::Index d,
                       const HutchinsonConfig& config) {
  const Matrix Z = hutchinson_probes(d, config);
  Vector acc = Vector::Zero(d);
  for (int k = 0; k < config.K; ++k) {
    const Vector az = matvec(Z.col(k));
    if (az.size() != d) throw ad::ShapeError("hutchinson_diag: matvec returned the wrong length");
    acc += Z.col(k).cwiseProduct(az);
  }
  return acc / static_cast<double>(config.K);
}

Vector model_score(const EpsModel& model, const Vector& x, int t, CondId c, const NoiseSchedule& schedule) {
  return diffusion::score_from_eps(model.predict_eps(x, t, c), schedule.noise_std(t));
}

Vector score_diff_uncond(const EpsModel& theta, const Vector& x, int t, CondId c, const NoiseSchedule& schedule) {
  if (c == diffusion::kNullCondition) return Vector::Zero(x.size());
  return model_score(theta, x, t, c, schedule) - model_score(theta, x, t, diffusion::kNullCondition, schedule);
}

void require_compatible(const EpsModel& theta, const EpsModel& baseline) {
  const auto a = theta.schedule_fingerprint();
  const auto b = baseline.schedule_fingerprint();
  if (a != 0 && b != 0 && a != b) throw std::invalid_argument("model and baseline use different noise schedules");
  if (theta.dim() != baseline.dim()) throw ad::ShapeError("model and baseline have different dimensions");
}

Vector score_diff_baseline(const EpsModel& theta, const EpsModel& baseline, const Vector& x, int t, CondId c,
                           const NoiseSchedule& schedule) {
  require_compatible(theta, baseline);
  return model_score(theta, x, t, c, schedule) - model_score(baseline, x, t, c, schedule);
}

LocalizationMap ds_map(const Vector& s_diff, MetricKind kind, GridLayout layout, int timestep) {
  if (!s_diff.allFinite()) throw ad::NumericError("ds_map: non-finite score difference");
  LocalizationMap m;
  m.kind = kind;
  m.values = s_diff.array().square().matrix();
  m.layout = resolve_layout(layout, s_diff.size());
  m.timestep = timestep;
  m.probes = 0;
  return m;
}

LocalizationMap dh_map(const EpsModel& theta, const EpsModel* baseline, const Vector& x, int t, CondId c,
                       const NoiseSchedule& schedule, const HutchinsonConfig& hutch, GridLayout layout) {
  if (baseline != nullptr) require_compatible(theta, *baseline);
  const double sigma = schedule.noise_std(t);
  if (!(sigma > 0.0)) throw std::domain_error("dh_map needs sigma_t > 0");
  const EpsModel& base = baseline != nullptr ? *baseline : theta;
  const CondId base_cond = baseline != nullptr ? c : diffusion::kNullCondition;

  const Vector d = coupled_probe_diag(
      [&](ad::Tape& tape, ad::NodeId X) {
        return tape.sub(score_node(tape, theta, X, t, c, sigma), score_node(tape, base, X, t, base_cond, sigma));
      },
      x, hutch);

  LocalizationMap m;
  m.kind = baseline != nullptr ? MetricKind::DhBaseline : MetricKind::DhUncond;
  m.values = -d;
  m.layout = resolve_layout(layout, x.size());
  m.timestep = t;
  m.probes = hutch.K;
  return m;
}

LocalizationMap raw_curvature_map(const EpsModel& theta, const Vector& x, int t, CondId c,
                                  const NoiseSchedule& schedule, const HutchinsonConfig& hutch, GridLayout layout) {
  const double sigma = schedule.noise_std(t);
  if (!(sigma > 0.0)) throw std::domain_error("raw_curvature_map needs sigma_t > 0");
  const Vector d = coupled_probe_diag(
      [&](ad::Tape& tape, ad::NodeId X) { return score_node(tape, theta, X, t, c, sigma); }, x, hutch);
  LocalizationMap m;
  m.kind = MetricKind::RawCurv;
  m.values = -d;
  m.layout = resolve_layout(layout, x.size());
  m.timestep = t;
  m.probes = hutch.K;
  return m;
}

double wen_metric(const Vector& s_diff) { return s_diff.norm(); }

double kappa1(const EpsModel& model, const Vector& x, int t, const NoiseSchedule& schedule, CondId c, double h) {
  const Matrix J = ad::finite_diff_jacobian(
      [&](const Vector& p) { return model_score(model, p, t, c, schedule); }, x, h);
  return -J(0, 0);
}

SpatialMap channel_aggregate(const Vector& values, const GridLayout& layout) {
  if (values.size() != layout.size()) throw ad::ShapeError("channel_aggregate: layout does not match map size");
  SpatialMap out = SpatialMap::Zero(layout.height, layout.width);
  const int hw = layout.height * layout.width;
  for (int ch = 0; ch < layout.channels; ++ch) {
    for (int r = 0; r < layout.height; ++r) {
      for (int col = 0; col < layout.width; ++col) out(r, col) += values(ch * hw + r * layout.width + col);
    }
  }
  return out;
}

SpatialMap channel_aggregate(const LocalizationMap& map) { return channel_aggregate(map.values, map.layout); }

SpatialMap mean_filter(const SpatialMap& map, int k) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("mean_filter window must be odd and positive");
  const int r = k / 2;
  const auto H = static_cast<int>(map.rows());
  const auto W = static_cast<int>(map.cols());
  SpatialMap out(H, W);
  const double inv = 1.0 / static_cast<double>(k * k);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double sum = 0.0;
      for (int di = -r; di <= r; ++di) {
        const int ii = std::clamp(i + di, 0, H - 1);
        for (int dj = -r; dj <= r; ++dj) sum += map(ii, std::clamp(j + dj, 0, W - 1));
      }
      out(i, j) = sum * inv;
    }
  }
  return out;
}

void save_map(const LocalizationMap& map, const MapFileHeader& header, const std::filesystem::path& path) {
  map.validate();
  io::ByteWriter w;
  w.magic("CLMP");
  w.u32(kMapVersion);
  w.str(metric_name(map.kind));
  w.i32(map.timestep);
  w.u32(static_cast<std::uint32_t>(map.probes));
  w.i32(header.condition);
  w.u32(static_cast<std::uint32_t>(header.seed_index));
  w.u32(static_cast<std::uint32_t>(map.layout.channels));
  w.u32(static_cast<std::uint32_t>(map.layout.height));
  w.u32(static_cast<std::uint32_t>(map.layout.width));
  w.f64s(std::span<const double>(map.values.data(), static_cast<std::size_t>(map.values.size())));
  w.write_file(path);
}

LocalizationMap load_map(const std::filesystem::path& path, MapFileHeader* header) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic("CLMP");
  if (r.u32() != kMapVersion) throw io::FormatError(path.string() + ": unsupported map version");
  LocalizationMap m;
  try {
    m.kind = parse_metric(r.str());
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(path.string() + ": " + e.what());
  }
  m.timestep = r.i32();
  m.probes = static_cast<int>(r.u32());
  MapFileHeader h;
  h.condition = r.i32();
  h.seed_index = static_cast<int>(r.u32());
  m.layout.channels = static_cast<int>(r.u32());
  m.layout.height = static_cast<int>(r.u32());
  m.layout.width = static_cast<int>(r.u32());
  const auto n = static_cast<std::size_t>(m.layout.channels) * static_cast<std::size_t>(m.layout.height) *
                 static_cast<std::size_t>(m.layout.width);
  const auto vals = r.f64s(n);
  r.expect_end();
  m.values = Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(n));
  if (header != nullptr) *header = h;
  return m;
}

}  // namespace curvloc::curvature
