// SPDX-License-Identifier: Apache-2.0
#include "curvloc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

namespace curvloc::eval {

namespace {

void require_same_size(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw ad::ShapeError("mask shapes differ");
}

std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

std::vector<SpatialMap> global_normalize(const std::vector<SpatialMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("global_normalize: no maps");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& m : maps) {
    if (m.size() == 0) continue;
    if (!m.allFinite()) throw ad::NumericError("global_normalize: non-finite map value");
    lo = std::min(lo, m.minCoeff());
    hi = std::max(hi, m.maxCoeff());
  }
  if (!(hi > lo)) throw DegenerateRangeError("global_normalize: all values are equal");
  std::vector<SpatialMap> out;
  out.reserve(maps.size());
  const double span = hi - lo;
  for (const auto& m : maps) out.push_back(((m.array() - lo) / span).matrix());
  return out;
}

Mask binarize(const SpatialMap& map, double tau) {
  Mask out(static_cast<std::size_t>(map.size()));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < map.rows(); ++r) {
    for (Eigen::Index c = 0; c < map.cols(); ++c) out[k++] = map(r, c) >= tau ? 1 : 0;
  }
  return out;
}

Mask spatial_mask(const Mask& mask, const curvature::GridLayout& layout) {
  if (mask.size() != static_cast<std::size_t>(layout.size())) throw ad::ShapeError("mask does not match layout");
  const auto hw = static_cast<std::size_t>(layout.height * layout.width);
  Mask out(hw, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i % hw] |= mask[i] != 0 ? 1 : 0;
  return out;
}

double iou(const Mask& pred, const Mask& gt) {
  require_same_size(pred, gt);
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double pixel_acc(const Mask& pred, const Mask& gt) {
  require_same_size(pred, gt);
  if (pred.empty()) throw ad::ShapeError("pixel_acc: empty masks");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) agree += ((pred[i] != 0) == (gt[i] != 0)) ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(pred.size());
}

EvalResult threshold_sweep(const std::vector<SpatialMap>& norm_maps, const std::vector<Mask>& gt,
                           const SweepOptions& options) {
  if (norm_maps.empty()) throw std::invalid_argument("threshold_sweep: empty evaluation set");
  if (norm_maps.size() != gt.size()) throw ad::ShapeError("threshold_sweep: one mask per map is required");
  if (options.num_thresholds < 2) throw std::invalid_argument("threshold_sweep: need at least two thresholds");
  const std::size_t n = norm_maps.size();
  const int T = options.num_thresholds;

  // ious[i][s] and accs[i][s] score sample s at threshold i.
  std::vector<std::vector<double>> ious(static_cast<std::size_t>(T), std::vector<double>(n));
  std::vector<std::vector<double>> accs(static_cast<std::size_t>(T), std::vector<double>(n));
  std::vector<double> taus(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double tau = static_cast<double>(i) / static_cast<double>(T - 1);
    taus[static_cast<std::size_t>(i)] = tau;
    for (std::size_t s = 0; s < n; ++s) {
      const Mask pred = binarize(norm_maps[s], tau);
      ious[static_cast<std::size_t>(i)][s] = iou(pred, gt[s]);
      accs[static_cast<std::size_t>(i)][s] = pixel_acc(pred, gt[s]);
    }
  }

  EvalResult r;
  r.samples = n;
  auto pick_shared = [&](const std::vector<std::vector<double>>& table, double& tau, double& best,
                         std::vector<double>& per) {
    std::size_t arg = 0;
    best = mean_of(table[0]);
    for (std::size_t i = 1; i < table.size(); ++i) {
      const double m = mean_of(table[i]);
      if (m > best) {
        best = m;
        arg = i;
      }
    }
    tau = taus[arg];
    per = table[arg];
  };
  auto pick_per_sample = [&](const std::vector<std::vector<double>>& table, double& tau, double& best,
                             std::vector<double>& per) {
    per.assign(n, 0.0);
    double tau_sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      std::size_t arg = 0;
      for (std::size_t i = 1; i < table.size(); ++i) {
        if (table[i][s] > table[arg][s]) arg = i;
      }
      per[s] = table[arg][s];
      tau_sum += taus[arg];
    }
    best = mean_of(per);
    tau = tau_sum / static_cast<double>(n);
  };
  if (options.per_sample_best) {
    pick_per_sample(ious, r.tau_iou, r.mean_iou, r.per_sample_iou);
    pick_per_sample(accs, r.tau_acc, r.mean_acc, r.per_sample_acc);
  } else {
    pick_shared(ious, r.tau_iou, r.mean_iou, r.per_sample_iou);
    pick_shared(accs, r.tau_acc, r.mean_acc, r.per_sample_acc);
  }
  return r;
}

EvalResult evaluate_fixed(const std::string& metric, const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
  if (pred.empty()) throw std::invalid_argument("evaluate_fixed: empty evaluation set");
  if (pred.size() != gt.size()) throw ad::ShapeError("evaluate_fixed: one mask per prediction is required");
  EvalResult r;
  r.metric = metric;
  r.samples = pred.size();
  r.tau_iou = r.tau_acc = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t s = 0; s < pred.size(); ++s) {
    r.per_sample_iou.push_back(iou(pred[s], gt[s]));
    r.per_sample_acc.push_back(pixel_acc(pred[s], gt[s]));
  }
  r.mean_iou = mean_of(r.per_sample_iou);
  r.mean_acc = mean_of(r.per_sample_acc);
  return r;
}

double detection_score(const SpatialMap& map) {
  if (map.size() == 0) throw ad::ShapeError("detection_score: empty map");
  return map.mean();
}

double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw std::invalid_argument("auc: both classes must be nonempty");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Sum of midranks of the positives, kept as twice the value so it stays integral.
  double twice_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double twice_mid = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].positive) twice_rank_sum += twice_mid;
    }
    i = j;
  }
  const double np = static_cast<double>(pos.size());
  const double nn = static_cast<double>(neg.size());
  const double twice_u = twice_rank_sum - np * (np + 1.0);
  return (twice_u / 2.0) / (np * nn);
}

double tpr_at_fpr(const std::vector<double>& pos, const std::vector<double>& neg, double fpr) {
  if (pos.empty() || neg.empty()) throw std::invalid_argument("tpr_at_fpr: both classes must be nonempty");
  std::vector<double> p = pos;
  std::vector<double> q = neg;
  std::sort(p.begin(), p.end(), std::greater<>());
  std::sort(q.begin(), q.end(), std::greater<>());
  std::vector<double> thresholds = p;
  thresholds.insert(thresholds.end(), q.begin(), q.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  double best = 0.0;  // the threshold above every score
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (double tau : thresholds) {
    while (tp < p.size() && p[tp] >= tau) ++tp;
    while (fp < q.size() && q[fp] >= tau) ++fp;
    const double rate = static_cast<double>(fp) / static_cast<double>(q.size());
    if (rate < fpr) best = std::max(best, static_cast<double>(tp) / static_cast<double>(p.size()));
  }
  return best;
}

DetectionResult detect(const std::string& metric, std::vector<double> pos, std::vector<double> neg,
                       int seeds_per_condition) {
  DetectionResult r;
  r.metric = metric;
  r.auc = auc(pos, neg);
  r.tpr_at_1fpr = tpr_at_fpr(pos, neg, 0.01);
  r.pos = std::move(pos);
  r.neg = std::move(neg);
  r.seeds_per_condition = seeds_per_condition;
  return r;
}

SpatialMap reference_map(ReferenceKind kind, int height, int width) {
  if (height < 1 || width < 1) throw ad::ShapeError("reference_map: shape must be positive");
  return SpatialMap::Constant(height, width, kind == ReferenceKind::AllOnes ? 1.0 : 0.0);
}

std::string localization_csv(const std::vector<EvalResult>& rows) {
  std::ostringstream os;
  os << "metric,tau_best_iou,mean_iou,tau_best_acc,mean_acc\n";
  for (const auto& r : rows) {
    os << r.metric << ',' << fmt(r.tau_iou) << ',' << fmt(r.mean_iou) << ',' << fmt(r.tau_acc) << ','
       << fmt(r.mean_acc) << '\n';
  }
  return os.str();
}

std::string detection_csv(const std::vector<DetectionResult>& rows) {
  std::ostringstream os;
  os << "metric,auc,tpr_at_1fpr\n";
  for (const auto& r : rows) os << r.metric << ',' << fmt(r.auc) << ',' << fmt(r.tpr_at_1fpr) << '\n';
  return os.str();
}

}  // namespace curvloc::eval
