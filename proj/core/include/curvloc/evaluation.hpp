// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "curvloc/curvature.hpp"
#include "curvloc/synthetic_data.hpp"

namespace curvloc::eval {

using curvature::SpatialMap;
using data::Mask;

class DegenerateRangeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Min-max normalization over the union of all values of all maps.
[[nodiscard]] std::vector<SpatialMap> global_normalize(const std::vector<SpatialMap>& maps);

/// Row-major H x W mask of cells with value >= tau.
[[nodiscard]] Mask binarize(const SpatialMap& map, double tau);
/// Spatial mask of a C x H x W mask: a cell is on when any channel is on.
[[nodiscard]] Mask spatial_mask(const Mask& mask, const curvature::GridLayout& layout);

/// |pred & gt| / |pred | gt|, defined as 1 when both are empty.
[[nodiscard]] double iou(const Mask& pred, const Mask& gt);
[[nodiscard]] double pixel_acc(const Mask& pred, const Mask& gt);

struct SweepOptions {
  int num_thresholds = 1001;  ///< tau_i = i / (num_thresholds - 1)
  /// Pick the best threshold for every sample separately instead of one shared
  /// threshold; the reported tau is then the mean of the per-sample choices.
  bool per_sample_best = false;
};

struct EvalResult {
  std::string metric;
  double tau_iou = 0.0;
  double mean_iou = 0.0;
  double tau_acc = 0.0;
  double mean_acc = 0.0;
  std::vector<double> per_sample_iou;  ///< at tau_iou
  std::vector<double> per_sample_acc;  ///< at tau_acc
  std::size_t samples = 0;
};

/// Sweeps tau over [0, 1] and keeps, separately, the tau maximizing mean IoU
/// and mean ACC; ties go to the smallest tau.
[[nodiscard]] EvalResult threshold_sweep(const std::vector<SpatialMap>& norm_maps, const std::vector<Mask>& gt,
                                         const SweepOptions& options = {});

/// Scores fixed binary predictions (the all-ones / all-zeros reference rows).
/// Thresholds are reported as NaN.
[[nodiscard]] EvalResult evaluate_fixed(const std::string& metric, const std::vector<Mask>& pred,
                                        const std::vector<Mask>& gt);

/// Spatial expectation (mean over cells).
[[nodiscard]] double detection_score(const SpatialMap& map);

/// Probability that a random positive outranks a random negative, ties 1/2.
[[nodiscard]] double auc(const std::vector<double>& pos, const std::vector<double>& neg);

/// Largest TPR over thresholds "score >= tau" whose FPR is strictly below `fpr`.
[[nodiscard]] double tpr_at_fpr(const std::vector<double>& pos, const std::vector<double>& neg, double fpr = 0.01);

struct DetectionResult {
  std::string metric;
  double auc = 0.0;
  double tpr_at_1fpr = 0.0;
  std::vector<double> pos;
  std::vector<double> neg;
  int seeds_per_condition = 0;
};

[[nodiscard]] DetectionResult detect(const std::string& metric, std::vector<double> pos, std::vector<double> neg,
                                     int seeds_per_condition);

enum class ReferenceKind { AllOnes, AllZeros };
[[nodiscard]] SpatialMap reference_map(ReferenceKind kind, int height, int width);

/// metric,tau_best_iou,mean_iou,tau_best_acc,mean_acc
[[nodiscard]] std::string localization_csv(const std::vector<EvalResult>& rows);
/// metric,auc,tpr_at_1fpr
[[nodiscard]] std::string detection_csv(const std::vector<DetectionResult>& rows);

}  // namespace curvloc::eval
