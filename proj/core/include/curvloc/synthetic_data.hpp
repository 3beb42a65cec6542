// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvloc/autodiff.hpp"
#include "curvloc/diffusion.hpp"

namespace curvloc::data {

using diffusion::CondId;

enum class Category : std::uint8_t { TemplateVerbatim = 0, GlobalMem = 1, NonMem = 2 };

[[nodiscard]] const char* category_name(Category c);
[[nodiscard]] Category parse_category(const std::string& name);

/// Binary mask over the data grid, one byte (0 or 1) per coordinate.
using Mask = std::vector<std::uint8_t>;

struct Dataset {
  Matrix samples;              ///< d x N, one sample per column
  std::vector<CondId> conds;   ///< per sample; all null for unconditional data
  std::vector<std::uint8_t> outlier;  ///< per sample, 1 for injected duplicates
  int channels = 1;
  int height = 1;
  int width = 0;
  std::vector<Category> categories;  ///< per condition
  std::vector<Mask> masks;           ///< per condition
  std::vector<std::string> mask_provenance;  ///< per condition, human-readable
  std::string name;

  [[nodiscard]] int dim() const { return channels * height * width; }
  [[nodiscard]] int num_conditions() const { return static_cast<int>(categories.size()); }
  [[nodiscard]] Eigen::Index size() const { return samples.cols(); }
  /// Throws std::invalid_argument on any structural inconsistency.
  void validate() const;
};

/// x = A z + sigma eps, z ~ N(0, I_k); unconditional.
[[nodiscard]] Dataset gen_linear_gaussian(const Matrix& A, double sigma, std::size_t n, std::uint64_t seed);

struct DuplicatedOutlierSpec {
  std::size_t N = 10000;
  double rho = 0.005;
  Vector A_row = (Vector(2) << 0.5, 0.0).finished();
  double sigma_data = 3e-2;
  Vector x_dup = (Vector(2) << 2.5, 2.0).finished();
  double sigma_dup = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::size_t outlier_count() const;
};

/// (1 - rho) N samples A z + sigma_data eta on a rank-1 manifold followed by
/// round(rho N) near-duplicates N(x_dup, sigma_dup^2 I).
[[nodiscard]] Dataset gen_duplicated_outlier(const DuplicatedOutlierSpec& spec);

/// Conditional toy benchmark on a C x H x W grid.
///
/// Every condition shares a low-variance background band: its first k_c rows
/// (k_c drawn per condition from [background_rows_min, background_rows_max]) sit at 0 with std
/// background_std. This band is a property of the data distribution, not of
/// memorization, so it carries no ground-truth mask.
///
/// TemplateVerbatim: a random rectangle in rows [template_row_min, H) is pinned
/// to per-condition template values with std template_std; the rest varies.
/// GlobalMem: every coordinate is pinned. NonMem: every coordinate outside the
/// background band varies as mu_c + F z + free_noise_std * eta with a shared
/// rank-free_rank factor F.
struct ToyMemSpec {
  int channels = 1;
  int height = 8;
  int width = 8;
  int n_template = 8;
  int n_global = 8;
  int n_nonmem = 8;
  int samples_per_condition = 200;
  double template_std = 1e-4;
  double template_scale = 1.0;
  int free_rank = 4;
  double free_factor_scale = 0.3;
  double free_noise_std = 0.2;
  double condition_mean_std = 0.1;
  int background_rows_min = 0;
  int background_rows_max = 3;
  double background_std = 1e-3;
  int template_row_min = 3;
  int rect_min = 2;
  int rect_max = 4;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] int dim() const { return channels * height * width; }
  [[nodiscard]] int num_conditions() const { return n_template + n_global + n_nonmem; }
};

/// Per-condition structure of a generated toy dataset.
struct ToyCondition {
  Category category;
  int background_rows;
  Mask mask;
  Vector mean;        ///< per-coordinate location (template, background 0, or mu_c)
  Mask constrained;   ///< coordinates pinned by the data (template or background)
};

[[nodiscard]] std::vector<ToyCondition> toy_conditions(const ToyMemSpec& spec);
[[nodiscard]] Dataset gen_toy_memorization(const ToyMemSpec& spec);

/// Condition indices with each of `include` subsampled (without replacement,
/// order preserved) to the smallest included category size.
[[nodiscard]] std::vector<int> balanced_conditions(const Dataset& ds, std::span<const Category> include,
                                                   std::uint64_t seed);

[[nodiscard]] double mask_fraction(const Mask& m);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& path);
/// JSON listing dimensions, sample counts and, per condition, its category,
/// mask positive fraction and mask provenance.
[[nodiscard]] std::string dataset_manifest(const Dataset& ds);

}  // namespace curvloc::data
