// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>

#include "curvloc/autodiff.hpp"

/// Closed-form linear-Gaussian models. Everything here is exact and serves as
/// ground truth for the estimators elsewhere in the library.
namespace curvloc::gaussian {

class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A covariance produced by the curvature/covariance identity was not PSD.
class PropositionViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// x = A z + eps with z ~ N(0, I_k) and eps ~ N(0, sigma^2 I_d).
struct LinearGaussianModel {
  Matrix A;
  double sigma = 0.1;

  void validate() const;
  [[nodiscard]] Eigen::Index dim() const { return A.rows(); }
};

struct GaussianDensity {
  Vector mean;
  Matrix cov;

  void validate() const;
  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }
};

/// Two pixels carry both degrees of freedom, two pixels are fixed.
[[nodiscard]] LinearGaussianModel verbatim_model(double sigma = 0.1);
/// Same rank and Frobenius norm as `verbatim_model`, with dense rows.
[[nodiscard]] LinearGaussianModel concept_model(double sigma = 0.1);

/// Inverse of a symmetric positive-definite matrix; throws ConditioningError
/// when the Cholesky factorization fails or rcond < 1e-14.
[[nodiscard]] Matrix spd_inverse(const Matrix& m);

[[nodiscard]] Matrix marginal_cov(const LinearGaussianModel& model);
/// diag((A A^T + sigma^2 I)^{-1}), i.e. -diag of the log-density Hessian.
[[nodiscard]] Vector coord_curvature(const LinearGaussianModel& model);
[[nodiscard]] GaussianDensity density_of(const LinearGaussianModel& model);

/// Law of a_t x0 + sigma_t eps for x0 ~ density.
[[nodiscard]] GaussianDensity diffuse(const GaussianDensity& density, double a_t, double sigma_t);
[[nodiscard]] Vector gaussian_score(const GaussianDensity& density, const Vector& x);
[[nodiscard]] Matrix gaussian_hessian(const GaussianDensity& density);

/// E[x0 | x_t] from the score of the diffused marginal.
[[nodiscard]] Vector posterior_mean_tweedie(const GaussianDensity& density_x0, const Vector& x_t,
                                            double a_t, double sigma_t);
/// E[x0 | x_t] by direct Gaussian conditioning.
[[nodiscard]] Vector posterior_mean_conditioning(const GaussianDensity& density_x0,
                                                 const Vector& x_t, double a_t, double sigma_t);

/// Cov[x0 | x_t] = (sigma_t^4 H + sigma_t^2 I) / a_t^2 with H the Hessian of
/// log p(x_t).
[[nodiscard]] Matrix posterior_cov_prop1(const Matrix& hessian_pt, double a_t, double sigma_t);
/// Cov[x0 | x_t] = sigma_t^2 Sigma (a_t^2 Sigma + sigma_t^2 I)^{-1} by conditioning.
[[nodiscard]] Matrix posterior_cov_conditioning(const Matrix& sigma0, double a_t, double sigma_t);

struct FisherCheck {
  Vector analytic_diag;
  Vector mc_diag;
  /// Standard error of each entry of mc_diag.
  Vector mc_stderr;
};

/// For p(c | x) = N(B x, noise_cov), compares diag(B^T noise_cov^{-1} B) with the
/// Monte-Carlo mean of the elementwise-squared score over c ~ p(c | x).
[[nodiscard]] FisherCheck fisher_identity_check(const Matrix& B, const Matrix& noise_cov,
                                                const Vector& x, std::size_t n_samples,
                                                std::uint64_t seed);

}  // namespace curvloc::gaussian
