// SPDX-License-Identifier: Apache-2.0
#include "curvloc/gaussian.hpp"

#include <cmath>
#include <string>

#include "curvloc/random.hpp"

namespace curvloc::gaussian {

namespace {

constexpr double kMinRcond = 1e-14;
constexpr double kPsdTolerance = 1e-9;

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) throw ad::ShapeError(std::string(what) + " must be square");
}

}  // namespace

void LinearGaussianModel::validate() const {
  if (!(sigma > 0.0)) throw std::invalid_argument("linear-Gaussian model needs sigma > 0");
  if (A.rows() == 0) throw ad::ShapeError("mixing matrix has no rows");
  if (!A.allFinite()) throw std::invalid_argument("mixing matrix has non-finite entries");
}

void GaussianDensity::validate() const {
  require_square(cov, "covariance");
  if (cov.rows() != mean.size()) throw ad::ShapeError("mean/covariance dimension mismatch");
  if (!(cov - cov.transpose()).isZero(1e-12 * std::max(1.0, cov.cwiseAbs().maxCoeff()))) {
    throw std::invalid_argument("covariance is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() <= 1e-12) {
    throw std::invalid_argument("covariance is not positive definite");
  }
}

LinearGaussianModel verbatim_model(double sigma) {
  Matrix A = Matrix::Zero(4, 2);
  A(0, 0) = 1.0;
  A(1, 1) = 1.0;
  return {A, sigma};
}

LinearGaussianModel concept_model(double sigma) {
  Matrix A(4, 2);
  A << 1, 1, 1, -1, 1, 1, 1, -1;
  return {0.5 * A, sigma};
}

Matrix spd_inverse(const Matrix& m) {
  require_square(m, "spd_inverse input");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    throw ConditioningError("matrix is not positive definite (Cholesky failed)");
  }
  const double rcond = llt.rcond();
  if (!(rcond >= kMinRcond)) {
    throw ConditioningError("matrix is too ill-conditioned to invert (rcond=" + std::to_string(rcond) + ")");
  }
  return llt.solve(Matrix::Identity(m.rows(), m.cols()));
}

Matrix marginal_cov(const LinearGaussianModel& model) {
  model.validate();
  Matrix cov = model.A * model.A.transpose();
  cov.diagonal().array() += model.sigma * model.sigma;
  return cov;
}

Vector coord_curvature(const LinearGaussianModel& model) {
  return spd_inverse(marginal_cov(model)).diagonal();
}

GaussianDensity density_of(const LinearGaussianModel& model) {
  return {Vector::Zero(model.dim()), marginal_cov(model)};
}

GaussianDensity diffuse(const GaussianDensity& density, double a_t, double sigma_t) {
  if (!(a_t > 0.0 && a_t <= 1.0)) throw std::invalid_argument("diffuse: need 0 < a_t <= 1");
  if (!(sigma_t >= 0.0)) throw std::invalid_argument("diffuse: need sigma_t >= 0");
  GaussianDensity out{a_t * density.mean, a_t * a_t * density.cov};
  out.cov.diagonal().array() += sigma_t * sigma_t;
  return out;
}

Vector gaussian_score(const GaussianDensity& density, const Vector& x) {
  if (x.size() != density.dim()) throw ad::ShapeError("gaussian_score: dimension mismatch");
  return -(spd_inverse(density.cov) * (x - density.mean));
}

Matrix gaussian_hessian(const GaussianDensity& density) { return -spd_inverse(density.cov); }

Vector posterior_mean_tweedie(const GaussianDensity& density_x0, const Vector& x_t, double a_t,
                              double sigma_t) {
  if (!(a_t > 0.0)) throw std::invalid_argument("posterior mean needs a_t > 0");
  if (sigma_t == 0.0) return x_t / a_t;
  const GaussianDensity pt = diffuse(density_x0, a_t, sigma_t);
  return (x_t + sigma_t * sigma_t * gaussian_score(pt, x_t)) / a_t;
}

Vector posterior_mean_conditioning(const GaussianDensity& density_x0, const Vector& x_t,
                                   double a_t, double sigma_t) {
  const GaussianDensity pt = diffuse(density_x0, a_t, sigma_t);
  // Cross-covariance of (x0, x_t) is a_t Sigma.
  const Matrix gain = a_t * density_x0.cov * spd_inverse(pt.cov);
  return density_x0.mean + gain * (x_t - pt.mean);
}

Matrix posterior_cov_prop1(const Matrix& hessian_pt, double a_t, double sigma_t) {
  require_square(hessian_pt, "Hessian");
  if (!(a_t > 0.0)) throw std::invalid_argument("posterior covariance needs a_t > 0");
  // The log-density of a Gaussian is concave.
  {
    const Matrix hs = 0.5 * (hessian_pt + hessian_pt.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(hs, Eigen::EigenvaluesOnly);
    const double max_eig = eig.eigenvalues().maxCoeff();
    if (max_eig > kPsdTolerance) {
      throw PropositionViolation("Hessian has positive eigenvalue " + std::to_string(max_eig) +
                                 "; a Gaussian log-density is concave");
    }
  }
  const double s2 = sigma_t * sigma_t;
  Matrix cov = s2 * s2 * hessian_pt;
  cov.diagonal().array() += s2;
  cov /= a_t * a_t;
  const Matrix sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  const double min_eig = eig.eigenvalues().minCoeff();
  if (min_eig < -kPsdTolerance) {
    throw PropositionViolation("posterior covariance has eigenvalue " + std::to_string(min_eig) +
                               "; the supplied Hessian is inconsistent with a Gaussian posterior");
  }
  return cov;
}

Matrix posterior_cov_conditioning(const Matrix& sigma0, double a_t, double sigma_t) {
  require_square(sigma0, "data covariance");
  const double s2 = sigma_t * sigma_t;
  if (s2 == 0.0) return Matrix::Zero(sigma0.rows(), sigma0.cols());
  Matrix pt = a_t * a_t * sigma0;
  pt.diagonal().array() += s2;
  return s2 * sigma0 * spd_inverse(pt);
}

FisherCheck fisher_identity_check(const Matrix& B, const Matrix& noise_cov, const Vector& x,
                                  std::size_t n_samples, std::uint64_t seed) {
  require_square(noise_cov, "noise covariance");
  if (B.rows() != noise_cov.rows() || B.cols() != x.size()) {
    throw ad::ShapeError("fisher_identity_check: inconsistent B / noise / x shapes");
  }
  if (n_samples == 0) throw std::invalid_argument("fisher_identity_check: need at least one sample");

  const Matrix noise_inv = spd_inverse(noise_cov);
  FisherCheck out;
  out.analytic_diag = (B.transpose() * noise_inv * B).diagonal();

  // c = B x + L xi, so grad_x log p(c|x) = B^T Sigma^{-1} (c - B x) = B^T Sigma^{-1} L xi.
  const Eigen::LLT<Matrix> llt(noise_cov);
  const Matrix score_map = B.transpose() * noise_inv * Matrix(llt.matrixL());

  Rng rng(seed);
  const Eigen::Index m = noise_cov.rows();
  Vector sum = Vector::Zero(x.size());
  Vector sum_sq = Vector::Zero(x.size());
  for (std::size_t i = 0; i < n_samples; ++i) {
    const Vector xi = standard_normal(m, rng);
    const Vector sq = (score_map * xi).array().square().matrix();
    sum += sq;
    sum_sq += sq.cwiseProduct(sq);
  }
  const double n = static_cast<double>(n_samples);
  out.mc_diag = sum / n;
  const Vector var = (sum_sq / n - out.mc_diag.cwiseProduct(out.mc_diag)).cwiseMax(0.0);
  out.mc_stderr = (var / n).cwiseSqrt();
  return out;
}

}  // namespace curvloc::gaussian
