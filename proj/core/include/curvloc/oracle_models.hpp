// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "curvloc/diffusion.hpp"
#include "curvloc/gaussian.hpp"

namespace curvloc::oracle {

/// Exact epsilon-predictor for Gaussian data: condition c has density
/// `conditional[c]` and the null condition has density `marginal`, so
/// eps(x, t, c) = sigma_t Sigma_t^{-1} (x - a_t mu) with Sigma_t = a_t^2 Sigma + sigma_t^2 I.
/// A batch must share one timestep and one condition.
class GaussianEpsModel final : public diffusion::EpsModel {
 public:
  GaussianEpsModel(gaussian::GaussianDensity marginal, std::vector<gaussian::GaussianDensity> conditional,
                   diffusion::NoiseSchedule schedule)
      : marginal_(std::move(marginal)), conditional_(std::move(conditional)), schedule_(std::move(schedule)) {
    marginal_.validate();
    for (const auto& c : conditional_) {
      c.validate();
      if (c.dim() != marginal_.dim()) throw ad::ShapeError("conditional density has the wrong dimension");
    }
  }

  [[nodiscard]] Eigen::Index dim() const override { return marginal_.dim(); }
  [[nodiscard]] std::uint64_t schedule_fingerprint() const override { return schedule_.fingerprint(); }

  [[nodiscard]] ad::NodeId build_eps(ad::Tape& tape, ad::NodeId x, std::span<const int> timesteps,
                                     std::span<const diffusion::CondId> conds,
                                     std::vector<ad::NodeId>* param_nodes = nullptr) const override {
    const auto B = static_cast<std::size_t>(tape.value(x).cols());
    if (timesteps.size() != B || conds.size() != B || B == 0) {
      throw ad::ShapeError("oracle model needs one timestep and one condition per column");
    }
    for (std::size_t j = 1; j < B; ++j) {
      if (timesteps[j] != timesteps[0] || conds[j] != conds[0]) {
        throw std::invalid_argument("oracle model batches must share timestep and condition");
      }
    }
    if (param_nodes != nullptr) param_nodes->clear();
    const auto [W, b] = affine_map(timesteps[0], conds[0]);
    return tape.affine(tape.constant(W), x, tape.constant(b));
  }

  /// Evaluates columns independently, so batches may mix timesteps and conditions.
  [[nodiscard]] Matrix predict_eps_batch(const Matrix& x, std::span<const int> timesteps,
                                         std::span<const diffusion::CondId> conds) const override {
    if (timesteps.size() != static_cast<std::size_t>(x.cols()) || conds.size() != timesteps.size()) {
      throw ad::ShapeError("oracle model needs one timestep and one condition per column");
    }
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const auto [W, b] = affine_map(timesteps[static_cast<std::size_t>(j)], conds[static_cast<std::size_t>(j)]);
      out.col(j) = W * x.col(j) + b.col(0);
    }
    return out;
  }

  /// Law of x_t under condition c.
  [[nodiscard]] gaussian::GaussianDensity diffused(int t, diffusion::CondId c) const {
    return gaussian::diffuse(density(c), schedule_.signal(t), schedule_.noise_std(t));
  }

  [[nodiscard]] const gaussian::GaussianDensity& density(diffusion::CondId c) const {
    if (c == diffusion::kNullCondition) return marginal_;
    if (c < 0 || static_cast<std::size_t>(c) >= conditional_.size()) {
      throw std::invalid_argument("oracle model has no condition " + std::to_string(c));
    }
    return conditional_[static_cast<std::size_t>(c)];
  }

 private:
  [[nodiscard]] std::pair<Matrix, Matrix> affine_map(int t, diffusion::CondId c) const {
    const auto pt = diffused(t, c);
    const double sigma = schedule_.noise_std(t);
    Matrix W = sigma * gaussian::spd_inverse(pt.cov);
    Matrix b = -(W * pt.mean);
    return {std::move(W), std::move(b)};
  }

  gaussian::GaussianDensity marginal_;
  std::vector<gaussian::GaussianDensity> conditional_;
  diffusion::NoiseSchedule schedule_;
};

/// Model that ignores its input and returns a fixed epsilon.
class ConstantEpsModel final : public diffusion::EpsModel {
 public:
  explicit ConstantEpsModel(Vector eps) : eps_(std::move(eps)) {}

  [[nodiscard]] Eigen::Index dim() const override { return eps_.size(); }
  [[nodiscard]] ad::NodeId build_eps(ad::Tape& tape, ad::NodeId x, std::span<const int>,
                                     std::span<const diffusion::CondId>,
                                     std::vector<ad::NodeId>* param_nodes = nullptr) const override {
    if (param_nodes != nullptr) param_nodes->clear();
    const Matrix zero = Matrix::Zero(eps_.size(), tape.value(x).rows());
    return tape.affine(tape.constant(zero), x, tape.constant(Matrix(eps_)));
  }

 private:
  Vector eps_;
};

}  // namespace curvloc::oracle
