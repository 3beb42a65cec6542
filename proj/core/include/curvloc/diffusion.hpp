// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "curvloc/autodiff.hpp"
#include "curvloc/random.hpp"

namespace curvloc::diffusion {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Condition identifier; `kNullCondition` selects the unconditional branch.
using CondId = int;
inline constexpr CondId kNullCondition = -1;

/// Discrete forward process. Timesteps run 1..T; timestep 0 denotes clean
/// data (signal 1, noise 0).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(Vector betas);

  [[nodiscard]] int steps() const { return static_cast<int>(beta_.size()); }
  [[nodiscard]] double beta(int t) const { return beta_(index(t)); }
  [[nodiscard]] double alpha(int t) const { return alpha_(index(t)); }
  [[nodiscard]] double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_(index(t)); }
  /// a_t = sqrt(alpha_bar_t).
  [[nodiscard]] double signal(int t) const { return t == 0 ? 1.0 : signal_(index(t)); }
  /// sigma_t = sqrt(1 - alpha_bar_t).
  [[nodiscard]] double noise_std(int t) const { return t == 0 ? 0.0 : noise_std_(index(t)); }

  [[nodiscard]] const Vector& betas() const { return beta_; }
  /// FNV-1a over the little-endian bytes of the beta vector.
  [[nodiscard]] std::uint64_t fingerprint() const;

 private:
  [[nodiscard]] Eigen::Index index(int t) const;

  Vector beta_, alpha_, alpha_bar_, signal_, noise_std_;
};

/// Betas linearly interpolated from beta_start (t = 1) to beta_end (t = T).
[[nodiscard]] NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4,
                                                 double beta_end = 0.02);

/// a_t x0 + sigma_t eps.
[[nodiscard]] Vector forward_sample(const Vector& x0, int t, const NoiseSchedule& schedule, Rng& rng);

/// An epsilon-prediction network. `build_eps` records the prediction for a
/// d x B batch on a tape so callers can differentiate it. Parameters enter
/// the tape as variables only when `param_nodes` is non-null.
class EpsModel {
 public:
  virtual ~EpsModel() = default;

  [[nodiscard]] virtual Eigen::Index dim() const = 0;
  [[nodiscard]] virtual ad::NodeId build_eps(ad::Tape& tape, ad::NodeId x,
                                             std::span<const int> timesteps,
                                             std::span<const CondId> conds,
                                             std::vector<ad::NodeId>* param_nodes = nullptr) const = 0;
  [[nodiscard]] virtual Vector predict_eps(const Vector& x, int t, CondId c) const;
  [[nodiscard]] virtual Matrix predict_eps_batch(const Matrix& x, std::span<const int> timesteps,
                                                 std::span<const CondId> conds) const;
  /// Fingerprint of the schedule the model was trained under; 0 when unknown.
  [[nodiscard]] virtual std::uint64_t schedule_fingerprint() const { return 0; }
};

struct TrainingBatch {
  Matrix x0;  ///< d x B
  std::vector<CondId> conds;
};

struct TrainingLoss {
  ad::Tape tape;
  ad::NodeId loss;
  std::vector<ad::NodeId> param_nodes;
  double value = 0.0;
};

/// Mean over the batch of ||eps_hat(x_t, t, c') - eps||^2 with t uniform on
/// [1, T] and c' replaced by the null condition with probability cond_dropout.
[[nodiscard]] TrainingLoss training_loss(const EpsModel& model, const TrainingBatch& batch,
                                         const NoiseSchedule& schedule, Rng& rng,
                                         double cond_dropout);

/// s = -eps / sigma_t.
[[nodiscard]] Vector score_from_eps(const Vector& eps_hat, double sigma_t);

struct SamplerConfig {
  int inference_steps = 50;
  double cfg_scale = 7.5;
  /// Timestep at which sampling stops and the current state is returned.
  /// 1 is the final sampling step; 0 runs the chain to clean data.
  int stop_timestep = 1;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& schedule) const;
};

/// Uniform-stride DDIM timesteps 1, 1 + s, ..., 1 + (n - 1) s with s = T / n,
/// returned in descending order.
[[nodiscard]] std::vector<int> ddim_timesteps(int T, int inference_steps);

/// Timestep reached after `step_index` DDIM updates (0 = the initial noise
/// state, n - 1 = the final sampling step).
[[nodiscard]] int timestep_for_step_index(int T, int inference_steps, int step_index);

struct SampleResult {
  Vector state;              ///< x at `timestep`
  int timestep = 0;          ///< timestep of `state`
  int updates = 0;           ///< DDIM updates applied
  std::vector<int> visited;  ///< timesteps at which the model was evaluated
  double max_abs_state = 0;  ///< largest |x| seen along the trajectory
};

/// Deterministic DDIM (eta = 0) with classifier-free guidance
/// eps = eps(x, t, null) + w (eps(x, t, c) - eps(x, t, null)). Noise is drawn
/// only for the initial state.
[[nodiscard]] SampleResult ddim_sample_cfg(const EpsModel& model, CondId cond,
                                           const NoiseSchedule& schedule,
                                           const SamplerConfig& config, Rng& rng);

/// Guided epsilon at (x, t); skips the unconditional branch when w == 1 or
/// the condition is null.
[[nodiscard]] Vector guided_eps(const EpsModel& model, const Vector& x, int t, CondId cond,
                                double cfg_scale);

}  // namespace curvloc::diffusion
