// SPDX-License-Identifier: Apache-2.0
#include "curvloc/diffusion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

namespace curvloc::diffusion {

NoiseSchedule::NoiseSchedule(Vector betas) : beta_(std::move(betas)) {
  const Eigen::Index T = beta_.size();
  if (T < 1) throw ConfigError("schedule needs at least one step");
  for (Eigen::Index i = 0; i < T; ++i) {
    if (!(beta_(i) > 0.0 && beta_(i) < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    if (i > 0 && beta_(i) < beta_(i - 1)) throw ConfigError("betas must be nondecreasing");
  }
  alpha_ = (1.0 - beta_.array()).matrix();
  alpha_bar_.resize(T);
  double prod = 1.0;
  for (Eigen::Index i = 0; i < T; ++i) {
    prod *= alpha_(i);
    alpha_bar_(i) = prod;
  }
  signal_ = alpha_bar_.cwiseSqrt();
  noise_std_ = (1.0 - alpha_bar_.array()).sqrt().matrix();
}

Eigen::Index NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return t - 1;
}

std::uint64_t NoiseSchedule::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < beta_.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(beta_(i));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule length must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  }
  Vector betas(T);
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas(i) = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas));
}

Vector forward_sample(const Vector& x0, int t, const NoiseSchedule& schedule, Rng& rng) {
  const Vector eps = standard_normal(x0.size(), rng);
  return schedule.signal(t) * x0 + schedule.noise_std(t) * eps;
}

Vector EpsModel::predict_eps(const Vector& x, int t, CondId c) const {
  const int ts[1] = {t};
  const CondId cs[1] = {c};
  return predict_eps_batch(x, ts, cs).col(0);
}

Matrix EpsModel::predict_eps_batch(const Matrix& x, std::span<const int> timesteps,
                                   std::span<const CondId> conds) const {
  ad::Tape tape;
  const ad::NodeId in = tape.constant(x);
  return tape.value(build_eps(tape, in, timesteps, conds));
}

TrainingLoss training_loss(const EpsModel& model, const TrainingBatch& batch,
                           const NoiseSchedule& schedule, Rng& rng, double cond_dropout) {
  const Eigen::Index d = batch.x0.rows();
  const Eigen::Index B = batch.x0.cols();
  if (B == 0) throw std::invalid_argument("training batch is empty");
  if (static_cast<Eigen::Index>(batch.conds.size()) != B) {
    throw ad::ShapeError("training batch condition count mismatch");
  }

  std::uniform_int_distribution<int> pick_t(1, schedule.steps());
  std::bernoulli_distribution drop(std::clamp(cond_dropout, 0.0, 1.0));
  std::vector<int> ts(static_cast<std::size_t>(B));
  std::vector<CondId> cs(static_cast<std::size_t>(B));
  for (Eigen::Index j = 0; j < B; ++j) {
    ts[static_cast<std::size_t>(j)] = pick_t(rng);
    const bool dropped = drop(rng);
    cs[static_cast<std::size_t>(j)] = dropped ? kNullCondition : batch.conds[static_cast<std::size_t>(j)];
  }
  const Matrix eps = standard_normal(d, B, rng);
  Matrix xt(d, B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const int t = ts[static_cast<std::size_t>(j)];
    xt.col(j) = schedule.signal(t) * batch.x0.col(j) + schedule.noise_std(t) * eps.col(j);
  }

  TrainingLoss out;
  const ad::NodeId x_node = out.tape.constant(std::move(xt));
  const ad::NodeId pred = model.build_eps(out.tape, x_node, ts, cs, &out.param_nodes);
  const ad::NodeId resid = out.tape.sub(pred, out.tape.constant(eps));
  out.loss = out.tape.scale(out.tape.sum_squares(resid), 1.0 / static_cast<double>(B));
  out.value = out.tape.scalar(out.loss);
  return out;
}

Vector score_from_eps(const Vector& eps_hat, double sigma_t) {
  if (!(sigma_t > 0.0)) throw std::domain_error("score_from_eps: sigma_t must be positive");
  return -eps_hat / sigma_t;
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (inference_steps < 1 || inference_steps > schedule.steps()) {
    throw ConfigError("inference_steps must be in [1, T]");
  }
  if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be nonnegative");
  if (stop_timestep < 0 || stop_timestep >= schedule.steps()) {
    throw ConfigError("stop_timestep must be in [0, T)");
  }
}

std::vector<int> ddim_timesteps(int T, int inference_steps) {
  if (inference_steps < 1 || inference_steps > T) throw ConfigError("inference_steps must be in [1, T]");
  const int stride = T / inference_steps;
  std::vector<int> ts(static_cast<std::size_t>(inference_steps));
  for (int i = 0; i < inference_steps; ++i) {
    ts[static_cast<std::size_t>(inference_steps - 1 - i)] = 1 + i * stride;
  }
  return ts;
}

int timestep_for_step_index(int T, int inference_steps, int step_index) {
  const auto ts = ddim_timesteps(T, inference_steps);
  if (step_index < 0 || step_index > inference_steps) throw ConfigError("DDIM step index out of range");
  if (step_index == inference_steps) return 0;
  return ts[static_cast<std::size_t>(step_index)];
}

Vector guided_eps(const EpsModel& model, const Vector& x, int t, CondId cond, double cfg_scale) {
  if (cond == kNullCondition) return model.predict_eps(x, t, kNullCondition);
  if (cfg_scale == 1.0) return model.predict_eps(x, t, cond);
  const int ts[2] = {t, t};
  const CondId cs[2] = {kNullCondition, cond};
  Matrix xx(x.size(), 2);
  xx.col(0) = x;
  xx.col(1) = x;
  const Matrix e = model.predict_eps_batch(xx, ts, cs);
  return e.col(0) + cfg_scale * (e.col(1) - e.col(0));
}

SampleResult ddim_sample_cfg(const EpsModel& model, CondId cond, const NoiseSchedule& schedule,
                             const SamplerConfig& config, Rng& rng) {
  config.validate(schedule);
  const auto ts = ddim_timesteps(schedule.steps(), config.inference_steps);

  SampleResult out;
  Vector x = standard_normal(model.dim(), rng);
  out.max_abs_state = x.cwiseAbs().maxCoeff();
  int current = ts.front();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (current <= config.stop_timestep) break;
    const int t = ts[i];
    const int prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Vector eps = guided_eps(model, x, t, cond, config.cfg_scale);
    out.visited.push_back(t);

    const double a_t = schedule.signal(t);
    const double s_t = schedule.noise_std(t);
    const double a_p = schedule.signal(prev);
    const double s_p = schedule.noise_std(prev);
    const Vector x0_hat = (x - s_t * eps) / a_t;
    x = a_p * x0_hat + s_p * eps;
    if (!x.allFinite()) throw ad::NumericError("DDIM state became non-finite at timestep " + std::to_string(t));
    out.max_abs_state = std::max(out.max_abs_state, x.cwiseAbs().maxCoeff());
    current = prev;
    ++out.updates;
  }
  out.state = std::move(x);
  out.timestep = current;
  return out;
}

}  // namespace curvloc::diffusion
