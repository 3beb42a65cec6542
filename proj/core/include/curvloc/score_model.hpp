// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "curvloc/autodiff.hpp"
#include "curvloc/diffusion.hpp"

namespace curvloc::model {

using diffusion::CondId;

struct MlpConfig {
  int dim = 2;
  std::vector<int> hidden{128, 128, 128};
  /// Real conditions are 0..num_conditions-1; the null token is stored after them.
  int num_conditions = 0;
  int time_embed_dim = 32;
  int cond_embed_dim = 16;

  void validate() const;
  [[nodiscard]] int input_width() const { return dim + time_embed_dim + cond_embed_dim; }
  /// Closed-form parameter count for this layout.
  [[nodiscard]] std::size_t param_count() const;
  bool operator==(const MlpConfig&) const = default;
};

/// Sinusoidal embedding [sin(t w_k), cos(t w_k)], w_k = 10000^(-k / (dim/2)).
[[nodiscard]] Matrix time_embedding(std::span<const int> timesteps, int dim);

/// tanh MLP on [x; time embedding; condition embedding] predicting epsilon.
class MlpDenoiser final : public diffusion::EpsModel {
 public:
  MlpDenoiser() = default;
  explicit MlpDenoiser(MlpConfig config, std::uint64_t schedule_fingerprint = 0);

  [[nodiscard]] Eigen::Index dim() const override { return config_.dim; }
  [[nodiscard]] ad::NodeId build_eps(ad::Tape& tape, ad::NodeId x, std::span<const int> timesteps,
                                     std::span<const CondId> conds,
                                     std::vector<ad::NodeId>* param_nodes = nullptr) const override;
  [[nodiscard]] std::uint64_t schedule_fingerprint() const override { return schedule_fp_; }
  void set_schedule_fingerprint(std::uint64_t fp) { schedule_fp_ = fp; }

  [[nodiscard]] const MlpConfig& config() const { return config_; }
  [[nodiscard]] ad::ParamStore& params() { return params_; }
  [[nodiscard]] const ad::ParamStore& params() const { return params_; }
  /// Column of the embedding table used for the null condition.
  [[nodiscard]] int null_slot() const { return config_.num_conditions; }

 private:
  [[nodiscard]] int slot_of(CondId c) const;

  MlpConfig config_;
  ad::ParamStore params_;
  std::uint64_t schedule_fp_ = 0;
};

/// Weights uniform in +-1/sqrt(fan_in), zero biases, N(0, 1) condition embeddings.
[[nodiscard]] MlpDenoiser init_model(const MlpConfig& config, std::uint64_t seed,
                                     std::uint64_t schedule_fingerprint = 0);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t steps = 0;

  [[nodiscard]] bool empty() const { return m.empty(); }
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::vector<double>& params, std::span<const double> grad, AdamState& state,
               const AdamConfig& config);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t step = 0;
  std::uint64_t schedule_fingerprint = 0;
  MlpConfig config;
  std::vector<double> params;
  std::optional<AdamState> adam;

  [[nodiscard]] MlpDenoiser to_model() const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[nodiscard]] Checkpoint make_checkpoint(const MlpDenoiser& model, std::uint64_t step,
                                         std::optional<AdamState> adam = std::nullopt);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
[[nodiscard]] Checkpoint load_checkpoint(const std::filesystem::path& path);
[[nodiscard]] std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
[[nodiscard]] Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes,
                                                const std::string& what = "checkpoint");

/// Rejects a (theta, theta-tilde) pair unless the baseline is strictly earlier
/// and both share a schedule fingerprint and model layout.
void check_baseline_pair(const Checkpoint& theta, const Checkpoint& baseline);

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(std::uint64_t step, const std::string& detail);
  [[nodiscard]] std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

enum class LrSchedule : std::uint8_t { Constant, Cosine };

/// Step size for the update that produces step `step` (1-based). Cosine decays
/// from the base rate to `final_fraction` times it at `total_steps`.
[[nodiscard]] double scheduled_learning_rate(double base, LrSchedule schedule, double final_fraction,
                                             std::uint64_t step, std::uint64_t total_steps);

struct TrainOptions {
  std::uint64_t total_steps = 60000;
  std::vector<std::uint64_t> checkpoint_steps;
  int batch_size = 128;
  double cond_dropout = 0.1;
  AdamConfig adam;
  LrSchedule lr_schedule = LrSchedule::Constant;
  double final_lr_fraction = 0.0;
  std::uint64_t seed = 0;
  /// Record the loss every `log_interval` steps (0 disables logging).
  std::uint64_t log_interval = 100;
};

struct LossRecord {
  std::uint64_t step;
  double loss;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  ///< requested steps plus the final one
  std::vector<LossRecord> log;
};

/// Minibatch Adam on the denoising loss. The batch and noise at step k are
/// drawn from a stream keyed by (seed, k), so resuming from a checkpoint that
/// carries optimizer state reproduces an uninterrupted run bitwise.
/// `x0` is d x N with one condition id per column.
[[nodiscard]] TrainResult train(MlpDenoiser& model, const Matrix& x0, std::span<const CondId> conds,
                                const diffusion::NoiseSchedule& schedule, const TrainOptions& options,
                                const Checkpoint* resume = nullptr,
                                const std::function<void(const Checkpoint&)>& on_checkpoint = {});

}  // namespace curvloc::model
