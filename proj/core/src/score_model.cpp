// SPDX-License-Identifier: Apache-2.0
#include "curvloc/score_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "curvloc/binary_io.hpp"
#include "curvloc/random.hpp"

namespace curvloc::model {

namespace {

std::string layer_weight(std::size_t i) { return "W" + std::to_string(i); }
std::string layer_bias(std::size_t i) { return "b" + std::to_string(i); }
constexpr const char* kCondEmbed = "cond_embed";

void append_row_major(std::vector<double>& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  }
}

}  // namespace

void MlpConfig::validate() const {
  if (dim < 1) throw diffusion::ConfigError("model dim must be positive");
  if (hidden.empty()) throw diffusion::ConfigError("model needs at least one hidden layer");
  for (int h : hidden) {
    if (h < 1) throw diffusion::ConfigError("hidden layer sizes must be positive");
  }
  if (num_conditions < 0) throw diffusion::ConfigError("num_conditions must be nonnegative");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
    throw diffusion::ConfigError("time_embed_dim must be a positive even number");
  }
  if (cond_embed_dim < 1) throw diffusion::ConfigError("cond_embed_dim must be positive");
}

std::size_t MlpConfig::param_count() const {
  std::size_t n = 0;
  std::size_t fan_in = static_cast<std::size_t>(input_width());
  for (int h : hidden) {
    n += static_cast<std::size_t>(h) * (fan_in + 1);
    fan_in = static_cast<std::size_t>(h);
  }
  n += static_cast<std::size_t>(dim) * (fan_in + 1);
  n += static_cast<std::size_t>(cond_embed_dim) * static_cast<std::size_t>(num_conditions + 1);
  return n;
}

Matrix time_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Matrix out(dim, static_cast<Eigen::Index>(timesteps.size()));
  for (std::size_t j = 0; j < timesteps.size(); ++j) {
    const double t = static_cast<double>(timesteps[j]);
    for (int k = 0; k < half; ++k) {
      const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      out(k, static_cast<Eigen::Index>(j)) = std::sin(t * w);
      out(half + k, static_cast<Eigen::Index>(j)) = std::cos(t * w);
    }
  }
  return out;
}

MlpDenoiser::MlpDenoiser(MlpConfig config, std::uint64_t schedule_fingerprint)
    : config_(std::move(config)), schedule_fp_(schedule_fingerprint) {
  config_.validate();
  int fan_in = config_.input_width();
  for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
    params_.add(layer_weight(i), config_.hidden[i], fan_in);
    params_.add(layer_bias(i), config_.hidden[i], 1);
    fan_in = config_.hidden[i];
  }
  const std::size_t out = config_.hidden.size();
  params_.add(layer_weight(out), config_.dim, fan_in);
  params_.add(layer_bias(out), config_.dim, 1);
  params_.add(kCondEmbed, config_.cond_embed_dim, config_.num_conditions + 1);
}

int MlpDenoiser::slot_of(CondId c) const {
  if (c == diffusion::kNullCondition) return null_slot();
  if (c < 0 || c >= config_.num_conditions) {
    throw std::invalid_argument("condition id " + std::to_string(c) + " is outside the vocabulary of " +
                                std::to_string(config_.num_conditions));
  }
  return c;
}

ad::NodeId MlpDenoiser::build_eps(ad::Tape& tape, ad::NodeId x, std::span<const int> timesteps,
                                  std::span<const CondId> conds,
                                  std::vector<ad::NodeId>* param_nodes) const {
  const Eigen::Index B = tape.value(x).cols();
  if (tape.value(x).rows() != config_.dim) throw ad::ShapeError("denoiser input has wrong dimension");
  if (static_cast<Eigen::Index>(timesteps.size()) != B || static_cast<Eigen::Index>(conds.size()) != B) {
    throw ad::ShapeError("denoiser needs one timestep and one condition per column");
  }

  std::vector<ad::NodeId> nodes(params_.block_count());
  for (std::size_t i = 0; i < params_.block_count(); ++i) {
    nodes[i] = param_nodes != nullptr ? tape.variable(params_.block(i)) : tape.constant(params_.block(i));
  }
  if (param_nodes != nullptr) *param_nodes = nodes;

  std::vector<int> slots(conds.size());
  for (std::size_t j = 0; j < conds.size(); ++j) slots[j] = slot_of(conds[j]);

  const ad::NodeId parts[3] = {x, tape.constant(time_embedding(timesteps, config_.time_embed_dim)),
                               tape.gather_cols(nodes.back(), std::move(slots))};
  ad::NodeId h = tape.concat_rows(parts);
  const std::size_t L = config_.hidden.size();
  for (std::size_t i = 0; i < L; ++i) h = tape.tanh(tape.affine(nodes[2 * i], h, nodes[2 * i + 1]));
  return tape.affine(nodes[2 * L], h, nodes[2 * L + 1]);
}

MlpDenoiser init_model(const MlpConfig& config, std::uint64_t seed, std::uint64_t schedule_fingerprint) {
  MlpDenoiser model(config, schedule_fingerprint);
  Rng rng = make_rng(seed, {0x1417});
  auto& ps = model.params();
  const std::size_t layers = config.hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    auto w = ps.at(layer_weight(i));
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = uni(rng);
    }
  }
  ps.at(kCondEmbed) = standard_normal(config.cond_embed_dim, config.num_conditions + 1, rng);
  return model;
}

void adam_step(std::vector<double>& params, std::span<const double> grad, AdamState& state,
               const AdamConfig& config) {
  if (grad.size() != params.size()) throw ad::ShapeError("adam_step: gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.steps;
  const double k = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(config.beta1, k);
  const double c2 = 1.0 - std::pow(config.beta2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon);
  }
}

MlpDenoiser Checkpoint::to_model() const {
  MlpDenoiser model(config, schedule_fingerprint);
  if (params.size() != model.params().total_size()) {
    throw CheckpointError("checkpoint parameter count does not match its model config");
  }
  model.params().unflatten(params);
  return model;
}

Checkpoint make_checkpoint(const MlpDenoiser& model, std::uint64_t step, std::optional<AdamState> adam) {
  Checkpoint c;
  c.step = step;
  c.schedule_fingerprint = model.schedule_fingerprint();
  c.config = model.config();
  c.params = model.params().flatten();
  c.adam = std::move(adam);
  return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.magic("CLOC");
  w.u32(ckpt.version);
  w.u64(ckpt.step);
  w.u64(ckpt.schedule_fingerprint);
  w.u32(static_cast<std::uint32_t>(ckpt.config.dim));
  w.u32(static_cast<std::uint32_t>(ckpt.config.num_conditions));
  w.u32(static_cast<std::uint32_t>(ckpt.config.time_embed_dim));
  w.u32(static_cast<std::uint32_t>(ckpt.config.cond_embed_dim));
  w.u32(static_cast<std::uint32_t>(ckpt.config.hidden.size()));
  for (int h : ckpt.config.hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u64(ckpt.params.size());
  w.f64s(ckpt.params);
  w.u8(ckpt.adam.has_value() ? 1 : 0);
  if (ckpt.adam) {
    if (ckpt.adam->m.size() != ckpt.params.size() || ckpt.adam->v.size() != ckpt.params.size()) {
      throw CheckpointError("optimizer state size does not match parameter count");
    }
    w.u64(ckpt.adam->steps);
    w.f64s(ckpt.adam->m);
    w.f64s(ckpt.adam->v);
  }
  return w.bytes();
}

Checkpoint deserialize_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(std::move(bytes), what);
  r.expect_magic("CLOC");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != Checkpoint::kVersion) {
    throw io::FormatError(what + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  c.step = r.u64();
  c.schedule_fingerprint = r.u64();
  c.config.dim = static_cast<int>(r.u32());
  c.config.num_conditions = static_cast<int>(r.u32());
  c.config.time_embed_dim = static_cast<int>(r.u32());
  c.config.cond_embed_dim = static_cast<int>(r.u32());
  const std::uint32_t layers = r.u32();
  if (layers > 64) throw io::FormatError(what + ": implausible hidden layer count");
  c.config.hidden.resize(layers);
  for (auto& h : c.config.hidden) h = static_cast<int>(r.u32());
  try {
    c.config.validate();
  } catch (const diffusion::ConfigError& e) {
    throw io::FormatError(what + ": invalid model config (" + e.what() + ")");
  }
  const std::uint64_t n = r.u64();
  if (n != c.config.param_count()) throw io::FormatError(what + ": parameter count does not match config");
  c.params = r.f64s(n);
  if (r.u8() != 0) {
    AdamState s;
    s.steps = r.u64();
    s.m = r.f64s(n);
    s.v = r.f64s(n);
    c.adam = std::move(s);
  }
  r.expect_end();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file_bytes(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file_bytes(path), path.string());
}

void check_baseline_pair(const Checkpoint& theta, const Checkpoint& baseline) {
  if (theta.schedule_fingerprint != baseline.schedule_fingerprint) {
    throw CheckpointError("baseline checkpoint was trained under a different noise schedule");
  }
  if (!(theta.config == baseline.config)) {
    throw CheckpointError("baseline checkpoint has a different model layout");
  }
  if (baseline.step >= theta.step) {
    throw CheckpointError("baseline checkpoint (step " + std::to_string(baseline.step) +
                          ") must be strictly earlier than the model (step " + std::to_string(theta.step) + ")");
  }
}

TrainingDivergence::TrainingDivergence(std::uint64_t step, const std::string& detail)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + detail), step_(step) {}

double scheduled_learning_rate(double base, LrSchedule schedule, double final_fraction, std::uint64_t step,
                               std::uint64_t total_steps) {
  if (schedule == LrSchedule::Constant || total_steps == 0) return base;
  const double progress = static_cast<double>(step - 1) / static_cast<double>(total_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base * (final_fraction + (1.0 - final_fraction) * cosine);
}

TrainResult train(MlpDenoiser& model, const Matrix& x0, std::span<const CondId> conds,
                  const diffusion::NoiseSchedule& schedule, const TrainOptions& options,
                  const Checkpoint* resume, const std::function<void(const Checkpoint&)>& on_checkpoint) {
  const Eigen::Index N = x0.cols();
  if (N == 0) throw std::invalid_argument("training set is empty");
  if (x0.rows() != model.dim()) throw ad::ShapeError("training data dimension does not match the model");
  if (static_cast<Eigen::Index>(conds.size()) != N) throw ad::ShapeError("one condition per sample is required");
  if (options.batch_size < 1) throw diffusion::ConfigError("batch_size must be positive");
  for (auto s : options.checkpoint_steps) {
    if (s < 1 || s > options.total_steps) throw diffusion::ConfigError("checkpoint steps must lie in [1, total_steps]");
  }

  std::vector<std::uint64_t> emit = options.checkpoint_steps;
  emit.push_back(options.total_steps);
  std::sort(emit.begin(), emit.end());
  emit.erase(std::unique(emit.begin(), emit.end()), emit.end());

  model.set_schedule_fingerprint(schedule.fingerprint());
  AdamState adam;
  std::uint64_t step = 0;
  if (resume != nullptr) {
    if (resume->schedule_fingerprint != schedule.fingerprint()) {
      throw CheckpointError("resume checkpoint was trained under a different noise schedule");
    }
    if (!(resume->config == model.config())) throw CheckpointError("resume checkpoint has a different model layout");
    if (resume->step > options.total_steps) throw diffusion::ConfigError("resume step exceeds total_steps");
    model.params().unflatten(resume->params);
    if (resume->adam) adam = *resume->adam;
    step = resume->step;
  }

  TrainResult result;
  auto emit_checkpoint = [&](std::uint64_t s) {
    result.checkpoints.push_back(make_checkpoint(model, s, adam));
    if (on_checkpoint) on_checkpoint(result.checkpoints.back());
  };
  if (options.total_steps == step && std::binary_search(emit.begin(), emit.end(), step)) emit_checkpoint(step);

  std::vector<double> flat = model.params().flatten();
  std::vector<double> grad;
  grad.reserve(flat.size());
  const auto B = static_cast<Eigen::Index>(options.batch_size);
  diffusion::TrainingBatch batch;
  batch.x0.resize(x0.rows(), B);
  batch.conds.resize(static_cast<std::size_t>(B));

  while (step < options.total_steps) {
    const std::uint64_t next = step + 1;
    Rng rng = make_rng(options.seed, {0x7241, next});
    std::uniform_int_distribution<Eigen::Index> pick(0, N - 1);
    for (Eigen::Index j = 0; j < B; ++j) {
      const Eigen::Index i = pick(rng);
      batch.x0.col(j) = x0.col(i);
      batch.conds[static_cast<std::size_t>(j)] = conds[static_cast<std::size_t>(i)];
    }

    double loss_value = 0.0;
    try {
      auto loss = diffusion::training_loss(model, batch, schedule, rng, options.cond_dropout);
      loss_value = loss.value;
      loss.tape.backward(loss.loss);
      grad.clear();
      for (auto node : loss.param_nodes) append_row_major(grad, loss.tape.grad(node));
    } catch (const ad::NumericError& e) {
      throw TrainingDivergence(next, e.what());
    }
    if (!std::isfinite(loss_value)) throw TrainingDivergence(next, "non-finite loss");

    AdamConfig step_config = options.adam;
    step_config.learning_rate = scheduled_learning_rate(options.adam.learning_rate, options.lr_schedule,
                                                        options.final_lr_fraction, next, options.total_steps);
    adam_step(flat, grad, adam, step_config);
    model.params().unflatten(flat);
    if (!model.params().all_finite()) throw TrainingDivergence(next, "non-finite parameters after update");

    step = next;
    if (options.log_interval > 0 && step % options.log_interval == 0) result.log.push_back({step, loss_value});
    if (std::binary_search(emit.begin(), emit.end(), step)) emit_checkpoint(step);
  }
  return result;
}

}  // namespace curvloc::model
