// train.hpp: teacher-forced training of the association model on random
// windows of consecutive frames.

#pragma once

#include "softtrack/autodiff.hpp"
#include "softtrack/checkpoint.hpp"
#include "softtrack/model.hpp"
#include "softtrack/random.hpp"
#include "softtrack/sequence.hpp"
#include "softtrack/tracker.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

struct TrainingConfig
{
  int epochs = 5;
  int steps_per_epoch = 0;  // 0: one window per training sequence per epoch
  int batch_size = 16;
  int window = 32;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (epochs < 0 || steps_per_epoch < 0) throw std::invalid_argument("TrainingConfig: negative epoch or step count");
    if (batch_size < 1 || window < 2) throw std::invalid_argument("TrainingConfig: batch_size >= 1 and window >= 2 required");
    if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("TrainingConfig: need learning_rate > 0 and 0 <= momentum < 1");
    }
  }

  int steps_for(std::size_t num_sequences) const
  {
    if (steps_per_epoch > 0) return steps_per_epoch;
    return static_cast<int>((num_sequences + static_cast<std::size_t>(batch_size) - 1) /
                            static_cast<std::size_t>(batch_size));
  }
};

inline nlohmann::json to_json(const TrainingConfig& c)
{
  return {{"epochs", c.epochs},         {"steps_per_epoch", c.steps_per_epoch}, {"batch_size", c.batch_size},
          {"window", c.window},         {"learning_rate", c.learning_rate},     {"momentum", c.momentum},
          {"seed", c.seed}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j, TrainingConfig c = {})
{
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.window = j.value("window", c.window);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

class NonFiniteLoss : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

struct WindowSample
{
  std::size_t sequence = 0;
  int start = 0;
};

/// Windows of one optimizer step; a pure function of (seed, step).
inline std::vector<WindowSample> sample_windows(std::span<const Sequence> seqs, const TrainingConfig& tc, long step)
{
  Rng rng(derive_seed(tc.seed, static_cast<std::uint64_t>(step)));
  std::vector<WindowSample> out;
  for (int b = 0; b < tc.batch_size; ++b) {
    WindowSample s;
    s.sequence = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(seqs.size()) - 1));
    const int last = std::max(0, seqs[s.sequence].num_frames() - tc.window);
    s.start = static_cast<int>(rng.uniform_int(0, last));
    out.push_back(s);
  }
  return out;
}

/// Builds the association problems of one window into g. Every frame of the
/// window is encoded; a track's embedding is the head output of its latest
/// detection, and its target is its detection at t or the occlusion class.
inline void add_window_problems(ad::Graph& g, const BoundModel& m, const ModelConfig& cfg, const Sequence& seq,
                                int start, int length, int T_lost_P, std::vector<AssociationProblem>& problems)
{
  const auto targets = build_training_targets(seq, start, length, T_lost_P);
  if (targets.end <= targets.start) return;
  const int lo = std::max(0, targets.start - cfg.L_enc);
  const int hi = std::min(seq.num_frames() - 1, targets.end - 1 + cfg.L_future);
  std::vector<BoundingBox> boxes;
  std::vector<int> frames;
  for (int t = lo; t <= hi; ++t) {
    for (const auto& d : seq.frames[static_cast<std::size_t>(t)]) {
      boxes.push_back(d.box);
      frames.push_back(t);
    }
  }
  if (boxes.empty()) return;
  auto z0 = embed_measurements(g, m, g.constant(box_rows(boxes)), cfg.ln_epsilon);

  // Head outputs per window frame, stacked; offset[t − start] is the first row.
  std::vector<ad::Var> parts;
  std::vector<std::size_t> offset;
  std::size_t rows = 0;
  for (int t = targets.start; t < targets.end; ++t) {
    offset.push_back(rows);
    if (seq.frames[static_cast<std::size_t>(t)].empty()) continue;
    auto enc = encode_window(g, m, cfg, z0, frames, t);
    parts.push_back(enc.z_final);
    rows += enc.current.size();
  }
  if (parts.empty()) return;
  auto all = parts.size() == 1 ? parts[0] : ad::concat_rows(g, parts);

  for (const auto& ft : targets.frames) {
    const auto& dets = seq.frames[static_cast<std::size_t>(ft.frame)];
    std::vector<std::size_t> track_rows, tgt;
    for (const auto& p : ft.pairs) {
      if (!p.target_index && !cfg.occlusion_state) continue;
      track_rows.push_back(offset[static_cast<std::size_t>(p.source_frame - targets.start)] + p.source_index);
      tgt.push_back(p.target_index ? *p.target_index : dets.size());
    }
    if (track_rows.empty()) continue;
    AssociationProblem prob;
    prob.tracks = ad::select_rows(g, all, track_rows);
    if (!dets.empty()) {
      const auto first = offset[static_cast<std::size_t>(ft.frame - targets.start)];
      std::vector<std::size_t> cand(dets.size());
      for (std::size_t i = 0; i < dets.size(); ++i) cand[i] = first + i;
      prob.candidates = ad::select_rows(g, all, cand);
    }
    prob.targets = std::move(tgt);
    problems.push_back(std::move(prob));
  }
}

/// Mean association loss over a batch of windows; gradients when requested.
inline double batch_loss(ModelParams& params, const ModelConfig& cfg, std::span<const Sequence> seqs,
                         std::span<const WindowSample> batch, int window, int T_lost_P, bool backward)
{
  ad::Graph g;
  g.set_grad_enabled(backward);
  BoundModel m(g, params);
  std::vector<AssociationProblem> problems;
  for (const auto& s : batch) {
    add_window_problems(g, m, cfg, seqs[s.sequence], s.start, window, T_lost_P, problems);
  }
  auto loss = association_loss(g, problems, cfg.occlusion_state ? std::optional<ad::Var>(m.z_occ) : std::nullopt);
  const double value = g.value(loss).values[0];
  if (!std::isfinite(value)) throw NonFiniteLoss("non-finite association loss");
  if (backward) g.backward(loss);
  return value;
}

struct TrainState
{
  ad::SgdState sgd;
  int epochs_completed = 0;
  long steps_completed = 0;
  std::vector<double> epoch_losses;
};

struct TrainCallbacks
{
  std::function<void(long step, double loss)> on_step;
  std::function<void(int epoch, double mean_loss)> on_epoch;  // after state is updated
};

/// Runs the remaining epochs of tc from state. Windows depend only on
/// (seed, global step), so a resumed run repeats the uninterrupted one.
inline void train_model(std::span<const Sequence> train, ModelParams& params, const ModelConfig& cfg,
                        const TrainingConfig& tc, int T_lost_P, TrainState& state,
                        const TrainCallbacks& cb = {})
{
  cfg.validate();
  tc.validate();
  if (train.empty() && tc.epochs > state.epochs_completed) {
    throw std::invalid_argument("train_model: no training sequences");
  }
  state.sgd.learning_rate = tc.learning_rate;
  state.sgd.momentum = tc.momentum;
  auto named = params.named();
  const int steps = tc.steps_for(train.size());
  while (state.epochs_completed < tc.epochs) {
    double total = 0.0;
    for (int k = 0; k < steps; ++k) {
      const auto batch = sample_windows(train, tc, state.steps_completed);
      double loss = 0.0;
      try {
        loss = batch_loss(params, cfg, train, batch, tc.window, T_lost_P, true);
      } catch (const NonFiniteLoss&) {
        throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.steps_completed) + " (epoch " +
                            std::to_string(state.epochs_completed + 1) + ")");
      }
      ad::sgd_step(named, state.sgd);
      ++state.steps_completed;
      total += loss;
      if (cb.on_step) cb.on_step(state.steps_completed, loss);
    }
    ++state.epochs_completed;
    state.epoch_losses.push_back(steps > 0 ? total / steps : 0.0);
    if (cb.on_epoch) cb.on_epoch(state.epochs_completed, state.epoch_losses.back());
  }
}

inline Checkpoint model_checkpoint(ModelParams& params, const ModelConfig& cfg, const TrainingConfig& tc,
                                   const TrainState& state)
{
  auto named = params.named();
  auto c = make_checkpoint("model", {{"model", to_json(cfg)}, {"training", to_json(tc)}}, named, &state.sgd);
  c.epochs_completed = state.epochs_completed;
  c.steps_completed = state.steps_completed;
  c.epoch_losses = state.epoch_losses;
  return c;
}

struct LoadedModel
{
  ModelConfig config;
  ModelParams params;
  TrainState state;
};

inline LoadedModel load_model(const Checkpoint& c)
{
  if (c.kind != "model") throw CheckpointError("checkpoint kind '" + c.kind + "' is not a model");
  LoadedModel out;
  out.config = model_config_from_json(c.hyper.at("model"));
  out.params = init_model_params(out.config, 0);
  auto named = out.params.named();
  restore_params(c, named);
  out.state.sgd.velocity = c.velocity;
  out.state.epochs_completed = c.epochs_completed;
  out.state.steps_completed = c.steps_completed;
  out.state.epoch_losses = c.epoch_losses;
  return out;
}

}  // namespace softtrack
