#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "envformer/common.hpp"
#include "envformer/datasets.hpp"
#include "envformer/envsim.hpp"
#include "envformer/rng.hpp"
#include "envformer/worldmodel/model.hpp"

#include <nlohmann/json.hpp>

namespace envformer::eval {

/// Settings for long-term rollout evaluation. `norm` is the dataset
/// normalizer that defines the scoring space; every model is judged in the
/// same units regardless of what it normalizes with internally.
struct RolloutEvalConfig {
  double threshold = 0.01;      // per-step mse cut in normalized units
  std::size_t repetitions = 50; // sampled start points / episodes per policy
  std::size_t max_length = 1000;
  bool stochastic = false;      // sample predictions instead of the mean
  data::Normalizer norm;

  void validate() const {
    if (!(threshold > 0.0))
      throw ConfigError("rollout eval: threshold must be positive");
    if (repetitions == 0)
      throw ConfigError("rollout eval: need at least one repetition");
    if (max_length == 0)
      throw ConfigError("rollout eval: max_length must be positive");
    if (norm.state_dim() == 0)
      throw ConfigError("rollout eval: normalizer is unset");
  }

  nlohmann::json to_json() const {
    return {{"threshold", threshold},
            {"repetitions", repetitions},
            {"max_length", max_length},
            {"stochastic", stochastic},
            {"normalizer", norm.to_json()}};
  }
  static RolloutEvalConfig from_json(const nlohmann::json& j) {
    RolloutEvalConfig cfg;
    cfg.threshold = j.value("threshold", cfg.threshold);
    cfg.repetitions = j.value("repetitions", cfg.repetitions);
    cfg.max_length = j.value("max_length", cfg.max_length);
    cfg.stochastic = j.value("stochastic", cfg.stochastic);
    if (j.contains("normalizer"))
      cfg.norm = data::Normalizer::from_json(j.at("normalizer"));
    cfg.validate();
    return cfg;
  }
};

namespace detail {

/// Mean squared difference between two normalized (next_state, reward)
/// vectors, averaged over the state_dim + 1 entries.
inline double prediction_mse(const data::Normalizer& norm,
                             const std::vector<double>& s_pred, double r_pred,
                             const std::vector<double>& s_true, double r_true) {
  const std::vector<double> yp = norm.normalize_target(s_pred, r_pred);
  const std::vector<double> yt = norm.normalize_target(s_true, r_true);
  double acc = 0.0;
  for (std::size_t d = 0; d < yp.size(); ++d) {
    const double e = yp[d] - yt[d];
    acc += e * e;
  }
  return acc / double(yp.size());
}

inline void trim_history(wm::History& h, std::size_t ctx) {
  while (h.size() > ctx) h.erase(h.begin());
}

}  // namespace detail

/// Length of the model's closed-loop rollout along a recorded trajectory:
/// starting from the recorded state at `start_index`, the model consumes the
/// recorded actions but advances on its own predictions, and the rollout ends
/// at the first step whose normalized (next_state, reward) prediction error
/// exceeds the threshold. Mean-mode predictions keep the result
/// deterministic; `cfg.stochastic` draws from the predictive distribution and
/// then requires `rng`.
inline std::size_t offline_rollout_length(const wm::DynamicsModel& model,
                                          const data::Trajectory& traj,
                                          std::size_t start_index,
                                          const RolloutEvalConfig& cfg,
                                          Rng* rng = nullptr) {
  cfg.validate();
  if (start_index >= traj.size())
    throw ContractError("offline rollout: start_index " +
                        std::to_string(start_index) + " is past the trajectory (" +
                        std::to_string(traj.size()) + " steps)");
  if (cfg.stochastic && rng == nullptr)
    throw ContractError("offline rollout: stochastic mode needs an rng");

  const std::size_t ctx = std::max<std::size_t>(model.context_length(), 1);
  wm::History history;
  const std::size_t first = start_index + 1 > ctx ? start_index + 1 - ctx : 0;
  for (std::size_t i = first; i < start_index; ++i)
    history.push_back({traj.steps[i].s, traj.steps[i].a});

  std::vector<double> state = traj.steps[start_index].s;
  const std::size_t stop =
      std::min(traj.size(), start_index + cfg.max_length);
  std::size_t length = 0;
  for (std::size_t k = start_index; k < stop; ++k) {
    history.push_back({state, traj.steps[k].a});
    detail::trim_history(history, ctx);
    const wm::GaussianPrediction pred = model.predict({history});
    auto [s_pred, r_pred] = cfg.stochastic && rng != nullptr
                                ? model.sample(pred, 0, *rng)
                                : model.mean(pred, 0);
    const double mse = detail::prediction_mse(
        cfg.norm, s_pred, r_pred, traj.steps[k].s_next, traj.steps[k].r);
    if (!(mse <= cfg.threshold)) break;
    ++length;
    state = std::move(s_pred);
  }
  return length;
}

/// Mean/std/raw rollout lengths plus how many rollouts entered the average.
struct RolloutLengthStats {
  std::vector<std::size_t> lengths;
  double mean = 0.0;
  double stddev = 0.0;

  void finalize() {
    if (lengths.empty()) return;
    double sum = 0, sq = 0;
    for (std::size_t l : lengths) {
      sum += double(l);
      sq += double(l) * double(l);
    }
    mean = sum / double(lengths.size());
    stddev = std::sqrt(
        std::max(sq / double(lengths.size()) - mean * mean, 0.0));
  }

  nlohmann::json to_json() const {
    return {{"mean", mean}, {"std", stddev}, {"lengths", lengths}};
  }
};

/// Repeats offline_rollout_length from `cfg.repetitions` start points drawn
/// uniformly over all transitions of the dataset.
inline RolloutLengthStats offline_rollout_stats(
    const wm::DynamicsModel& model,
    const std::vector<data::Trajectory>& trajectories,
    const RolloutEvalConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<std::size_t> offsets{0};
  for (const auto& tr : trajectories)
    offsets.push_back(offsets.back() + tr.size());
  if (offsets.back() == 0)
    throw ContractError("offline rollout: empty dataset");

  RolloutLengthStats stats;
  stats.lengths.reserve(cfg.repetitions);
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    const std::size_t flat = rng.integer(offsets.back());
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    stats.lengths.push_back(offline_rollout_length(
        model, trajectories[ti], flat - offsets[ti], cfg, &rng));
  }
  stats.finalize();
  return stats;
}

/// Length of the model's closed-loop rollout alongside one live episode: the
/// behavior policy acts in the real environment, the model receives the same
/// actions but advances on its own predictions, and the rollout ends at the
/// first step whose prediction error against the real transition exceeds the
/// threshold, or when the episode does.
inline std::size_t online_rollout_length(const wm::DynamicsModel& model,
                                         const sim::EnvSpec& env,
                                         const sim::Policy& behavior,
                                         const RolloutEvalConfig& cfg,
                                         Rng& rng) {
  cfg.validate();
  if (env.state_dim != model.state_dim() ||
      env.action_dim != model.action_dim())
    throw DimensionError("online rollout: env and model dims disagree",
                         {env.state_dim, env.action_dim},
                         {model.state_dim(), model.action_dim()});

  const std::size_t ctx = std::max<std::size_t>(model.context_length(), 1);
  std::vector<double> s_real = env.reset(rng);
  std::vector<double> s_model = s_real;
  wm::History history;
  const std::size_t stop = std::min(env.horizon, cfg.max_length);
  std::size_t length = 0;
  for (std::size_t t = 0; t < stop; ++t) {
    const std::vector<double> a = env.clip_action(behavior(s_real, rng));
    const sim::StepResult res = env.step(s_real, a, rng);

    history.push_back({s_model, a});
    detail::trim_history(history, ctx);
    const wm::GaussianPrediction pred = model.predict({history});
    auto [s_pred, r_pred] =
        cfg.stochastic ? model.sample(pred, 0, rng) : model.mean(pred, 0);
    const double mse =
        detail::prediction_mse(cfg.norm, s_pred, r_pred, res.s_next, res.r);
    if (!(mse <= cfg.threshold)) break;
    ++length;
    s_model = std::move(s_pred);
    if (res.terminal) break;
    s_real = res.s_next;
  }
  return length;
}

/// Repeats online_rollout_length over `cfg.repetitions` fresh episodes of one
/// behavior policy.
inline RolloutLengthStats online_rollout_stats(const wm::DynamicsModel& model,
                                               const sim::EnvSpec& env,
                                               const sim::Policy& behavior,
                                               const RolloutEvalConfig& cfg,
                                               Rng& rng) {
  cfg.validate();
  RolloutLengthStats stats;
  stats.lengths.reserve(cfg.repetitions);
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep)
    stats.lengths.push_back(
        online_rollout_length(model, env, behavior, cfg, rng));
  stats.finalize();
  return stats;
}

}  // namespace envformer::eval
