#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "envformer/envsim.hpp"
#include "envformer/optim.hpp"
#include "envformer/policy/cql.hpp"
#include "envformer/rollout.hpp"

namespace envformer::policy {

struct PolicyLogRow {
  std::size_t step = 0;
  double cql_loss = 0.0;
  double bellman_residual = 0.0;
  double conservatism_gap = 0.0;
  // Mean return of the squashed-mean policy; NaN when evaluation is off.
  double eval_return = std::numeric_limits<double>::quiet_NaN();
};

struct PolicyLog {
  std::vector<PolicyLogRow> rows;

  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open policy log for writing: " + path);
    out << "step,cql_loss,bellman_residual,conservatism_gap,eval_return\n";
    for (const PolicyLogRow& r : rows)
      out << r.step << ',' << format_double(r.cql_loss) << ','
          << format_double(r.bellman_residual) << ','
          << format_double(r.conservatism_gap) << ','
          << format_double(r.eval_return) << '\n';
  }
};

template <typename T>
struct PolicyTrainResult {
  TanhGaussianActor<T> actor;
  TwinCritic<T> critic;
  PolicyLog log;
  rollout::BranchStats rollout_stats;  // summed over all rollout rounds
  double temperature = 0.0;            // final entropy temperature
  std::size_t steps = 0;
};

/// Called after every completed gradient step with the live networks, so long
/// runs can drop recovery snapshots at whatever cadence the caller wants.
template <typename T>
using PolicySnapshotHook = std::function<void(
    std::size_t step, const TanhGaussianActor<T>&, const TwinCritic<T>&)>;

/// Conservative Q-learning on the model-augmented replay: every
/// `rollout_cfg.interval` gradient steps a fresh branch-rollout round extends
/// the synthetic buffer with the current stochastic actor, then each step
/// draws a mixed batch and applies one critic update (cql_loss), one actor
/// update, an optional temperature adjustment, and a target EMA blend. Log
/// rows carry interval means; evaluation runs the squashed-mean policy in the
/// real environment. `gradient_steps == 0` returns the freshly initialized
/// networks untouched.
template <typename T>
PolicyTrainResult<T> train_policy(const std::vector<data::Trajectory>& real,
                                  const wm::DynamicsModel& model,
                                  const sim::EnvSpec& env, const PolicyConfig& pcfg,
                                  const rollout::RolloutConfig& rcfg, Rng& rng,
                                  const PolicySnapshotHook<T>& snapshot = {}) {
  pcfg.validate();
  rcfg.validate();
  if (real.empty()) throw ContractError("train_policy: empty real dataset");
  const std::size_t sd = env.state_dim, ad = env.action_dim;
  if (sd == 0 || ad == 0)
    throw ContractError("train_policy: env dims must be positive");
  if (model.normalizer().state_mean.size() != sd)
    throw DimensionError("train_policy: model and environment disagree on state size",
                         {model.normalizer().state_mean.size()}, {sd});
  if (pcfg.candidate_mode == CandidateMode::grid && env.action_grid.empty())
    throw ConfigError("train_policy: grid candidate mode needs env.action_grid");

  Rng init_rng = rng.fork();
  Rng rollout_rng = rng.fork();
  Rng batch_rng = rng.fork();
  Rng noise_rng = rng.fork();
  Rng eval_rng = rng.fork();

  PolicyTrainResult<T> res;
  res.actor = TanhGaussianActor<T>(init_rng, sd, ad, env.action_low,
                                   env.action_high, pcfg.hidden, pcfg.depth);
  res.critic = TwinCritic<T>(init_rng, sd, ad, pcfg.hidden, pcfg.depth);
  res.temperature = pcfg.temperature;
  if (pcfg.gradient_steps == 0) return res;

  rollout::AugmentedDataset buffer(data::flatten_transitions(real), rcfg.capacity);
  // Grid mode means discretized control: branches act on the grid so every
  // action entering the buffer is one of the conservatism candidates.
  const bool snap_to_grid = pcfg.candidate_mode == CandidateMode::grid;
  const sim::Policy sample_pi = [&actor = res.actor, snap_to_grid,
                                 &grid = env.action_grid](
                                    const std::vector<double>& s, Rng& r) {
    std::vector<double> a = actor.act_sample(s, r);
    if (snap_to_grid) return detail::nearest_grid_action(a, grid);
    return a;
  };
  const sim::Policy mean_pi = [&actor = res.actor](const std::vector<double>& s,
                                                   Rng&) { return actor.act_mean(s); };

  auto critic_tensors = res.critic.params().tensors();
  auto actor_tensors = res.actor.params().tensors();
  AdamW<T> critic_opt(critic_tensors,
                      AdamConfig{pcfg.critic_lr, 0.9, 0.999, pcfg.adam_eps, 0.0});
  AdamW<T> actor_opt(actor_tensors,
                     AdamConfig{pcfg.actor_lr, 0.9, 0.999, pcfg.adam_eps, 0.0});

  CqlSettings settings = CqlSettings::from_config(pcfg, env.action_grid);
  const double target_entropy =
      std::isfinite(pcfg.target_entropy) ? pcfg.target_entropy : -double(ad);
  double tau = pcfg.temperature;
  double log_tau = tau > 0.0 ? std::log(tau) : -20.0;

  double sum_total = 0.0, sum_bellman = 0.0, sum_gap = 0.0;
  std::size_t since_row = 0;
  for (std::size_t step = 0; step < pcfg.gradient_steps; ++step) {
    if (step % rcfg.interval == 0) {
      const rollout::BranchStats st = rollout::branch_rollout(
          model, real, sample_pi, rcfg, buffer, rollout_rng, env.is_terminal);
      res.rollout_stats.branches += st.branches;
      res.rollout_stats.generated += st.generated;
      res.rollout_stats.aborted += st.aborted;
      res.rollout_stats.terminated += st.terminated;
    }
    const std::vector<data::Transition> batch =
        buffer.sample(pcfg.batch_size, rcfg.real_ratio, batch_rng).items;
    settings.temperature = tau;
    try {
      {
        Tape<T> tape;
        CqlTerms<T> terms =
            cql_loss(tape, res.critic, res.actor, batch, settings, noise_rng);
        const double lv = double(terms.total.item());
        if (!std::isfinite(lv))
          throw TrainingError("policy training diverged: non-finite critic loss",
                              std::int64_t(step));
        tape.backward(terms.total);
        clip_grad_norm(critic_tensors, pcfg.grad_clip);
        critic_opt.step();
        critic_opt.zero_grad();
        sum_total += lv;
        sum_bellman += terms.bellman;
        sum_gap += terms.conservatism;
      }
      {
        Tape<T> tape;
        const Array<T> states = detail::pack_states<T>(batch, sd);
        ActorTerms<T> terms = actor_terms(tape, res.actor, states, tau,
                                          critic_min_q(res.critic), noise_rng);
        if (!std::isfinite(double(terms.total.item())))
          throw TrainingError("policy training diverged: non-finite actor loss",
                              std::int64_t(step));
        tape.backward(terms.total);
        clip_grad_norm(actor_tensors, pcfg.grad_clip);
        actor_opt.step();
        actor_opt.zero_grad();
        critic_opt.zero_grad();  // the actor pass also backprops into the critics
        if (pcfg.temperature_mode == TemperatureMode::autotune) {
          log_tau = temperature_step(log_tau, terms.mean_logp, target_entropy,
                                     pcfg.temperature_lr);
          tau = std::exp(log_tau);
        }
      }
    } catch (const NumericError& e) {
      throw TrainingError(std::string("policy training diverged: ") + e.what(),
                          std::int64_t(step));
    }
    res.critic.ema_update(pcfg.tau_ema);

    ++since_row;
    const bool last = step + 1 == pcfg.gradient_steps;
    const bool at_interval =
        pcfg.eval_interval > 0 && (step + 1) % pcfg.eval_interval == 0;
    if (at_interval || last) {
      PolicyLogRow row;
      row.step = step + 1;
      row.cql_loss = sum_total / double(since_row);
      row.bellman_residual = sum_bellman / double(since_row);
      row.conservatism_gap = sum_gap / double(since_row);
      if (pcfg.eval_interval > 0 && pcfg.eval_episodes > 0)
        row.eval_return =
            sim::rollout_policy(env, mean_pi, pcfg.eval_episodes, eval_rng)
                .mean_return;
      res.log.rows.push_back(row);
      sum_total = sum_bellman = sum_gap = 0.0;
      since_row = 0;
    }
    if (snapshot) snapshot(step + 1, res.actor, res.critic);
  }
  res.temperature = tau;
  res.steps = pcfg.gradient_steps;
  return res;
}

}  // namespace envformer::policy
