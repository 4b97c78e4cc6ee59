#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "envformer/datasets.hpp"
#include "envformer/policy/actor.hpp"
#include "envformer/policy/config.hpp"
#include "envformer/policy/critic.hpp"

namespace envformer::policy {

namespace detail {

inline void check_batch(const std::vector<data::Transition>& batch,
                        std::size_t sd, std::size_t ad) {
  if (batch.empty()) throw ContractError("cql: empty batch");
  for (const auto& tr : batch)
    if (tr.s.size() != sd || tr.a.size() != ad || tr.s_next.size() != sd)
      throw DimensionError("cql: transition dims disagree with the networks",
                           {tr.s.size(), tr.a.size(), tr.s_next.size()},
                           {sd, ad, sd});
}

template <typename T>
Array<T> pack_states(const std::vector<data::Transition>& batch, std::size_t sd) {
  Array<T> out({batch.size(), sd});
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t d = 0; d < sd; ++d) out.data[i * sd + d] = T(batch[i].s[d]);
  return out;
}

template <typename T>
Array<T> pack_next_states(const std::vector<data::Transition>& batch,
                          std::size_t sd) {
  Array<T> out({batch.size(), sd});
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t d = 0; d < sd; ++d)
      out.data[i * sd + d] = T(batch[i].s_next[d]);
  return out;
}

template <typename T>
Array<T> pack_sa(const std::vector<data::Transition>& batch, std::size_t sd,
                 std::size_t ad) {
  Array<T> out({batch.size(), sd + ad});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    T* row = out.data.data() + i * (sd + ad);
    for (std::size_t d = 0; d < sd; ++d) row[d] = T(batch[i].s[d]);
    for (std::size_t d = 0; d < ad; ++d) row[sd + d] = T(batch[i].a[d]);
  }
  return out;
}

inline const std::vector<double>& nearest_grid_action(
    const std::vector<double>& a, const std::vector<std::vector<double>>& grid) {
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < grid.size(); ++j) {
    double d2 = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d)
      d2 += (a[d] - grid[j][d]) * (a[d] - grid[j][d]);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = j;
    }
  }
  return grid[best];
}

}  // namespace detail

/// V(s') = min-target-Q(s', a') - temperature * log pi(a'|s') with a' drawn
/// from the actor; computed off-tape since targets carry no gradient. With a
/// `snap_grid` (discretized control) the drawn action is snapped to its
/// nearest grid point before the critic query, since that is the action the
/// deployed policy would take; the density term keeps the pre-snap draw.
template <typename T>
std::vector<double> next_state_values(
    const TwinCritic<T>& critic, const TanhGaussianActor<T>& actor,
    const std::vector<data::Transition>& batch, double temperature, Rng& rng,
    const std::vector<std::vector<double>>* snap_grid = nullptr) {
  const std::size_t sd = actor.state_dim(), ad = actor.action_dim();
  detail::check_batch(batch, sd, ad);
  const Array<T> ns = detail::pack_next_states<T>(batch, sd);
  auto sampled = actor.sample_with_logp(ns, rng);
  Array<T> sa({batch.size(), sd + ad});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    T* row = sa.data.data() + i * (sd + ad);
    for (std::size_t d = 0; d < sd; ++d) row[d] = ns.data[i * sd + d];
    if (snap_grid != nullptr && !snap_grid->empty()) {
      std::vector<double> a(sampled.first.data.begin() + i * ad,
                            sampled.first.data.begin() + (i + 1) * ad);
      const std::vector<double>& g = detail::nearest_grid_action(a, *snap_grid);
      for (std::size_t d = 0; d < ad; ++d) row[sd + d] = T(g[d]);
    } else {
      for (std::size_t d = 0; d < ad; ++d)
        row[sd + d] = T(sampled.first.data[i * ad + d]);
    }
  }
  std::vector<double> v = critic.target_min(sa);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= temperature * sampled.second[i];
  return v;
}

/// Soft Bellman targets y = r + gamma * (1 - d) * V(s'). Terminal rows and
/// gamma = 0 bypass the next-state query entirely, so y = r holds exactly.
template <typename T>
std::vector<double> bellman_targets(
    const TwinCritic<T>& critic, const TanhGaussianActor<T>& actor,
    const std::vector<data::Transition>& batch, double gamma, double temperature,
    Rng& rng, const std::vector<std::vector<double>>* snap_grid = nullptr) {
  std::vector<double> y(batch.size());
  if (gamma == 0.0) {
    for (std::size_t i = 0; i < batch.size(); ++i) y[i] = batch[i].r;
    return y;
  }
  const std::vector<double> v =
      next_state_values(critic, actor, batch, temperature, rng, snap_grid);
  for (std::size_t i = 0; i < batch.size(); ++i)
    y[i] = batch[i].d ? batch[i].r : batch[i].r + gamma * v[i];
  return y;
}

/// Knobs for one conservative critic update. `temperature` is the live
/// entropy temperature entering the soft backup; `grid` is consulted only in
/// grid candidate mode.
struct CqlSettings {
  double gamma = 0.99;
  double alpha = 5.0;
  std::size_t n_samples = 10;
  double temperature = 0.1;
  CandidateMode mode = CandidateMode::sampled;
  std::vector<std::vector<double>> grid;

  static CqlSettings from_config(const PolicyConfig& cfg,
                                 std::vector<std::vector<double>> action_grid) {
    CqlSettings s;
    s.gamma = cfg.gamma;
    s.alpha = cfg.cql_alpha;
    s.n_samples = cfg.cql_samples;
    s.temperature = cfg.temperature;
    s.mode = cfg.candidate_mode;
    s.grid = std::move(action_grid);
    return s;
  }
};

template <typename T>
struct CqlTerms {
  Tensor<T> total;  // scalar loss on the tape
  // Numeric copies for logging: half the summed mean-squared residual of both
  // critics, and the critic-averaged normalized gap (0 when alpha = 0).
  double bellman = 0.0;
  double conservatism = 0.0;
};

/// Conservative critic loss: alpha * (soft-max_mu E[Q] - E_data[Q]) plus half
/// the mean squared residual against stop-gradient soft Bellman targets. The
/// mu-maximization with an entropy regularizer is realized in closed form as a
/// log-sum-exp over candidate actions: the environment's action grid (grid
/// mode, normalized by log |grid| so a constant Q yields a zero gap) or
/// importance-corrected draws, half uniform over the action box and half from
/// the current actor (sampled mode). Candidates and targets are constants on
/// the tape; only critic evaluations carry gradient.
template <typename T>
CqlTerms<T> cql_loss(Tape<T>& tape, const TwinCritic<T>& critic,
                     const TanhGaussianActor<T>& actor,
                     const std::vector<data::Transition>& batch,
                     const CqlSettings& cfg, Rng& rng) {
  const std::size_t sd = actor.state_dim(), ad = actor.action_dim();
  detail::check_batch(batch, sd, ad);
  const std::size_t bsz = batch.size();

  Tensor<T> sa = Tensor<T>::constant(detail::pack_sa<T>(batch, sd, ad));
  Tensor<T> q1d = critic.q1(tape, sa);
  Tensor<T> q2d = critic.q2(tape, sa);

  Array<T> yarr({bsz, 1});
  {
    const auto* snap_grid =
        cfg.mode == CandidateMode::grid && !cfg.grid.empty() ? &cfg.grid : nullptr;
    const std::vector<double> y = bellman_targets(
        critic, actor, batch, cfg.gamma, cfg.temperature, rng, snap_grid);
    for (std::size_t i = 0; i < bsz; ++i) yarr.data[i] = T(y[i]);
  }
  Tensor<T> y = Tensor<T>::constant(std::move(yarr));
  Tensor<T> bellman =
      scale(tape,
            add(tape, mean_all(tape, square(tape, sub(tape, q1d, y))),
                mean_all(tape, square(tape, sub(tape, q2d, y)))),
            T(0.5));

  CqlTerms<T> out;
  if (cfg.alpha == 0.0) {
    out.total = bellman;
    out.bellman = double(bellman.item());
    return out;
  }

  std::size_t m = 0;       // candidates per state
  bool corrected = false;  // subtract per-candidate log densities first
  Tensor<T> cand, corr;
  if (cfg.mode == CandidateMode::grid) {
    if (cfg.grid.empty())
      throw ContractError("cql: grid candidate mode needs a non-empty action grid");
    m = cfg.grid.size();
    Array<T> arr({bsz * m, sd + ad});
    for (std::size_t j = 0; j < m; ++j)
      if (cfg.grid[j].size() != ad)
        throw DimensionError("cql: grid action size mismatch",
                             {cfg.grid[j].size()}, {ad});
    for (std::size_t i = 0; i < bsz; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T* row = arr.data.data() + (i * m + j) * (sd + ad);
        for (std::size_t d = 0; d < sd; ++d) row[d] = T(batch[i].s[d]);
        for (std::size_t d = 0; d < ad; ++d) row[sd + d] = T(cfg.grid[j][d]);
      }
    cand = Tensor<T>::constant(std::move(arr));
  } else {
    if (cfg.n_samples == 0)
      throw ContractError("cql: need at least one sampled candidate");
    m = cfg.n_samples;
    corrected = true;
    const std::size_t n_unif = (m + 1) / 2;
    const std::size_t n_act = m - n_unif;
    Array<T> arr({bsz * m, sd + ad});
    Array<T> dens({bsz, m});
    const auto& low = actor.low();
    const auto& high = actor.high();
    double log_box = 0.0;
    for (std::size_t d = 0; d < ad; ++d) log_box += std::log(high[d] - low[d]);
    for (std::size_t i = 0; i < bsz; ++i)
      for (std::size_t j = 0; j < n_unif; ++j) {
        T* row = arr.data.data() + (i * m + j) * (sd + ad);
        for (std::size_t d = 0; d < sd; ++d) row[d] = T(batch[i].s[d]);
        for (std::size_t d = 0; d < ad; ++d)
          row[sd + d] = T(rng.uniform(low[d], high[d]));
        dens.data[i * m + j] = T(-log_box);
      }
    if (n_act > 0) {
      Array<T> tiled({bsz * n_act, sd});
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t j = 0; j < n_act; ++j)
          for (std::size_t d = 0; d < sd; ++d)
            tiled.data[(i * n_act + j) * sd + d] = T(batch[i].s[d]);
      auto sampled = actor.sample_with_logp(tiled, rng);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t j = 0; j < n_act; ++j) {
          T* row = arr.data.data() + (i * m + n_unif + j) * (sd + ad);
          for (std::size_t d = 0; d < sd; ++d) row[d] = T(batch[i].s[d]);
          for (std::size_t d = 0; d < ad; ++d)
            row[sd + d] = T(sampled.first.data[(i * n_act + j) * ad + d]);
          dens.data[i * m + n_unif + j] = T(sampled.second[i * n_act + j]);
        }
    }
    cand = Tensor<T>::constant(std::move(arr));
    corr = Tensor<T>::constant(std::move(dens));
  }

  const double norm_const = std::log(double(m));
  auto gap_of = [&](Tensor<T> q_cand, const Tensor<T>& q_data) {
    Tensor<T> rows = reshape(tape, q_cand, {bsz, m});
    if (corrected) rows = sub(tape, rows, corr);
    Tensor<T> lse = add_scalar(tape, logsumexp_last(tape, rows), T(-norm_const));
    return sub(tape, mean_all(tape, lse), mean_all(tape, q_data));
  };
  Tensor<T> gap = scale(tape,
                        add(tape, gap_of(critic.q1(tape, cand), q1d),
                            gap_of(critic.q2(tape, cand), q2d)),
                        T(0.5));

  out.total = add(tape, bellman, scale(tape, gap, T(cfg.alpha)));
  out.bellman = double(bellman.item());
  out.conservatism = double(gap.item());
  return out;
}

template <typename T>
struct ActorTerms {
  Tensor<T> total;         // scalar loss on the tape
  double mean_logp = 0.0;  // numeric copy, feeds temperature tuning
};

/// Actor objective E[temperature * log pi(a|s) - Q(s, a)] with reparameterized
/// actions. `q_fn(tape, states, actions) -> [B, 1]` supplies the value; the
/// training loop passes the twin-critic minimum.
template <typename T, typename QFn>
ActorTerms<T> actor_terms(Tape<T>& tape, const TanhGaussianActor<T>& actor,
                          const Array<T>& states, double temperature, QFn&& q_fn,
                          Rng& rng) {
  if (states.rank() != 2 || states.shape[0] == 0)
    throw ContractError("actor update: states must be a non-empty [B, state_dim] array");
  Tensor<T> s = Tensor<T>::constant(states);
  ActorSample<T> smp = actor.rsample(tape, s, rng);
  Tensor<T> q = q_fn(tape, s, smp.action);
  if (q.shape() != smp.logp.shape())
    throw DimensionError("actor update: q_fn must return one value per row",
                         q.shape(), smp.logp.shape());
  ActorTerms<T> out;
  out.total = mean_all(tape, sub(tape, scale(tape, smp.logp, T(temperature)), q));
  double acc = 0.0;
  for (std::size_t i = 0; i < smp.logp.numel(); ++i) acc += double(smp.logp.data()[i]);
  out.mean_logp = acc / double(smp.logp.numel());
  return out;
}

/// q_fn adapter evaluating min(Q1, Q2) on the online critics.
template <typename T>
auto critic_min_q(const TwinCritic<T>& critic) {
  return [&critic](Tape<T>& tape, const Tensor<T>& s, const Tensor<T>& a) {
    return critic.min_q(tape, concat_cols(tape, s, a));
  };
}

/// One log-temperature ascent step toward the entropy target: the temperature
/// grows while policy entropy sits below target and shrinks above it. Clamped
/// so exp() stays sane.
inline double temperature_step(double log_tau, double mean_logp,
                               double target_entropy, double lr) {
  return std::clamp(log_tau + lr * (mean_logp + target_entropy), -20.0, 2.0);
}

}  // namespace envformer::policy
