#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/common.hpp"
#include "envformer/datasets.hpp"
#include "envformer/rng.hpp"

namespace envformer::sim {

struct StepResult {
  std::vector<double> s_next;
  double r = 0.0;
  bool terminal = false;
};

/// A behavior policy: maps state (and noise source) to an action.
using Policy =
    std::function<std::vector<double>(const std::vector<double>&, Rng&)>;

/// Self-describing environment. `step` applies the true (possibly noisy)
/// dynamics with action clipping; `mean_step` is the noise-free counterpart
/// used by oracles. Termination is a predicate on states; horizon limits are
/// enforced by rollout drivers and never flagged as terminal.
struct EnvSpec {
  std::string name;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> action_low, action_high;
  std::size_t horizon = 0;
  double gamma = 0.99;

  std::function<std::vector<double>(Rng&)> reset;
  std::function<StepResult(const std::vector<double>&,
                           const std::vector<double>&, Rng&)>
      step;
  std::function<std::pair<std::vector<double>, double>(
      const std::vector<double>&, const std::vector<double>&)>
      mean_step;
  std::function<bool(const std::vector<double>&)> is_terminal;

  /// Per-dimension std of the additive process noise; empty when the
  /// dynamics are deterministic.
  std::vector<double> noise_std;

  Policy expert;

  /// Non-empty for environments whose effective action space is a finite
  /// grid (used by exact conservative-penalty evaluation).
  std::vector<std::vector<double>> action_grid;

  std::vector<double> clip_action(std::vector<double> a) const {
    if (a.size() != action_dim)
      throw DimensionError(name + ": action dimension mismatch",
                           {a.size()}, {action_dim});
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] = std::clamp(a[i], action_low[i], action_high[i]);
    return a;
  }
};

// ----------------------------------------------------------------------------
// Small dense linear algebra helpers (row-major, plain vectors).
// ----------------------------------------------------------------------------

namespace detail {

inline std::vector<double> matvec(const std::vector<std::vector<double>>& m,
                                  const std::vector<double>& x) {
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) out[i] += m[i][j] * x[j];
  return out;
}

inline std::vector<std::vector<double>> matmul_sq(
    const std::vector<std::vector<double>>& a,
    const std::vector<std::vector<double>>& b) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> c(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

/// Upper bound on the spectral radius via 7 repeated squarings:
/// rho <= ||A^128||_F^(1/128), with Frobenius renormalization at each step to
/// stay in floating-point range. The bound overshoots the true radius by at
/// most a factor n^(1/128), so matrices with rho extremely close to 1 may be
/// conservatively rejected.
inline double spectral_radius_bound(std::vector<std::vector<double>> m) {
  double log_scale = 0.0;
  for (int iter = 0; iter < 7; ++iter) {
    m = matmul_sq(m, m);
    log_scale *= 2.0;
    double f = 0.0;
    for (const auto& row : m)
      for (double v : row) f += v * v;
    f = std::sqrt(f);
    if (f == 0.0) return 0.0;
    for (auto& row : m)
      for (double& v : row) v /= f;
    log_scale += std::log(f);
  }
  return std::exp(log_scale / 128.0);
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Linear-Gaussian system: s' = A s + B a + w,  r = -q s's - c a'a.
// ----------------------------------------------------------------------------

/// Builds a linear-Gaussian environment. A must be stable (spectral radius
/// below 1), otherwise construction fails with a ContractError.
inline EnvSpec linear_gaussian_env(std::vector<std::vector<double>> a_mat,
                                   std::vector<std::vector<double>> b_mat,
                                   std::vector<double> noise_std,
                                   double q_cost = 1.0, double c_cost = 0.1,
                                   std::size_t horizon = 100,
                                   double reset_std = 0.5) {
  const std::size_t sd = a_mat.size();
  if (sd == 0 || a_mat[0].size() != sd)
    throw ContractError("linear_gaussian_env: A must be square and non-empty");
  if (b_mat.size() != sd)
    throw DimensionError("linear_gaussian_env: B row count must match A",
                         {b_mat.size()}, {sd});
  const std::size_t ad = b_mat[0].size();
  if (noise_std.size() != sd)
    throw DimensionError("linear_gaussian_env: noise std per state dim",
                         {noise_std.size()}, {sd});
  const double rho = detail::spectral_radius_bound(a_mat);
  if (rho >= 1.0)
    throw ContractError(
        "linear_gaussian_env: A is not stable (spectral radius bound " +
        format_double(rho) + " >= 1)");

  EnvSpec env;
  env.name = "linear";
  env.state_dim = sd;
  env.action_dim = ad;
  env.action_low.assign(ad, -1.0);
  env.action_high.assign(ad, 1.0);
  env.horizon = horizon;
  env.noise_std = noise_std;

  env.reset = [sd, reset_std](Rng& rng) {
    std::vector<double> s(sd);
    for (double& x : s) x = rng.normal(0.0, reset_std);
    return s;
  };
  auto mean_step = [a_mat, b_mat, q_cost, c_cost](
                       const std::vector<double>& s,
                       const std::vector<double>& a) {
    std::vector<double> s_next = detail::matvec(a_mat, s);
    const auto ba = detail::matvec(b_mat, a);
    for (std::size_t i = 0; i < s_next.size(); ++i) s_next[i] += ba[i];
    double cost = 0.0;
    for (double x : s) cost += q_cost * x * x;
    for (double x : a) cost += c_cost * x * x;
    return std::make_pair(std::move(s_next), -cost);
  };
  env.mean_step = mean_step;
  env.step = [mean_step, noise_std, low = env.action_low,
              high = env.action_high](
                 const std::vector<double>& s, const std::vector<double>& a,
                 Rng& rng) {
    std::vector<double> ac(a);
    for (std::size_t i = 0; i < ac.size(); ++i)
      ac[i] = std::clamp(ac[i], low[i], high[i]);
    auto [s_next, r] = mean_step(s, ac);
    for (std::size_t i = 0; i < s_next.size(); ++i)
      s_next[i] += rng.normal(0.0, noise_std[i]);
    return StepResult{std::move(s_next), r, false};
  };
  env.is_terminal = [](const std::vector<double>&) { return false; };

  // Expert: LQR gain from iterating the discrete Riccati recursion.
  {
    const std::size_t n = sd, m = ad;
    std::vector<std::vector<double>> p(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) p[i][i] = q_cost;
    std::vector<std::vector<double>> k_gain(m, std::vector<double>(n, 0.0));
    for (int iter = 0; iter < 300; ++iter) {
      // K = (R + B'PB)^-1 B'PA with R = c I, solved by Gaussian elimination
      std::vector<std::vector<double>> btp(m, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < n; ++l)
            btp[i][j] += b_mat[l][i] * p[l][j];
      std::vector<std::vector<double>> lhs(m, std::vector<double>(m, 0.0));
      for (std::size_t i = 0; i < m; ++i) {
        lhs[i][i] = c_cost;
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t l = 0; l < n; ++l)
            lhs[i][j] += btp[i][l] * b_mat[l][j];
      }
      std::vector<std::vector<double>> rhs(m, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < n; ++l)
            rhs[i][j] += btp[i][l] * a_mat[l][j];
      // solve lhs * K = rhs
      for (std::size_t col = 0; col < m; ++col) {
        std::size_t piv = col;
        for (std::size_t r2 = col + 1; r2 < m; ++r2)
          if (std::abs(lhs[r2][col]) > std::abs(lhs[piv][col])) piv = r2;
        std::swap(lhs[col], lhs[piv]);
        std::swap(rhs[col], rhs[piv]);
        const double d = lhs[col][col];
        for (std::size_t j = 0; j < m; ++j) lhs[col][j] /= d;
        for (std::size_t j = 0; j < n; ++j) rhs[col][j] /= d;
        for (std::size_t r2 = 0; r2 < m; ++r2) {
          if (r2 == col) continue;
          const double f = lhs[r2][col];
          for (std::size_t j = 0; j < m; ++j) lhs[r2][j] -= f * lhs[col][j];
          for (std::size_t j = 0; j < n; ++j) rhs[r2][j] -= f * rhs[col][j];
        }
      }
      k_gain = rhs;
      // P = Q + A'P(A - BK)
      std::vector<std::vector<double>> abk(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          abk[i][j] = a_mat[i][j];
          for (std::size_t l = 0; l < m; ++l)
            abk[i][j] -= b_mat[i][l] * k_gain[l][j];
        }
      std::vector<std::vector<double>> pabk(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < n; ++l) pabk[i][j] += p[i][l] * abk[l][j];
      std::vector<std::vector<double>> next_p(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          next_p[i][j] = (i == j ? q_cost : 0.0);
          for (std::size_t l = 0; l < n; ++l)
            next_p[i][j] += a_mat[l][i] * pabk[l][j];
        }
      p = std::move(next_p);
    }
    env.expert = [k_gain, low = env.action_low, high = env.action_high](
                     const std::vector<double>& s, Rng&) {
      auto u = detail::matvec(k_gain, s);
      for (std::size_t i = 0; i < u.size(); ++i)
        u[i] = std::clamp(-u[i], low[i], high[i]);
      return u;
    };
  }
  return env;
}

/// Desk-scale default instance: 3 state dims, 2 action dims, mildly rotating
/// stable dynamics with per-dimension noise large enough to matter.
inline EnvSpec default_linear_env() {
  return linear_gaussian_env(
      {{0.70, 0.20, 0.00}, {-0.20, 0.70, 0.10}, {0.00, -0.10, 0.60}},
      {{1.0, 0.0}, {0.0, 1.0}, {0.5, 0.3}}, {0.30, 0.20, 0.25});
}

// ----------------------------------------------------------------------------
// Torque-limited pendulum swing-up (classic control parameters).
// ----------------------------------------------------------------------------

namespace detail {

inline constexpr double kPi = 3.14159265358979323846;

inline double wrap_angle(double th) {
  th = std::fmod(th + kPi, 2.0 * kPi);
  if (th < 0) th += 2.0 * kPi;
  return th - kPi;
}

// classic-control pendulum constants
inline constexpr double kGravity = 10.0, kMass = 1.0, kLength = 1.0;
inline constexpr double kDt = 0.05, kMaxTorque = 2.0, kMaxSpeed = 8.0;

}  // namespace detail

/// Observation [cos th, sin th, thdot], torque in [-2, 2], 200-step horizon.
/// th = 0 is upright; reward is -(angle^2 + 0.1 thdot^2 + 0.001 u^2). A
/// positive `noise_std` adds Gaussian noise to the applied torque; the
/// commanded torque still sets the action cost and `mean_step` stays
/// noise-free.
inline EnvSpec pendulum_env(double noise_std = 0.0) {
  if (noise_std < 0.0)
    throw ContractError("pendulum_env: noise_std must be non-negative");
  using detail::kMaxTorque;

  EnvSpec env;
  env.name = "pendulum";
  env.state_dim = 3;
  env.action_dim = 1;
  env.action_low = {-kMaxTorque};
  env.action_high = {kMaxTorque};
  env.horizon = 200;

  env.reset = [](Rng& rng) {
    const double th = rng.uniform(-detail::kPi, detail::kPi);
    const double thdot = rng.uniform(-1.0, 1.0);
    return std::vector<double>{std::cos(th), std::sin(th), thdot};
  };
  // u_cmd sets the action cost, u_eff drives the dynamics; they differ only
  // under torque noise.
  auto advance = [](const std::vector<double>& s, double u_cmd, double u_eff) {
    const double th = std::atan2(s[1], s[0]);
    const double thdot = s[2];
    const double angle = detail::wrap_angle(th);
    const double cost =
        angle * angle + 0.1 * thdot * thdot + 0.001 * u_cmd * u_cmd;
    double new_thdot =
        thdot + (3.0 * detail::kGravity / (2.0 * detail::kLength) *
                     std::sin(th) +
                 3.0 / (detail::kMass * detail::kLength * detail::kLength) *
                     u_eff) *
                    detail::kDt;
    new_thdot = std::clamp(new_thdot, -detail::kMaxSpeed, detail::kMaxSpeed);
    const double new_th = th + new_thdot * detail::kDt;
    return std::make_pair(
        std::vector<double>{std::cos(new_th), std::sin(new_th), new_thdot},
        -cost);
  };
  env.mean_step = [advance](const std::vector<double>& s,
                            const std::vector<double>& a) {
    const double u = std::clamp(a[0], -kMaxTorque, kMaxTorque);
    return advance(s, u, u);
  };
  env.step = [advance, noise_std](const std::vector<double>& s,
                                  const std::vector<double>& a, Rng& rng) {
    const double u = std::clamp(a[0], -kMaxTorque, kMaxTorque);
    double u_eff = u;
    if (noise_std > 0.0)
      u_eff = std::clamp(u + noise_std * rng.normal(), -kMaxTorque, kMaxTorque);
    auto [s_next, r] = advance(s, u, u_eff);
    return StepResult{std::move(s_next), r, false};
  };
  env.is_terminal = [](const std::vector<double>&) { return false; };

  // Energy-shaping swing-up with a PD stabilizer near the top.
  env.expert = [](const std::vector<double>& s, Rng&) {
    const double th = std::atan2(s[1], s[0]);
    const double thdot = s[2];
    const double angle = detail::wrap_angle(th);
    const double inertia =
        detail::kMass * detail::kLength * detail::kLength / 3.0;
    const double e_top = detail::kMass * detail::kGravity * detail::kLength / 2.0;
    const double energy = 0.5 * inertia * thdot * thdot + e_top * std::cos(th);
    double u;
    if (std::abs(angle) < 0.35 && std::abs(thdot) < 2.5) {
      u = -12.0 * angle - 2.5 * thdot;
    } else {
      const double pump = 2.0 * (e_top - energy);
      u = thdot >= 0.0 ? pump : -pump;
    }
    u = std::clamp(u, -detail::kMaxTorque, detail::kMaxTorque);
    return std::vector<double>{u};
  };
  return env;
}

// ----------------------------------------------------------------------------
// Chain MDP: one-hot states on a line, goal at the right end.
// ----------------------------------------------------------------------------

/// Tabular view of a finite MDP with deterministic transitions. Also carries
/// the encode/decode maps between indices and the one-hot states the
/// continuous-control stack consumes.
struct TabularMdp {
  std::size_t n_states = 0;
  std::vector<double> actions;  // scalar action grid
  std::vector<std::vector<std::size_t>> next;   // [state][action]
  std::vector<std::vector<double>> reward;      // [state][action]
  std::vector<bool> terminal;                   // absorbing states

  std::vector<double> encode(std::size_t idx) const {
    std::vector<double> s(n_states, 0.0);
    s.at(idx) = 1.0;
    return s;
  }
  std::size_t decode(const std::vector<double>& s) const {
    if (s.size() != n_states)
      throw DimensionError("TabularMdp::decode: wrong state size", {s.size()},
                           {n_states});
    std::size_t best = 0;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] > s[best]) best = i;
    return best;
  }
  /// Index of the grid action nearest to a continuous scalar action.
  std::size_t snap(double a) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < actions.size(); ++j)
      if (std::abs(actions[j] - a) < std::abs(actions[best] - a)) best = j;
    return best;
  }
};

struct ValueIterationResult {
  std::vector<std::vector<double>> q;  // [state][action]
  double residual = 0.0;
  std::size_t iterations = 0;
};

/// Exact optimal action values: Q(s,a) = r(s,a) + gamma * max_a' Q(s',a'),
/// with terminal successors contributing zero. Runs until the Bellman
/// residual drops below `tol`.
inline ValueIterationResult value_iteration(const TabularMdp& mdp,
                                            double gamma, double tol = 1e-12,
                                            std::size_t max_iter = 100000) {
  const std::size_t ns = mdp.n_states, na = mdp.actions.size();
  if (ns == 0 || na == 0)
    throw ContractError("value_iteration: empty MDP");
  ValueIterationResult res;
  res.q.assign(ns, std::vector<double>(na, 0.0));
  for (std::size_t it = 0; it < max_iter; ++it) {
    double delta = 0.0;
    for (std::size_t s = 0; s < ns; ++s) {
      for (std::size_t a = 0; a < na; ++a) {
        double target = mdp.reward[s][a];
        const std::size_t sn = mdp.next[s][a];
        if (!mdp.terminal[sn]) {
          double best = res.q[sn][0];
          for (std::size_t a2 = 1; a2 < na; ++a2)
            best = std::max(best, res.q[sn][a2]);
          target += gamma * best;
        }
        delta = std::max(delta, std::abs(target - res.q[s][a]));
        res.q[s][a] = target;
      }
    }
    res.residual = delta;
    res.iterations = it + 1;
    if (delta < tol) break;
  }
  return res;
}

/// Line of `n_states` cells with a grid of `n_actions` scalar actions evenly
/// spaced over [-1, 1]; each grid action moves by its rounded value
/// (left/stay/right). Reaching the rightmost cell pays +1 and terminates.
/// Continuous actions are snapped to the grid inside `step`.
inline std::pair<EnvSpec, TabularMdp> chain_mdp(std::size_t n_states = 5,
                                                std::size_t n_actions = 3) {
  if (n_states < 2) throw ContractError("chain_mdp: need at least 2 states");
  if (n_actions < 2) throw ContractError("chain_mdp: need at least 2 actions");
  TabularMdp mdp;
  mdp.n_states = n_states;
  mdp.actions.resize(n_actions);
  for (std::size_t j = 0; j < n_actions; ++j)
    mdp.actions[j] = -1.0 + 2.0 * double(j) / double(n_actions - 1);
  const std::size_t goal = n_states - 1;
  mdp.next.assign(n_states, std::vector<std::size_t>(n_actions, 0));
  mdp.reward.assign(n_states, std::vector<double>(n_actions, 0.0));
  mdp.terminal.assign(n_states, false);
  mdp.terminal[goal] = true;
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t j = 0; j < n_actions; ++j) {
      const int move = static_cast<int>(std::lround(mdp.actions[j]));
      const std::size_t sn = static_cast<std::size_t>(std::clamp(
          static_cast<int>(s) + move, 0, static_cast<int>(n_states) - 1));
      mdp.next[s][j] = sn;
      mdp.reward[s][j] = (sn == goal && s != goal) ? 1.0 : 0.0;
    }
  }

  EnvSpec env;
  env.name = "chain";
  env.state_dim = n_states;
  env.action_dim = 1;
  env.action_low = {-1.0};
  env.action_high = {1.0};
  env.horizon = 50;
  for (double a : mdp.actions) env.action_grid.push_back({a});

  env.reset = [mdp](Rng& rng) {
    // uniform over non-terminal cells
    return mdp.encode(rng.integer(mdp.n_states - 1));
  };
  auto tab = mdp;  // captured by value in the closures below
  env.mean_step = [tab](const std::vector<double>& s,
                        const std::vector<double>& a) {
    const std::size_t si = tab.decode(s);
    const std::size_t aj = tab.snap(std::clamp(a[0], -1.0, 1.0));
    return std::make_pair(tab.encode(tab.next[si][aj]), tab.reward[si][aj]);
  };
  env.step = [tab](const std::vector<double>& s, const std::vector<double>& a,
                   Rng&) {
    const std::size_t si = tab.decode(s);
    const std::size_t aj = tab.snap(std::clamp(a[0], -1.0, 1.0));
    const std::size_t sn = tab.next[si][aj];
    return StepResult{tab.encode(sn), tab.reward[si][aj], tab.terminal[sn]};
  };
  env.is_terminal = [tab](const std::vector<double>& s) {
    return tab.terminal[tab.decode(s)];
  };
  env.expert = [](const std::vector<double>&, Rng&) {
    return std::vector<double>{1.0};
  };
  return {env, mdp};
}

// ----------------------------------------------------------------------------
// Rollout driver and behavior policies.
// ----------------------------------------------------------------------------

struct RolloutSet {
  std::vector<data::Trajectory> trajectories;
  std::vector<double> returns;
  double mean_return = 0.0;
  double std_return = 0.0;
};

/// Runs `n_episodes` episodes of `policy` in the true environment. Episodes
/// stop at terminal states or the horizon; only true terminations set d.
/// Deterministic for a given rng state. Zero episodes yield an empty set.
inline RolloutSet rollout_policy(const EnvSpec& env, const Policy& policy,
                                 std::size_t n_episodes, Rng& rng) {
  RolloutSet out;
  for (std::size_t ep = 0; ep < n_episodes; ++ep) {
    data::Trajectory traj;
    std::vector<double> s = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon; ++t) {
      const auto a = env.clip_action(policy(s, rng));
      StepResult res = env.step(s, a, rng);
      data::Transition tr;
      tr.s = s;
      tr.a = a;
      tr.r = res.r;
      tr.s_next = res.s_next;
      tr.d = res.terminal;
      traj.steps.push_back(std::move(tr));
      if (res.terminal) break;
      s = std::move(res.s_next);
    }
    out.returns.push_back(traj.total_return());
    out.trajectories.push_back(std::move(traj));
  }
  if (!out.returns.empty()) {
    double sum = 0, sq = 0;
    for (double r : out.returns) {
      sum += r;
      sq += r * r;
    }
    out.mean_return = sum / double(out.returns.size());
    out.std_return = std::sqrt(std::max(
        sq / double(out.returns.size()) - out.mean_return * out.mean_return,
        0.0));
  }
  return out;
}

inline Policy random_policy(const EnvSpec& env) {
  return [low = env.action_low, high = env.action_high](
             const std::vector<double>&, Rng& rng) {
    std::vector<double> a(low.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] = rng.uniform(low[i], high[i]);
    return a;
  };
}

/// Expert with epsilon-mixed uniform noise: each step takes a uniformly
/// random action with probability eps, the expert action otherwise.
inline Policy medium_policy(const EnvSpec& env, double eps) {
  return [expert = env.expert, rand = random_policy(env), eps](
             const std::vector<double>& s, Rng& rng) {
    return rng.uniform() < eps ? rand(s, rng) : expert(s, rng);
  };
}

/// Finds the mixing rate eps whose mean return lies at `target_frac` of the
/// random-to-expert gap, by bisection on measured returns.
inline double calibrate_medium_eps(const EnvSpec& env, double random_ref,
                                   double expert_ref, double target_frac,
                                   Rng& rng, std::size_t probe_episodes = 16,
                                   std::size_t iterations = 9) {
  const double target = random_ref + target_frac * (expert_ref - random_ref);
  double lo = 0.0, hi = 1.0;  // return decreases as eps grows
  for (std::size_t i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    Rng probe = rng.fork();
    const auto set = rollout_policy(env, medium_policy(env, mid),
                                    probe_episodes, probe);
    if (set.mean_return > target)
      lo = mid;  // too close to expert: add more noise
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

enum class Grade { random, medium, expert, mixed };

inline Grade parse_grade(const std::string& s) {
  if (s == "random") return Grade::random;
  if (s == "medium") return Grade::medium;
  if (s == "expert") return Grade::expert;
  if (s == "mixed") return Grade::mixed;
  throw ConfigError("unknown dataset grade: " + s);
}

inline const char* grade_name(Grade g) {
  switch (g) {
    case Grade::random: return "random";
    case Grade::medium: return "medium";
    case Grade::expert: return "expert";
    case Grade::mixed: return "mixed";
  }
  return "?";
}

struct GeneratedDataset {
  std::vector<data::Trajectory> trajectories;
  data::DatasetMeta meta;
};

/// Rolls out the behavior policy of the requested grade and packages the
/// result with measured reference scores. The medium grade auto-calibrates
/// its noise level to sit between the random and expert references; the
/// achieved fraction of the gap is recorded in the metadata.
inline GeneratedDataset generate_dataset(const EnvSpec& env, Grade grade,
                                         std::size_t episodes,
                                         std::uint64_t seed,
                                         std::size_t reference_episodes = 50) {
  Rng rng(seed);
  Rng ref_rng = rng.fork();
  const auto random_set =
      rollout_policy(env, random_policy(env), reference_episodes, ref_rng);
  const auto expert_set =
      rollout_policy(env, env.expert, reference_episodes, ref_rng);

  GeneratedDataset out;
  out.meta.env = env.name;
  out.meta.grade = grade_name(grade);
  out.meta.episodes = episodes;
  out.meta.seed = seed;
  out.meta.random_ref = random_set.mean_return;
  out.meta.expert_ref = expert_set.mean_return;

  RolloutSet set;
  switch (grade) {
    case Grade::random:
      set = rollout_policy(env, random_policy(env), episodes, rng);
      out.meta.behavior = "uniform random actions";
      break;
    case Grade::expert:
      set = rollout_policy(env, env.expert, episodes, rng);
      out.meta.behavior = "expert policy";
      break;
    case Grade::medium: {
      const double eps =
          calibrate_medium_eps(env, random_set.mean_return,
                               expert_set.mean_return, 0.45, rng);
      set = rollout_policy(env, medium_policy(env, eps), episodes, rng);
      const double gap = expert_set.mean_return - random_set.mean_return;
      const double frac =
          gap != 0.0 ? (set.mean_return - random_set.mean_return) / gap : 0.0;
      out.meta.behavior = "expert with eps-uniform noise, eps=" +
                          format_double(eps) + ", gap fraction " +
                          format_double(frac);
      break;
    }
    case Grade::mixed: {
      const std::size_t n_rand = episodes / 3;
      const std::size_t n_med = episodes / 3;
      const std::size_t n_exp = episodes - n_rand - n_med;
      const double eps =
          calibrate_medium_eps(env, random_set.mean_return,
                               expert_set.mean_return, 0.45, rng);
      auto part = rollout_policy(env, random_policy(env), n_rand, rng);
      set = part;
      part = rollout_policy(env, medium_policy(env, eps), n_med, rng);
      for (auto& t : part.trajectories) set.trajectories.push_back(std::move(t));
      for (double r : part.returns) set.returns.push_back(r);
      part = rollout_policy(env, env.expert, n_exp, rng);
      for (auto& t : part.trajectories) set.trajectories.push_back(std::move(t));
      for (double r : part.returns) set.returns.push_back(r);
      double sum = 0, sq = 0;
      for (double r : set.returns) {
        sum += r;
        sq += r * r;
      }
      set.mean_return = set.returns.empty() ? 0.0 : sum / set.returns.size();
      set.std_return = set.returns.empty()
                           ? 0.0
                           : std::sqrt(std::max(sq / set.returns.size() -
                                                    set.mean_return *
                                                        set.mean_return,
                                                0.0));
      out.meta.behavior = "one third each of random / medium(eps=" +
                          format_double(eps) + ") / expert episodes";
      break;
    }
  }
  out.meta.mean_return = set.mean_return;
  out.meta.std_return = set.std_return;
  out.trajectories = std::move(set.trajectories);
  return out;
}

/// Factory used by the CLI; `params` may override environment defaults.
inline EnvSpec make_env(const std::string& name,
                        const nlohmann::json& params = {}) {
  const nlohmann::json p =
      params.is_object() ? params : nlohmann::json::object();
  if (name == "linear") {
    EnvSpec env = default_linear_env();
    if (p.contains("horizon")) env.horizon = p["horizon"].get<std::size_t>();
    return env;
  }
  if (name == "pendulum") {
    return pendulum_env(p.value("noise_std", 0.0));
  }
  if (name == "chain") {
    const std::size_t n = p.value("n_states", std::size_t{5});
    const std::size_t na = p.value("n_actions", std::size_t{3});
    return chain_mdp(n, na).first;
  }
  throw ConfigError("unknown environment: " + name +
                    " (expected linear, pendulum or chain)");
}

}  // namespace envformer::sim
