#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "envformer/envsim.hpp"

using namespace envformer;
using namespace envformer::sim;

TEST_CASE("unstable dynamics matrices are rejected at construction") {
  std::vector<std::vector<double>> a_bad{{1.1, 0.0}, {0.0, 0.9}};
  std::vector<std::vector<double>> b{{1.0}, {0.0}};
  REQUIRE_THROWS_AS(linear_gaussian_env(a_bad, b, {0.1, 0.1}), ContractError);

  std::vector<std::vector<double>> a_ok{{0.5, 0.0}, {0.0, 0.5}};
  REQUIRE_NOTHROW(linear_gaussian_env(a_ok, b, {0.1, 0.1}));

  // rotation with radius 0.9: stable despite complex eigenvalues
  std::vector<std::vector<double>> a_rot{{0.9 * 0.8, -0.9 * 0.6},
                                         {0.9 * 0.6, 0.9 * 0.8}};
  REQUIRE_NOTHROW(linear_gaussian_env(a_rot, b, {0.1, 0.1}));
}

TEST_CASE("linear env reward and transition match the closed form") {
  auto env = default_linear_env();
  std::vector<double> s{0.5, -0.3, 0.2}, a{0.4, -0.1};
  auto [s_next, r] = env.mean_step(s, a);
  // r = -(s's + 0.1 a'a)
  const double expect_r = -(0.5 * 0.5 + 0.3 * 0.3 + 0.2 * 0.2 +
                            0.1 * (0.4 * 0.4 + 0.1 * 0.1));
  REQUIRE(r == Catch::Approx(expect_r).epsilon(1e-12));
  // first row: 0.70*0.5 + 0.20*(-0.3) + 0 + [1,0] . a
  REQUIRE(s_next[0] == Catch::Approx(0.7 * 0.5 + 0.2 * -0.3 + 0.4).epsilon(1e-12));
}

TEST_CASE("linear env noise covariance is empirically correct at 100k draws") {
  auto env = default_linear_env();
  std::vector<double> s{0.1, 0.2, -0.1}, a{0.0, 0.0};
  const auto [mean_next, r] = env.mean_step(s, a);
  (void)r;
  Rng rng(4242);
  const int n = 100000;
  std::vector<double> sum(3, 0.0), sq(3, 0.0);
  for (int i = 0; i < n; ++i) {
    auto res = env.step(s, a, rng);
    for (int j = 0; j < 3; ++j) {
      const double w = res.s_next[j] - mean_next[j];
      sum[j] += w;
      sq[j] += w * w;
    }
  }
  for (int j = 0; j < 3; ++j) {
    const double var = sq[j] / n - (sum[j] / n) * (sum[j] / n);
    const double want = env.noise_std[j] * env.noise_std[j];
    REQUIRE(var == Catch::Approx(want).epsilon(0.05));
  }
}

TEST_CASE("zero policy on a noise-free diagonal system has geometric return") {
  std::vector<std::vector<double>> a{{0.5, 0.0}, {0.0, 0.5}};
  std::vector<std::vector<double>> b{{1.0, 0.0}, {0.0, 1.0}};
  auto env = linear_gaussian_env(a, b, {0.0, 0.0});
  Policy zero = [](const std::vector<double>&, Rng&) {
    return std::vector<double>{0.0, 0.0};
  };
  Rng rng(7);
  auto set = rollout_policy(env, zero, 3, rng);
  REQUIRE(set.trajectories.size() == 3);
  for (const auto& traj : set.trajectories) {
    REQUIRE(traj.size() == env.horizon);
    const auto& s0 = traj.steps[0].s;
    const double norm0 = s0[0] * s0[0] + s0[1] * s0[1];
    const double alpha2 = 0.25;  // squared contraction per step
    const double expect =
        -norm0 * (1.0 - std::pow(alpha2, double(env.horizon))) / (1.0 - alpha2);
    REQUIRE(traj.total_return() == Catch::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("actions are clipped to the box before stepping") {
  auto env = default_linear_env();
  std::vector<double> s{0.3, 0.1, -0.2};
  Rng r1(5), r2(5);
  auto wild = env.step(s, {15.0, -22.0}, r1);
  auto clipped = env.step(s, {1.0, -1.0}, r2);
  REQUIRE(wild.s_next == clipped.s_next);
  REQUIRE(wild.r == clipped.r);
}

TEST_CASE("pendulum upright equilibrium is a fixed point with zero reward") {
  auto env = pendulum_env();
  auto [s_next, r] = env.mean_step({1.0, 0.0, 0.0}, {0.0});
  REQUIRE(s_next[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(s_next[1] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(s_next[2] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(r == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("pendulum dynamics match a hand-computed Euler step") {
  auto env = pendulum_env();
  // th = pi/2 (hanging sideways), thdot = 0.5, torque 1
  const double th = 3.14159265358979323846 / 2.0;
  std::vector<double> s{std::cos(th), std::sin(th), 0.5};
  auto [s_next, r] = env.mean_step(s, {1.0});
  const double new_thdot = 0.5 + (15.0 * std::sin(th) + 3.0 * 1.0) * 0.05;
  const double new_th = th + new_thdot * 0.05;
  REQUIRE(s_next[2] == Catch::Approx(new_thdot).epsilon(1e-12));
  REQUIRE(s_next[0] == Catch::Approx(std::cos(new_th)).epsilon(1e-12));
  REQUIRE(s_next[1] == Catch::Approx(std::sin(new_th)).epsilon(1e-12));
  REQUIRE(r == Catch::Approx(-(th * th + 0.1 * 0.25 + 0.001)).epsilon(1e-12));
}

TEST_CASE("pendulum clamps angular velocity") {
  auto env = pendulum_env();
  std::vector<double> s{std::cos(2.0), std::sin(2.0), 7.9};
  for (int i = 0; i < 50; ++i) {
    auto [s2, r] = env.mean_step(s, {2.0});
    (void)r;
    REQUIRE(std::abs(s2[2]) <= 8.0);
    s = s2;
  }
}

TEST_CASE("pendulum torque noise perturbs step but not mean_step") {
  auto noisy = pendulum_env(0.5);
  auto clean = pendulum_env();
  std::vector<double> s{std::cos(1.0), std::sin(1.0), 0.3};
  auto mean = clean.mean_step(s, {1.0});
  auto noisy_mean = noisy.mean_step(s, {1.0});
  REQUIRE(noisy_mean.first == mean.first);
  REQUIRE(noisy_mean.second == mean.second);
  Rng rng(11);
  auto stepped = noisy.step(s, {1.0}, rng);
  REQUIRE(stepped.s_next != mean.first);
  REQUIRE(stepped.r == mean.second);  // cost charges the commanded torque
  REQUIRE_THROWS_AS(pendulum_env(-0.1), ContractError);
}

TEST_CASE("pendulum random policy lands in the expected return band") {
  auto env = pendulum_env();
  Rng rng(1234);
  auto set = rollout_policy(env, random_policy(env), 200, rng);
  REQUIRE(set.mean_return > -1700.0);
  REQUIRE(set.mean_return < -900.0);
}

TEST_CASE("pendulum expert swings up and far outperforms random") {
  auto env = pendulum_env();
  Rng rng(1234);
  auto rnd = rollout_policy(env, random_policy(env), 50, rng);
  auto exp = rollout_policy(env, env.expert, 50, rng);
  REQUIRE(exp.mean_return > -350.0);
  REQUIRE(exp.mean_return > rnd.mean_return + 700.0);
}

TEST_CASE("linear expert (LQR) clearly beats random") {
  auto env = default_linear_env();
  Rng rng(99);
  auto rnd = rollout_policy(env, random_policy(env), 100, rng);
  auto exp = rollout_policy(env, env.expert, 100, rng);
  REQUIRE(exp.mean_return > rnd.mean_return + 100.0);
}

TEST_CASE("chain value iteration reproduces the analytic optimum") {
  auto [env, mdp] = chain_mdp(5);
  const double gamma = 0.9;
  auto vi = value_iteration(mdp, gamma);
  REQUIRE(vi.residual < 1e-10);
  // moving right from cell s reaches the goal in (4 - s) steps
  for (std::size_t s = 0; s < 4; ++s) {
    const double expect = std::pow(gamma, double(3 - s));
    REQUIRE(vi.q[s][2] == Catch::Approx(expect).epsilon(1e-12));
  }
  // staying costs one extra discount step
  REQUIRE(vi.q[2][1] == Catch::Approx(gamma * vi.q[2][2]).epsilon(1e-12));
  // moving left from cell 0 stays put
  REQUIRE(vi.q[0][0] == Catch::Approx(gamma * vi.q[0][2]).epsilon(1e-12));
}

TEST_CASE("value iteration with zero discount returns immediate rewards") {
  auto [env, mdp] = chain_mdp(5);
  auto vi = value_iteration(mdp, 0.0);
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(vi.q[s][j] == mdp.reward[s][j]);
  REQUIRE(vi.q[3][2] == 1.0);
  REQUIRE(vi.q[2][2] == 0.0);
}

TEST_CASE("chain action grids scale with n_actions") {
  auto [env, mdp] = chain_mdp(4, 5);
  REQUIRE(mdp.actions == std::vector<double>{-1.0, -0.5, 0.0, 0.5, 1.0});
  REQUIRE(mdp.next[1][0] == 0);
  REQUIRE(mdp.next[1][1] == 0);  // -0.5 rounds to a left move
  REQUIRE(mdp.next[1][2] == 1);
  REQUIRE(mdp.next[1][3] == 2);
  REQUIRE(mdp.next[1][4] == 2);
  REQUIRE(env.action_grid.size() == 5);
  REQUIRE_THROWS_AS(chain_mdp(5, 1), ContractError);
}

TEST_CASE("chain snaps continuous actions to its grid") {
  auto [env, mdp] = chain_mdp(5);
  REQUIRE(mdp.snap(0.7) == 2);
  REQUIRE(mdp.snap(0.2) == 1);
  REQUIRE(mdp.snap(-0.6) == 0);
  auto s = mdp.encode(2);
  Rng rng(1);
  auto res = env.step(s, {0.9}, rng);
  REQUIRE(mdp.decode(res.s_next) == 3);
}

TEST_CASE("chain terminates with reward exactly at the goal") {
  auto [env, mdp] = chain_mdp(5);
  Rng rng(3);
  auto res = env.step(mdp.encode(3), {1.0}, rng);
  REQUIRE(res.terminal);
  REQUIRE(res.r == 1.0);
  REQUIRE(env.is_terminal(res.s_next));

  auto set = rollout_policy(env, env.expert, 5, rng);
  for (const auto& traj : set.trajectories) {
    REQUIRE(traj.steps.back().d);
    REQUIRE(traj.total_return() == 1.0);
    for (std::size_t t = 0; t + 1 < traj.size(); ++t)
      REQUIRE_FALSE(traj.steps[t].d);
  }
}

TEST_CASE("rollout_policy with zero episodes returns an empty set") {
  auto env = default_linear_env();
  Rng rng(1);
  auto set = rollout_policy(env, random_policy(env), 0, rng);
  REQUIRE(set.trajectories.empty());
  REQUIRE(set.returns.empty());
}

TEST_CASE("rollouts are deterministic for a fixed seed") {
  auto env = pendulum_env();
  Rng r1(88), r2(88);
  auto a = rollout_policy(env, random_policy(env), 3, r1);
  auto b = rollout_policy(env, random_policy(env), 3, r2);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(a.trajectories[i].size() == b.trajectories[i].size());
    for (std::size_t t = 0; t < a.trajectories[i].size(); ++t) {
      REQUIRE(a.trajectories[i].steps[t].s == b.trajectories[i].steps[t].s);
      REQUIRE(a.trajectories[i].steps[t].a == b.trajectories[i].steps[t].a);
      REQUIRE(a.trajectories[i].steps[t].r == b.trajectories[i].steps[t].r);
    }
  }
}

TEST_CASE("time-limit truncation is not marked terminal") {
  auto env = pendulum_env();
  env.horizon = 25;
  Rng rng(9);
  auto set = rollout_policy(env, random_policy(env), 2, rng);
  for (const auto& traj : set.trajectories) {
    REQUIRE(traj.size() == 25);
    REQUIRE_FALSE(traj.steps.back().d);
  }
}

TEST_CASE("medium datasets sit between random and expert") {
  auto env = pendulum_env();
  auto gen = generate_dataset(env, Grade::medium, 24, 2025, 30);
  const double gap = gen.meta.expert_ref - gen.meta.random_ref;
  REQUIRE(gap > 0);
  const double frac = (gen.meta.mean_return - gen.meta.random_ref) / gap;
  REQUIRE(frac > 0.25);
  REQUIRE(frac < 0.68);
  REQUIRE(gen.meta.behavior.find("eps=") != std::string::npos);
  REQUIRE(gen.trajectories.size() == 24);
}

TEST_CASE("mixed datasets contain all three grades") {
  auto env = default_linear_env();
  auto gen = generate_dataset(env, Grade::mixed, 9, 11, 20);
  REQUIRE(gen.trajectories.size() == 9);
  REQUIRE(gen.meta.grade == std::string("mixed"));
}

TEST_CASE("environment factory handles names and rejects unknowns") {
  REQUIRE(make_env("linear").name == "linear");
  REQUIRE(make_env("pendulum").state_dim == 3);
  REQUIRE(make_env("chain", {{"n_states", 7}}).state_dim == 7);
  REQUIRE_THROWS_AS(make_env("cartpole"), ConfigError);
}
