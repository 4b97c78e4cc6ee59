#pragma once

#include <cmath>
#include <limits>
#include <string>

#include <nlohmann/json.hpp>

#include "envformer/common.hpp"
#include "envformer/worldmodel/config.hpp"

namespace envformer::policy {

/// How the conservatism term realizes its action maximization: `sampled`
/// draws candidate actions (half uniform over the action box, half from the
/// current actor, importance-corrected); `grid` evaluates the exact
/// log-sum-exp over the environment's discrete action grid.
enum class CandidateMode { sampled, grid };

inline const char* candidate_mode_name(CandidateMode m) {
  return m == CandidateMode::sampled ? "sampled" : "grid";
}
inline CandidateMode parse_candidate_mode(const std::string& s) {
  if (s == "sampled") return CandidateMode::sampled;
  if (s == "grid") return CandidateMode::grid;
  throw ConfigError("unknown candidate mode: " + s + " (expected sampled or grid)");
}

/// Entropy temperature handling: `fixed` keeps the configured value; `autotune`
/// adjusts it toward a target policy entropy during training.
enum class TemperatureMode { fixed, autotune };

inline const char* temperature_mode_name(TemperatureMode m) {
  return m == TemperatureMode::fixed ? "fixed" : "auto";
}
inline TemperatureMode parse_temperature_mode(const std::string& s) {
  if (s == "fixed") return TemperatureMode::fixed;
  if (s == "auto") return TemperatureMode::autotune;
  throw ConfigError("unknown temperature mode: " + s + " (expected fixed or auto)");
}

/// Conservative Q-learning configuration: twin critics with EMA targets and a
/// tanh-Gaussian actor. Network sizes and rates are desk-scale defaults.
struct PolicyConfig {
  std::size_t hidden = 256;
  std::size_t depth = 2;

  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double adam_eps = 1e-8;
  double gamma = 0.99;
  double tau_ema = 0.005;  // target-network tracking rate, in [0, 1]

  double cql_alpha = 5.0;        // conservatism weight, >= 0
  std::size_t cql_samples = 10;  // candidate actions per state in sampled mode
  CandidateMode candidate_mode = CandidateMode::sampled;

  TemperatureMode temperature_mode = TemperatureMode::autotune;
  double temperature = 0.1;  // fixed value, or the initial value when tuning
  double temperature_lr = 3e-4;
  // NaN = default target of -action_dim, resolved at training time.
  double target_entropy = std::numeric_limits<double>::quiet_NaN();

  std::size_t batch_size = 256;
  std::size_t gradient_steps = 10000;
  std::size_t eval_interval = 1000;  // log/eval cadence; 0 = final row only
  std::size_t eval_episodes = 5;
  double grad_clip = 10.0;
  wm::Precision precision = wm::Precision::f64;

  void validate() const {
    if (hidden == 0 || depth == 0)
      throw ConfigError("policy config: hidden and depth must be positive");
    if (!(actor_lr > 0.0) || !(critic_lr > 0.0))
      throw ConfigError("policy config: learning rates must be positive");
    if (!(gamma > 0.0 && gamma < 1.0))
      throw ConfigError("policy config: gamma must be in (0, 1)");
    if (!(tau_ema >= 0.0 && tau_ema <= 1.0))
      throw ConfigError("policy config: tau_ema must be in [0, 1]");
    if (!(cql_alpha >= 0.0))
      throw ConfigError("policy config: cql_alpha must be non-negative");
    if (cql_samples == 0)
      throw ConfigError("policy config: cql_samples must be at least 1");
    if (!(temperature >= 0.0))
      throw ConfigError("policy config: temperature must be non-negative");
    if (temperature_mode == TemperatureMode::autotune && !(temperature > 0.0))
      throw ConfigError("policy config: auto temperature needs a positive start value");
    if (batch_size == 0)
      throw ConfigError("policy config: batch_size must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"hidden", hidden},
                     {"depth", depth},
                     {"actor_lr", actor_lr},
                     {"critic_lr", critic_lr},
                     {"adam_eps", adam_eps},
                     {"gamma", gamma},
                     {"tau_ema", tau_ema},
                     {"cql_alpha", cql_alpha},
                     {"cql_samples", cql_samples},
                     {"candidate_mode", candidate_mode_name(candidate_mode)},
                     {"temperature_mode", temperature_mode_name(temperature_mode)},
                     {"temperature", temperature},
                     {"temperature_lr", temperature_lr},
                     {"batch_size", batch_size},
                     {"gradient_steps", gradient_steps},
                     {"eval_interval", eval_interval},
                     {"eval_episodes", eval_episodes},
                     {"grad_clip", grad_clip},
                     {"precision", wm::precision_name(precision)}};
    if (std::isfinite(target_entropy)) j["target_entropy"] = target_entropy;
    return j;
  }

  static PolicyConfig from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.hidden = j.value("hidden", c.hidden);
    c.depth = j.value("depth", c.depth);
    c.actor_lr = j.value("actor_lr", c.actor_lr);
    c.critic_lr = j.value("critic_lr", c.critic_lr);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.gamma = j.value("gamma", c.gamma);
    c.tau_ema = j.value("tau_ema", c.tau_ema);
    c.cql_alpha = j.value("cql_alpha", c.cql_alpha);
    c.cql_samples = j.value("cql_samples", c.cql_samples);
    if (j.contains("candidate_mode"))
      c.candidate_mode = parse_candidate_mode(j["candidate_mode"].get<std::string>());
    if (j.contains("temperature_mode"))
      c.temperature_mode =
          parse_temperature_mode(j["temperature_mode"].get<std::string>());
    c.temperature = j.value("temperature", c.temperature);
    c.temperature_lr = j.value("temperature_lr", c.temperature_lr);
    c.target_entropy = j.value("target_entropy", c.target_entropy);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.gradient_steps = j.value("gradient_steps", c.gradient_steps);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("precision"))
      c.precision = wm::parse_precision(j["precision"].get<std::string>());
    c.validate();
    return c;
  }
};

}  // namespace envformer::policy
