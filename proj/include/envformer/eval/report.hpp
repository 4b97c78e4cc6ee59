#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "envformer/common.hpp"
#include "envformer/envsim.hpp"
#include "envformer/eval/rollout_length.hpp"
#include "envformer/rng.hpp"

#include <nlohmann/json.hpp>

namespace envformer::eval {

/// Episode-return statistics of one policy: per-seed means, the grand mean,
/// the spread across seeds, and the pooled within-seed episode spread.
struct PolicyEvalResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> seed_means;
  std::vector<std::vector<double>> returns;  // [seed][episode]
  double mean = 0.0;
  double std_over_seeds = 0.0;
  double episode_std = 0.0;

  nlohmann::json to_json() const {
    return {{"seeds", seeds},
            {"seed_means", seed_means},
            {"returns", returns},
            {"mean", mean},
            {"std_over_seeds", std_over_seeds},
            {"episode_std", episode_std}};
  }
};

/// Undiscounted return statistics of `policy` over `n_episodes` episodes per
/// seed. Seeds are explicit so reports are reproducible run to run.
inline PolicyEvalResult evaluate_policy(
    const sim::Policy& policy, const sim::EnvSpec& env, std::size_t n_episodes,
    const std::vector<std::uint64_t>& seeds = {1, 2, 3}) {
  if (n_episodes == 0)
    throw ContractError("evaluate_policy: need at least one episode");
  if (seeds.empty())
    throw ContractError("evaluate_policy: need at least one seed");

  PolicyEvalResult res;
  res.seeds = seeds;
  double grand = 0.0, within_var = 0.0;
  for (const std::uint64_t seed : seeds) {
    Rng rng(seed);
    const sim::RolloutSet set = sim::rollout_policy(env, policy, n_episodes, rng);
    res.seed_means.push_back(set.mean_return);
    res.returns.push_back(set.returns);
    grand += set.mean_return;
    within_var += set.std_return * set.std_return;
  }
  const double n = double(seeds.size());
  res.mean = grand / n;
  double sq = 0.0;
  for (const double m : res.seed_means) sq += (m - res.mean) * (m - res.mean);
  res.std_over_seeds = std::sqrt(sq / n);
  res.episode_std = std::sqrt(within_var / n);
  return res;
}

/// Affine normalization of a return onto the random..expert scale: random
/// maps to 0, expert to 100; values outside the band are allowed.
inline double normalized_score(double mean_return, double random_ref,
                               double expert_ref) {
  if (expert_ref == random_ref)
    throw ContractError("normalized_score: reference returns coincide");
  return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref);
}

/// Versioned envelope for evaluation results. `results` holds the
/// mode-specific payload built by the report helpers below; `config`,
/// `seed` and `model_fingerprint` make every number reproducible.
struct EvalReport {
  int schema_version = 1;
  std::string mode;  // offline-rollout | online-rollout | policy
  std::string env;
  std::uint64_t seed = 0;
  std::string model_fingerprint;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json results = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"schema_version", schema_version},
            {"mode", mode},
            {"env", env},
            {"seed", seed},
            {"model_fingerprint", model_fingerprint},
            {"config", config},
            {"results", results}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    const int version = j.at("schema_version").get<int>();
    if (version != 1)
      throw SchemaError("eval report schema_version " +
                        std::to_string(version) + " is not supported");
    EvalReport r;
    r.schema_version = version;
    r.mode = j.at("mode").get<std::string>();
    r.env = j.at("env").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    r.config = j.at("config");
    r.results = j.at("results");
    return r;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write eval report to " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static EvalReport load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read eval report from " + path.string());
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

  /// Long-form `metric,value` rows flattened from the results payload,
  /// arrays expanded by index; ready for plotting tools.
  std::string to_csv() const {
    std::ostringstream out;
    out << "metric,value\n";
    flatten(results, "", out);
    return out.str();
  }

 private:
  static void flatten(const nlohmann::json& node, const std::string& prefix,
                      std::ostringstream& out) {
    if (node.is_object()) {
      for (const auto& [key, value] : node.items())
        flatten(value, prefix.empty() ? key : prefix + "." + key, out);
    } else if (node.is_array()) {
      for (std::size_t i = 0; i < node.size(); ++i)
        flatten(node[i], prefix + "." + std::to_string(i), out);
    } else {
      out << prefix << ',' << node.dump() << '\n';
    }
  }
};

/// Offline rollout-length report over one dataset.
inline EvalReport offline_report(const wm::DynamicsModel& model,
                                 const std::vector<data::Trajectory>& trajectories,
                                 const RolloutEvalConfig& cfg, std::uint64_t seed,
                                 const std::string& env_name,
                                 const std::string& fingerprint) {
  Rng rng(seed);
  const RolloutLengthStats stats =
      offline_rollout_stats(model, trajectories, cfg, rng);
  EvalReport report;
  report.mode = "offline-rollout";
  report.env = env_name;
  report.seed = seed;
  report.model_fingerprint = fingerprint;
  report.config = cfg.to_json();
  report.results = {{"rollout_length", stats.to_json()},
                    {"repetitions", cfg.repetitions}};
  return report;
}

/// Online rollout-length report, broken down by behavior grade and averaged
/// across the grades as the headline number. The medium behavior is
/// calibrated exactly like dataset generation: noise-injected expert hitting
/// the middle of the measured random..expert gap.
inline EvalReport online_report(const wm::DynamicsModel& model,
                                const sim::EnvSpec& env,
                                const RolloutEvalConfig& cfg, std::uint64_t seed,
                                const std::string& fingerprint) {
  Rng rng(seed);
  Rng ref_rng = rng.fork();
  const auto random_set =
      sim::rollout_policy(env, sim::random_policy(env), 20, ref_rng);
  const auto expert_set = sim::rollout_policy(env, env.expert, 20, ref_rng);
  const double eps = sim::calibrate_medium_eps(
      env, random_set.mean_return, expert_set.mean_return, 0.5, ref_rng);

  const std::map<std::string, sim::Policy> grades = {
      {"random", sim::random_policy(env)},
      {"medium", sim::medium_policy(env, eps)},
      {"expert", env.expert}};

  EvalReport report;
  report.mode = "online-rollout";
  report.env = env.name;
  report.seed = seed;
  report.model_fingerprint = fingerprint;
  report.config = cfg.to_json();

  nlohmann::json by_grade = nlohmann::json::object();
  double mean_of_grades = 0.0;
  for (const auto& [name, behavior] : grades) {
    const RolloutLengthStats stats =
        online_rollout_stats(model, env, behavior, cfg, rng);
    by_grade[name] = stats.to_json();
    mean_of_grades += stats.mean;
  }
  report.results = {{"by_grade", by_grade},
                    {"mean_over_grades", mean_of_grades / double(grades.size())},
                    {"medium_eps", eps}};
  return report;
}

/// Policy-return report; emits a normalized score when reference returns are
/// supplied (NaN refs skip it).
inline EvalReport policy_report(const sim::Policy& policy, const sim::EnvSpec& env,
                                std::size_t n_episodes,
                                const std::vector<std::uint64_t>& seeds,
                                const std::string& fingerprint,
                                double random_ref = std::nan(""),
                                double expert_ref = std::nan("")) {
  const PolicyEvalResult res = evaluate_policy(policy, env, n_episodes, seeds);
  EvalReport report;
  report.mode = "policy";
  report.env = env.name;
  report.seed = seeds.empty() ? 0 : seeds.front();
  report.model_fingerprint = fingerprint;
  report.config = {{"n_episodes", n_episodes}, {"seeds", seeds}};
  report.results = res.to_json();
  if (std::isfinite(random_ref) && std::isfinite(expert_ref)) {
    report.results["normalized_score"] =
        normalized_score(res.mean, random_ref, expert_ref);
    report.results["random_ref"] = random_ref;
    report.results["expert_ref"] = expert_ref;
  }
  return report;
}

}  // namespace envformer::eval
