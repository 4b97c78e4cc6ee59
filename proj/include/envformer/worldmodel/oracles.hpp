#pragma once

#include <cmath>
#include <cstring>
#include <utility>
#include <vector>

#include "envformer/envsim.hpp"
#include "envformer/worldmodel/model.hpp"

namespace envformer::wm {

/// Perfect dynamics model built from the true environment: mean predictions
/// are exact, aleatoric sigma reflects the real process noise, epistemic
/// sigma is zero. Useful as a reference point in evaluation harnesses.
class OracleModel : public DynamicsModel {
 public:
  OracleModel(sim::EnvSpec env, data::Normalizer norm)
      : env_(std::move(env)), norm_(std::move(norm)) {
    if (!env_.mean_step)
      throw ContractError("oracle model needs an environment with mean_step");
  }

  const data::Normalizer& normalizer() const override { return norm_; }
  std::size_t context_length() const override { return 1; }

  GaussianPrediction predict(const std::vector<History>& queries) const override {
    detail::require_nonempty_queries(queries);
    const std::size_t bsz = queries.size();
    const std::size_t od = norm_.state_dim() + 1;
    GaussianPrediction pred;
    pred.mu = Array<double>({bsz, 1, od});
    pred.sigma_au = Array<double>({bsz, 1, od});
    pred.sigma_eu = Array<double>({bsz, 1, od});
    for (std::size_t i = 0; i < bsz; ++i) {
      const HistoryStep& last = queries[i].back();
      auto [s_next, r] = env_.mean_step(last.s, last.a);
      const auto y = norm_.normalize_target(s_next, r);
      for (std::size_t d = 0; d < od; ++d) pred.mu.data[i * od + d] = y[d];
      // Process noise in normalized units; reward noise is zero for the
      // built-in environments.
      for (std::size_t d = 0; d + 1 < od && d < env_.noise_std.size(); ++d)
        pred.sigma_au.data[i * od + d] =
            env_.noise_std[d] / std::max(norm_.state_std[d], 1e-12);
    }
    return pred;
  }

 private:
  sim::EnvSpec env_;
  data::Normalizer norm_;
};

/// Degenerate baseline: always predicts the dataset mean (zero in normalized
/// space) with unit total sigma. Any competent evaluation should reject it
/// immediately.
class ConstantMeanModel : public DynamicsModel {
 public:
  explicit ConstantMeanModel(data::Normalizer norm) : norm_(std::move(norm)) {}

  const data::Normalizer& normalizer() const override { return norm_; }
  std::size_t context_length() const override { return 1; }

  GaussianPrediction predict(const std::vector<History>& queries) const override {
    detail::require_nonempty_queries(queries);
    const std::size_t od = norm_.state_dim() + 1;
    GaussianPrediction pred;
    pred.mu = Array<double>({queries.size(), 1, od});
    pred.sigma_au = Array<double>::full({queries.size(), 1, od}, 1.0);
    pred.sigma_eu = Array<double>({queries.size(), 1, od});
    return pred;
  }

 private:
  data::Normalizer norm_;
};

/// Oracle with deterministic pseudo-noise of controllable size added to the
/// normalized mean. The perturbation is a pure function of the queried
/// (state, action) bytes, so repeated queries agree; raising `noise_scale`
/// degrades accuracy smoothly, which makes this the calibration rig for
/// model-quality metrics.
class CorruptedOracleModel : public DynamicsModel {
 public:
  CorruptedOracleModel(sim::EnvSpec env, data::Normalizer norm, double noise_scale)
      : oracle_(std::move(env), norm), norm_(std::move(norm)), scale_(noise_scale) {
    if (!(noise_scale >= 0.0))
      throw ContractError("corrupted oracle: noise_scale must be non-negative");
  }

  const data::Normalizer& normalizer() const override { return norm_; }
  std::size_t context_length() const override { return 1; }
  double noise_scale() const { return scale_; }

  GaussianPrediction predict(const std::vector<History>& queries) const override {
    GaussianPrediction pred = oracle_.predict(queries);
    const std::size_t od = pred.out_dim();
    for (std::size_t i = 0; i < queries.size(); ++i) {
      Rng noise(query_hash(queries[i].back()));
      for (std::size_t d = 0; d < od; ++d)
        pred.mu.data[i * od + d] += scale_ * noise.normal();
    }
    return pred;
  }

 private:
  static std::uint64_t query_hash(const HistoryStep& step) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const std::vector<double>& v) {
      h = fnv1a(reinterpret_cast<const unsigned char*>(v.data()),
                v.size() * sizeof(double), h);
    };
    mix(step.s);
    mix(step.a);
    return h;
  }

  OracleModel oracle_;
  data::Normalizer norm_;
  double scale_;
};

}  // namespace envformer::wm
