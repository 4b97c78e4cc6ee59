#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "envformer/array.hpp"
#include "envformer/common.hpp"
#include "envformer/datasets.hpp"
#include "envformer/rng.hpp"

namespace envformer::wm {

/// One observed (state, action) pair in a model query context.
struct HistoryStep {
  std::vector<double> s;
  std::vector<double> a;
};

/// Query context for a dynamics model: the steps leading up to and including
/// the transition to predict, oldest first. Models that only condition on the
/// last step ignore the prefix.
using History = std::vector<HistoryStep>;

/// Gaussian belief over the normalized (next_state, reward) vector for a
/// batch of queries. Shapes are [batch, 1, state_dim + 1]; the two sigma
/// fields separate irreducible environment noise from model disagreement.
struct GaussianPrediction {
  Array<double> mu;
  Array<double> sigma_au;  // aleatoric: irreducible transition noise
  Array<double> sigma_eu;  // epistemic: model uncertainty

  std::size_t batch() const { return mu.shape.empty() ? 0 : mu.shape[0]; }
  std::size_t out_dim() const { return mu.shape.empty() ? 0 : mu.shape.back(); }

  const double* mu_row(std::size_t i) const { return mu.data.data() + i * out_dim(); }
  const double* au_row(std::size_t i) const { return sigma_au.data.data() + i * out_dim(); }
  const double* eu_row(std::size_t i) const { return sigma_eu.data.data() + i * out_dim(); }
};

/// Draws one normalized sample per batch row: mu + sigma_au*n1 + sigma_eu*n2
/// with independent standard normals n1, n2 per element.
inline Array<double> sample_prediction(const GaussianPrediction& pred, Rng& rng) {
  Array<double> out = pred.mu;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double n1 = rng.normal();
    const double n2 = rng.normal();
    out.data[i] = pred.mu.data[i] + pred.sigma_au.data[i] * n1 + pred.sigma_eu.data[i] * n2;
  }
  return out;
}

/// Common interface for learned and synthetic dynamics models. Queries take
/// env-unit histories; `predict` returns a normalized-space belief, and the
/// sample/mean helpers map back to env units. Implementations must be
/// deterministic in `predict` and safe to query concurrently.
class DynamicsModel {
 public:
  virtual ~DynamicsModel() = default;

  virtual GaussianPrediction predict(const std::vector<History>& queries) const = 0;
  virtual const data::Normalizer& normalizer() const = 0;
  /// Longest history prefix the model conditions on.
  virtual std::size_t context_length() const = 0;

  std::size_t state_dim() const { return normalizer().state_dim(); }
  std::size_t action_dim() const { return normalizer().action_dim(); }

  /// Stochastic next step in env units for batch row `i`.
  std::pair<std::vector<double>, double> sample(const GaussianPrediction& pred,
                                                std::size_t i, Rng& rng) const {
    const std::size_t od = pred.out_dim();
    check_row(pred, i);
    std::vector<double> phi(od);
    const double* mu = pred.mu_row(i);
    const double* au = pred.au_row(i);
    const double* eu = pred.eu_row(i);
    for (std::size_t d = 0; d < od; ++d) {
      const double n1 = rng.normal();
      const double n2 = rng.normal();
      phi[d] = mu[d] + au[d] * n1 + eu[d] * n2;
    }
    return denorm(phi);
  }

  /// Mean next step in env units for batch row `i`.
  std::pair<std::vector<double>, double> mean(const GaussianPrediction& pred,
                                              std::size_t i) const {
    check_row(pred, i);
    std::vector<double> phi(pred.mu_row(i), pred.mu_row(i) + pred.out_dim());
    return denorm(phi);
  }

 private:
  void check_row(const GaussianPrediction& pred, std::size_t i) const {
    if (i >= pred.batch())
      throw ContractError("prediction row " + std::to_string(i) + " out of range (batch " +
                          std::to_string(pred.batch()) + ")");
    if (pred.out_dim() != state_dim() + 1)
      throw DimensionError("prediction width does not match model output",
                           pred.mu.shape, {pred.batch(), 1, state_dim() + 1});
  }

  std::pair<std::vector<double>, double> denorm(const std::vector<double>& phi) const {
    const std::size_t sd = state_dim();
    std::vector<double> s_next(phi.begin(), phi.begin() + static_cast<std::ptrdiff_t>(sd));
    s_next = normalizer().denormalize_state(s_next);
    const double r = normalizer().denormalize_reward(phi[sd]);
    return {std::move(s_next), r};
  }
};

namespace detail {

inline void require_nonempty_queries(const std::vector<History>& queries) {
  if (queries.empty()) throw ContractError("model query batch is empty");
  for (const History& h : queries)
    if (h.empty()) throw ContractError("model query has an empty history");
}

}  // namespace detail

}  // namespace envformer::wm
