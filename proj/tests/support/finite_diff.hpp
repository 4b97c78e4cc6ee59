#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "envformer/nn.hpp"
#include "envformer/tensor.hpp"

namespace testsupport {

// Central-difference gradient oracle. The loss function must rebuild the
// forward pass from scratch on every call: it receives no tape and must not
// share state with the analytic pass. Any stochastic element (dropout masks,
// sampling noise) has to be frozen by the caller so f is deterministic.
struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares analytic gradients (already accumulated in the parameters) with
/// central differences of `loss_fn` at step h. Relative error is
/// |a - n| / max(|a|, |n|, floor) per element.
template <typename T>
FdReport finite_diff_check(envformer::ParamSet<T>& params,
                           const std::function<double()>& loss_fn,
                           double h = 1e-5, double floor = 1e-6,
                           std::size_t max_per_param = 0) {
  FdReport rep;
  for (auto& [name, p] : params.items) {
    const std::size_t n = p.numel();
    const std::size_t limit =
        (max_per_param == 0 || max_per_param > n) ? n : max_per_param;
    for (std::size_t j = 0; j < limit; ++j) {
      T* w = p.data();
      const T saved = w[j];
      w[j] = saved + static_cast<T>(h);
      const double up = loss_fn();
      w[j] = saved - static_cast<T>(h);
      const double down = loss_fn();
      w[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(p.grad()[j]);
      const double abs_err = std::abs(analytic - numeric);
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = abs_err / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.max_abs_err = abs_err;
        rep.worst_param = name;
        rep.worst_index = j;
      }
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace testsupport
