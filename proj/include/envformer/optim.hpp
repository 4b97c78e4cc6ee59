#pragma once

#include <cmath>
#include <vector>

#include "envformer/nn.hpp"
#include "envformer/tensor.hpp"

namespace envformer {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  // Larger-than-usual epsilon; keeps update magnitudes tame when second
  // moments are tiny early in training.
  double eps = 1e-4;
  double weight_decay = 0.0;  // decoupled (applied to weights, not gradients)
};

/// Per-parameter first/second moment buffers plus the shared step counter.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;

  static AdamState init(const std::vector<Tensor<T>>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), T(0));
      st.v.emplace_back(p.numel(), T(0));
    }
    return st;
  }
};

/// One AdamW step over `params` using their accumulated gradients.
/// Bias-corrected moments; weight decay is decoupled from the moments.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("adam_step: state buffers do not match parameters");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    if (!p.requires_grad())
      throw ContractError("adam_step: parameter does not require grad");
    if (state.m[i].size() != p.numel())
      throw ContractError("adam_step: state size mismatch at parameter " +
                          std::to_string(i));
    const std::size_t n = p.numel();
    T* w = p.data();
    const T* g = p.grad().data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] * inv_bc1;
      const T vhat = v[j] * inv_bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
    }
  }
}

/// Convenience wrapper owning the state for a fixed parameter list.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Tensor<T>> params, AdamConfig cfg)
      : params_(std::move(params)),
        cfg_(cfg),
        state_(AdamState<T>::init(params_)) {}

  void step() { adam_step(params_, state_, cfg_); }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return state_.step; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  AdamState<T> state_;
};

/// Global gradient norm over a parameter list (diagnostic + clipping).
template <typename T>
double grad_norm(const std::vector<Tensor<T>>& params) {
  double acc = 0;
  for (const auto& p : params)
    for (const T g : p.grad()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

/// Scales all gradients so the global norm is at most `max_norm`.
template <typename T>
void clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const T s = static_cast<T>(max_norm / norm);
  for (auto& p : params)
    for (T& g : p.grad()) g *= s;
}

}  // namespace envformer
