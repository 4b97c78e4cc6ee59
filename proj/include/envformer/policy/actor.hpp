#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/checkpoint.hpp"
#include "envformer/nn.hpp"
#include "envformer/ops.hpp"
#include "envformer/rng.hpp"

namespace envformer::policy {

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;
// Keeps the squash Jacobian log-term finite when tanh saturates.
constexpr double kSquashEps = 1e-6;

namespace detail {
constexpr double kLog2Pi = 1.8378770664093454836;
}

template <typename T>
struct ActorSample {
  Tensor<T> action;  // [B, action_dim], strictly inside the bounds
  Tensor<T> logp;    // [B, 1] log density of `action`
};

/// Squashed-Gaussian policy: an MLP trunk feeds per-dimension mean and
/// (softly clamped) log-std heads; samples pass through tanh and an affine
/// map into the action box, with the matching change-of-variables density.
template <typename T>
class TanhGaussianActor {
 public:
  TanhGaussianActor() = default;

  TanhGaussianActor(Rng& rng, std::size_t state_dim, std::size_t action_dim,
                    std::vector<double> low, std::vector<double> high,
                    std::size_t hidden, std::size_t depth)
      : state_dim_(state_dim),
        action_dim_(action_dim),
        hidden_(hidden),
        depth_(depth),
        low_(std::move(low)),
        high_(std::move(high)) {
    if (state_dim_ == 0 || action_dim_ == 0)
      throw ContractError("actor: state and action dims must be positive");
    if (hidden_ == 0 || depth_ == 0)
      throw ContractError("actor: hidden and depth must be positive");
    if (low_.size() != action_dim_ || high_.size() != action_dim_)
      throw DimensionError("actor: bounds must match action_dim",
                           {low_.size(), high_.size()}, {action_dim_, action_dim_});
    Array<T> center({action_dim_});
    Array<T> half({action_dim_});
    for (std::size_t d = 0; d < action_dim_; ++d) {
      if (!(low_[d] < high_[d]))
        throw ContractError("actor: action bounds must satisfy low < high");
      center.data[d] = T(0.5 * (high_[d] + low_[d]));
      half.data[d] = T(0.5 * (high_[d] - low_[d]));
    }
    center_ = Tensor<T>::constant(std::move(center));
    half_ = Tensor<T>::constant(std::move(half));
    std::size_t prev = state_dim_;
    for (std::size_t i = 0; i < depth_; ++i) {
      trunk_.emplace_back(rng, prev, hidden_);
      prev = hidden_;
    }
    head_mu_ = Linear<T>(rng, prev, action_dim_);
    head_ls_ = Linear<T>(rng, prev, action_dim_);
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  const std::vector<double>& low() const { return low_; }
  const std::vector<double>& high() const { return high_; }

  /// Pre-squash Gaussian parameters: {mean, log-std} for a [B, state_dim]
  /// batch, each [B, action_dim].
  std::pair<Tensor<T>, Tensor<T>> heads(Tape<T>& tape, const Tensor<T>& states) const {
    if (states.shape().size() != 2 || states.shape()[1] != state_dim_)
      throw DimensionError("actor: states must be [B, state_dim]", states.shape(),
                           {state_dim_});
    Tensor<T> h = states;
    for (const auto& l : trunk_) h = relu(tape, l.forward(tape, h));
    Tensor<T> mu = head_mu_.forward(tape, h);
    Tensor<T> ls = soft_clamp(tape, head_ls_.forward(tape, h), kLogStdMin, kLogStdMax);
    return {mu, ls};
  }

  /// Reparameterized sample: a = center + half * tanh(mu + sigma * eta) with
  /// eta ~ N(0, I) drawn from `rng` (one draw per action element, row-major).
  /// logp is the exact density of `action`, summed across action dims.
  ActorSample<T> rsample(Tape<T>& tape, const Tensor<T>& states, Rng& rng) const {
    auto hs = heads(tape, states);
    Tensor<T>& mu = hs.first;
    Tensor<T>& ls = hs.second;
    const std::size_t bsz = states.shape()[0];
    Array<T> eta({bsz, action_dim_});
    Array<T> base({bsz, action_dim_});  // log N(eta; 0, 1), a constant offset
    for (std::size_t i = 0; i < eta.numel(); ++i) {
      const double e = rng.normal();
      eta.data[i] = T(e);
      base.data[i] = T(-0.5 * e * e - 0.5 * detail::kLog2Pi);
    }
    Tensor<T> u = add(
        tape, mu, mul(tape, exp_op(tape, ls), Tensor<T>::constant(std::move(eta))));
    Tensor<T> th = tanh_op(tape, u);
    ActorSample<T> out;
    out.action = add(tape, mul(tape, th, half_), center_);
    // Per dim: log N(u; mu, sigma) - log|da/du|, i.e. base - ls minus the
    // squash Jacobian log(half * (1 - tanh^2 u) + eps); summed across dims.
    Tensor<T> jac = log_op(
        tape,
        add_scalar(tape,
                   mul(tape, add_scalar(tape, neg(tape, square(tape, th)), T(1)),
                       half_),
                   T(kSquashEps)));
    Tensor<T> lp = sub(tape, sub(tape, Tensor<T>::constant(std::move(base)), ls), jac);
    out.logp = matmul(tape, lp, ones_col(action_dim_));
    return out;
  }

  /// Deterministic head: the squashed mean, used for evaluation.
  Tensor<T> mean_action(Tape<T>& tape, const Tensor<T>& states) const {
    auto hs = heads(tape, states);
    return add(tape, mul(tape, tanh_op(tape, hs.first), half_), center_);
  }

  std::vector<double> act_mean(const std::vector<double>& s) const {
    Tape<T> tape(TapeOptions{false, false, false});
    return to_doubles(mean_action(tape, row_tensor(s)));
  }

  std::vector<double> act_sample(const std::vector<double>& s, Rng& rng) const {
    Tape<T> tape(TapeOptions{false, false, false});
    return to_doubles(rsample(tape, row_tensor(s), rng).action);
  }

  /// Batched stochastic actions with their log densities, computed off-tape
  /// (for candidate draws whose gradients must not flow).
  std::pair<Array<double>, std::vector<double>> sample_with_logp(
      const Array<T>& states, Rng& rng) const {
    Tape<T> tape(TapeOptions{false, false, false});
    ActorSample<T> smp = rsample(tape, Tensor<T>::constant(states), rng);
    Array<double> acts({states.shape[0], action_dim_});
    for (std::size_t i = 0; i < acts.numel(); ++i)
      acts.data[i] = double(smp.action.data()[i]);
    std::vector<double> lp(states.shape[0]);
    for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = double(smp.logp.data()[i]);
    return {std::move(acts), std::move(lp)};
  }

  ParamSet<T> params() const {
    ParamSet<T> ps;
    for (std::size_t i = 0; i < trunk_.size(); ++i)
      trunk_[i].collect(ps, "t" + std::to_string(i));
    head_mu_.collect(ps, "mu");
    head_ls_.collect(ps, "ls");
    return ps;
  }

  void save(const std::string& path, std::uint64_t seed = 0,
            nlohmann::json extra_meta = nlohmann::json::object()) const {
    Checkpoint<T> ck;
    ck.seed = seed;
    ck.meta = {{"model_type", "actor"},   {"state_dim", state_dim_},
               {"action_dim", action_dim_}, {"hidden", hidden_},
               {"depth", depth_},         {"action_low", low_},
               {"action_high", high_}};
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    const ParamSet<T> ps = params();
    for (const auto& [name, t] : ps.items) ck.arrays.emplace_back(name, t.value());
    save_checkpoint(path, ck);
  }

  static TanhGaussianActor load(const std::string& path) {
    Checkpoint<T> ck = load_checkpoint<T>(path);
    if (ck.meta.value("model_type", "") != std::string("actor"))
      throw SchemaError("checkpoint is not an actor: " + path);
    Rng scratch(0);
    TanhGaussianActor a(scratch,
                        ck.meta.at("state_dim").template get<std::size_t>(),
                        ck.meta.at("action_dim").template get<std::size_t>(),
                        ck.meta.at("action_low").template get<std::vector<double>>(),
                        ck.meta.at("action_high").template get<std::vector<double>>(),
                        ck.meta.at("hidden").template get<std::size_t>(),
                        ck.meta.at("depth").template get<std::size_t>());
    ParamSet<T> ps = a.params();
    for (auto& [name, t] : ps.items) {
      const Array<T>& src = ck.find(name);
      if (src.shape != t.shape())
        throw SchemaError("checkpoint array '" + name + "' has shape " +
                          shape_to_string(src.shape) + ", expected " +
                          shape_to_string(t.shape()));
      t.value().data = src.data;
    }
    return a;
  }

 private:
  Tensor<T> row_tensor(const std::vector<double>& s) const {
    if (s.size() != state_dim_)
      throw DimensionError("actor: state size mismatch", {s.size()}, {state_dim_});
    Array<T> arr({1, state_dim_});
    for (std::size_t i = 0; i < s.size(); ++i) arr.data[i] = T(s[i]);
    return Tensor<T>::constant(std::move(arr));
  }

  static std::vector<double> to_doubles(const Tensor<T>& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = double(t.data()[i]);
    return out;
  }

  static Tensor<T> ones_col(std::size_t n) {
    return Tensor<T>::constant(Array<T>::full({n, 1}, T(1)));
  }

  std::size_t state_dim_ = 0;
  std::size_t action_dim_ = 0;
  std::size_t hidden_ = 0;
  std::size_t depth_ = 0;
  std::vector<double> low_, high_;
  Tensor<T> center_, half_;
  std::vector<Linear<T>> trunk_;
  Linear<T> head_mu_, head_ls_;
};

}  // namespace envformer::policy
