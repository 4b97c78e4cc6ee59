#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/checkpoint.hpp"
#include "envformer/nn.hpp"
#include "envformer/ops.hpp"
#include "envformer/rng.hpp"

namespace envformer::policy {

/// Twin action-value networks with slowly tracking target copies. Online
/// critics map [state ++ action] rows to scalars and are the only trainable
/// parameters; targets are blended toward them by an exponential moving
/// average and are only ever read.
template <typename T>
class TwinCritic {
 public:
  TwinCritic() = default;

  TwinCritic(Rng& rng, std::size_t state_dim, std::size_t action_dim,
             std::size_t hidden, std::size_t depth)
      : state_dim_(state_dim),
        action_dim_(action_dim),
        hidden_(hidden),
        depth_(depth),
        q1_(rng, state_dim + action_dim, hidden, depth, 1),
        q2_(rng, state_dim + action_dim, hidden, depth, 1),
        t1_(rng, state_dim + action_dim, hidden, depth, 1),
        t2_(rng, state_dim + action_dim, hidden, depth, 1) {
    if (state_dim_ == 0 || action_dim_ == 0)
      throw ContractError("critic: state and action dims must be positive");
    sync_targets();
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }

  Tensor<T> q1(Tape<T>& tape, const Tensor<T>& sa) const {
    return q1_.forward(tape, checked(sa));
  }
  Tensor<T> q2(Tape<T>& tape, const Tensor<T>& sa) const {
    return q2_.forward(tape, checked(sa));
  }
  Tensor<T> min_q(Tape<T>& tape, const Tensor<T>& sa) const {
    const Tensor<T>& in = checked(sa);
    return min_elem(tape, q1_.forward(tape, in), q2_.forward(tape, in));
  }

  /// Per-row min of the two online critics, computed off-tape.
  std::vector<double> online_min(const Array<T>& sa) const {
    return min_rows(q1_, q2_, sa);
  }

  /// Per-row min of the two target critics, computed off-tape.
  std::vector<double> target_min(const Array<T>& sa) const {
    return min_rows(t1_, t2_, sa);
  }

  /// Copies online parameters into the targets.
  void sync_targets() { blend_all(1.0); }

  /// targets <- (1 - rho) * targets + rho * online; rho = 1 copies exactly,
  /// rho = 0 leaves the targets untouched.
  void ema_update(double rho) {
    if (!(rho >= 0.0 && rho <= 1.0))
      throw ContractError("critic: ema rate must be in [0, 1]");
    blend_all(rho);
  }

  /// Online (trainable) parameters only.
  ParamSet<T> params() const {
    ParamSet<T> ps;
    q1_.collect(ps, "q1");
    q2_.collect(ps, "q2");
    return ps;
  }

  /// Target copies, exposed for inspection.
  ParamSet<T> target_params() const {
    ParamSet<T> ps;
    t1_.collect(ps, "t1");
    t2_.collect(ps, "t2");
    return ps;
  }

  void save(const std::string& path, std::uint64_t seed = 0,
            nlohmann::json extra_meta = nlohmann::json::object()) const {
    Checkpoint<T> ck;
    ck.seed = seed;
    ck.meta = {{"model_type", "critic"},
               {"state_dim", state_dim_},
               {"action_dim", action_dim_},
               {"hidden", hidden_},
               {"depth", depth_}};
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    ParamSet<T> ps = params();
    ps.add_all("", target_params());
    for (const auto& [name, t] : ps.items) ck.arrays.emplace_back(name, t.value());
    save_checkpoint(path, ck);
  }

  static TwinCritic load(const std::string& path) {
    Checkpoint<T> ck = load_checkpoint<T>(path);
    if (ck.meta.value("model_type", "") != std::string("critic"))
      throw SchemaError("checkpoint is not a critic: " + path);
    Rng scratch(0);
    TwinCritic c(scratch, ck.meta.at("state_dim").template get<std::size_t>(),
                 ck.meta.at("action_dim").template get<std::size_t>(),
                 ck.meta.at("hidden").template get<std::size_t>(),
                 ck.meta.at("depth").template get<std::size_t>());
    ParamSet<T> ps = c.params();
    ps.add_all("", c.target_params());
    for (auto& [name, t] : ps.items) {
      const Array<T>& src = ck.find(name);
      if (src.shape != t.shape())
        throw SchemaError("checkpoint array '" + name + "' has shape " +
                          shape_to_string(src.shape) + ", expected " +
                          shape_to_string(t.shape()));
      t.value().data = src.data;
    }
    return c;
  }

 private:
  const Tensor<T>& checked(const Tensor<T>& sa) const {
    if (sa.shape().size() != 2 || sa.shape()[1] != state_dim_ + action_dim_)
      throw DimensionError("critic: input must be [B, state+action dims]",
                           sa.shape(), {state_dim_ + action_dim_});
    return sa;
  }

  std::vector<double> min_rows(const Mlp<T>& a, const Mlp<T>& b,
                               const Array<T>& sa) const {
    Tape<T> tape(TapeOptions{false, false, false});
    Tensor<T> in = Tensor<T>::constant(sa);
    checked(in);
    Tensor<T> va = a.forward(tape, in);
    Tensor<T> vb = b.forward(tape, in);
    std::vector<double> out(va.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::min(double(va.data()[i]), double(vb.data()[i]));
    return out;
  }

  void blend_all(double rho) {
    blend_pair(q1_, t1_, rho);
    blend_pair(q2_, t2_, rho);
  }

  static void blend_pair(const Mlp<T>& online, Mlp<T>& target, double rho) {
    for (std::size_t i = 0; i < online.layers.size(); ++i) {
      blend_tensor(online.layers[i].w, target.layers[i].w, rho);
      blend_tensor(online.layers[i].b, target.layers[i].b, rho);
    }
  }

  static void blend_tensor(const Tensor<T>& src, Tensor<T> dst, double rho) {
    const T* s = src.data();
    T* d = dst.data();
    for (std::size_t i = 0; i < src.numel(); ++i)
      d[i] = T((1.0 - rho) * double(d[i]) + rho * double(s[i]));
  }

  std::size_t state_dim_ = 0;
  std::size_t action_dim_ = 0;
  std::size_t hidden_ = 0;
  std::size_t depth_ = 0;
  Mlp<T> q1_, q2_;
  Mlp<T> t1_, t2_;
};

}  // namespace envformer::policy
