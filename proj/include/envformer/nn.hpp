#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "envformer/ops.hpp"
#include "envformer/rng.hpp"
#include "envformer/tensor.hpp"

namespace envformer {

/// Xavier (Glorot) uniform initialization: U(-a, a) with a = sqrt(6/(in+out)).
template <typename T>
Array<T> xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Array<T> w({fan_in, fan_out});
  for (T& x : w.data) x = static_cast<T>(rng.uniform(-a, a));
  return w;
}

/// Named parameter list. Order is stable and significant: it defines the
/// layout of optimizer state and checkpoints.
template <typename T>
struct ParamSet {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  void add(std::string name, Tensor<T> t) {
    items.emplace_back(std::move(name), std::move(t));
  }
  void add_all(const std::string& prefix, const ParamSet& other) {
    for (const auto& [name, t] : other.items) items.emplace_back(prefix + name, t);
  }
  std::size_t size() const { return items.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : items) t.zero_grad();
  }
  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(items.size());
    for (const auto& [name, t] : items) out.push_back(t);
    return out;
  }
  /// Snapshot of all parameter values (for best-checkpoint keeping, targets).
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(items.size());
    for (const auto& [name, t] : items) out.push_back(t.value().data);
    return out;
  }
  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != items.size())
      throw ContractError("ParamSet::restore: snapshot size mismatch");
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (snap[i].size() != items[i].second.numel())
        throw ContractError("ParamSet::restore: parameter size mismatch at " +
                            items[i].first);
      items[i].second.value().data = snap[i];
    }
  }
};

/// Affine layer y = x W + b with Xavier-uniform W and zero b.
template <typename T>
struct Linear {
  Tensor<T> w, b;

  Linear() = default;
  Linear(Rng& rng, std::size_t in, std::size_t out)
      : w(Tensor<T>::param(xavier_uniform<T>(rng, in, out))),
        b(Tensor<T>::param(Array<T>({out}))) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return add(tape, matmul(tape, x, w), b);
  }
  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".w", w);
    ps.add(prefix + ".b", b);
  }
};

/// Soft two-sided clamp into (lo, hi): stacked softplus edges keep the map
/// monotone and differentiable, near identity deep inside the interval.
template <typename T>
Tensor<T> soft_clamp(Tape<T>& tape, const Tensor<T>& x, double lo, double hi) {
  auto upper = add_scalar(
      tape, neg(tape, softplus(tape, add_scalar(tape, neg(tape, x), T(hi)))), T(hi));
  return add_scalar(tape, softplus(tape, add_scalar(tape, upper, T(-lo))), T(lo));
}

/// Layer norm with learned gain (ones) and bias (zeros).
template <typename T>
struct LayerNorm {
  Tensor<T> gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim)
      : gain(Tensor<T>::param(Array<T>::full({dim}, T(1)))),
        bias(Tensor<T>::param(Array<T>({dim}))) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return layernorm(tape, x, gain, bias);
  }
  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".gain", gain);
    ps.add(prefix + ".bias", bias);
  }
};

/// Plain ReLU MLP: in -> hidden x depth -> out (linear head).
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(Rng& rng, std::size_t in, std::size_t hidden, std::size_t depth,
      std::size_t out) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < depth; ++i) {
      layers.emplace_back(rng, prev, hidden);
      prev = hidden;
    }
    layers.emplace_back(rng, prev, out);
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      h = relu(tape, layers[i].forward(tape, h));
    return layers.back().forward(tape, h);
  }
  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(ps, prefix + ".l" + std::to_string(i));
  }
};

}  // namespace envformer
