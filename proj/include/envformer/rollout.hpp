#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/datasets.hpp"
#include "envformer/envsim.hpp"
#include "envformer/rng.hpp"
#include "envformer/worldmodel/model.hpp"

namespace envformer::rollout {

/// Knobs for model-based data augmentation: short branches rolled out from
/// real states, refreshed every `interval` policy gradient steps.
struct RolloutConfig {
  std::size_t horizon = 5;
  double real_ratio = 0.5;        // share of real transitions per train batch
  std::size_t capacity = 100000;  // synthetic buffer cap, oldest evicted first
  std::size_t interval = 1000;
  std::size_t branches = 400;     // branch starts per refresh round

  void validate() const {
    if (horizon == 0) throw ConfigError("rollout config: horizon must be positive");
    if (!(real_ratio >= 0.0 && real_ratio <= 1.0))
      throw ConfigError("rollout config: real_ratio must be in [0, 1]");
    if (capacity == 0) throw ConfigError("rollout config: capacity must be positive");
    if (interval == 0) throw ConfigError("rollout config: interval must be positive");
    if (branches == 0) throw ConfigError("rollout config: branches must be positive");
  }

  nlohmann::json to_json() const {
    return {{"horizon", horizon},
            {"real_ratio", real_ratio},
            {"capacity", capacity},
            {"interval", interval},
            {"branches", branches}};
  }
  static RolloutConfig from_json(const nlohmann::json& j) {
    RolloutConfig c;
    c.horizon = j.value("horizon", c.horizon);
    c.real_ratio = j.value("real_ratio", c.real_ratio);
    c.capacity = j.value("capacity", c.capacity);
    c.interval = j.value("interval", c.interval);
    c.branches = j.value("branches", c.branches);
    c.validate();
    return c;
  }
};

enum class Origin { real, synthetic };

/// Replay view over a fixed real dataset plus a bounded synthetic buffer.
/// Synthetic transitions are evicted oldest-first once the cap is reached.
class AugmentedDataset {
 public:
  AugmentedDataset(std::vector<data::Transition> real, std::size_t capacity)
      : real_(std::move(real)), capacity_(capacity) {
    if (real_.empty()) throw ContractError("augmented dataset: no real transitions");
    if (capacity_ == 0) throw ContractError("augmented dataset: capacity must be positive");
  }

  std::size_t real_size() const { return real_.size(); }
  std::size_t synthetic_size() const { return synthetic_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<data::Transition>& real() const { return real_; }
  const std::deque<data::Transition>& synthetic() const { return synthetic_; }

  void push_synthetic(data::Transition t) {
    if (synthetic_.size() == capacity_) synthetic_.pop_front();
    synthetic_.push_back(std::move(t));
  }

  /// A sampled batch: the first `n_real` items come from the real pool, the
  /// rest from the synthetic buffer.
  struct Mixed {
    std::vector<data::Transition> items;
    std::size_t n_real = 0;
  };

  /// Draws `batch` transitions with an exact real/synthetic count split:
  /// round(real_ratio * batch) real items, the remainder synthetic. While the
  /// synthetic buffer is still empty the whole batch falls back to real data.
  Mixed sample(std::size_t batch, double real_ratio, Rng& rng) const {
    if (batch == 0) throw ContractError("augmented dataset: batch must be positive");
    if (!(real_ratio >= 0.0 && real_ratio <= 1.0))
      throw ContractError("augmented dataset: real_ratio must be in [0, 1]");
    std::size_t n_real = static_cast<std::size_t>(std::llround(real_ratio * double(batch)));
    n_real = std::min(n_real, batch);
    if (synthetic_.empty()) n_real = batch;
    Mixed out;
    out.n_real = n_real;
    out.items.reserve(batch);
    for (std::size_t i = 0; i < n_real; ++i)
      out.items.push_back(real_[rng.integer(real_.size())]);
    for (std::size_t i = n_real; i < batch; ++i)
      out.items.push_back(synthetic_[rng.integer(synthetic_.size())]);
    return out;
  }

 private:
  std::vector<data::Transition> real_;
  std::deque<data::Transition> synthetic_;
  std::size_t capacity_ = 0;
};

struct BranchStats {
  std::size_t branches = 0;   // branch starts attempted
  std::size_t generated = 0;  // synthetic transitions appended
  std::size_t aborted = 0;    // branches cut short by non-finite model output
  std::size_t terminated = 0; // branches ended by the terminal predicate
};

namespace detail {

inline bool finite_step(const std::vector<double>& s, double r) {
  if (!std::isfinite(r)) return false;
  for (double x : s)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

/// Rolls `cfg.branches` short branches through the model, starting from real
/// states drawn uniformly over all transitions. Each branch seeds the model's
/// context with the recorded steps leading up to its start, then follows
/// `policy` for up to `cfg.horizon` steps, sampling from the model's
/// predictive distribution. Branches advance in lockstep so model queries are
/// batched. Non-finite outputs abort the branch (earlier steps are kept); an
/// optional terminal predicate closes branches normally and tags the final
/// transition done.
inline BranchStats branch_rollout(
    const wm::DynamicsModel& model, const std::vector<data::Trajectory>& real,
    const sim::Policy& policy, const RolloutConfig& cfg, AugmentedDataset& buffer,
    Rng& rng,
    const std::function<bool(const std::vector<double>&)>& is_terminal = nullptr) {
  cfg.validate();
  std::vector<std::size_t> offsets{0};
  for (const auto& tr : real) offsets.push_back(offsets.back() + tr.size());
  if (offsets.back() == 0) throw ContractError("branch_rollout: empty real dataset");
  const std::size_t ctx = std::max<std::size_t>(model.context_length(), 1);

  struct Branch {
    wm::History history;  // past steps, last entry pending the next action
    std::vector<double> state;
    bool alive = true;
  };
  std::vector<Branch> branches(cfg.branches);
  BranchStats stats;
  stats.branches = cfg.branches;

  for (auto& b : branches) {
    const std::size_t flat = rng.integer(offsets.back());
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const std::size_t k = flat - offsets[ti];
    const data::Trajectory& tr = real[ti];
    // Seed with up to ctx-1 recorded steps before the start state.
    const std::size_t first = k + 1 > ctx ? k + 1 - ctx : 0;
    for (std::size_t i = first; i < k; ++i)
      b.history.push_back({tr.steps[i].s, tr.steps[i].a});
    b.state = tr.steps[k].s;
  }

  for (std::size_t step = 0; step < cfg.horizon; ++step) {
    std::vector<std::size_t> alive;
    for (std::size_t i = 0; i < branches.size(); ++i)
      if (branches[i].alive) alive.push_back(i);
    if (alive.empty()) break;

    std::vector<wm::History> queries;
    queries.reserve(alive.size());
    for (const std::size_t i : alive) {
      Branch& b = branches[i];
      b.history.push_back({b.state, policy(b.state, rng)});
      while (b.history.size() > ctx) b.history.erase(b.history.begin());
      queries.push_back(b.history);
    }
    const wm::GaussianPrediction pred = model.predict(queries);

    for (std::size_t q = 0; q < alive.size(); ++q) {
      Branch& b = branches[alive[q]];
      auto [s_next, r] = model.sample(pred, q, rng);
      if (!detail::finite_step(s_next, r)) {
        b.alive = false;
        ++stats.aborted;
        continue;
      }
      const bool done = is_terminal && is_terminal(s_next);
      buffer.push_synthetic({b.state, b.history.back().a, r, s_next, done});
      ++stats.generated;
      if (done) {
        b.alive = false;
        ++stats.terminated;
      } else {
        b.state = std::move(s_next);
      }
    }
  }
  return stats;
}

}  // namespace envformer::rollout
