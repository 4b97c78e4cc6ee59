#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envformer/array.hpp"
#include "envformer/common.hpp"
#include "envformer/rng.hpp"

namespace envformer::data {

// ----------------------------------------------------------------------------
// Core record types. Raw environment units; normalization happens at batch
// assembly time.
// ----------------------------------------------------------------------------

struct Transition {
  std::vector<double> s;
  std::vector<double> a;
  double r = 0.0;
  std::vector<double> s_next;
  bool d = false;  // true environment termination only, not time limits
};

struct Trajectory {
  std::vector<Transition> steps;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }

  /// Structural invariants: consecutive states chain, and only the final
  /// step may be terminal.
  void validate() const {
    for (std::size_t t = 0; t + 1 < steps.size(); ++t) {
      if (steps[t].s_next != steps[t + 1].s)
        throw SchemaError("trajectory breaks the chain s_next(t) == s(t+1) at step " +
                          std::to_string(t));
      if (steps[t].d)
        throw SchemaError("non-final step " + std::to_string(t) +
                          " is marked terminal");
    }
  }

  double total_return() const {
    double acc = 0;
    for (const auto& tr : steps) acc += tr.r;
    return acc;
  }
};

inline std::vector<Transition> flatten_transitions(
    const std::vector<Trajectory>& trajs) {
  std::vector<Transition> out;
  std::size_t n = 0;
  for (const auto& tr : trajs) n += tr.size();
  out.reserve(n);
  for (const auto& tr : trajs)
    out.insert(out.end(), tr.steps.begin(), tr.steps.end());
  return out;
}

// ----------------------------------------------------------------------------
// Normalization statistics.
// ----------------------------------------------------------------------------

/// Per-dimension mean/std for states and actions plus scalar reward stats.
/// Standard deviations are population stds, floored at 1e-6 so that constant
/// dimensions stay finite under normalization.
struct Normalizer {
  std::vector<double> state_mean, state_std;
  std::vector<double> action_mean, action_std;
  double reward_mean = 0.0, reward_std = 1.0;

  static constexpr double kStdFloor = 1e-6;

  std::size_t state_dim() const { return state_mean.size(); }
  std::size_t action_dim() const { return action_mean.size(); }

  std::vector<double> normalize_state(const std::vector<double>& s) const {
    check_dim(s.size(), state_mean.size(), "state");
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
      out[i] = (s[i] - state_mean[i]) / state_std[i];
    return out;
  }
  std::vector<double> denormalize_state(const std::vector<double>& s) const {
    check_dim(s.size(), state_mean.size(), "state");
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
      out[i] = s[i] * state_std[i] + state_mean[i];
    return out;
  }
  std::vector<double> normalize_action(const std::vector<double>& a) const {
    check_dim(a.size(), action_mean.size(), "action");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      out[i] = (a[i] - action_mean[i]) / action_std[i];
    return out;
  }
  double normalize_reward(double r) const {
    return (r - reward_mean) / reward_std;
  }
  double denormalize_reward(double r) const {
    return r * reward_std + reward_mean;
  }

  /// Prediction target for one transition: normalized next state with the
  /// normalized reward appended (length state_dim + 1).
  std::vector<double> normalize_target(const std::vector<double>& s_next,
                                       double r) const {
    std::vector<double> out = normalize_state(s_next);
    out.push_back(normalize_reward(r));
    return out;
  }

  nlohmann::json to_json() const {
    return {{"state_mean", state_mean},   {"state_std", state_std},
            {"action_mean", action_mean}, {"action_std", action_std},
            {"reward_mean", reward_mean}, {"reward_std", reward_std}};
  }
  static Normalizer from_json(const nlohmann::json& j) {
    Normalizer n;
    n.state_mean = j.at("state_mean").get<std::vector<double>>();
    n.state_std = j.at("state_std").get<std::vector<double>>();
    n.action_mean = j.at("action_mean").get<std::vector<double>>();
    n.action_std = j.at("action_std").get<std::vector<double>>();
    n.reward_mean = j.at("reward_mean").get<double>();
    n.reward_std = j.at("reward_std").get<double>();
    return n;
  }

 private:
  static void check_dim(std::size_t got, std::size_t want, const char* what) {
    if (got != want)
      throw DimensionError(std::string("Normalizer: ") + what +
                               " dimension mismatch",
                           {got}, {want});
  }
};

/// Fits over every state visited (s of each step plus the final s_next of
/// each trajectory), all actions and all rewards.
inline Normalizer fit_normalizer(const std::vector<Trajectory>& trajs) {
  std::size_t sd = 0, ad = 0;
  for (const auto& tr : trajs)
    if (!tr.empty()) {
      sd = tr.steps[0].s.size();
      ad = tr.steps[0].a.size();
      break;
    }
  if (sd == 0) throw ContractError("fit_normalizer: no transitions");

  std::vector<double> s_sum(sd, 0), s_sq(sd, 0), a_sum(ad, 0), a_sq(ad, 0);
  double r_sum = 0, r_sq = 0;
  std::size_t ns = 0, na = 0;
  auto add_state = [&](const std::vector<double>& s) {
    for (std::size_t i = 0; i < sd; ++i) {
      s_sum[i] += s[i];
      s_sq[i] += s[i] * s[i];
    }
    ++ns;
  };
  for (const auto& tr : trajs) {
    for (const auto& step : tr.steps) {
      add_state(step.s);
      for (std::size_t i = 0; i < ad; ++i) {
        a_sum[i] += step.a[i];
        a_sq[i] += step.a[i] * step.a[i];
      }
      ++na;
      r_sum += step.r;
      r_sq += step.r * step.r;
    }
    if (!tr.empty()) add_state(tr.steps.back().s_next);
  }

  Normalizer n;
  n.state_mean.resize(sd);
  n.state_std.resize(sd);
  n.action_mean.resize(ad);
  n.action_std.resize(ad);
  for (std::size_t i = 0; i < sd; ++i) {
    n.state_mean[i] = s_sum[i] / double(ns);
    const double var = s_sq[i] / double(ns) - n.state_mean[i] * n.state_mean[i];
    n.state_std[i] = std::max(std::sqrt(std::max(var, 0.0)), Normalizer::kStdFloor);
  }
  for (std::size_t i = 0; i < ad; ++i) {
    n.action_mean[i] = a_sum[i] / double(na);
    const double var = a_sq[i] / double(na) - n.action_mean[i] * n.action_mean[i];
    n.action_std[i] = std::max(std::sqrt(std::max(var, 0.0)), Normalizer::kStdFloor);
  }
  n.reward_mean = r_sum / double(na);
  const double rvar = r_sq / double(na) - n.reward_mean * n.reward_mean;
  n.reward_std = std::max(std::sqrt(std::max(rvar, 0.0)), Normalizer::kStdFloor);
  return n;
}

// ----------------------------------------------------------------------------
// Sequence batches for model training.
// ----------------------------------------------------------------------------

/// Fixed-length training windows in normalized units. Position (b, t) holds
/// step t of window b; mask is 1 for valid positions, 0 for padding. Targets
/// stack the normalized next state and reward: [B, T, state_dim + 1].
template <typename T>
struct SequenceBatch {
  Array<T> states;   // [B, T, sd]
  Array<T> actions;  // [B, T, ad]
  Array<T> targets;  // [B, T, sd+1]
  Array<T> mask;     // [B, T]
  std::size_t batch = 0, seq_len = 0;
  std::size_t valid_positions = 0;
};

/// Draws `batch` windows of length `seq_len`. The (trajectory, start) pair is
/// uniform over all transitions, so trajectories contribute in proportion to
/// their length. Windows that run off the end of a trajectory are left
/// aligned and padded with mask 0.
template <typename T>
SequenceBatch<T> sample_sequence_batch(const std::vector<Trajectory>& trajs,
                                       const Normalizer& norm,
                                       std::size_t batch, std::size_t seq_len,
                                       Rng& rng) {
  if (batch == 0 || seq_len == 0)
    throw ContractError("sample_sequence_batch: batch and seq_len must be positive");
  std::vector<std::size_t> offsets;  // cumulative transition counts
  offsets.reserve(trajs.size() + 1);
  offsets.push_back(0);
  for (const auto& tr : trajs) offsets.push_back(offsets.back() + tr.size());
  const std::size_t total = offsets.back();
  if (total == 0) throw ContractError("sample_sequence_batch: empty dataset");

  const std::size_t sd = norm.state_dim(), ad = norm.action_dim();
  SequenceBatch<T> out;
  out.batch = batch;
  out.seq_len = seq_len;
  out.states = Array<T>({batch, seq_len, sd});
  out.actions = Array<T>({batch, seq_len, ad});
  out.targets = Array<T>({batch, seq_len, sd + 1});
  out.mask = Array<T>({batch, seq_len});

  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t flat = rng.integer(total);
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const std::size_t start = flat - offsets[ti];
    const Trajectory& tr = trajs[ti];
    const std::size_t n_valid = std::min(seq_len, tr.size() - start);
    for (std::size_t t = 0; t < n_valid; ++t) {
      const Transition& step = tr.steps[start + t];
      const auto s = norm.normalize_state(step.s);
      const auto a = norm.normalize_action(step.a);
      const auto y = norm.normalize_target(step.s_next, step.r);
      for (std::size_t i = 0; i < sd; ++i) out.states.at3(b, t, i) = T(s[i]);
      for (std::size_t i = 0; i < ad; ++i) out.actions.at3(b, t, i) = T(a[i]);
      for (std::size_t i = 0; i <= sd; ++i) out.targets.at3(b, t, i) = T(y[i]);
      out.mask.at2(b, t) = T(1);
    }
    out.valid_positions += n_valid;
  }
  return out;
}

// ----------------------------------------------------------------------------
// On-disk formats. Two interchangeable encodings:
//   * JSONL: one transition per line with explicit trajectory/step indices
//   * binary: magic-tagged, little-endian, length-prefixed
// ----------------------------------------------------------------------------

enum class DatasetFormat { jsonl, binary };

inline constexpr char kDatasetMagic[8] = {'E', 'F', 'D', 'S', '0', '0', '0', '1'};

namespace detail {

inline void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace detail

inline void save_dataset(const std::string& path,
                         const std::vector<Trajectory>& trajs,
                         DatasetFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  if (format == DatasetFormat::jsonl) {
    for (std::size_t ti = 0; ti < trajs.size(); ++ti) {
      for (std::size_t t = 0; t < trajs[ti].size(); ++t) {
        const Transition& tr = trajs[ti].steps[t];
        nlohmann::json rec{{"traj", ti}, {"t", t},          {"s", tr.s},
                           {"a", tr.a},  {"r", tr.r},        {"s_next", tr.s_next},
                           {"d", tr.d}};
        out << rec.dump() << '\n';
      }
    }
  } else {
    out.write(kDatasetMagic, sizeof(kDatasetMagic));
    std::size_t sd = 0, ad = 0;
    for (const auto& tr : trajs)
      if (!tr.empty()) {
        sd = tr.steps[0].s.size();
        ad = tr.steps[0].a.size();
        break;
      }
    detail::write_u64(out, sd);
    detail::write_u64(out, ad);
    detail::write_u64(out, trajs.size());
    for (const auto& tr : trajs) {
      detail::write_u64(out, tr.size());
      for (const auto& step : tr.steps) {
        out.write(reinterpret_cast<const char*>(step.s.data()),
                  static_cast<std::streamsize>(sd * sizeof(double)));
        out.write(reinterpret_cast<const char*>(step.a.data()),
                  static_cast<std::streamsize>(ad * sizeof(double)));
        out.write(reinterpret_cast<const char*>(&step.r), sizeof(double));
        out.write(reinterpret_cast<const char*>(step.s_next.data()),
                  static_cast<std::streamsize>(sd * sizeof(double)));
        const std::uint8_t d = step.d ? 1 : 0;
        out.write(reinterpret_cast<const char*>(&d), 1);
      }
    }
  }
  if (!out) throw IoError("failed writing dataset: " + path);
}

namespace detail {

inline std::vector<Trajectory> load_jsonl(std::ifstream& in,
                                          const std::string& path) {
  std::vector<Trajectory> trajs;
  std::string line;
  std::size_t lineno = 0;
  std::int64_t sd = -1, ad = -1;
  std::int64_t expect_t = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                           ": invalid JSON: " + e.what(),
                       static_cast<std::int64_t>(lineno));
    }
    Transition tr;
    std::int64_t ti, t;
    try {
      ti = rec.at("traj").get<std::int64_t>();
      t = rec.at("t").get<std::int64_t>();
      tr.s = rec.at("s").get<std::vector<double>>();
      tr.a = rec.at("a").get<std::vector<double>>();
      tr.r = rec.at("r").get<double>();
      tr.s_next = rec.at("s_next").get<std::vector<double>>();
      tr.d = rec.at("d").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                           ": missing or mistyped field: " + e.what(),
                       static_cast<std::int64_t>(lineno));
    }
    if (sd < 0) {
      sd = static_cast<std::int64_t>(tr.s.size());
      ad = static_cast<std::int64_t>(tr.a.size());
    }
    if (std::int64_t(tr.s.size()) != sd || std::int64_t(tr.s_next.size()) != sd ||
        std::int64_t(tr.a.size()) != ad)
      throw SchemaError(path + ":" + std::to_string(lineno) +
                        ": inconsistent dimensions");
    if (ti == static_cast<std::int64_t>(trajs.size())) {
      trajs.emplace_back();
      expect_t = 0;
    }
    if (ti != static_cast<std::int64_t>(trajs.size()) - 1 || t != expect_t)
      throw SchemaError(path + ":" + std::to_string(lineno) +
                        ": records out of order (traj " + std::to_string(ti) +
                        ", t " + std::to_string(t) + ")");
    trajs.back().steps.push_back(std::move(tr));
    ++expect_t;
  }
  return trajs;
}

inline std::vector<Trajectory> load_binary(std::ifstream& in,
                                           const std::string& path) {
  in.seekg(sizeof(kDatasetMagic));
  const std::uint64_t sd = read_u64(in);
  const std::uint64_t ad = read_u64(in);
  const std::uint64_t n_traj = read_u64(in);
  if (!in || sd > 100000 || ad > 100000 || n_traj > (1ull << 32))
    throw ParseError("dataset header corrupt: " + path);
  std::vector<Trajectory> trajs(n_traj);
  for (std::uint64_t ti = 0; ti < n_traj; ++ti) {
    const std::uint64_t n = read_u64(in);
    if (!in) throw ParseError("dataset truncated in trajectory header: " + path);
    trajs[ti].steps.resize(n);
    for (std::uint64_t t = 0; t < n; ++t) {
      Transition& tr = trajs[ti].steps[t];
      tr.s.resize(sd);
      tr.a.resize(ad);
      tr.s_next.resize(sd);
      in.read(reinterpret_cast<char*>(tr.s.data()),
              static_cast<std::streamsize>(sd * sizeof(double)));
      in.read(reinterpret_cast<char*>(tr.a.data()),
              static_cast<std::streamsize>(ad * sizeof(double)));
      in.read(reinterpret_cast<char*>(&tr.r), sizeof(double));
      in.read(reinterpret_cast<char*>(tr.s_next.data()),
              static_cast<std::streamsize>(sd * sizeof(double)));
      std::uint8_t d = 0;
      in.read(reinterpret_cast<char*>(&d), 1);
      if (!in)
        throw ParseError("dataset truncated at trajectory " +
                         std::to_string(ti) + " step " + std::to_string(t) +
                         ": " + path);
      tr.d = d != 0;
    }
  }
  return trajs;
}

}  // namespace detail

/// Loads either encoding; the binary form is detected by its magic bytes,
/// anything else is treated as JSONL. An empty file is an empty dataset.
inline std::vector<Trajectory> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  char magic[8] = {};
  in.read(magic, sizeof(magic));
  if (in.gcount() == 0) return {};
  const bool is_binary =
      in.gcount() == 8 && std::memcmp(magic, kDatasetMagic, 8) == 0;
  in.clear();
  in.seekg(0);
  auto trajs = is_binary ? detail::load_binary(in, path)
                         : detail::load_jsonl(in, path);
  for (std::size_t ti = 0; ti < trajs.size(); ++ti) {
    try {
      trajs[ti].validate();
    } catch (const SchemaError& e) {
      throw SchemaError(path + ": trajectory " + std::to_string(ti) + ": " +
                        e.what());
    }
  }
  return trajs;
}

// ----------------------------------------------------------------------------
// Sidecar metadata written next to generated datasets.
// ----------------------------------------------------------------------------

struct DatasetMeta {
  int schema_version = 1;
  std::string env;
  std::string grade;
  std::size_t episodes = 0;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double random_ref = 0.0;
  double expert_ref = 0.0;
  std::string behavior;  // free-form note on how the behavior policy was built

  nlohmann::json to_json() const {
    return {{"schema_version", schema_version},
            {"env", env},
            {"grade", grade},
            {"episodes", episodes},
            {"seed", seed},
            {"mean_return", mean_return},
            {"std_return", std_return},
            {"random_ref", random_ref},
            {"expert_ref", expert_ref},
            {"behavior", behavior}};
  }
  static DatasetMeta from_json(const nlohmann::json& j) {
    DatasetMeta m;
    m.schema_version = j.value("schema_version", 1);
    m.env = j.value("env", "");
    m.grade = j.value("grade", "");
    m.episodes = j.value("episodes", std::size_t{0});
    m.seed = j.value("seed", std::uint64_t{0});
    m.mean_return = j.value("mean_return", 0.0);
    m.std_return = j.value("std_return", 0.0);
    m.random_ref = j.value("random_ref", 0.0);
    m.expert_ref = j.value("expert_ref", 0.0);
    m.behavior = j.value("behavior", "");
    return m;
  }
};

inline std::string meta_path_for(const std::string& data_path) {
  return data_path + ".meta.json";
}

inline void save_dataset_meta(const std::string& data_path,
                              const DatasetMeta& meta) {
  std::ofstream out(meta_path_for(data_path));
  if (!out) throw IoError("cannot write dataset metadata for " + data_path);
  out << meta.to_json().dump(2) << '\n';
}

inline DatasetMeta load_dataset_meta(const std::string& data_path) {
  std::ifstream in(meta_path_for(data_path));
  if (!in) throw IoError("no dataset metadata next to " + data_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset metadata is not valid JSON: ") +
                     e.what());
  }
  return DatasetMeta::from_json(j);
}

}  // namespace envformer::data
