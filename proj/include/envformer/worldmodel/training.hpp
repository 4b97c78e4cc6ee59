#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "envformer/datasets.hpp"
#include "envformer/optim.hpp"
#include "envformer/worldmodel/transformer.hpp"

namespace envformer::wm {

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // cumulative optimizer steps at end of epoch
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open training log for writing: " + path);
    out << "epoch,step,train_loss,val_loss,lr\n";
    for (const TrainLogRow& r : rows)
      out << r.epoch << ',' << r.step << ',' << format_double(r.train_loss) << ','
          << format_double(r.val_loss) << ',' << format_double(r.lr) << '\n';
  }
};

template <typename T>
struct TrainResult {
  EnvironmentTransformer<T> model;
  TrainLog log;
  std::size_t best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
};

namespace detail {

inline double lr_at(const ModelConfig& cfg, std::size_t step, std::size_t total) {
  double f = 1.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    f = double(step + 1) / double(cfg.warmup_steps);
  else if (cfg.lr_schedule == "cosine" && total > cfg.warmup_steps) {
    const double p = double(step - cfg.warmup_steps) / double(total - cfg.warmup_steps);
    f = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(p, 1.0)));
  }
  return cfg.learning_rate * f;
}

constexpr std::uint64_t kValNoiseSeed = 0x76616c6e6f697365ull;

}  // namespace detail

/// Fits a transformer to a trajectory set. Holds out `val_fraction` of the
/// trajectories, evaluates on that fixed set after every epoch (same loss
/// mode, dropout off, frozen sampling noise so scores are comparable), stops
/// after `patience` epochs without improvement, and returns the model rolled
/// back to its best validation score. A non-finite loss aborts with a
/// TrainingError carrying the step index. `max_epochs == 0` returns the
/// freshly initialized model with an empty log.
template <typename T>
TrainResult<T> train_model(const std::vector<data::Trajectory>& trajs,
                           const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (trajs.empty()) throw ContractError("train_model: empty trajectory set");
  const data::Normalizer norm = data::fit_normalizer(trajs);

  // Trajectory-level holdout keeps temporally correlated steps out of both
  // sides at once. With a single trajectory validation reuses the train set.
  std::vector<std::size_t> order(trajs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = rng.fork();
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.integer(i)]);
  std::size_t n_val = 0;
  if (trajs.size() >= 2 && cfg.val_fraction > 0.0)
    n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.val_fraction * double(trajs.size()))));
  n_val = std::min(n_val, trajs.size() - 1);
  std::vector<data::Trajectory> train_set, val_set;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_set : train_set).push_back(trajs[order[i]]);
  if (val_set.empty()) val_set = train_set;

  Rng init_rng = rng.fork();
  Rng batch_rng = rng.fork();
  Rng loss_rng = rng.fork();
  Rng val_batch_rng = rng.fork();

  TrainResult<T> result{EnvironmentTransformer<T>(cfg, norm, init_rng), {}, 0,
                        std::numeric_limits<double>::infinity(), 0};
  EnvironmentTransformer<T>& model = result.model;
  if (cfg.max_epochs == 0) return result;

  std::size_t train_count = 0, val_count = 0;
  for (const auto& tr : train_set) train_count += tr.size();
  for (const auto& tr : val_set) val_count += tr.size();
  const std::size_t window = cfg.batch_size * cfg.seq_len;
  const std::size_t spe = cfg.steps_per_epoch > 0
                              ? cfg.steps_per_epoch
                              : std::max<std::size_t>(1, (train_count + window - 1) / window);
  const std::size_t total_steps = spe * cfg.max_epochs;

  // Fixed validation windows: sampled once, reused at every evaluation.
  std::vector<data::SequenceBatch<T>> val_batches;
  const std::size_t n_val_batches =
      std::max<std::size_t>(1, (val_count + window - 1) / window);
  for (std::size_t i = 0; i < n_val_batches; ++i)
    val_batches.push_back(data::sample_sequence_batch<T>(
        val_set, norm, cfg.batch_size, cfg.seq_len, val_batch_rng));

  auto val_loss = [&]() {
    double acc = 0;
    Rng noise(detail::kValNoiseSeed);
    for (const auto& batch : val_batches) {
      Tape<T> tape(TapeOptions{false, false, true});
      acc += double(model.loss(tape, batch, noise).item());
    }
    return acc / double(val_batches.size());
  };

  AdamW<T> opt(model.params().tensors(), AdamConfig{cfg.learning_rate, 0.9, 0.999,
                                                    cfg.adam_eps, cfg.weight_decay});
  auto param_tensors = model.params().tensors();
  std::vector<std::vector<T>> best = model.params().snapshot();
  std::size_t since_best = 0, global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double epoch_loss = 0;
    double lr_now = cfg.learning_rate;
    for (std::size_t s = 0; s < spe; ++s) {
      const auto batch = data::sample_sequence_batch<T>(train_set, norm, cfg.batch_size,
                                                        cfg.seq_len, batch_rng);
      try {
        Tape<T> tape(TapeOptions{true, true, true});
        Tensor<T> l = model.loss(tape, batch, loss_rng);
        const double lv = double(l.item());
        if (!std::isfinite(lv))
          throw NumericError("training loss is not finite");
        tape.backward(l);
        epoch_loss += lv;
      } catch (const NumericError& e) {
        throw TrainingError(std::string("model training diverged: ") + e.what(),
                            static_cast<std::int64_t>(global_step));
      }
      clip_grad_norm(param_tensors, cfg.grad_clip);
      lr_now = detail::lr_at(cfg, global_step, total_steps);
      opt.set_lr(lr_now);
      opt.step();
      opt.zero_grad();
      ++global_step;
    }
    const double vl = val_loss();
    result.log.rows.push_back(
        {epoch, global_step, epoch_loss / double(spe), vl, lr_now});
    if (vl < result.best_val) {
      result.best_val = vl;
      result.best_epoch = epoch;
      best = model.params().snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model.params().restore(best);
  result.steps = global_step;
  return result;
}

}  // namespace envformer::wm
