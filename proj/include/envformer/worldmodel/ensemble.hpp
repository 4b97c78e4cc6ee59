#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "envformer/checkpoint.hpp"
#include "envformer/datasets.hpp"
#include "envformer/nn.hpp"
#include "envformer/optim.hpp"
#include "envformer/worldmodel/config.hpp"
#include "envformer/worldmodel/model.hpp"
#include "envformer/worldmodel/transformer.hpp"

namespace envformer::wm {

namespace detail {

/// One bootstrap member: ReLU trunk with separate mean and log-variance heads
/// over the normalized (state, action) input.
template <typename T>
struct EnsembleMember {
  std::vector<Linear<T>> trunk;
  Linear<T> head_mu, head_lv;

  EnsembleMember() = default;
  EnsembleMember(Rng& rng, std::size_t in, std::size_t hidden, std::size_t depth,
                 std::size_t out) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < depth; ++i) {
      trunk.emplace_back(rng, prev, hidden);
      prev = hidden;
    }
    head_mu = Linear<T>(rng, prev, out);
    head_lv = Linear<T>(rng, prev, out);
  }

  std::pair<Tensor<T>, Tensor<T>> forward(Tape<T>& tape, const Tensor<T>& x,
                                          double lv_min, double lv_max) const {
    Tensor<T> h = x;
    for (const auto& layer : trunk) h = relu(tape, layer.forward(tape, h));
    return {head_mu.forward(tape, h),
            soft_clamp(tape, head_lv.forward(tape, h), lv_min, lv_max)};
  }

  void collect(ParamSet<T>& ps, const std::string& prefix) const {
    for (std::size_t i = 0; i < trunk.size(); ++i)
      trunk[i].collect(ps, prefix + ".t" + std::to_string(i));
    head_mu.collect(ps, prefix + ".mu");
    head_lv.collect(ps, prefix + ".lv");
  }
};

}  // namespace detail

/// Probabilistic ensemble over single-step dynamics. Each member predicts a
/// diagonal Gaussian; the combined belief reports the mean of member means,
/// the spread of member means as epistemic sigma, and the average member
/// sigma as aleatoric. Conditions on the final history step only.
template <typename T>
class EnsembleModel : public DynamicsModel {
 public:
  EnsembleModel(EnsembleConfig cfg, data::Normalizer norm, std::vector<Rng>& member_rngs)
      : cfg_(std::move(cfg)), norm_(std::move(norm)) {
    cfg_.validate();
    if (member_rngs.size() != cfg_.n_members)
      throw ContractError("ensemble: need one rng per member");
    out_dim_ = norm_.state_dim() + 1;
    const std::size_t in = norm_.state_dim() + norm_.action_dim();
    members_.reserve(cfg_.n_members);
    for (std::size_t m = 0; m < cfg_.n_members; ++m)
      members_.emplace_back(member_rngs[m], in, cfg_.hidden, cfg_.depth, out_dim_);
    for (std::size_t m = 0; m < cfg_.n_members; ++m)
      members_[m].collect(params_, "m" + std::to_string(m));
  }

  const EnsembleConfig& config() const { return cfg_; }
  const data::Normalizer& normalizer() const override { return norm_; }
  std::size_t context_length() const override { return 1; }
  std::size_t out_dim() const { return out_dim_; }
  ParamSet<T>& params() { return params_; }
  std::size_t n_members() const { return members_.size(); }

  /// Per-member forward on a normalized input batch [B, sd+ad].
  std::pair<Tensor<T>, Tensor<T>> member_forward(Tape<T>& tape, std::size_t m,
                                                 const Tensor<T>& x) const {
    return members_.at(m).forward(tape, x, cfg_.logvar_min, cfg_.logvar_max);
  }

  GaussianPrediction predict(const std::vector<History>& queries) const override {
    detail::require_nonempty_queries(queries);
    const std::size_t bsz = queries.size();
    const std::size_t sd = norm_.state_dim(), ad = norm_.action_dim();
    Array<T> x({bsz, sd + ad});
    for (std::size_t i = 0; i < bsz; ++i) {
      const HistoryStep& last = queries[i].back();
      if (last.s.size() != sd || last.a.size() != ad)
        throw DimensionError("history step dims do not match model",
                             {last.s.size(), last.a.size()}, {sd, ad});
      const auto sn = norm_.normalize_state(last.s);
      const auto an = norm_.normalize_action(last.a);
      for (std::size_t d = 0; d < sd; ++d) x.at2(i, d) = T(sn[d]);
      for (std::size_t d = 0; d < ad; ++d) x.at2(i, sd + d) = T(an[d]);
    }
    const Tensor<T> xt = Tensor<T>::constant(std::move(x));

    const std::size_t n = bsz * out_dim_;
    std::vector<std::vector<double>> mus(members_.size());
    std::vector<double> sig_sum(n, 0.0);
    for (std::size_t m = 0; m < members_.size(); ++m) {
      // Unchecked inference: degenerate members surface as NaN rows rather
      // than exceptions.
      Tape<T> tape(TapeOptions{false, false, false});
      auto [mu, lv] = members_[m].forward(tape, xt, cfg_.logvar_min, cfg_.logvar_max);
      mus[m].resize(n);
      const auto& mv = mu.value().data;
      const auto& lvv = lv.value().data;
      for (std::size_t i = 0; i < n; ++i) {
        mus[m][i] = double(mv[i]);
        sig_sum[i] += std::exp(0.5 * double(lvv[i]));
      }
    }
    const double inv = 1.0 / double(members_.size());
    GaussianPrediction pred;
    pred.mu = Array<double>({bsz, 1, out_dim_});
    pred.sigma_au = Array<double>({bsz, 1, out_dim_});
    pred.sigma_eu = Array<double>({bsz, 1, out_dim_});
    for (std::size_t i = 0; i < n; ++i) {
      // Member spread computed relative to the first member: shifting first
      // conditions the variance and makes identical members give exactly 0.
      double d1 = 0.0, d2 = 0.0;
      for (const auto& mu_m : mus) {
        const double d = mu_m[i] - mus[0][i];
        d1 += d;
        d2 += d * d;
      }
      const double dm = d1 * inv;
      pred.mu.data[i] = mus[0][i] + dm;
      pred.sigma_au.data[i] = sig_sum[i] * inv;
      pred.sigma_eu.data[i] = std::sqrt(std::max(0.0, d2 * inv - dm * dm));
    }
    return pred;
  }

  void save(const std::string& path, std::uint64_t seed = 0,
            nlohmann::json extra_meta = nlohmann::json::object()) const {
    Checkpoint<T> ck;
    ck.seed = seed;
    ck.meta = {{"model_type", "ensemble"},
               {"config", cfg_.to_json()},
               {"normalizer", norm_.to_json()}};
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    for (const auto& [name, t] : params_.items) ck.arrays.emplace_back(name, t.value());
    save_checkpoint(path, ck);
  }

  static EnsembleModel load(const std::string& path) {
    Checkpoint<T> ck = load_checkpoint<T>(path);
    if (ck.meta.value("model_type", "") != std::string("ensemble"))
      throw SchemaError("checkpoint is not an ensemble model: " + path);
    EnsembleConfig cfg = EnsembleConfig::from_json(ck.meta.at("config"));
    data::Normalizer norm = data::Normalizer::from_json(ck.meta.at("normalizer"));
    std::vector<Rng> rngs(cfg.n_members, Rng(0));
    EnsembleModel model(std::move(cfg), std::move(norm), rngs);
    for (auto& [name, t] : model.params_.items) {
      const Array<T>& src = ck.find(name);
      if (src.shape != t.shape())
        throw SchemaError("checkpoint array '" + name + "' has shape " +
                          shape_to_string(src.shape) + ", expected " +
                          shape_to_string(t.shape()));
      t.value().data = src.data;
    }
    return model;
  }

 private:
  EnsembleConfig cfg_;
  data::Normalizer norm_;
  std::size_t out_dim_ = 0;
  std::vector<detail::EnsembleMember<T>> members_;
  ParamSet<T> params_;
};

struct EnsembleLogRow {
  std::size_t member = 0;
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct EnsembleTrainLog {
  std::vector<EnsembleLogRow> rows;

  void to_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open training log for writing: " + path);
    out << "member,epoch,train_loss,val_loss\n";
    for (const EnsembleLogRow& r : rows)
      out << r.member << ',' << r.epoch << ',' << format_double(r.train_loss) << ','
          << format_double(r.val_loss) << '\n';
  }
};

template <typename T>
struct EnsembleTrainResult {
  EnsembleModel<T> model;
  EnsembleTrainLog log;
};

/// Trains the ensemble on flattened single-step transitions with Gaussian
/// NLL. A shared validation split drives per-member early stopping; each
/// member sees its own bootstrap resample of the training rows unless
/// `bootstrap` is off. With `independent_seeds` off all members share one rng
/// stream and (without bootstrap) converge to identical weights.
template <typename T>
EnsembleTrainResult<T> ensemble_train(const std::vector<data::Trajectory>& trajs,
                                      const EnsembleConfig& cfg, Rng& rng) {
  cfg.validate();
  if (trajs.empty()) throw ContractError("ensemble_train: empty trajectory set");
  const data::Normalizer norm = data::fit_normalizer(trajs);
  const std::vector<data::Transition> flat = data::flatten_transitions(trajs);
  const std::size_t n_total = flat.size();
  const std::size_t sd = norm.state_dim(), ad = norm.action_dim();
  const std::size_t od = sd + 1;

  Array<T> xs({n_total, sd + ad}), ys({n_total, od});
  for (std::size_t i = 0; i < n_total; ++i) {
    const auto sn = norm.normalize_state(flat[i].s);
    const auto an = norm.normalize_action(flat[i].a);
    const auto yn = norm.normalize_target(flat[i].s_next, flat[i].r);
    for (std::size_t d = 0; d < sd; ++d) xs.at2(i, d) = T(sn[d]);
    for (std::size_t d = 0; d < ad; ++d) xs.at2(i, sd + d) = T(an[d]);
    for (std::size_t d = 0; d < od; ++d) ys.at2(i, d) = T(yn[d]);
  }

  Rng split_rng = rng.fork();
  std::vector<std::size_t> order(n_total);
  for (std::size_t i = 0; i < n_total; ++i) order[i] = i;
  for (std::size_t i = n_total; i > 1; --i)
    std::swap(order[i - 1], order[split_rng.integer(i)]);
  std::size_t n_val = 0;
  if (n_total >= 2 && cfg.val_fraction > 0.0)
    n_val = std::min(n_total - 1,
                     std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                  cfg.val_fraction * double(n_total)))));
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  const std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  const std::vector<std::size_t>& eval_idx = val_idx.empty() ? train_idx : val_idx;

  auto gather = [&](const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    Array<T> xb({hi - lo, sd + ad}), yb({hi - lo, od});
    for (std::size_t r = lo; r < hi; ++r) {
      for (std::size_t d = 0; d < sd + ad; ++d) xb.at2(r - lo, d) = xs.at2(idx[r], d);
      for (std::size_t d = 0; d < od; ++d) yb.at2(r - lo, d) = ys.at2(idx[r], d);
    }
    return std::make_pair(Tensor<T>::constant(std::move(xb)),
                          Tensor<T>::constant(std::move(yb)));
  };

  Rng shared_proto = rng.fork();
  std::vector<Rng> member_rngs;
  member_rngs.reserve(cfg.n_members);
  for (std::size_t m = 0; m < cfg.n_members; ++m)
    member_rngs.push_back(cfg.independent_seeds ? rng.fork() : shared_proto);

  // Init rngs must be consumed identically to keep the shared-seed contract,
  // so members are constructed from copies and trained from fresh copies.
  std::vector<Rng> init_rngs = member_rngs;
  EnsembleTrainResult<T> result{EnsembleModel<T>(cfg, norm, init_rngs), {}};
  EnsembleModel<T>& model = result.model;
  if (cfg.max_epochs == 0) return result;

  auto nll_of = [&](Tape<T>& tape, std::size_t m, const Tensor<T>& xb,
                    const Tensor<T>& yb) {
    auto [mu, lv] = model.member_forward(tape, m, xb);
    Tensor<T> var = exp_op(tape, lv);
    Tensor<T> sq = square(tape, sub(tape, mu, yb));
    Tensor<T> per = scale(
        tape, add_scalar(tape, add(tape, div(tape, sq, var), lv), T(detail::kLog2Pi)),
        T(0.5));
    return mean_all(tape, per);
  };

  for (std::size_t m = 0; m < cfg.n_members; ++m) {
    Rng mrng = member_rngs[m];
    std::vector<std::size_t> rows = train_idx;
    if (cfg.bootstrap)
      for (std::size_t i = 0; i < rows.size(); ++i)
        rows[i] = train_idx[mrng.integer(train_idx.size())];

    ParamSet<T> mparams;
    // Collect just this member's tensors (shared handles with the model).
    for (auto& [name, t] : model.params().items)
      if (name.rfind("m" + std::to_string(m) + ".", 0) == 0) mparams.add(name, t);
    AdamW<T> opt(mparams.tensors(), AdamConfig{cfg.learning_rate, 0.9, 0.999,
                                               cfg.adam_eps, cfg.weight_decay});

    auto eval_nll = [&]() {
      double acc = 0;
      std::size_t seen = 0;
      for (std::size_t lo = 0; lo < eval_idx.size(); lo += cfg.batch_size) {
        const std::size_t hi = std::min(eval_idx.size(), lo + cfg.batch_size);
        Tape<T> tape(TapeOptions{false, false, true});
        auto [xb, yb] = gather(eval_idx, lo, hi);
        acc += double(nll_of(tape, m, xb, yb).item()) * double(hi - lo);
        seen += hi - lo;
      }
      return acc / double(seen);
    };

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<T>> best = mparams.snapshot();
    std::size_t since_best = 0, step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      for (std::size_t i = rows.size(); i > 1; --i)
        std::swap(rows[i - 1], rows[mrng.integer(i)]);
      double epoch_loss = 0;
      std::size_t batches = 0;
      for (std::size_t lo = 0; lo < rows.size(); lo += cfg.batch_size) {
        const std::size_t hi = std::min(rows.size(), lo + cfg.batch_size);
        auto [xb, yb] = gather(rows, lo, hi);
        try {
          Tape<T> tape(TapeOptions{true, true, true});
          Tensor<T> l = nll_of(tape, m, xb, yb);
          const double lv = double(l.item());
          if (!std::isfinite(lv)) throw NumericError("training loss is not finite");
          tape.backward(l);
          epoch_loss += lv;
        } catch (const NumericError& e) {
          throw TrainingError(std::string("ensemble member ") + std::to_string(m) +
                                  " diverged: " + e.what(),
                              static_cast<std::int64_t>(step));
        }
        opt.step();
        opt.zero_grad();
        ++batches;
        ++step;
      }
      const double vl = eval_nll();
      result.log.rows.push_back({m, epoch, epoch_loss / double(batches), vl});
      if (vl < best_val) {
        best_val = vl;
        best = mparams.snapshot();
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
    mparams.restore(best);
  }
  return result;
}

}  // namespace envformer::wm
