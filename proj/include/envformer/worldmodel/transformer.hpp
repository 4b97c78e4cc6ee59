#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "envformer/checkpoint.hpp"
#include "envformer/datasets.hpp"
#include "envformer/nn.hpp"
#include "envformer/ops.hpp"
#include "envformer/worldmodel/config.hpp"
#include "envformer/worldmodel/model.hpp"

namespace envformer::wm {

/// Raw forward-pass outputs, all [B, S, state_dim + 1] in normalized space.
template <typename T>
struct EtOutput {
  Tensor<T> mu;
  Tensor<T> logvar_au;
  Tensor<T> logvar_eu;
};

namespace detail {

/// Additive attention mask: 0 on and below the diagonal, -1e9 above, so each
/// position can only attend to itself and earlier steps.
template <typename T>
Array<T> causal_mask(std::size_t s) {
  Array<T> m({s, s});
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) m.at2(i, j) = T(-1e9);
  return m;
}

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace detail

/// Masked training loss over window outputs. `sample-mse` draws one
/// reparameterized sample per element and regresses it onto the target;
/// `nll` is the Gaussian negative log-likelihood with total variance
/// exp(lv_au) + exp(lv_eu). Both average over valid positions and output
/// dims; padded positions contribute nothing.
template <typename T>
Tensor<T> masked_gaussian_loss(Tape<T>& tape, const EtOutput<T>& out,
                               const data::SequenceBatch<T>& batch, Rng& rng,
                               LossMode mode) {
  if (batch.valid_positions == 0)
    throw ContractError("loss: batch has no valid positions");
  const std::size_t od = batch.targets.shape[2];
  if (out.mu.shape() != batch.targets.shape)
    throw DimensionError("model output does not match targets", out.mu.shape(),
                         batch.targets.shape);
  const Tensor<T> target = Tensor<T>::constant(batch.targets);

  Array<T> mask_e({batch.batch, batch.seq_len, od});
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t t = 0; t < batch.seq_len; ++t)
      for (std::size_t i = 0; i < od; ++i)
        mask_e.at3(b, t, i) = batch.mask.at2(b, t);
  const Tensor<T> mask = Tensor<T>::constant(std::move(mask_e));
  const T inv = T(1.0 / (double(batch.valid_positions) * double(od)));

  Tensor<T> per_elem;
  if (mode == LossMode::sample_mse) {
    Array<T> n1({batch.batch, batch.seq_len, od});
    Array<T> n2({batch.batch, batch.seq_len, od});
    for (std::size_t i = 0; i < n1.numel(); ++i) {
      n1.data[i] = static_cast<T>(rng.normal());
      n2.data[i] = static_cast<T>(rng.normal());
    }
    Tensor<T> sig_au = exp_op(tape, scale(tape, out.logvar_au, T(0.5)));
    Tensor<T> sig_eu = exp_op(tape, scale(tape, out.logvar_eu, T(0.5)));
    Tensor<T> phi = add(tape, out.mu,
                        add(tape, mul(tape, sig_au, Tensor<T>::constant(std::move(n1))),
                            mul(tape, sig_eu, Tensor<T>::constant(std::move(n2)))));
    per_elem = square(tape, sub(tape, phi, target));
  } else {
    Tensor<T> var = add(tape, exp_op(tape, out.logvar_au), exp_op(tape, out.logvar_eu));
    Tensor<T> sq = square(tape, sub(tape, out.mu, target));
    per_elem = scale(tape,
                     add_scalar(tape, add(tape, div(tape, sq, var), log_op(tape, var)),
                                T(detail::kLog2Pi)),
                     T(0.5));
  }
  return scale(tape, sum_all(tape, mul(tape, per_elem, mask)), inv);
}

/// Causal sequence model over (state, action) tokens. Each position emits a
/// Gaussian over the normalized next state and reward, with separate variance
/// heads for transition noise and model uncertainty. Pre-norm residual blocks,
/// learned absolute position embeddings.
template <typename T>
class EnvironmentTransformer : public DynamicsModel {
 public:
  EnvironmentTransformer(ModelConfig cfg, data::Normalizer norm, Rng& rng)
      : cfg_(std::move(cfg)), norm_(std::move(norm)) {
    cfg_.validate();
    const std::size_t in = norm_.state_dim() + norm_.action_dim();
    const std::size_t d = cfg_.embed_dim;
    out_dim_ = norm_.state_dim() + 1;

    embed_ = Linear<T>(rng, in, d);
    Array<T> pos({cfg_.seq_len, d});
    for (T& x : pos.data) x = static_cast<T>(rng.normal(0.0, 0.02));
    pos_ = Tensor<T>::param(std::move(pos));
    blocks_.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) blocks_.emplace_back(rng, d);
    ln_f_ = LayerNorm<T>(d);
    head_mu_ = Linear<T>(rng, d, out_dim_);
    head_au_ = Linear<T>(rng, d, out_dim_);
    head_eu_ = Linear<T>(rng, d, out_dim_);

    params_.add("embed.w", embed_.w);
    params_.add("embed.b", embed_.b);
    params_.add("pos", pos_);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      blocks_[l].collect(params_, "b" + std::to_string(l));
    ln_f_.collect(params_, "ln_f");
    head_mu_.collect(params_, "mu");
    head_au_.collect(params_, "logvar_au");
    head_eu_.collect(params_, "logvar_eu");
  }

  const ModelConfig& config() const { return cfg_; }
  const data::Normalizer& normalizer() const override { return norm_; }
  std::size_t context_length() const override { return cfg_.seq_len; }
  std::size_t out_dim() const { return out_dim_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// tokens: [B, S, state_dim + action_dim] normalized inputs, S <= seq_len.
  EtOutput<T> forward(Tape<T>& tape, const Tensor<T>& tokens, Rng& rng) const {
    if (tokens.shape().size() != 3 ||
        tokens.shape()[2] != norm_.state_dim() + norm_.action_dim())
      throw DimensionError("transformer input must be [B, S, state+action dims]",
                           tokens.shape(),
                           {0, cfg_.seq_len, norm_.state_dim() + norm_.action_dim()});
    const std::size_t s = tokens.shape()[1];
    if (s == 0 || s > cfg_.seq_len)
      throw ContractError("sequence length " + std::to_string(s) +
                          " outside [1, " + std::to_string(cfg_.seq_len) + "]");
    const double keep = tape.training() ? 1.0 - cfg_.dropout : 1.0;
    const T att_scale = T(1.0 / std::sqrt(double(cfg_.embed_dim / cfg_.n_heads)));
    const Tensor<T> mask = Tensor<T>::constant(detail::causal_mask<T>(s));

    Tensor<T> h = embed_.forward(tape, tokens);
    h = add(tape, h, narrow_rows(tape, pos_, 0, s));
    h = dropout(tape, h, keep, rng);
    for (const Block& b : blocks_) {
      Tensor<T> hn = b.ln1.forward(tape, h);
      Tensor<T> q = split_heads(tape, b.q.forward(tape, hn), cfg_.n_heads);
      Tensor<T> k = split_heads(tape, b.k.forward(tape, hn), cfg_.n_heads);
      Tensor<T> v = split_heads(tape, b.v.forward(tape, hn), cfg_.n_heads);
      Tensor<T> att = scale(tape, bmm(tape, q, k, false, true), att_scale);
      att = softmax_last(tape, add(tape, att, mask));
      att = dropout(tape, att, keep, rng);
      Tensor<T> ctx = merge_heads(tape, bmm(tape, att, v, false, false), cfg_.n_heads);
      h = add(tape, h, dropout(tape, b.proj.forward(tape, ctx), keep, rng));
      Tensor<T> m = b.fc2.forward(tape, relu(tape, b.fc1.forward(tape, b.ln2.forward(tape, h))));
      h = add(tape, h, dropout(tape, m, keep, rng));
    }
    Tensor<T> hf = ln_f_.forward(tape, h);
    EtOutput<T> out;
    out.mu = head_mu_.forward(tape, hf);
    out.logvar_au = soft_clamp(tape, head_au_.forward(tape, hf),
                                         cfg_.logvar_min, cfg_.logvar_max);
    out.logvar_eu = soft_clamp(tape, head_eu_.forward(tape, hf),
                                         cfg_.logvar_min, cfg_.logvar_max);
    return out;
  }

  /// Builds the [B, T, sd+ad] token block for a sampled window batch.
  static Array<T> make_tokens(const data::SequenceBatch<T>& batch) {
    const std::size_t sd = batch.states.shape[2], ad = batch.actions.shape[2];
    Array<T> tokens({batch.batch, batch.seq_len, sd + ad});
    for (std::size_t b = 0; b < batch.batch; ++b)
      for (std::size_t t = 0; t < batch.seq_len; ++t) {
        for (std::size_t i = 0; i < sd; ++i)
          tokens.at3(b, t, i) = batch.states.at3(b, t, i);
        for (std::size_t i = 0; i < ad; ++i)
          tokens.at3(b, t, sd + i) = batch.actions.at3(b, t, i);
      }
    return tokens;
  }

  /// Forward pass plus masked loss in the requested mode.
  Tensor<T> loss(Tape<T>& tape, const data::SequenceBatch<T>& batch, Rng& rng,
                 LossMode mode) const {
    if (batch.valid_positions == 0)
      throw ContractError("loss: batch has no valid positions");
    const Tensor<T> tokens = Tensor<T>::constant(make_tokens(batch));
    EtOutput<T> out = forward(tape, tokens, rng);
    return masked_gaussian_loss(tape, out, batch, rng, mode);
  }

  Tensor<T> loss(Tape<T>& tape, const data::SequenceBatch<T>& batch, Rng& rng) const {
    return loss(tape, batch, rng, cfg_.loss_mode);
  }

  /// Batched inference. Each query keeps its most recent `seq_len` steps;
  /// shorter histories are read at their own final position, so padding rows
  /// never leak into the answer. Deterministic: no dropout, no sampling.
  GaussianPrediction predict(const std::vector<History>& queries) const override {
    detail::require_nonempty_queries(queries);
    const std::size_t bsz = queries.size();
    const std::size_t sd = norm_.state_dim(), ad = norm_.action_dim();
    std::vector<std::size_t> lens(bsz);
    std::size_t s_max = 0;
    for (std::size_t i = 0; i < bsz; ++i) {
      lens[i] = std::min(queries[i].size(), cfg_.seq_len);
      s_max = std::max(s_max, lens[i]);
    }
    Array<T> tokens({bsz, s_max, sd + ad});
    for (std::size_t i = 0; i < bsz; ++i) {
      const History& hist = queries[i];
      const std::size_t first = hist.size() - lens[i];
      for (std::size_t t = 0; t < lens[i]; ++t) {
        const HistoryStep& step = hist[first + t];
        if (step.s.size() != sd || step.a.size() != ad)
          throw DimensionError("history step dims do not match model",
                               {step.s.size(), step.a.size()}, {sd, ad});
        const auto sn = norm_.normalize_state(step.s);
        const auto an = norm_.normalize_action(step.a);
        for (std::size_t d = 0; d < sd; ++d) tokens.at3(i, t, d) = T(sn[d]);
        for (std::size_t d = 0; d < ad; ++d) tokens.at3(i, t, sd + d) = T(an[d]);
      }
    }
    // Inference tape: no recording, and no finite checks so a degenerate
    // model yields NaN rows the caller can reject per query instead of an
    // exception that would take down a whole batch.
    Tape<T> tape(TapeOptions{false, false, false});
    Rng unused(0);
    EtOutput<T> out = forward(tape, Tensor<T>::constant(std::move(tokens)), unused);

    GaussianPrediction pred;
    pred.mu = Array<double>({bsz, 1, out_dim_});
    pred.sigma_au = Array<double>({bsz, 1, out_dim_});
    pred.sigma_eu = Array<double>({bsz, 1, out_dim_});
    const auto& mu = out.mu.value();
    const auto& lau = out.logvar_au.value();
    const auto& leu = out.logvar_eu.value();
    for (std::size_t i = 0; i < bsz; ++i) {
      const std::size_t at = (i * s_max + lens[i] - 1) * out_dim_;
      for (std::size_t d = 0; d < out_dim_; ++d) {
        pred.mu.data[i * out_dim_ + d] = double(mu.data[at + d]);
        pred.sigma_au.data[i * out_dim_ + d] = std::exp(0.5 * double(lau.data[at + d]));
        pred.sigma_eu.data[i * out_dim_ + d] = std::exp(0.5 * double(leu.data[at + d]));
      }
    }
    return pred;
  }

  void save(const std::string& path, std::uint64_t seed = 0,
            nlohmann::json extra_meta = nlohmann::json::object()) const {
    Checkpoint<T> ck;
    ck.seed = seed;
    ck.meta = {{"model_type", "transformer"},
               {"config", cfg_.to_json()},
               {"normalizer", norm_.to_json()}};
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    for (const auto& [name, t] : params_.items) ck.arrays.emplace_back(name, t.value());
    save_checkpoint(path, ck);
  }

  static EnvironmentTransformer load(const std::string& path) {
    Checkpoint<T> ck = load_checkpoint<T>(path);
    if (ck.meta.value("model_type", "") != std::string("transformer"))
      throw SchemaError("checkpoint is not a transformer model: " + path);
    ModelConfig cfg = ModelConfig::from_json(ck.meta.at("config"));
    data::Normalizer norm = data::Normalizer::from_json(ck.meta.at("normalizer"));
    Rng scratch(0);
    EnvironmentTransformer model(std::move(cfg), std::move(norm), scratch);
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
  struct Block {
    LayerNorm<T> ln1;
    Linear<T> q, k, v, proj;
    LayerNorm<T> ln2;
    Linear<T> fc1, fc2;

    Block(Rng& rng, std::size_t d)
        : ln1(d), q(rng, d, d), k(rng, d, d), v(rng, d, d), proj(rng, d, d),
          ln2(d), fc1(rng, d, 4 * d), fc2(rng, 4 * d, d) {}

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
      ln1.collect(ps, prefix + ".ln1");
      q.collect(ps, prefix + ".q");
      k.collect(ps, prefix + ".k");
      v.collect(ps, prefix + ".v");
      proj.collect(ps, prefix + ".proj");
      ln2.collect(ps, prefix + ".ln2");
      fc1.collect(ps, prefix + ".fc1");
      fc2.collect(ps, prefix + ".fc2");
    }
  };

  ModelConfig cfg_;
  data::Normalizer norm_;
  std::size_t out_dim_ = 0;
  Linear<T> embed_;
  Tensor<T> pos_;
  std::vector<Block> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_mu_, head_au_, head_eu_;
  ParamSet<T> params_;
};

}  // namespace envformer::wm
