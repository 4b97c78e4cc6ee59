#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "envformer/common.hpp"

namespace envformer::wm {

enum class LossMode { sample_mse, nll };
enum class Precision { f32, f64 };

inline const char* loss_mode_name(LossMode m) {
  return m == LossMode::sample_mse ? "sample-mse" : "nll";
}
inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "sample-mse") return LossMode::sample_mse;
  if (s == "nll") return LossMode::nll;
  throw ConfigError("unknown loss mode: " + s + " (expected sample-mse or nll)");
}
inline const char* precision_name(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}
inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision: " + s + " (expected f32 or f64)");
}

/// Sequence-model architecture and training protocol. Defaults are sized for
/// a single desktop core; `paper_preset()` switches to the published
/// configuration.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t embed_dim = 128;
  std::size_t seq_len = 32;
  double dropout = 0.1;

  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  double adam_eps = 1e-4;
  std::size_t batch_size = 64;

  LossMode loss_mode = LossMode::nll;
  double logvar_min = -10.0;
  double logvar_max = 2.0;
  Precision precision = Precision::f64;

  std::size_t max_epochs = 50;
  std::size_t steps_per_epoch = 0;  // 0 = one pass over the data per epoch
  std::size_t patience = 10;        // early-stop patience, counted in epochs
  double val_fraction = 0.1;
  std::size_t warmup_steps = 100;
  std::string lr_schedule = "cosine";  // or "constant"
  double grad_clip = 10.0;

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || embed_dim == 0 || seq_len == 0)
      throw ConfigError("model config: layers, heads, embed and seq_len must be positive");
    if (embed_dim % n_heads != 0)
      throw ConfigError("model config: embed_dim must be divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ConfigError("model config: dropout must be in [0, 1)");
    if (logvar_min >= logvar_max)
      throw ConfigError("model config: logvar_min must be below logvar_max");
    if (batch_size == 0) throw ConfigError("model config: batch_size must be positive");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
      throw ConfigError("model config: val_fraction must be in [0, 1)");
    if (lr_schedule != "cosine" && lr_schedule != "constant")
      throw ConfigError("model config: lr_schedule must be cosine or constant");
  }

  /// Published configuration: 8 layers, 16 heads, width 1024, context 100,
  /// batch 16, lr 1e-4, dropout 0.1, weight decay 1e-4.
  static ModelConfig paper_preset() {
    ModelConfig c;
    c.n_layers = 8;
    c.n_heads = 16;
    c.embed_dim = 1024;
    c.seq_len = 100;
    c.batch_size = 16;
    c.learning_rate = 1e-4;
    c.dropout = 0.1;
    c.weight_decay = 1e-4;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},
            {"n_heads", n_heads},
            {"embed_dim", embed_dim},
            {"seq_len", seq_len},
            {"dropout", dropout},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"adam_eps", adam_eps},
            {"batch_size", batch_size},
            {"loss_mode", loss_mode_name(loss_mode)},
            {"logvar_min", logvar_min},
            {"logvar_max", logvar_max},
            {"precision", precision_name(precision)},
            {"max_epochs", max_epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"patience", patience},
            {"val_fraction", val_fraction},
            {"warmup_steps", warmup_steps},
            {"lr_schedule", lr_schedule},
            {"grad_clip", grad_clip}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.dropout = j.value("dropout", c.dropout);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("loss_mode"))
      c.loss_mode = parse_loss_mode(j["loss_mode"].get<std::string>());
    c.logvar_min = j.value("logvar_min", c.logvar_min);
    c.logvar_max = j.value("logvar_max", c.logvar_max);
    if (j.contains("precision"))
      c.precision = parse_precision(j["precision"].get<std::string>());
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.patience = j.value("patience", c.patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.validate();
    return c;
  }
};

/// Probabilistic-ensemble baseline configuration.
struct EnsembleConfig {
  std::size_t n_members = 5;
  std::size_t hidden = 128;
  std::size_t depth = 2;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double adam_eps = 1e-4;
  std::size_t batch_size = 256;
  double logvar_min = -10.0;
  double logvar_max = 2.0;
  Precision precision = Precision::f64;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double val_fraction = 0.1;
  bool bootstrap = true;
  /// When false every member trains from the same seed (and without
  /// bootstrap resampling they become exact copies: zero epistemic spread).
  bool independent_seeds = true;

  void validate() const {
    if (n_members == 0) throw ConfigError("ensemble config: need at least one member");
    if (hidden == 0 || depth == 0)
      throw ConfigError("ensemble config: hidden and depth must be positive");
    if (logvar_min >= logvar_max)
      throw ConfigError("ensemble config: logvar_min must be below logvar_max");
  }

  nlohmann::json to_json() const {
    return {{"n_members", n_members},
            {"hidden", hidden},
            {"depth", depth},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"adam_eps", adam_eps},
            {"batch_size", batch_size},
            {"logvar_min", logvar_min},
            {"logvar_max", logvar_max},
            {"precision", precision_name(precision)},
            {"max_epochs", max_epochs},
            {"patience", patience},
            {"val_fraction", val_fraction},
            {"bootstrap", bootstrap},
            {"independent_seeds", independent_seeds}};
  }
  static EnsembleConfig from_json(const nlohmann::json& j) {
    EnsembleConfig c;
    c.n_members = j.value("n_members", c.n_members);
    c.hidden = j.value("hidden", c.hidden);
    c.depth = j.value("depth", c.depth);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.logvar_min = j.value("logvar_min", c.logvar_min);
    c.logvar_max = j.value("logvar_max", c.logvar_max);
    if (j.contains("precision"))
      c.precision = parse_precision(j["precision"].get<std::string>());
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.bootstrap = j.value("bootstrap", c.bootstrap);
    c.independent_seeds = j.value("independent_seeds", c.independent_seeds);
    c.validate();
    return c;
  }
};

}  // namespace envformer::wm
