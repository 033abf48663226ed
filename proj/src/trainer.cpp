#include "mmfusion/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>

#include "mmfusion/errors.hpp"

namespace mmfusion::trainer {
namespace {

constexpr std::uint64_t kModelStream = 11, kValStream = 12, kShuffleStream = 13;

using json = nlohmann::json;

bool same_kind(const json& def, const json& value) {
  if (def.is_number_float()) return value.is_number();
  if (def.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value >= 0);
  return def.type() == value.type();
}

}  // namespace

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.optimizer != "adam") throw ConfigError("unknown optimizer '" + c.optimizer + "'; supported: adam");
  if (c.scheduler != "cosine_annealing")
    throw ConfigError("unknown scheduler '" + c.scheduler + "'; supported: cosine_annealing");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.warmup_epochs > c.epochs) throw ConfigError("warmup_epochs exceeds epochs");
  if (c.restart_epoch == 0) throw ConfigError("restart_epoch must be positive");
  if (!(c.lr > 0.0) || !(c.min_lr >= 0.0) || c.min_lr > c.lr) throw ConfigError("need 0 <= min_lr <= lr, lr > 0");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(c.mask_ratio >= 0.0 && c.mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in [0, 1)");
  if (c.trajectories == 0 || c.val_trajectories == 0) throw ConfigError("trajectory counts must be positive");
  if (c.folds < 2) throw ConfigError("folds must be at least 2");
  for (double p : {c.flip_prob, c.noise_prob})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  parse_variant(c.variant);
  encoder::parse_architecture(c.architecture);
  hga::parse_layer_type(c.gnn);
  hga::parse_activation(c.activation);
  cfd::parse_reverse_mode(c.reverse_mode);
  if (c.latent_dim % c.heads != 0) throw ConfigError("latent_dim must be divisible by heads");
  cfd::make_noise_schedule(c.timesteps, c.beta1, c.betaT);
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"optimizer", c.optimizer},
          {"weight_decay", c.weight_decay},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"scheduler", c.scheduler},
          {"restart_epoch", c.restart_epoch},
          {"min_lr", c.min_lr},
          {"warmup_epochs", c.warmup_epochs},
          {"mask_ratio", c.mask_ratio},
          {"seed", c.seed},
          {"variant", c.variant},
          {"architecture", c.architecture},
          {"latent_dim", c.latent_dim},
          {"encoder_width", c.encoder_width},
          {"encoder_blocks", c.encoder_blocks},
          {"heads", c.heads},
          {"tumor_tiles", c.tumor_tiles},
          {"gnn", c.gnn},
          {"activation", c.activation},
          {"gnn_layers", c.gnn_layers},
          {"denoiser_hidden", c.denoiser_hidden},
          {"time_embed_dim", c.time_embed_dim},
          {"timesteps", c.timesteps},
          {"beta1", c.beta1},
          {"betaT", c.betaT},
          {"reverse_mode", c.reverse_mode},
          {"trajectories", c.trajectories},
          {"val_trajectories", c.val_trajectories},
          {"folds", c.folds},
          {"augment", c.augment},
          {"flip_prob", c.flip_prob},
          {"noise_prob", c.noise_prob},
          {"noise_sigma", c.noise_sigma},
          {"skip_warmup", c.skip_warmup}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  json merged = to_json(TrainConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    const json& def = merged[key];
    if (!same_kind(def, value)) throw ConfigError("config key '" + key + "' has the wrong type");
    merged[key] = value;
  }
  TrainConfig c;
  c.batch_size = merged["batch_size"];
  c.optimizer = merged["optimizer"];
  c.weight_decay = merged["weight_decay"];
  c.lr = merged["lr"];
  c.epochs = merged["epochs"];
  c.scheduler = merged["scheduler"];
  c.restart_epoch = merged["restart_epoch"];
  c.min_lr = merged["min_lr"];
  c.warmup_epochs = merged["warmup_epochs"];
  c.mask_ratio = merged["mask_ratio"];
  c.seed = merged["seed"];
  c.variant = merged["variant"];
  c.architecture = merged["architecture"];
  c.latent_dim = merged["latent_dim"];
  c.encoder_width = merged["encoder_width"];
  c.encoder_blocks = merged["encoder_blocks"];
  c.heads = merged["heads"];
  c.tumor_tiles = merged["tumor_tiles"];
  c.gnn = merged["gnn"];
  c.activation = merged["activation"];
  c.gnn_layers = merged["gnn_layers"];
  c.denoiser_hidden = merged["denoiser_hidden"];
  c.time_embed_dim = merged["time_embed_dim"];
  c.timesteps = merged["timesteps"];
  c.beta1 = merged["beta1"];
  c.betaT = merged["betaT"];
  c.reverse_mode = merged["reverse_mode"];
  c.trajectories = merged["trajectories"];
  c.val_trajectories = merged["val_trajectories"];
  c.folds = merged["folds"];
  c.augment = merged["augment"];
  c.flip_prob = merged["flip_prob"];
  c.noise_prob = merged["noise_prob"];
  c.noise_sigma = merged["noise_sigma"];
  c.skip_warmup = merged["skip_warmup"];
  validate(c);
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

ModelConfig model_config(const TrainConfig& c, const cohort::GridShape& grid, const cohort::VectorDims& dims) {
  ModelConfig m;
  m.variant = parse_variant(c.variant);
  m.architecture = encoder::parse_architecture(c.architecture);
  m.latent_dim = c.latent_dim;
  m.encoder_width = c.encoder_width;
  m.encoder_blocks = c.encoder_blocks;
  m.heads = c.heads;
  m.tumor_tiles = c.tumor_tiles;
  m.gnn = hga::parse_layer_type(c.gnn);
  m.activation = hga::parse_activation(c.activation);
  m.gnn_layers = c.gnn_layers;
  m.denoiser_hidden = c.denoiser_hidden;
  m.time_embed_dim = c.time_embed_dim;
  m.timesteps = c.timesteps;
  m.beta1 = c.beta1;
  m.betaT = c.betaT;
  m.grid = grid;
  m.dims = dims;
  m.seed = mix_seed(c.seed, kModelStream);
  return m;
}

PredictOptions predict_options(const TrainConfig& c, std::uint64_t seed) {
  return {c.trajectories, seed, cfd::parse_reverse_mode(c.reverse_mode)};
}

ag::Var non_diffusion_loss(const ag::Var& y_hat, int y0, const std::vector<mmrl::AlignPair>& align_pairs) {
  ag::Var loss = ag::bce(y_hat, static_cast<double>(y0));
  for (const auto& p : align_pairs) loss = ag::add(loss, mmrl::alignment_loss(p.unmasked, p.masked));
  return loss;
}

ag::Var total_loss(const ag::Var& non_diffusion, const ag::Var& diffusion) {
  return ag::add(non_diffusion, diffusion);
}

double lr_at(std::size_t epoch, const TrainConfig& c) {
  if (epoch >= c.epochs)
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.epochs) + ")");
  const double phase = static_cast<double>(epoch % c.restart_epoch) / static_cast<double>(c.restart_epoch);
  return c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * phase));
}

void adam_update(Tensor& param, const std::vector<double>& grad, AdamSlot& slot, double lr,
                 double weight_decay, double beta1, double beta2, double eps) {
  if (slot.m.size() != param.size()) {
    slot.m = Tensor(param.shape);
    slot.v = Tensor(param.shape);
    slot.step = 0;
  }
  ++slot.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(slot.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(slot.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param.data[i];
    slot.m.data[i] = beta1 * slot.m.data[i] + (1.0 - beta1) * g;
    slot.v.data[i] = beta2 * slot.v.data[i] + (1.0 - beta2) * g * g;
    param.data[i] -= lr * (slot.m.data[i] / c1) / (std::sqrt(slot.v.data[i] / c2) + eps);
  }
}

Checkpoint initial_checkpoint(const TrainConfig& config, const cohort::GridShape& grid,
                              const cohort::VectorDims& dims) {
  validate(config);
  Checkpoint ck;
  ck.config = config;
  ck.model = init_model(model_config(config, grid, dims));
  ck.rng.seed(mix_seed(config.seed, kShuffleStream));
  return ck;
}

StepGradients batch_gradients(Model& model, const Split& batch, const TrainConfig& config, bool joint,
                              std::uint64_t batch_seed) {
  ParamList params = parameters(model);
  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool diffusion = joint && model.config.uses_cfd();
  const Augmentation aug{config.flip_prob, config.noise_prob, config.noise_sigma};

  struct PerRecord {
    std::vector<std::vector<double>> grads;
    double bce = 0.0, alignment = 0.0, diffusion = 0.0;
    bool masked = false;
  };
  std::vector<PerRecord> per(n);

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const cohort::PatientRecord& r = *batch[i];
    Rng rng(mix_seed(batch_seed, i));
    ag::Tape tape;
    const RecordForward fw = forward_record(tape, model, r, mmrl::Mode::train, config.mask_ratio, rng,
                                            config.augment ? &aug : nullptr);
    const ag::Var bce = ag::bce(fw.y_hat, static_cast<double>(r.label));
    const ag::Var nd = non_diffusion_loss(fw.y_hat, r.label, fw.align_pairs);
    ag::Var loss = nd;
    PerRecord& out = per[i];
    out.bce = bce.item();
    out.alignment = nd.item() - bce.item();
    if (diffusion) {
      const ag::Var dl = cfd::diffusion_loss(tape, {one_hot(r.label)}, {fw.f_phi}, model.denoiser,
                                             model.schedule, rng);
      out.diffusion = dl.item();
      loss = total_loss(nd, dl);
    }
    out.masked = fw.used_masked_path;
    ag::backward(ag::scale(loss, inv_n));
    out.grads.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Tensor* g = tape.grad_of(*params[p].tensor);
      out.grads[p] = g ? g->data : std::vector<double>(params[p].tensor->size(), 0.0);
    }
  }

  StepGradients sg;
  sg.grads.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) sg.grads[p].assign(params[p].tensor->size(), 0.0);
  for (const PerRecord& r : per) {
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t k = 0; k < r.grads[p].size(); ++k) sg.grads[p][k] += r.grads[p][k];
    sg.bce += r.bce * inv_n;
    sg.alignment += r.alignment * inv_n;
    sg.diffusion += r.diffusion * inv_n;
    sg.masked_passes += r.masked ? 1 : 0;
  }
  return sg;
}

namespace {

void check_finite(double value, const char* term, std::size_t epoch) {
  if (!std::isfinite(value))
    throw DivergenceError(std::string("non-finite ") + term + " loss at epoch " + std::to_string(epoch));
}

// One pass over `train` in a freshly shuffled order.
EpochRecord run_epoch(Checkpoint& ck, const Split& train, bool joint) {
  const TrainConfig& c = ck.config;
  EpochRecord rec;
  rec.epoch = ck.epoch;
  rec.phase = joint ? "joint" : "warmup";
  rec.lr = lr_at(ck.epoch, c);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), ck.rng);

  ParamList params = parameters(ck.model);
  double weight_total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
    Split batch;
    for (std::size_t k = start; k < std::min(order.size(), start + c.batch_size); ++k)
      batch.push_back(train[order[k]]);
    const std::uint64_t batch_seed = ck.rng();
    StepGradients sg = batch_gradients(ck.model, batch, c, joint, batch_seed);
    check_finite(sg.bce, "BCE", ck.epoch);
    check_finite(sg.alignment, "alignment", ck.epoch);
    check_finite(sg.diffusion, "diffusion", ck.epoch);
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!joint && parameter_group(params[p].name) == "cfd") continue;
      adam_update(*params[p].tensor, sg.grads[p], ck.adam[params[p].name], rec.lr, c.weight_decay);
    }
    const double w = static_cast<double>(batch.size());
    rec.bce += sg.bce * w;
    rec.alignment += sg.alignment * w;
    rec.diffusion += sg.diffusion * w;
    weight_total += w;
    rec.masked_train_passes += sg.masked_passes;
    rec.train_passes += batch.size();
  }
  rec.bce /= weight_total;
  rec.alignment /= weight_total;
  rec.diffusion /= weight_total;
  rec.loss = rec.bce + rec.alignment + rec.diffusion;
  ++ck.epoch;
  return rec;
}

}  // namespace

Checkpoint warmup_guidance(const Split& train, const TrainConfig& config) {
  if (train.empty()) throw ConfigError("warm-up needs a non-empty training split");
  const auto& r = *train.front();
  const cohort::VectorDims dims{r.clinical.size(), r.hematology.size(), r.radiomics.size()};
  return warmup_guidance(initial_checkpoint(config, r.tumor.shape, dims), train);
}

Checkpoint warmup_guidance(Checkpoint ck, const Split& train) {
  if (train.empty()) throw ConfigError("warm-up needs a non-empty training split");
  while (ck.epoch < ck.config.warmup_epochs) ck.history.push_back(run_epoch(ck, train, false));
  ck.warmed_up = true;
  return ck;
}

Checkpoint train_joint(const Checkpoint& start, const Split& train, const Split& val) {
  if (!start.warmed_up && !start.config.skip_warmup)
    throw ConfigError("joint training needs a warmed-up checkpoint (or skip_warmup)");
  if (train.empty()) throw ConfigError("joint training needs a non-empty training split");
  if (val.empty()) throw ConfigError("joint training needs a non-empty validation split");

  Checkpoint ck = start;
  const PredictOptions val_options{ck.config.val_trajectories, mix_seed(ck.config.seed, kValStream),
                                   cfd::parse_reverse_mode(ck.config.reverse_mode)};
  const auto validate_now = [&](EpochRecord& rec) {
    const Predictions p = predict(ck.model, val, val_options);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) correct += p.labels[i] == val[i]->label ? 1 : 0;
    rec.val_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(val.size());
    rec.masked_eval_passes = p.masked_passes;
    rec.eval_passes = val.size();
  };

  std::optional<Checkpoint> best;
  const auto consider = [&](const EpochRecord& rec) {
    if (!best || rec.val_accuracy > best->best_val_accuracy) {
      best = ck;
      best->best_val_accuracy = rec.val_accuracy;
      best->best_epoch = rec.epoch;
    }
  };

  if (ck.epoch >= ck.config.epochs) {
    // Nothing left to train: score the incoming state so selection is defined.
    EpochRecord rec;
    rec.epoch = ck.epoch == 0 ? 0 : ck.epoch - 1;
    rec.phase = "joint";
    validate_now(rec);
    ck.history.push_back(rec);
    consider(rec);
  }
  while (ck.epoch < ck.config.epochs) {
    EpochRecord rec = run_epoch(ck, train, true);
    validate_now(rec);
    ck.history.push_back(rec);
    consider(rec);
  }
  best->history = ck.history;
  return *best;
}

Checkpoint train(const Split& train, const Split& val, const TrainConfig& config) {
  if (train.empty()) throw ConfigError("training needs a non-empty training split");
  if (!config.skip_warmup) return train_joint(warmup_guidance(train, config), train, val);
  const auto& r = *train.front();
  const cohort::VectorDims dims{r.clinical.size(), r.hematology.size(), r.radiomics.size()};
  return train_joint(initial_checkpoint(config, r.tumor.shape, dims), train, val);
}

}  // namespace mmfusion::trainer
