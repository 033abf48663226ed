#pragma once

// Guidance warm-up on the non-diffusion loss, then joint training on the
// total loss; Adam with L2 weight decay and cosine annealing with restarts.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfusion/model.hpp"

namespace mmfusion::trainer {

struct TrainConfig {
  std::size_t batch_size = 12;
  std::string optimizer = "adam";
  double weight_decay = 5e-4;
  double lr = 1e-4;
  std::size_t epochs = 100;
  std::string scheduler = "cosine_annealing";
  std::size_t restart_epoch = 80;
  double min_lr = 1e-5;
  std::size_t warmup_epochs = 50;
  double mask_ratio = 0.15;
  std::uint64_t seed = 0;

  // model
  std::string variant = "full";
  std::string architecture = "resnet_small";
  std::size_t latent_dim = 64;
  std::size_t encoder_width = 4;
  std::size_t encoder_blocks = 1;
  std::size_t heads = 4;
  std::size_t tumor_tiles = 3;
  std::string gnn = "gat";
  std::string activation = "elu";
  std::size_t gnn_layers = 1;
  std::size_t denoiser_hidden = 128;
  std::size_t time_embed_dim = 16;
  std::size_t timesteps = 10;
  double beta1 = 0.01;
  double betaT = 0.95;

  // sampling
  std::string reverse_mode = "card_posterior";
  std::size_t trajectories = 100;
  std::size_t val_trajectories = 10;

  // data
  std::size_t folds = 3;
  bool augment = true;
  double flip_prob = 0.6;
  double noise_prob = 0.4;
  double noise_sigma = 0.1;

  bool skip_warmup = false;
};

// Throws ConfigError on violated invariants or unknown names.
void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);
// Flat object; keys must be TrainConfig field names.  Missing keys keep their
// defaults, unknown keys and mistyped values are errors.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

ModelConfig model_config(const TrainConfig& config, const cohort::GridShape& grid,
                         const cohort::VectorDims& dims);
PredictOptions predict_options(const TrainConfig& config, std::uint64_t seed);

ag::Var non_diffusion_loss(const ag::Var& y_hat, int y0, const std::vector<mmrl::AlignPair>& align_pairs);
ag::Var total_loss(const ag::Var& non_diffusion, const ag::Var& diffusion);

double lr_at(std::size_t epoch, const TrainConfig& config);

struct AdamSlot {
  Tensor m, v;
  std::size_t step = 0;
};
using AdamState = std::map<std::string, AdamSlot>;

// One Adam step with L2 decay folded into the gradient.  Moments are created
// on first use, so every tensor keeps its own bias-correction counter.
void adam_update(Tensor& param, const std::vector<double>& grad, AdamSlot& slot, double lr,
                 double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;  // "warmup" or "joint"
  double lr = 0.0;
  double loss = 0.0;
  double bce = 0.0;
  double alignment = 0.0;
  double diffusion = 0.0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t masked_train_passes = 0;
  std::size_t train_passes = 0;
  std::size_t masked_eval_passes = 0;
  std::size_t eval_passes = 0;
};

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::size_t epoch = 0;  // epochs completed
  bool warmed_up = false;
  Rng rng;
  AdamState adam;
  std::vector<EpochRecord> history;
  double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_epoch = 0;
};

using Split = std::vector<const cohort::PatientRecord*>;

Checkpoint initial_checkpoint(const TrainConfig& config, const cohort::GridShape& grid,
                              const cohort::VectorDims& dims);

// Optimizes every group except cfd. on the non-diffusion loss.
Checkpoint warmup_guidance(const Split& train, const TrainConfig& config);
Checkpoint warmup_guidance(Checkpoint start, const Split& train);

// Continues from `checkpoint` up to config.epochs; returns the
// best-validation-accuracy state with the complete history attached.
Checkpoint train_joint(const Checkpoint& checkpoint, const Split& train, const Split& val);

// Warm-up followed by joint training.
Checkpoint train(const Split& train, const Split& val, const TrainConfig& config);

struct StepGradients {
  std::vector<std::vector<double>> grads;  // aligned with parameters(model)
  double bce = 0.0, alignment = 0.0, diffusion = 0.0;
  std::size_t masked_passes = 0;
};

// Mean-over-batch gradients of one step.  Records are differentiated in
// parallel, then reduced in record order.
StepGradients batch_gradients(Model& model, const Split& batch, const TrainConfig& config, bool joint,
                              std::uint64_t batch_seed);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmfusion::trainer
