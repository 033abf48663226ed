#pragma once

// Small cohorts and configs shared by the trainer, evalkit and CLI suites.

#include "mmfusion/cohort.hpp"
#include "mmfusion/trainer.hpp"

namespace fixture {

inline mmfusion::cohort::SyntheticConfig tiny_cohort_config(std::size_t n = 40, std::uint64_t seed = 3) {
  mmfusion::cohort::SyntheticConfig c;
  c.n_patients = n;
  c.grid_shape = {4, 4, 4};
  c.vector_dims = {4, 3, 3};
  c.seed = seed;
  return c;
}

// Fast model: every module present, a few hundred parameters per group.
inline mmfusion::trainer::TrainConfig tiny_train_config() {
  mmfusion::trainer::TrainConfig c;
  c.batch_size = 8;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.restart_epoch = 2;
  c.lr = 3e-3;
  c.min_lr = 3e-4;
  c.latent_dim = 8;
  c.encoder_width = 2;
  c.heads = 2;
  c.denoiser_hidden = 16;
  c.time_embed_dim = 8;
  c.trajectories = 4;
  c.val_trajectories = 4;
  return c;
}

// Reduced setting for trend runs on a 6^3 grid.
inline mmfusion::trainer::TrainConfig trend_train_config() {
  mmfusion::trainer::TrainConfig c;
  c.epochs = 8;
  c.warmup_epochs = 4;
  c.restart_epoch = 4;
  c.lr = 3e-3;
  c.min_lr = 3e-4;
  c.latent_dim = 16;
  c.heads = 2;
  c.denoiser_hidden = 128;
  c.trajectories = 20;
  c.val_trajectories = 10;
  return c;
}

inline mmfusion::trainer::Split all_of(const mmfusion::cohort::Cohort& c) {
  mmfusion::trainer::Split s;
  for (const auto& r : c) s.push_back(&r);
  return s;
}

}  // namespace fixture
