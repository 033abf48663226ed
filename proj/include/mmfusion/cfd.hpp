#pragma once

// Conditional feature-guided diffusion over 2-D label vectors.
//
// Forward process (guidance f = f_phi(x)):
//   y_t = sqrt(abar_t) y_0 + (1 - sqrt(abar_t)) f + sqrt(1 - abar_t) eps
// Timesteps are 1-based; abar_0 = 1.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/params.hpp"
#include "mmfusion/random.hpp"

namespace mmfusion::cfd {

struct NoiseSchedule {
  std::size_t steps = 0;
  double beta_first = 0.0, beta_last = 0.0;
  std::vector<double> beta, alpha, alpha_bar;  // entry t-1 holds timestep t

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
};

// Linear beta schedule from beta1 to betaT.
NoiseSchedule make_noise_schedule(std::size_t steps, double beta1, double betaT);

Tensor forward_sample(const Tensor& y0, const Tensor& f_phi, std::size_t t, const Tensor& epsilon,
                      const NoiseSchedule& schedule);
ag::Var forward_sample(const ag::Var& y0, const ag::Var& f_phi, std::size_t t,
                       const ag::Var& epsilon, const NoiseSchedule& schedule);

struct DenoiserParams {
  std::size_t hidden = 128;
  std::size_t time_dim = 16;
  Tensor w1, b1, w2, b2, w3, b3;
};

DenoiserParams init_denoiser(std::size_t hidden, std::size_t time_dim, std::uint64_t seed);
ParamList parameters(DenoiserParams& params, const std::string& prefix = "cfd.");

// Sinusoidal embedding: sin(t w_i) for the first half, cos(t w_i) for the rest,
// w_i = 10000^(-i / (dim/2)).
Tensor timestep_embedding(std::size_t t, std::size_t dim);

// eps_theta(y_t, f, t): three-layer softplus MLP on [y_t, f, emb(t)].
// y_t and f_phi are 2-vectors or K x 2 matrices of the same shape.
ag::Var denoiser_forward(ag::Tape& tape, const ag::Var& y_t, const ag::Var& f_phi, std::size_t t,
                         const DenoiserParams& params);
Tensor denoiser_forward(const Tensor& y_t, const Tensor& f_phi, std::size_t t,
                        const DenoiserParams& params);

using NoisePredictor =
    std::function<ag::Var(ag::Tape&, const ag::Var& y_t, const ag::Var& f_phi, std::size_t t)>;
NoisePredictor predictor(const DenoiserParams& params);

// Mean over the batch of ||eps - eps_theta(y_t, f, t)||^2 with t ~ U{1..T}
// and eps ~ N(0, I) drawn per record.
ag::Var diffusion_loss(ag::Tape& tape, const std::vector<Tensor>& y0,
                       const std::vector<ag::Var>& f_phi, const NoisePredictor& denoiser,
                       const NoiseSchedule& schedule, Rng& rng);
ag::Var diffusion_loss(ag::Tape& tape, const std::vector<Tensor>& y0,
                       const std::vector<ag::Var>& f_phi, const DenoiserParams& params,
                       const NoiseSchedule& schedule, Rng& rng);

enum class ReverseMode { card_posterior, eq4_literal };
ReverseMode parse_reverse_mode(std::string_view name);
std::string_view to_string(ReverseMode mode);

// Inversion of the forward process given a noise estimate.
Tensor predict_y0(const Tensor& y_t, const Tensor& f_phi, const Tensor& eps_hat, std::size_t t,
                  const NoiseSchedule& schedule);

// q(y_{t-1} | y_t, y_0, f) = N(g0 y_0 + g1 y_t + g2 f, variance I).
struct Posterior {
  double gamma0 = 0.0, gamma1 = 0.0, gamma2 = 0.0, variance = 0.0;
};
Posterior posterior(std::size_t t, const NoiseSchedule& schedule);

// One reverse step for a 2-vector or a K x 2 batch of chains sharing f_phi.
// Each chain row draws its noise from rngs[row] (or rngs[0] for a vector).
Tensor reverse_step_with_estimate(const Tensor& y_t, const Tensor& f_phi, const Tensor& eps_hat,
                                  std::size_t t, const NoiseSchedule& schedule,
                                  std::vector<Rng>& rngs, ReverseMode mode);
Tensor reverse_step(const Tensor& y_t, const Tensor& f_phi, std::size_t t,
                    const DenoiserParams& params, const NoiseSchedule& schedule,
                    std::vector<Rng>& rngs, ReverseMode mode = ReverseMode::card_posterior);

struct Prediction {
  Tensor y0_tilde;  // mean terminal state over chains
  int label = 0;    // argmax of y0_tilde
};

// K chains from y_T ~ N(f_phi, I).  When `trajectory` is given it receives the
// chain mean at t = T, T-1, ..., 0.
Prediction sample_prediction(const Tensor& f_phi, const DenoiserParams& params,
                             const NoiseSchedule& schedule, std::size_t chains, Rng& rng,
                             ReverseMode mode = ReverseMode::card_posterior,
                             std::vector<Tensor>* trajectory = nullptr);

}  // namespace mmfusion::cfd
