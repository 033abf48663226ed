#include "mmfusion/cfd.hpp"

#include <cmath>

#include "mmfusion/errors.hpp"

namespace mmfusion::cfd {
namespace {

void check_timestep(std::size_t t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps)
    throw ConfigError("timestep " + std::to_string(t) + " outside [1," + std::to_string(s.steps) + "]");
}

}  // namespace

NoiseSchedule make_noise_schedule(std::size_t steps, double beta1, double betaT) {
  if (steps < 1) throw ConfigError("diffusion needs at least one timestep");
  if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0))
    throw ConfigError("noise schedule requires 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_first = beta1;
  s.beta_last = betaT;
  double prod = 1.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    const double b = steps == 1 ? beta1
                                : beta1 + static_cast<double>(t - 1) / static_cast<double>(steps - 1) *
                                              (betaT - beta1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

Tensor forward_sample(const Tensor& y0, const Tensor& f_phi, std::size_t t, const Tensor& epsilon,
                      const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  if (y0.shape != f_phi.shape || y0.shape != epsilon.shape)
    throw ConfigError("forward_sample: y0, f_phi and epsilon must share a shape");
  const double sab = std::sqrt(schedule.alpha_bar_at(t));
  const double sn = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  Tensor out(y0.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = sab * y0[i] + (1.0 - sab) * f_phi[i] + sn * epsilon[i];
  return out;
}

ag::Var forward_sample(const ag::Var& y0, const ag::Var& f_phi, std::size_t t,
                       const ag::Var& epsilon, const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  const double sab = std::sqrt(schedule.alpha_bar_at(t));
  const double sn = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  return ag::add(ag::add(ag::scale(y0, sab), ag::scale(f_phi, 1.0 - sab)), ag::scale(epsilon, sn));
}

DenoiserParams init_denoiser(std::size_t hidden, std::size_t time_dim, std::uint64_t seed) {
  if (hidden == 0 || time_dim == 0 || time_dim % 2 != 0)
    throw ConfigError("denoiser needs positive hidden width and an even time embedding size");
  Rng rng(seed);
  const auto w = [&](std::size_t out, std::size_t in) {
    return normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  DenoiserParams p;
  p.hidden = hidden;
  p.time_dim = time_dim;
  p.w1 = w(hidden, 4 + time_dim);
  p.b1 = Tensor({hidden});
  p.w2 = w(hidden, hidden);
  p.b2 = Tensor({hidden});
  p.w3 = w(2, hidden);
  p.b3 = Tensor({2});
  return p;
}

ParamList parameters(DenoiserParams& p, const std::string& prefix) {
  return {{prefix + "fc1.weight", &p.w1}, {prefix + "fc1.bias", &p.b1},
          {prefix + "fc2.weight", &p.w2}, {prefix + "fc2.bias", &p.b2},
          {prefix + "fc3.weight", &p.w3}, {prefix + "fc3.bias", &p.b3}};
}

Tensor timestep_embedding(std::size_t t, std::size_t dim) {
  Tensor e({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(static_cast<double>(t) * freq);
    e[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

ag::Var denoiser_forward(ag::Tape& tape, const ag::Var& y_t, const ag::Var& f_phi, std::size_t t,
                         const DenoiserParams& p) {
  if (y_t.shape() != f_phi.shape()) throw ConfigError("denoiser: y_t and f_phi shapes differ");
  const bool single = y_t.value().rank() == 1;
  const ag::Var y = single ? ag::reshape(y_t, {1, 2}) : y_t;
  const ag::Var f = single ? ag::reshape(f_phi, {1, 2}) : f_phi;
  if (y.shape()[1] != 2) throw ConfigError("denoiser expects 2-dimensional label vectors");
  const ag::Var emb = ag::tile_rows(ag::constant(timestep_embedding(t, p.time_dim)), y.shape()[0]);
  const ag::Var in = ag::concat_cols({y, f, emb});
  ag::Var h = ag::softplus(ag::linear(in, tape.param(p.w1), tape.param(p.b1)));
  h = ag::softplus(ag::linear(h, tape.param(p.w2), tape.param(p.b2)));
  const ag::Var out = ag::linear(h, tape.param(p.w3), tape.param(p.b3));
  return single ? ag::reshape(out, {2}) : out;
}

Tensor denoiser_forward(const Tensor& y_t, const Tensor& f_phi, std::size_t t, const DenoiserParams& p) {
  ag::Tape tape(false);
  return denoiser_forward(tape, ag::constant(y_t), ag::constant(f_phi), t, p).value();
}

NoisePredictor predictor(const DenoiserParams& params) {
  return [&params](ag::Tape& tape, const ag::Var& y_t, const ag::Var& f, std::size_t t) {
    return denoiser_forward(tape, y_t, f, t, params);
  };
}

ag::Var diffusion_loss(ag::Tape& tape, const std::vector<Tensor>& y0,
                       const std::vector<ag::Var>& f_phi, const NoisePredictor& denoiser,
                       const NoiseSchedule& schedule, Rng& rng) {
  if (y0.empty() || y0.size() != f_phi.size())
    throw ConfigError("diffusion_loss: need a nonempty batch with one guidance vector per label");
  std::uniform_int_distribution<std::size_t> pick_t(1, schedule.steps);
  ag::Var total;
  for (std::size_t i = 0; i < y0.size(); ++i) {
    const std::size_t t = pick_t(rng);
    Tensor eps(y0[i].shape);
    for (double& e : eps.data) e = standard_normal(rng);
    const ag::Var eps_var = ag::constant(eps);
    const ag::Var y_t = forward_sample(ag::constant(y0[i]), f_phi[i], t, eps_var, schedule);
    const ag::Var diff = ag::sub(eps_var, denoiser(tape, y_t, f_phi[i], t));
    const ag::Var sq = ag::sum(ag::mul(diff, diff));
    total = total ? ag::add(total, sq) : sq;
  }
  return ag::scale(total, 1.0 / static_cast<double>(y0.size()));
}

ag::Var diffusion_loss(ag::Tape& tape, const std::vector<Tensor>& y0,
                       const std::vector<ag::Var>& f_phi, const DenoiserParams& params,
                       const NoiseSchedule& schedule, Rng& rng) {
  return diffusion_loss(tape, y0, f_phi, predictor(params), schedule, rng);
}

ReverseMode parse_reverse_mode(std::string_view name) {
  if (name == "card_posterior") return ReverseMode::card_posterior;
  if (name == "eq4_literal") return ReverseMode::eq4_literal;
  throw ConfigError("unknown reverse mode '" + std::string(name) +
                    "'; supported: card_posterior, eq4_literal");
}

std::string_view to_string(ReverseMode mode) {
  return mode == ReverseMode::card_posterior ? "card_posterior" : "eq4_literal";
}

Tensor predict_y0(const Tensor& y_t, const Tensor& f_phi, const Tensor& eps_hat, std::size_t t,
                  const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  const double sab = std::sqrt(schedule.alpha_bar_at(t));
  const double sn = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  const std::size_t dim = f_phi.size();
  Tensor out(y_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (y_t[i] - (1.0 - sab) * f_phi[i % dim] - sn * eps_hat[i]) / sab;
  return out;
}

Posterior posterior(std::size_t t, const NoiseSchedule& s) {
  check_timestep(t, s);
  const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
  const double a = s.alpha_at(t), b = s.beta_at(t);
  Posterior p;
  p.gamma0 = b * std::sqrt(ab_prev) / (1.0 - ab);
  p.gamma1 = (1.0 - ab_prev) * std::sqrt(a) / (1.0 - ab);
  p.gamma2 = 1.0 + (std::sqrt(ab) - 1.0) * (std::sqrt(a) + std::sqrt(ab_prev)) / (1.0 - ab);
  p.variance = (1.0 - ab_prev) / (1.0 - ab) * b;
  return p;
}

Tensor reverse_step_with_estimate(const Tensor& y_t, const Tensor& f_phi, const Tensor& eps_hat,
                                  std::size_t t, const NoiseSchedule& schedule,
                                  std::vector<Rng>& rngs, ReverseMode mode) {
  Tensor y0_hat = predict_y0(y_t, f_phi, eps_hat, t, schedule);
  if (mode == ReverseMode::eq4_literal) return y0_hat;

  const Posterior post = posterior(t, schedule);
  const std::size_t dim = f_phi.size();
  Tensor out(y_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = post.gamma0 * y0_hat[i] + post.gamma1 * y_t[i] + post.gamma2 * f_phi[i % dim];
  if (t > 1) {
    const double sd = std::sqrt(post.variance);
    for (std::size_t i = 0; i < out.size(); ++i) {
      Rng& r = rngs.at(rngs.size() == 1 ? 0 : i / dim);
      out[i] += sd * standard_normal(r);
    }
  }
  return out;
}

Tensor reverse_step(const Tensor& y_t, const Tensor& f_phi, std::size_t t, const DenoiserParams& params,
                    const NoiseSchedule& schedule, std::vector<Rng>& rngs, ReverseMode mode) {
  Tensor f = f_phi;
  if (y_t.rank() == 2) {
    f = Tensor(y_t.shape);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = f_phi[i % f_phi.size()];
  }
  const Tensor eps_hat = denoiser_forward(y_t, f, t, params);
  return reverse_step_with_estimate(y_t, f_phi, eps_hat, t, schedule, rngs, mode);
}

Prediction sample_prediction(const Tensor& f_phi, const DenoiserParams& params,
                             const NoiseSchedule& schedule, std::size_t chains, Rng& rng,
                             ReverseMode mode, std::vector<Tensor>* trajectory) {
  if (chains == 0) throw ConfigError("sample_prediction needs at least one chain");
  const std::size_t dim = f_phi.size();
  std::vector<Rng> rngs;
  const std::uint64_t base = rng();
  for (std::size_t k = 0; k < chains; ++k) rngs.emplace_back(mix_seed(base, k));

  Tensor y({chains, dim});
  for (std::size_t k = 0; k < chains; ++k)
    for (std::size_t j = 0; j < dim; ++j) y[k * dim + j] = f_phi[j] + standard_normal(rngs[k]);

  const auto chain_mean = [&](const Tensor& states) {
    Tensor m({dim});
    for (std::size_t k = 0; k < chains; ++k)
      for (std::size_t j = 0; j < dim; ++j) m[j] += states[k * dim + j];
    for (double& v : m.data) v /= static_cast<double>(chains);
    return m;
  };

  if (trajectory) {
    trajectory->clear();
    trajectory->push_back(chain_mean(y));
  }
  for (std::size_t t = schedule.steps; t >= 1; --t) {
    y = reverse_step(y, f_phi, t, params, schedule, rngs, mode);
    if (trajectory) trajectory->push_back(chain_mean(y));
  }
  Prediction p;
  p.y0_tilde = chain_mean(y);
  p.label = p.y0_tilde[1] > p.y0_tilde[0] ? 1 : 0;
  return p;
}

}  // namespace mmfusion::cfd
