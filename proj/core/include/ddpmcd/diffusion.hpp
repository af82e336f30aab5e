#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddpmcd/random.hpp"
#include "ddpmcd/tensor.hpp"

namespace ddpmcd::diffusion {

// Per-step retention factors alpha_t and their running product gamma_t.
// Timesteps are 1-based externally; gamma_at(0) == 1 by convention.
struct NoiseSchedule {
    std::string kind;
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> alpha;  // alpha[t-1] = alpha_t
    std::vector<double> gamma;  // gamma[t-1] = prod_{i<=t} alpha_i

    double alpha_at(int t) const;
    double gamma_at(int t) const;  // accepts 0..T
    // Posterior variance (1-gamma_{t-1})(1-alpha_t)/(1-gamma_t); zero at t=1.
    double posterior_variance(int t) const;
    void check_t(int t) const;  // ContractError outside [1,T]
    uint64_t hash() const;
};

// Linear beta schedule; alpha_t = 1 - beta_t with beta linearly spaced over
// [beta_start, beta_end]. Only kind "linear" is supported.
NoiseSchedule make_schedule(const std::string& kind, int T, double beta_start, double beta_end);

// Forward corruption: sqrt(gamma_t) x0 + sqrt(1-gamma_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

struct PosteriorParams {
    Tensor mean;
    double variance = 0.0;
};

// Exact one-step denoising posterior q(x_{t-1} | x_t, x0).
PosteriorParams posterior_params(const Tensor& x0, const Tensor& xt, int t,
                                 const NoiseSchedule& sched);

struct TrainingTarget {
    Tensor xt;
    int t = 0;
    Tensor eps;
};

// Draws t uniform on [1,T] and eps ~ N(0,I), returns the noised input; the
// caller regresses the noise-prediction against eps.
TrainingTarget training_step_target(const Tensor& x0, const NoiseSchedule& sched, Rng& rng);

// Noise-prediction callback: (x_t, t) -> eps_hat, same shape as x_t.
using EpsModel = std::function<Tensor(const Tensor& xt, int t)>;

// One ancestral step. The added noise is scaled by the posterior standard
// deviation; z is ignored at t = 1.
Tensor p_sample_step(const Tensor& xt, int t, const EpsModel& model, const Tensor& z,
                     const NoiseSchedule& sched);

// Full reverse chain from x_T ~ N(0,I); result clamped to [-1, 1].
Tensor sample(const EpsModel& model, const Shape& shape, const NoiseSchedule& sched, Rng& rng);

}  // namespace ddpmcd::diffusion
