#include "ddpmcd/diffusion.hpp"

#include <cmath>
#include <cstring>

#include "ddpmcd/ops.hpp"

namespace ddpmcd::diffusion {

double NoiseSchedule::alpha_at(int t) const {
    check_t(t);
    return alpha[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::gamma_at(int t) const {
    if (t == 0) return 1.0;
    check_t(t);
    return gamma[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::posterior_variance(int t) const {
    check_t(t);
    return (1.0 - gamma_at(t - 1)) * (1.0 - alpha_at(t)) / (1.0 - gamma_at(t));
}

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T)
        throw ContractError("timestep t=" + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
}

uint64_t NoiseSchedule::hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    feed(kind.data(), kind.size());
    feed(&T, sizeof(T));
    feed(&beta_start, sizeof(beta_start));
    feed(&beta_end, sizeof(beta_end));
    return h;
}

NoiseSchedule make_schedule(const std::string& kind, int T, double beta_start, double beta_end) {
    if (kind != "linear")
        throw ConfigError("make_schedule: unsupported kind '" + kind + "' (only 'linear')");
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1, got beta_start=" +
                          std::to_string(beta_start) + ", beta_end=" + std::to_string(beta_end));
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha.resize(static_cast<size_t>(T));
    s.gamma.resize(static_cast<size_t>(T));
    double run = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                                static_cast<double>(T - 1);
        s.alpha[static_cast<size_t>(t)] = 1.0 - beta;
        run *= s.alpha[static_cast<size_t>(t)];
        s.gamma[static_cast<size_t>(t)] = run;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (eps.shape() != x0.shape())
        throw DimensionError("q_sample: eps shape " + shape_str(eps.shape()) + " != x0 shape " +
                             shape_str(x0.shape()));
    double g = sched.gamma_at(t);
    return x0 * std::sqrt(g) + eps * std::sqrt(1.0 - g);
}

PosteriorParams posterior_params(const Tensor& x0, const Tensor& xt, int t,
                                 const NoiseSchedule& sched) {
    sched.check_t(t);
    if (x0.shape() != xt.shape())
        throw DimensionError("posterior_params: x0 shape " + shape_str(x0.shape()) + " != xt shape " +
                             shape_str(xt.shape()));
    double a = sched.alpha_at(t);
    double gp = sched.gamma_at(t - 1);
    double g = sched.gamma_at(t);
    double coeff_x0 = std::sqrt(gp) * (1.0 - a) / (1.0 - g);
    double coeff_xt = std::sqrt(a) * (1.0 - gp) / (1.0 - g);
    PosteriorParams p;
    p.mean = x0 * coeff_x0 + xt * coeff_xt;
    p.variance = (1.0 - gp) * (1.0 - a) / (1.0 - g);
    return p;
}

TrainingTarget training_step_target(const Tensor& x0, const NoiseSchedule& sched, Rng& rng) {
    TrainingTarget out;
    out.t = static_cast<int>(rng.uniform_int(1, sched.T));
    out.eps = rng.gaussian_tensor(x0.shape(), x0.dtype());
    out.xt = q_sample(x0, out.t, out.eps, sched);
    return out;
}

Tensor p_sample_step(const Tensor& xt, int t, const EpsModel& model, const Tensor& z,
                     const NoiseSchedule& sched) {
    sched.check_t(t);
    double a = sched.alpha_at(t);
    double g = sched.gamma_at(t);
    Tensor eps_hat = model(xt, t);
    if (eps_hat.shape() != xt.shape())
        throw DimensionError("p_sample_step: model output shape " + shape_str(eps_hat.shape()) +
                             " != x_t shape " + shape_str(xt.shape()));
    Tensor mean = (xt - eps_hat * ((1.0 - a) / std::sqrt(1.0 - g))) * (1.0 / std::sqrt(a));
    if (t == 1) return mean;  // final step is deterministic
    if (z.shape() != xt.shape())
        throw DimensionError("p_sample_step: z shape " + shape_str(z.shape()) + " != x_t shape " +
                             shape_str(xt.shape()));
    return mean + z * std::sqrt(sched.posterior_variance(t));
}

Tensor sample(const EpsModel& model, const Shape& shape, const NoiseSchedule& sched, Rng& rng) {
    NoGradGuard no_grad;
    Tensor x = rng.gaussian_tensor(shape);
    for (int t = sched.T; t >= 1; --t) {
        Tensor z = t > 1 ? rng.gaussian_tensor(shape) : zeros(shape);
        x = p_sample_step(x, t, model, z, sched);
    }
    return clamp(x, -1.0, 1.0);
}

}  // namespace ddpmcd::diffusion
