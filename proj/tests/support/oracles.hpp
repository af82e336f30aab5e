#pragma once

#include <cmath>
#include <vector>

#include "ddpmcd/diffusion.hpp"

namespace testsupport {

// Grid-quadrature posterior over x_{t-1} given (x0, xt): the product of the
// two Gaussian factors q(x_{t-1}|x0) and q(x_t|x_{t-1}) normalized
// numerically on a fine grid. Independent of the closed-form path.
struct GridPosterior {
    double mean = 0, variance = 0;
};

inline GridPosterior grid_bayes_posterior(double x0, double xt, int t,
                                          const ddpmcd::diffusion::NoiseSchedule& sched,
                                          double lo = -12.0, double hi = 12.0, int points = 240001) {
    double a = sched.alpha_at(t);
    double gp = sched.gamma_at(t - 1);
    double prior_mu = std::sqrt(gp) * x0;
    double prior_var = 1.0 - gp;
    double like_sd2 = 1.0 - a;

    // log density up to a constant: prior N(x; prior_mu, prior_var) *
    // likelihood N(xt; sqrt(a) x, 1-a). The prior collapses to a point at t=1.
    std::vector<double> w(static_cast<size_t>(points));
    double step = (hi - lo) / (points - 1);
    double max_log = -1e300;
    for (int i = 0; i < points; ++i) {
        double x = lo + i * step;
        double lp = -0.5 * (xt - std::sqrt(a) * x) * (xt - std::sqrt(a) * x) / like_sd2;
        if (prior_var > 0)
            lp += -0.5 * (x - prior_mu) * (x - prior_mu) / prior_var;
        else
            lp += (std::abs(x - prior_mu) < step / 2) ? 0.0 : -1e300;
        w[static_cast<size_t>(i)] = lp;
        max_log = std::max(max_log, lp);
    }
    double z = 0, m1 = 0, m2 = 0;
    for (int i = 0; i < points; ++i) {
        double x = lo + i * step;
        double d = std::exp(w[static_cast<size_t>(i)] - max_log);
        z += d;
        m1 += d * x;
        m2 += d * x * x;
    }
    GridPosterior out;
    out.mean = m1 / z;
    out.variance = m2 / z - out.mean * out.mean;
    return out;
}

}  // namespace testsupport
