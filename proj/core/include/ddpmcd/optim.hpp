#pragma once

#include <cstdint>
#include <vector>

#include "ddpmcd/nn.hpp"

namespace ddpmcd::optim {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with bias correction. `decoupled` selects AdamW semantics (weight
// decay applied to the parameter directly instead of folded into the
// gradient).
class Adam {
public:
    Adam(std::vector<nn::NamedParam> params, AdamOptions opt, bool decoupled = false);

    // Applies one update using lr_now if >= 0, else options.lr. Every
    // parameter must have a populated gradient.
    void step(double lr_now = -1.0);
    void zero_grad();
    int64_t step_count() const { return step_; }
    const AdamOptions& options() const { return opt_; }

private:
    std::vector<nn::NamedParam> params_;
    std::vector<Storage> m_, v_;
    AdamOptions opt_;
    bool decoupled_;
    int64_t step_ = 0;
};

class AdamW : public Adam {
public:
    AdamW(std::vector<nn::NamedParam> params, AdamOptions opt) : Adam(std::move(params), opt, true) {}
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_grad_norm(const std::vector<nn::NamedParam>& params, double max_norm);

// Linear ramp 0 -> target_lr over warmup_steps, then constant target_lr.
// warmup_steps == 0 means constant target_lr from step 0.
double lr_warmup_then_constant(int64_t step, int64_t warmup_steps, double target_lr);

// initial_lr * (1 - epoch/total_epochs); epochs past the end clamp to 0.
double lr_linear_decay(int64_t epoch, int64_t total_epochs, double initial_lr);

}  // namespace ddpmcd::optim
