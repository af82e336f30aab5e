#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ddpmcd/denoiser.hpp"
#include "ddpmcd/diffusion.hpp"

namespace ddpmcd::training {

struct PretrainOptions {
    int64_t steps = 2000;
    int batch = 4;
    double lr = 2e-4;
    int64_t warmup_steps = 200;
    double clip_norm = 1.0;
    uint64_t seed = 0;
    // Corpus accessor: index -> [3,H,W] image in [0,1]; indices drawn uniform
    // from [0, corpus_size).
    std::function<Tensor(int64_t)> corpus;
    int64_t corpus_size = 0;
    std::function<void(int64_t step, double loss, double lr)> on_step;
};

struct PretrainResult {
    std::vector<float> losses;  // per-step

    double mean_loss(int64_t first, int64_t count) const;
};

// Noise-prediction training: per step, a fresh batch is noised at per-sample
// uniform timesteps and the model regresses the injected noise (Adam,
// warmup-then-constant lr, global-norm gradient clipping).
PretrainResult pretrain_diffusion(denoiser::DenoiserModel& model,
                                  const diffusion::NoiseSchedule& sched,
                                  const PretrainOptions& opt);

}  // namespace ddpmcd::training
