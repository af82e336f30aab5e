#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddpmcd/denoiser.hpp"
#include "ddpmcd/diffusion.hpp"

namespace ddpmcd::features {

// Ordered, distinct noise levels at which decoder features are taken.
struct TimestepSet {
    std::vector<int> ts;

    TimestepSet() = default;
    explicit TimestepSet(std::vector<int> v);

    void validate_against(const diffusion::NoiseSchedule& sched) const;
    int size() const { return static_cast<int>(ts.size()); }
    std::string str() const;  // "10,20,80"
    static TimestepSet parse(const std::string& csv);
    // Rescales reference timesteps (given for ref_T) onto a T-step schedule,
    // rounding and clamping into [1, T].
    static TimestepSet scaled(const std::vector<int>& reference, int ref_T, int T);
    bool operator==(const TimestepSet&) const = default;
};

struct FeatureStackMeta {
    std::vector<int> tset;
    uint64_t noise_seed = 0;
    uint64_t draw_key = 0;  // 0 = evaluation; training uses the epoch index + 1
    uint64_t pair_index = 0;
    uint64_t schedule_hash = 0;
    uint64_t model_hash = 0;
};

// Multi-scale (5), multi-timestep decoder features for one image. Tensors are
// [C, H_s, W_s], per_timestep[k][s] for timestep ts[k] at scale s (finest
// first).
struct FeatureStack {
    std::vector<std::vector<Tensor>> per_timestep;
    FeatureStackMeta meta;
};

// Noise draws are keyed by (noise_seed, draw_key, pair_index, t), so the two
// images of a pair share eps at each timestep and results are deterministic
// regardless of evaluation order.
Tensor noise_for(const Shape& shape, uint64_t noise_seed, uint64_t draw_key, uint64_t pair_index,
                 int t, DType dt = DType::f32);

// Extracts the frozen model's decoder features for one [3,H,W] image in
// [-1,1]. No gradients are recorded.
FeatureStack extract(const denoiser::DenoiserModel& model, const Tensor& image,
                     const TimestepSet& tset, const diffusion::NoiseSchedule& sched,
                     uint64_t noise_seed, uint64_t pair_index = 0, uint64_t draw_key = 0);

std::pair<FeatureStack, FeatureStack> extract_pair(const denoiser::DenoiserModel& model,
                                                   const Tensor& img_a, const Tensor& img_b,
                                                   const TimestepSet& tset,
                                                   const diffusion::NoiseSchedule& sched,
                                                   uint64_t noise_seed, uint64_t pair_index = 0,
                                                   uint64_t draw_key = 0);

// Per-scale channel concatenation in timestep order: 5 tensors of
// [|tset| * C_s, H_s, W_s].
std::vector<Tensor> concat_timesteps(const FeatureStack& stack);

// Batched extraction for training loops: images [N,3,H,W] -> 5 tensors
// [N, |tset| * C_s, H_s, W_s]; pair_keys has one entry per batch image.
std::vector<Tensor> extract_batch(const denoiser::DenoiserModel& model, const Tensor& images,
                                  const TimestepSet& tset, const diffusion::NoiseSchedule& sched,
                                  uint64_t noise_seed, const std::vector<uint64_t>& pair_keys,
                                  uint64_t draw_key);

// Per-scale channel counts of the concatenated stack for a model config.
std::vector<int> stack_channels(const denoiser::DenoiserConfig& cfg, int num_timesteps);

// --- feature cache (checkpoint container format) ---
std::filesystem::path cache_path(const std::filesystem::path& dir, const std::string& pair_id,
                                 const TimestepSet& tset);
void save_stack(const std::filesystem::path& path, const FeatureStack& stack);
// DataError if the cached schedule/model hashes do not match.
FeatureStack load_stack(const std::filesystem::path& path, uint64_t schedule_hash,
                        uint64_t model_hash);

}  // namespace ddpmcd::features
