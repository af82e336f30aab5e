#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "ddpmcd/nn.hpp"

namespace ddpmcd::denoiser {

inline constexpr int kNumLevels = 5;

struct DenoiserConfig {
    int in_channels = 3;
    int base_width = 32;
    std::array<int, kNumLevels> channel_mults{1, 2, 2, 4, 4};
    bool bottleneck_attention = true;
    int time_embed_dim = 128;
    DType dtype = DType::f32;

    int channels_at(int level) const { return base_width * channel_mults[static_cast<size_t>(level)]; }
    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

// Sinusoidal embedding, interleaved [sin(f0 t), cos(f0 t), sin(f1 t), ...];
// dim must be even.
Tensor timestep_embedding(const std::vector<int>& t, int dim, DType dt = DType::f32);

struct ResBlock : nn::Module {
    nn::GroupNorm norm1, norm2;
    nn::Conv2d conv1, conv2;
    nn::Linear temb_proj;
    nn::Conv2d skip;
    bool has_skip = false;

    void init(int in_ch, int out_ch, int temb_dim, Rng& rng, DType dt);
    Tensor forward(const Tensor& x, const Tensor& temb) const;
};

// Single-head self-attention over spatial positions.
struct AttentionBlock : nn::Module {
    nn::GroupNorm norm;
    nn::Conv2d q, k, v, proj;
    int channels = 0;

    void init(int ch, Rng& rng, DType dt);
    Tensor forward(const Tensor& x) const;
};

struct DenoiserForward {
    Tensor eps_hat;
    // Decoder taps, finest (h x w) to coarsest (h/16 x w/16).
    std::vector<Tensor> features;
};

// U-Net noise predictor f(x_t, t) with five resolution levels; decoder taps
// sit after each level's residual block.
class DenoiserModel : public nn::Module {
public:
    DenoiserModel(const DenoiserConfig& cfg, uint64_t seed);

    Tensor forward(const Tensor& xt, const std::vector<int>& t) const;
    DenoiserForward forward_with_features(const Tensor& xt, const std::vector<int>& t) const;

    const DenoiserConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }

private:
    DenoiserConfig cfg_;
    uint64_t seed_;

    nn::Linear time_fc1, time_fc2;
    nn::Conv2d stem;
    std::array<ResBlock, kNumLevels> enc;
    std::array<nn::Conv2d, kNumLevels - 1> down;
    ResBlock mid1, mid2;
    AttentionBlock attn;
    std::array<ResBlock, kNumLevels> dec;
    std::array<nn::Conv2d, kNumLevels - 1> up_conv;
    nn::GroupNorm out_norm;
    nn::Conv2d out_conv;
};

}  // namespace ddpmcd::denoiser
