#pragma once

#include <array>
#include <functional>
#include <vector>

#include "ddpmcd/data.hpp"
#include "ddpmcd/features.hpp"
#include "ddpmcd/metrics.hpp"
#include "ddpmcd/nn.hpp"

namespace ddpmcd::cd_head {

struct CdHeadConfig {
    // Per-scale input channels; must equal the feature stack exactly.
    std::array<int, denoiser::kNumLevels> in_channels{};
    int reduction = 8;    // channel-attention bottleneck ratio
    int proj_width = 16;  // per-scale projection channels
    int fuse_width = 32;  // fusion conv channels
    int classes = 2;
    DType dtype = DType::f32;

    void validate() const;
    static CdHeadConfig for_features(const denoiser::DenoiserConfig& cfg, int num_timesteps);
    bool operator==(const CdHeadConfig&) const = default;
};

// Concurrent channel + spatial squeeze-excitation; the two gated tensors are
// combined by element-wise max.
struct CsaBlock : nn::Module {
    nn::Linear fc1, fc2;
    nn::Conv2d spatial;
    int channels = 0;

    void init(int ch, int reduction, Rng& rng, DType dt);
    Tensor forward(const Tensor& x) const;  // [N,C,H,W] -> same shape
};

struct ChangeMap {
    Tensor probabilities;  // [2,H,W], per-pixel simplex
    Tensor labels;         // [H,W] of {0,1}
};

// Multi-scale change classifier: per-scale CSA + projection, nearest-neighbor
// upsampling to full resolution, channel-concat fusion, 1x1 classifier.
class CdHead : public nn::Module {
public:
    CdHead(const CdHeadConfig& cfg, uint64_t seed);

    // diffs: 5 per-scale tensors [N, C_s, H_s, W_s], finest first.
    Tensor forward(const std::vector<Tensor>& diffs) const;
    const CdHeadConfig& config() const { return cfg_; }

    // Copies of the parameter values (for best-epoch snapshots).
    std::vector<nn::NamedParam> snapshot() const;
    void restore(const std::vector<nn::NamedParam>& snap);

private:
    CdHeadConfig cfg_;
    std::array<CsaBlock, denoiser::kNumLevels> csa_;
    std::array<nn::Conv2d, denoiser::kNumLevels> proj_;
    nn::Conv2d fuse_;
    nn::GroupNorm fuse_norm_;
    nn::Conv2d classify_;
};

// Per-scale |a - b| over timestep-concatenated stacks; 5 tensors.
std::vector<Tensor> feature_difference(const features::FeatureStack& a,
                                       const features::FeatureStack& b);
// Same, over already-concatenated per-scale tensors (batched or not).
std::vector<Tensor> feature_difference(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

struct CdTrainOptions {
    int epochs = 20;
    int batch = 8;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    uint64_t noise_seed = 0;
    double threshold = 0.5;
    bool select_on_val = true;
    std::function<void(int epoch, double train_loss, double lr, const metrics::Scores& val)> on_epoch;
};

struct EpochLog {
    double train_loss = 0;
    double lr = 0;
    metrics::Scores val;
};

struct CdTrainResult {
    std::vector<EpochLog> log;
    int best_epoch = -1;  // epoch whose snapshot was restored (val F1)
};

// Trains the head with AdamW + CE against the frozen denoiser; per-epoch
// feature noise is re-drawn from the epoch-indexed key while validation uses
// the fixed evaluation key. The denoiser must be bit-identical afterwards
// (ContractError otherwise).
CdTrainResult train_cd(CdHead& head, const denoiser::DenoiserModel& frozen,
                       const std::vector<data::CdSample>& train,
                       const std::vector<data::CdSample>& val, const features::TimestepSet& tset,
                       const diffusion::NoiseSchedule& sched, const CdTrainOptions& opt);

// Softmax probabilities and thresholded labels; p(change) == threshold
// resolves to no-change.
ChangeMap predict(const CdHead& head, const denoiser::DenoiserModel& frozen, const Tensor& img_a,
                  const Tensor& img_b, const features::TimestepSet& tset,
                  const diffusion::NoiseSchedule& sched, uint64_t noise_seed, uint64_t pair_index,
                  double threshold = 0.5);

// Micro-aggregated scores over a sample list (images in [0,1]).
metrics::ConfusionCounts evaluate(const CdHead& head, const denoiser::DenoiserModel& frozen,
                                  const std::vector<data::CdSample>& samples,
                                  const features::TimestepSet& tset,
                                  const diffusion::NoiseSchedule& sched, uint64_t noise_seed,
                                  double threshold = 0.5);

// Head checkpoints use the same binary container as the denoiser.
void save_cd_head(const std::filesystem::path& path, const CdHead& head,
                  const features::TimestepSet& tset, uint64_t backbone_hash, uint64_t noise_seed);

struct LoadedCdHead {
    std::shared_ptr<CdHead> head;
    features::TimestepSet tset;
    uint64_t backbone_hash = 0;
    uint64_t noise_seed = 0;
};

LoadedCdHead load_cd_head(const std::filesystem::path& path);

}  // namespace ddpmcd::cd_head
