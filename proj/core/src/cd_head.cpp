#include "ddpmcd/cd_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddpmcd/checkpoint.hpp"
#include "ddpmcd/image_io.hpp"
#include "ddpmcd/optim.hpp"

namespace ddpmcd::cd_head {

void CdHeadConfig::validate() const {
    for (int c : in_channels) {
        if (c < 1) throw ConfigError("CdHeadConfig: non-positive input channel count");
        if (c % reduction != 0)
            throw ConfigError("CdHeadConfig: channels " + std::to_string(c) +
                              " not divisible by reduction " + std::to_string(reduction));
    }
    if (proj_width < 1 || fuse_width < 1) throw ConfigError("CdHeadConfig: widths must be >= 1");
    if (classes != 2) throw ConfigError("CdHeadConfig: only 2 classes supported");
}

CdHeadConfig CdHeadConfig::for_features(const denoiser::DenoiserConfig& cfg, int num_timesteps) {
    CdHeadConfig head;
    auto ch = features::stack_channels(cfg, num_timesteps);
    std::copy(ch.begin(), ch.end(), head.in_channels.begin());
    head.dtype = cfg.dtype;
    return head;
}

void CsaBlock::init(int ch, int reduction, Rng& rng, DType dt) {
    channels = ch;
    fc1.init(ch, ch / reduction, rng, dt);
    fc2.init(ch / reduction, ch, rng, dt);
    spatial.init(ch, 1, 1, 1, 0, rng, dt);
    register_module("fc1", fc1);
    register_module("fc2", fc2);
    register_module("spatial", spatial);
}

Tensor CsaBlock::forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != channels)
        throw DimensionError("CsaBlock: expected [N," + std::to_string(channels) + ",H,W], got " +
                             shape_str(x.shape()));
    // Channel gate: squeeze over space, two-layer bottleneck, sigmoid.
    Tensor squeezed = reshape(mean(x, {2, 3}, false), {x.dim(0), channels});
    Tensor cgate = sigmoid(fc2.forward(relu(fc1.forward(squeezed))));
    Tensor channel_out = x * reshape(cgate, {x.dim(0), channels, 1, 1});
    // Spatial gate: 1x1 projection to a single map, sigmoid.
    Tensor sgate = sigmoid(spatial.forward(x));  // [N,1,H,W]
    Tensor spatial_out = x * sgate;
    return maximum(channel_out, spatial_out);
}

CdHead::CdHead(const CdHeadConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x63645f68656164ULL));
    DType dt = cfg_.dtype;
    for (int s = 0; s < denoiser::kNumLevels; ++s) {
        auto& csa = csa_[static_cast<size_t>(s)];
        auto& proj = proj_[static_cast<size_t>(s)];
        csa.init(cfg_.in_channels[static_cast<size_t>(s)], cfg_.reduction, rng, dt);
        proj.init(cfg_.in_channels[static_cast<size_t>(s)], cfg_.proj_width, 1, 1, 0, rng, dt);
        register_module("csa" + std::to_string(s), csa);
        register_module("proj" + std::to_string(s), proj);
    }
    fuse_.init(denoiser::kNumLevels * cfg_.proj_width, cfg_.fuse_width, 3, 1, 1, rng, dt);
    fuse_norm_.init(cfg_.fuse_width, dt);
    classify_.init(cfg_.fuse_width, cfg_.classes, 1, 1, 0, rng, dt);
    register_module("fuse", fuse_);
    register_module("fuse_norm", fuse_norm_);
    register_module("classify", classify_);
}

Tensor CdHead::forward(const std::vector<Tensor>& diffs) const {
    if (diffs.size() != denoiser::kNumLevels)
        throw DimensionError("CdHead: expected " + std::to_string(denoiser::kNumLevels) +
                             " per-scale inputs, got " + std::to_string(diffs.size()));
    std::vector<Tensor> upsampled;
    for (int s = 0; s < denoiser::kNumLevels; ++s) {
        const Tensor& d = diffs[static_cast<size_t>(s)];
        if (d.ndim() != 4 || d.dim(1) != cfg_.in_channels[static_cast<size_t>(s)])
            throw DimensionError("CdHead: scale " + std::to_string(s) + " expects channels " +
                                 std::to_string(cfg_.in_channels[static_cast<size_t>(s)]) + ", got " +
                                 shape_str(d.shape()));
        Tensor h = silu(proj_[static_cast<size_t>(s)].forward(csa_[static_cast<size_t>(s)].forward(d)));
        for (int up = 0; up < s; ++up) h = upsample_nearest2x(h);
        upsampled.push_back(h);
    }
    Tensor fused = silu(fuse_norm_.forward(fuse_.forward(concat(upsampled, 1))));
    return classify_.forward(fused);
}

std::vector<nn::NamedParam> CdHead::snapshot() const {
    std::vector<nn::NamedParam> out;
    for (const auto& p : named_parameters()) out.push_back({p.name, p.tensor.clone()});
    return out;
}

void CdHead::restore(const std::vector<nn::NamedParam>& snap) { load_parameters(snap); }

std::vector<Tensor> feature_difference(const features::FeatureStack& a,
                                       const features::FeatureStack& b) {
    return feature_difference(features::concat_timesteps(a), features::concat_timesteps(b));
}

std::vector<Tensor> feature_difference(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size())
        throw DataError("feature_difference: stack sizes differ (" + std::to_string(a.size()) +
                        " vs " + std::to_string(b.size()) + ")");
    std::vector<Tensor> out;
    out.reserve(a.size());
    for (size_t s = 0; s < a.size(); ++s) {
        if (a[s].shape() != b[s].shape())
            throw DataError("feature_difference: scale " + std::to_string(s) + " shapes differ: " +
                            shape_str(a[s].shape()) + " vs " + shape_str(b[s].shape()));
        out.push_back(abs(a[s] - b[s]));
    }
    return out;
}

namespace {

Tensor stack_images(const std::vector<data::CdSample>& samples, const std::vector<size_t>& idx,
                    bool pick_a) {
    std::vector<Tensor> imgs;
    imgs.reserve(idx.size());
    for (size_t i : idx)
        imgs.push_back(image::to_diffusion_range(pick_a ? samples[i].img_a : samples[i].img_b));
    return nn::stack(imgs);
}

Tensor stack_masks(const std::vector<data::CdSample>& samples, const std::vector<size_t>& idx) {
    std::vector<Tensor> masks;
    masks.reserve(idx.size());
    for (size_t i : idx) masks.push_back(samples[i].mask);
    return nn::stack(masks);
}

}  // namespace

namespace {

// Validation features are identical every epoch (frozen model, fixed
// evaluation noise key), so their per-pair diffs are computed once.
struct ValCache {
    std::vector<std::vector<Tensor>> diffs;  // per pair, 5 per-scale [1,C,H,W]
    std::vector<Tensor> masks;

    void build(const denoiser::DenoiserModel& frozen, const std::vector<data::CdSample>& val,
               const features::TimestepSet& tset, const diffusion::NoiseSchedule& sched,
               uint64_t noise_seed, int batch) {
        NoGradGuard no_grad;
        for (size_t start = 0; start < val.size(); start += static_cast<size_t>(batch)) {
            std::vector<size_t> idx;
            for (size_t i = start; i < std::min(start + static_cast<size_t>(batch), val.size()); ++i)
                idx.push_back(i);
            std::vector<uint64_t> keys(idx.begin(), idx.end());
            Tensor batch_a = stack_images(val, idx, true);
            Tensor batch_b = stack_images(val, idx, false);
            auto fa = features::extract_batch(frozen, batch_a, tset, sched, noise_seed, keys, 0);
            auto fb = features::extract_batch(frozen, batch_b, tset, sched, noise_seed, keys, 0);
            auto batch_diffs = feature_difference(fa, fb);
            for (size_t bi = 0; bi < idx.size(); ++bi) {
                std::vector<Tensor> per_scale;
                for (const auto& d : batch_diffs) {
                    Shape s = d.shape();
                    s[0] = 1;
                    Tensor one = zeros(s, d.dtype());
                    int64_t stride = one.numel();
                    auto src = d.data<float>();
                    auto dst = one.mutable_data<float>();
                    std::copy(src.begin() + static_cast<int64_t>(bi) * stride,
                              src.begin() + static_cast<int64_t>(bi + 1) * stride, dst.begin());
                    per_scale.push_back(one);
                }
                diffs.push_back(std::move(per_scale));
                masks.push_back(val[idx[bi]].mask);
            }
        }
    }

    metrics::Scores score(const CdHead& head, double threshold) const {
        NoGradGuard no_grad;
        metrics::ConfusionCounts counts;
        for (size_t i = 0; i < diffs.size(); ++i) {
            Tensor logits = head.forward(diffs[i]);
            Tensor probs = softmax(logits, 1);
            int64_t h = logits.dim(2), w = logits.dim(3), hw = h * w;
            Tensor labels = zeros({h, w});
            auto pv = probs.data<float>();
            auto lv = labels.mutable_data<float>();
            for (int64_t p = 0; p < hw; ++p)
                lv[static_cast<size_t>(p)] = pv[static_cast<size_t>(hw + p)] > threshold ? 1.0f : 0.0f;
            metrics::accumulate(counts, labels, masks[i]);
        }
        return metrics::scores(counts);
    }
};

}  // namespace

CdTrainResult train_cd(CdHead& head, const denoiser::DenoiserModel& frozen,
                       const std::vector<data::CdSample>& train,
                       const std::vector<data::CdSample>& val, const features::TimestepSet& tset,
                       const diffusion::NoiseSchedule& sched, const CdTrainOptions& opt) {
    if (train.empty()) throw DataError("train_cd: empty training set");
    uint64_t backbone_hash = frozen.parameter_hash();

    optim::AdamW opt_adamw(head.named_parameters(),
                           {.lr = opt.lr, .weight_decay = opt.weight_decay});
    CdTrainResult result;
    std::vector<nn::NamedParam> best_snapshot;
    double best_f1 = -1.0;

    ValCache val_cache;
    if (!val.empty()) val_cache.build(frozen, val, tset, sched, opt.noise_seed, opt.batch);

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        double lr_now = optim::lr_linear_decay(epoch, opt.epochs, opt.lr);
        uint64_t draw_key = static_cast<uint64_t>(epoch) + 1;  // 0 is the evaluation key

        // Deterministic per-epoch shuffle.
        Rng shuffle_rng(mix_seed(opt.noise_seed, 0x736875666cULL, static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        double loss_sum = 0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch)) {
            std::vector<size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(start + static_cast<size_t>(opt.batch),
                                                                 order.size())));
            std::vector<uint64_t> keys;
            keys.reserve(idx.size());
            for (size_t i : idx) keys.push_back(static_cast<uint64_t>(i));

            Tensor batch_a = stack_images(train, idx, true);
            Tensor batch_b = stack_images(train, idx, false);
            auto feats_a = features::extract_batch(frozen, batch_a, tset, sched, opt.noise_seed, keys,
                                                   draw_key);
            auto feats_b = features::extract_batch(frozen, batch_b, tset, sched, opt.noise_seed, keys,
                                                   draw_key);
            Tensor logits = head.forward(feature_difference(feats_a, feats_b));
            Tensor loss = ce_loss(logits, stack_masks(train, idx));
            loss.backward();
            opt_adamw.step(lr_now);
            opt_adamw.zero_grad();
            loss_sum += loss.item();
            ++batches;
        }

        EpochLog log;
        log.train_loss = loss_sum / std::max(batches, 1);
        log.lr = lr_now;
        if (!val.empty()) log.val = val_cache.score(head, opt.threshold);
        result.log.push_back(log);
        if (opt.on_epoch) opt.on_epoch(epoch, log.train_loss, lr_now, log.val);

        if (opt.select_on_val && !val.empty() && log.val.f1 > best_f1) {
            best_f1 = log.val.f1;
            best_snapshot = head.snapshot();
            result.best_epoch = epoch;
        }
    }

    if (opt.select_on_val && !best_snapshot.empty()) head.restore(best_snapshot);

    if (frozen.parameter_hash() != backbone_hash)
        throw ContractError("train_cd: frozen denoiser parameters changed during CD training");
    return result;
}

ChangeMap predict(const CdHead& head, const denoiser::DenoiserModel& frozen, const Tensor& img_a,
                  const Tensor& img_b, const features::TimestepSet& tset,
                  const diffusion::NoiseSchedule& sched, uint64_t noise_seed, uint64_t pair_index,
                  double threshold) {
    NoGradGuard no_grad;
    auto [stack_a, stack_b] =
        features::extract_pair(frozen, image::to_diffusion_range(img_a),
                               image::to_diffusion_range(img_b), tset, sched, noise_seed, pair_index);
    auto diffs = feature_difference(stack_a, stack_b);
    for (auto& d : diffs) {
        Shape s = d.shape();
        s.insert(s.begin(), 1);
        d = reshape(d, s);
    }
    Tensor logits = head.forward(diffs);  // [1,2,H,W]
    Tensor probs = softmax(logits, 1);

    ChangeMap map;
    int64_t h = logits.dim(2), w = logits.dim(3);
    map.probabilities = reshape(probs, {2, h, w}).detach();
    map.labels = zeros({h, w});
    auto pv = map.probabilities.data<float>();
    auto lv = map.labels.mutable_data<float>();
    int64_t hw = h * w;
    for (int64_t i = 0; i < hw; ++i)
        lv[static_cast<size_t>(i)] = pv[static_cast<size_t>(hw + i)] > threshold ? 1.0f : 0.0f;
    return map;
}

metrics::ConfusionCounts evaluate(const CdHead& head, const denoiser::DenoiserModel& frozen,
                                  const std::vector<data::CdSample>& samples,
                                  const features::TimestepSet& tset,
                                  const diffusion::NoiseSchedule& sched, uint64_t noise_seed,
                                  double threshold) {
    metrics::ConfusionCounts counts;
    for (size_t i = 0; i < samples.size(); ++i) {
        ChangeMap map = predict(head, frozen, samples[i].img_a, samples[i].img_b, tset, sched,
                                noise_seed, static_cast<uint64_t>(i), threshold);
        metrics::accumulate(counts, map.labels, samples[i].mask);
    }
    return counts;
}

void save_cd_head(const std::filesystem::path& path, const CdHead& head,
                  const features::TimestepSet& tset, uint64_t backbone_hash, uint64_t noise_seed) {
    const auto& cfg = head.config();
    nlohmann::json meta;
    meta["kind"] = "cd_head";
    meta["head"] = {{"in_channels", cfg.in_channels},
                    {"reduction", cfg.reduction},
                    {"proj_width", cfg.proj_width},
                    {"fuse_width", cfg.fuse_width},
                    {"classes", cfg.classes}};
    meta["tset"] = tset.ts;
    meta["backbone_hash"] = backbone_hash;
    meta["noise_seed"] = noise_seed;
    checkpoint::save(path, head.named_parameters(), meta);
}

LoadedCdHead load_cd_head(const std::filesystem::path& path) {
    auto ckpt = checkpoint::load(path);
    if (ckpt.header.value("kind", "") != "cd_head")
        throw DataError("load_cd_head: " + path.string() + " is not a CD head checkpoint");
    const auto& h = ckpt.header.at("head");
    CdHeadConfig cfg;
    cfg.in_channels = h.at("in_channels").get<std::array<int, denoiser::kNumLevels>>();
    cfg.reduction = h.at("reduction").get<int>();
    cfg.proj_width = h.at("proj_width").get<int>();
    cfg.fuse_width = h.at("fuse_width").get<int>();
    cfg.classes = h.at("classes").get<int>();

    LoadedCdHead out;
    out.head = std::make_shared<CdHead>(cfg, 0);
    std::vector<nn::NamedParam> named;
    for (auto& [name, tensor] : ckpt.tensors) named.push_back({name, tensor});
    out.head->load_parameters(named);
    out.tset = features::TimestepSet(ckpt.header.at("tset").get<std::vector<int>>());
    out.backbone_hash = ckpt.header.value("backbone_hash", uint64_t{0});
    out.noise_seed = ckpt.header.value("noise_seed", uint64_t{0});
    return out;
}

}  // namespace ddpmcd::cd_head
