#include "ddpmcd/denoiser.hpp"

#include <cmath>

namespace ddpmcd::denoiser {

void DenoiserConfig::validate() const {
    if (in_channels < 1) throw ConfigError("DenoiserConfig: in_channels must be >= 1");
    if (base_width < 1) throw ConfigError("DenoiserConfig: base_width must be >= 1");
    for (int m : channel_mults)
        if (m < 1) throw ConfigError("DenoiserConfig: channel multipliers must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ConfigError("DenoiserConfig: time_embed_dim must be even and >= 2, got " +
                          std::to_string(time_embed_dim));
}

Tensor timestep_embedding(const std::vector<int>& t, int dim, DType dt) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("timestep_embedding: dim must be even and >= 2, got " + std::to_string(dim));
    int half = dim / 2;
    int64_t n = static_cast<int64_t>(t.size());
    Tensor out = zeros({n, dim}, dt);
    auto write = [&](auto span_out) {
        using T = typename decltype(span_out)::value_type;
        for (int64_t i = 0; i < n; ++i) {
            double tv = static_cast<double>(t[static_cast<size_t>(i)]);
            for (int j = 0; j < half; ++j) {
                double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                       static_cast<double>(half));
                span_out[static_cast<size_t>(i * dim + 2 * j)] = static_cast<T>(std::sin(tv * freq));
                span_out[static_cast<size_t>(i * dim + 2 * j + 1)] = static_cast<T>(std::cos(tv * freq));
            }
        }
    };
    if (dt == DType::f32)
        write(out.mutable_data<float>());
    else
        write(out.mutable_data<double>());
    return out;
}

void ResBlock::init(int in_ch, int out_ch, int temb_dim, Rng& rng, DType dt) {
    norm1.init(in_ch, dt);
    conv1.init(in_ch, out_ch, 3, 1, 1, rng, dt);
    temb_proj.init(temb_dim, out_ch, rng, dt);
    norm2.init(out_ch, dt);
    conv2.init(out_ch, out_ch, 3, 1, 1, rng, dt);
    has_skip = in_ch != out_ch;
    if (has_skip) skip.init(in_ch, out_ch, 1, 1, 0, rng, dt);
    register_module("norm1", norm1);
    register_module("conv1", conv1);
    register_module("temb", temb_proj);
    register_module("norm2", norm2);
    register_module("conv2", conv2);
    if (has_skip) register_module("skip", skip);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1.forward(silu(norm1.forward(x)));
    Tensor shift = temb_proj.forward(silu(temb));  // [N, out_ch]
    h = h + reshape(shift, {shift.dim(0), shift.dim(1), 1, 1});
    h = conv2.forward(silu(norm2.forward(h)));
    return h + (has_skip ? skip.forward(x) : x);
}

void AttentionBlock::init(int ch, Rng& rng, DType dt) {
    channels = ch;
    norm.init(ch, dt);
    q.init(ch, ch, 1, 1, 0, rng, dt);
    k.init(ch, ch, 1, 1, 0, rng, dt);
    v.init(ch, ch, 1, 1, 0, rng, dt);
    proj.init(ch, ch, 1, 1, 0, rng, dt);
    register_module("norm", norm);
    register_module("q", q);
    register_module("k", k);
    register_module("v", v);
    register_module("proj", proj);
}

Tensor AttentionBlock::forward(const Tensor& x) const {
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor hn = norm.forward(x);
    Tensor qm = reshape(q.forward(hn), {n, c, h * w});
    Tensor km = reshape(k.forward(hn), {n, c, h * w});
    Tensor vm = reshape(v.forward(hn), {n, c, h * w});
    Tensor scores = matmul(permute(qm, {0, 2, 1}), km) * (1.0 / std::sqrt(static_cast<double>(c)));
    Tensor attn_w = softmax(scores, 2);  // [n, hw, hw], rows index query position
    Tensor out = matmul(vm, permute(attn_w, {0, 2, 1}));
    return x + proj.forward(reshape(out, {n, c, h, w}));
}

DenoiserModel::DenoiserModel(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));  // independent init stream per seed
    DType dt = cfg_.dtype;
    int temb_dim = cfg_.time_embed_dim * 4;

    time_fc1.init(cfg_.time_embed_dim, temb_dim, rng, dt);
    time_fc2.init(temb_dim, temb_dim, rng, dt);
    register_module("time_fc1", time_fc1);
    register_module("time_fc2", time_fc2);

    stem.init(cfg_.in_channels, cfg_.channels_at(0), 3, 1, 1, rng, dt);
    register_module("stem", stem);

    for (int i = 0; i < kNumLevels; ++i) {
        int cin = i == 0 ? cfg_.channels_at(0) : cfg_.channels_at(i - 1);
        enc[static_cast<size_t>(i)].init(cin, cfg_.channels_at(i), temb_dim, rng, dt);
        register_module("enc" + std::to_string(i), enc[static_cast<size_t>(i)]);
        if (i < kNumLevels - 1) {
            down[static_cast<size_t>(i)].init(cfg_.channels_at(i), cfg_.channels_at(i), 3, 2, 1, rng, dt);
            register_module("down" + std::to_string(i), down[static_cast<size_t>(i)]);
        }
    }

    int cmid = cfg_.channels_at(kNumLevels - 1);
    mid1.init(cmid, cmid, temb_dim, rng, dt);
    register_module("mid1", mid1);
    if (cfg_.bottleneck_attention) {
        attn.init(cmid, rng, dt);
        register_module("attn", attn);
    }
    mid2.init(cmid, cmid, temb_dim, rng, dt);
    register_module("mid2", mid2);

    for (int i = kNumLevels - 1; i >= 0; --i) {
        dec[static_cast<size_t>(i)].init(2 * cfg_.channels_at(i), cfg_.channels_at(i), temb_dim, rng, dt);
        register_module("dec" + std::to_string(i), dec[static_cast<size_t>(i)]);
        if (i > 0) {
            up_conv[static_cast<size_t>(i - 1)].init(cfg_.channels_at(i), cfg_.channels_at(i - 1), 3, 1, 1,
                                                     rng, dt);
            register_module("up" + std::to_string(i - 1), up_conv[static_cast<size_t>(i - 1)]);
        }
    }

    out_norm.init(cfg_.channels_at(0), dt);
    out_conv.init(cfg_.channels_at(0), cfg_.in_channels, 3, 1, 1, rng, dt);
    register_module("out_norm", out_norm);
    register_module("out_conv", out_conv);
}

Tensor DenoiserModel::forward(const Tensor& xt, const std::vector<int>& t) const {
    return forward_with_features(xt, t).eps_hat;
}

DenoiserForward DenoiserModel::forward_with_features(const Tensor& xt,
                                                     const std::vector<int>& t) const {
    if (xt.ndim() != 4 || xt.dim(1) != cfg_.in_channels)
        throw DimensionError("denoiser: expected [N," + std::to_string(cfg_.in_channels) +
                             ",H,W], got " + shape_str(xt.shape()));
    if (xt.dim(2) % 16 != 0 || xt.dim(3) % 16 != 0)
        throw DimensionError("denoiser: spatial dims must be divisible by 16, got " +
                             shape_str(xt.shape()));
    if (static_cast<int64_t>(t.size()) != xt.dim(0))
        throw DimensionError("denoiser: got " + std::to_string(t.size()) + " timesteps for batch " +
                             std::to_string(xt.dim(0)));

    Tensor temb = time_fc2.forward(silu(time_fc1.forward(
        timestep_embedding(t, cfg_.time_embed_dim, cfg_.dtype))));

    Tensor h = stem.forward(xt);
    std::array<Tensor, kNumLevels> skips;
    for (int i = 0; i < kNumLevels; ++i) {
        h = enc[static_cast<size_t>(i)].forward(h, temb);
        nn::check_finite(h, "enc" + std::to_string(i));
        skips[static_cast<size_t>(i)] = h;
        if (i < kNumLevels - 1) h = down[static_cast<size_t>(i)].forward(h);
    }

    h = mid1.forward(h, temb);
    if (cfg_.bottleneck_attention) h = attn.forward(h);
    h = mid2.forward(h, temb);
    nn::check_finite(h, "mid");

    DenoiserForward out;
    out.features.resize(kNumLevels);
    for (int i = kNumLevels - 1; i >= 0; --i) {
        h = dec[static_cast<size_t>(i)].forward(concat({h, skips[static_cast<size_t>(i)]}, 1), temb);
        nn::check_finite(h, "dec" + std::to_string(i));
        out.features[static_cast<size_t>(i)] = h;
        if (i > 0) h = up_conv[static_cast<size_t>(i - 1)].forward(upsample_nearest2x(h));
    }

    out.eps_hat = out_conv.forward(silu(out_norm.forward(h)));
    nn::check_finite(out.eps_hat, "out_conv");
    return out;
}

}  // namespace ddpmcd::denoiser
