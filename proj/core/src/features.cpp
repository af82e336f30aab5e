#include "ddpmcd/features.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ddpmcd/checkpoint.hpp"
#include "ddpmcd/ops.hpp"

namespace ddpmcd::features {

TimestepSet::TimestepSet(std::vector<int> v) : ts(std::move(v)) {
    if (ts.empty()) throw ConfigError("TimestepSet: empty");
    for (size_t i = 0; i < ts.size(); ++i) {
        if (ts[i] < 1) throw ConfigError("TimestepSet: timestep " + std::to_string(ts[i]) + " < 1");
        if (i > 0 && ts[i] <= ts[i - 1])
            throw ConfigError("TimestepSet: timesteps must be strictly increasing, got " + str());
    }
}

void TimestepSet::validate_against(const diffusion::NoiseSchedule& sched) const {
    for (int t : ts)
        if (t > sched.T)
            throw ConfigError("TimestepSet: t=" + std::to_string(t) + " exceeds schedule T=" +
                              std::to_string(sched.T));
}

std::string TimestepSet::str() const {
    std::ostringstream os;
    for (size_t i = 0; i < ts.size(); ++i) {
        if (i) os << ",";
        os << ts[i];
    }
    return os.str();
}

TimestepSet TimestepSet::parse(const std::string& csv) {
    std::vector<int> v;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            v.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("TimestepSet: cannot parse '" + tok + "' in '" + csv + "'");
        }
    }
    return TimestepSet(std::move(v));
}

TimestepSet TimestepSet::scaled(const std::vector<int>& reference, int ref_T, int T) {
    std::vector<int> v;
    for (int t : reference) {
        int s = static_cast<int>(std::lround(static_cast<double>(t) * T / ref_T));
        s = std::clamp(s, 1, T);
        if (v.empty() || s > v.back()) v.push_back(s);
    }
    return TimestepSet(std::move(v));
}

Tensor noise_for(const Shape& shape, uint64_t noise_seed, uint64_t draw_key, uint64_t pair_index,
                 int t, DType dt) {
    Rng rng(mix_seed(noise_seed, draw_key, pair_index, static_cast<uint64_t>(t)));
    return rng.gaussian_tensor(shape, dt);
}

namespace {
FeatureStackMeta make_meta(const denoiser::DenoiserModel& model, const TimestepSet& tset,
                           const diffusion::NoiseSchedule& sched, uint64_t noise_seed,
                           uint64_t pair_index, uint64_t draw_key) {
    FeatureStackMeta m;
    m.tset = tset.ts;
    m.noise_seed = noise_seed;
    m.draw_key = draw_key;
    m.pair_index = pair_index;
    m.schedule_hash = sched.hash();
    m.model_hash = model.parameter_hash();
    return m;
}

void check_image(const Tensor& image) {
    if (image.ndim() != 3)
        throw DimensionError("extract: expected [3,H,W] image, got " + shape_str(image.shape()));
}
}  // namespace

FeatureStack extract(const denoiser::DenoiserModel& model, const Tensor& image,
                     const TimestepSet& tset, const diffusion::NoiseSchedule& sched,
                     uint64_t noise_seed, uint64_t pair_index, uint64_t draw_key) {
    check_image(image);
    tset.validate_against(sched);
    NoGradGuard no_grad;
    FeatureStack stack;
    stack.meta = make_meta(model, tset, sched, noise_seed, pair_index, draw_key);
    Shape batched{1, image.dim(0), image.dim(1), image.dim(2)};
    Tensor x0 = reshape(image, batched);
    for (int t : tset.ts) {
        Tensor eps = noise_for(batched, noise_seed, draw_key, pair_index, t, image.dtype());
        Tensor xt = diffusion::q_sample(x0, t, eps, sched);
        auto fwd = model.forward_with_features(xt, {t});
        std::vector<Tensor> scales;
        scales.reserve(fwd.features.size());
        for (auto& f : fwd.features)
            scales.push_back(reshape(f, {f.dim(1), f.dim(2), f.dim(3)}));
        stack.per_timestep.push_back(std::move(scales));
    }
    return stack;
}

std::pair<FeatureStack, FeatureStack> extract_pair(const denoiser::DenoiserModel& model,
                                                   const Tensor& img_a, const Tensor& img_b,
                                                   const TimestepSet& tset,
                                                   const diffusion::NoiseSchedule& sched,
                                                   uint64_t noise_seed, uint64_t pair_index,
                                                   uint64_t draw_key) {
    if (img_a.shape() != img_b.shape())
        throw DataError("extract_pair: image shapes differ: " + shape_str(img_a.shape()) + " vs " +
                        shape_str(img_b.shape()));
    // Shared eps per timestep comes from identical (seed, draw, pair, t) keys.
    return {extract(model, img_a, tset, sched, noise_seed, pair_index, draw_key),
            extract(model, img_b, tset, sched, noise_seed, pair_index, draw_key)};
}

std::vector<Tensor> concat_timesteps(const FeatureStack& stack) {
    if (stack.per_timestep.empty()) throw ContractError("concat_timesteps: empty stack");
    size_t scales = stack.per_timestep[0].size();
    std::vector<Tensor> out;
    out.reserve(scales);
    for (size_t s = 0; s < scales; ++s) {
        if (stack.per_timestep.size() == 1) {
            out.push_back(stack.per_timestep[0][s]);
            continue;
        }
        std::vector<Tensor> per_t;
        per_t.reserve(stack.per_timestep.size());
        for (const auto& scales_of_t : stack.per_timestep) per_t.push_back(scales_of_t[s]);
        out.push_back(concat(per_t, 0));
    }
    return out;
}

std::vector<Tensor> extract_batch(const denoiser::DenoiserModel& model, const Tensor& images,
                                  const TimestepSet& tset, const diffusion::NoiseSchedule& sched,
                                  uint64_t noise_seed, const std::vector<uint64_t>& pair_keys,
                                  uint64_t draw_key) {
    if (images.ndim() != 4)
        throw DimensionError("extract_batch: expected [N,3,H,W], got " + shape_str(images.shape()));
    if (static_cast<int64_t>(pair_keys.size()) != images.dim(0))
        throw ContractError("extract_batch: pair_keys size mismatch");
    tset.validate_against(sched);
    NoGradGuard no_grad;
    int64_t n = images.dim(0);
    Shape one{1, images.dim(1), images.dim(2), images.dim(3)};
    int64_t stride = images.dim(1) * images.dim(2) * images.dim(3);

    std::vector<std::vector<Tensor>> per_t_scales;  // [|tset|][5] batched tensors
    for (int t : tset.ts) {
        // Per-image eps keyed individually, then noised inputs run as one batch.
        Tensor xt = zeros(images.shape(), images.dtype());
        for (int64_t i = 0; i < n; ++i) {
            Tensor xi = zeros(one, images.dtype());
            if (images.dtype() == DType::f32) {
                auto src = images.data<float>();
                std::copy(src.begin() + i * stride, src.begin() + (i + 1) * stride,
                          xi.mutable_data<float>().begin());
            } else {
                auto src = images.data<double>();
                std::copy(src.begin() + i * stride, src.begin() + (i + 1) * stride,
                          xi.mutable_data<double>().begin());
            }
            Tensor eps = noise_for(one, noise_seed, draw_key, pair_keys[static_cast<size_t>(i)], t,
                                   images.dtype());
            Tensor noised = diffusion::q_sample(xi, t, eps, sched);
            if (images.dtype() == DType::f32) {
                auto src = noised.data<float>();
                std::copy(src.begin(), src.end(), xt.mutable_data<float>().begin() + i * stride);
            } else {
                auto src = noised.data<double>();
                std::copy(src.begin(), src.end(), xt.mutable_data<double>().begin() + i * stride);
            }
        }
        auto fwd = model.forward_with_features(xt, std::vector<int>(static_cast<size_t>(n), t));
        per_t_scales.push_back(std::move(fwd.features));
    }

    std::vector<Tensor> out;
    size_t scales = per_t_scales[0].size();
    for (size_t s = 0; s < scales; ++s) {
        if (per_t_scales.size() == 1) {
            out.push_back(per_t_scales[0][s]);
            continue;
        }
        std::vector<Tensor> per_t;
        for (auto& row : per_t_scales) per_t.push_back(row[s]);
        out.push_back(concat(per_t, 1));
    }
    return out;
}

std::vector<int> stack_channels(const denoiser::DenoiserConfig& cfg, int num_timesteps) {
    std::vector<int> out;
    for (int i = 0; i < denoiser::kNumLevels; ++i) out.push_back(cfg.channels_at(i) * num_timesteps);
    return out;
}

std::filesystem::path cache_path(const std::filesystem::path& dir, const std::string& pair_id,
                                 const TimestepSet& tset) {
    std::string name = pair_id;
    for (auto& ch : name)
        if (ch == '/' || ch == '\\' || ch == '.') ch = '_';
    std::string ts = tset.str();
    for (auto& ch : ts)
        if (ch == ',') ch = '-';
    return dir / (name + "__t" + ts + ".feat");
}

void save_stack(const std::filesystem::path& path, const FeatureStack& stack) {
    std::vector<nn::NamedParam> tensors;
    for (size_t k = 0; k < stack.per_timestep.size(); ++k)
        for (size_t s = 0; s < stack.per_timestep[k].size(); ++s)
            tensors.push_back({"t" + std::to_string(stack.meta.tset[k]) + ".s" + std::to_string(s),
                               stack.per_timestep[k][s]});
    nlohmann::json meta;
    meta["kind"] = "feature_stack";
    meta["tset"] = stack.meta.tset;
    meta["noise_seed"] = stack.meta.noise_seed;
    meta["draw_key"] = stack.meta.draw_key;
    meta["pair_index"] = stack.meta.pair_index;
    meta["schedule_hash"] = stack.meta.schedule_hash;
    meta["model_hash"] = stack.meta.model_hash;
    checkpoint::save(path, tensors, meta);
}

FeatureStack load_stack(const std::filesystem::path& path, uint64_t schedule_hash,
                        uint64_t model_hash) {
    auto ckpt = checkpoint::load(path);
    if (ckpt.header.value("kind", "") != "feature_stack")
        throw DataError("load_stack: " + path.string() + " is not a feature stack");
    FeatureStack stack;
    stack.meta.tset = ckpt.header.at("tset").get<std::vector<int>>();
    stack.meta.noise_seed = ckpt.header.at("noise_seed").get<uint64_t>();
    stack.meta.draw_key = ckpt.header.at("draw_key").get<uint64_t>();
    stack.meta.pair_index = ckpt.header.at("pair_index").get<uint64_t>();
    stack.meta.schedule_hash = ckpt.header.at("schedule_hash").get<uint64_t>();
    stack.meta.model_hash = ckpt.header.at("model_hash").get<uint64_t>();
    if (stack.meta.schedule_hash != schedule_hash)
        throw DataError("load_stack: stale cache " + path.string() + " (schedule hash mismatch)");
    if (stack.meta.model_hash != model_hash)
        throw DataError("load_stack: stale cache " + path.string() + " (model hash mismatch)");
    for (size_t k = 0; k < stack.meta.tset.size(); ++k) {
        std::vector<Tensor> scales;
        for (int s = 0; s < denoiser::kNumLevels; ++s) {
            std::string name = "t" + std::to_string(stack.meta.tset[k]) + ".s" + std::to_string(s);
            bool found = false;
            for (auto& [tname, tensor] : ckpt.tensors) {
                if (tname == name) {
                    scales.push_back(tensor);
                    found = true;
                    break;
                }
            }
            if (!found) throw DataError("load_stack: missing tensor '" + name + "' in " + path.string());
        }
        stack.per_timestep.push_back(std::move(scales));
    }
    return stack;
}

}  // namespace ddpmcd::features
