#include "ddpmcd/nn.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

namespace ddpmcd::nn {

std::vector<NamedParam> Module::named_parameters() const {
    std::vector<NamedParam> out;
    collect("", out);
    return out;
}

void Module::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (const auto& [name, t] : params_)
        out.push_back({prefix.empty() ? name : prefix + "." + name, t});
    for (const auto& [name, child] : children_)
        child->collect(prefix.empty() ? name : prefix + "." + name, out);
}

int64_t Module::parameter_count() const {
    int64_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
}

void Module::set_requires_grad_all(bool on) {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

void Module::zero_grad_all() {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
}

uint64_t Module::parameter_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : named_parameters()) {
        if (p.tensor.dtype() == DType::f32) {
            auto d = p.tensor.data<float>();
            feed(d.data(), d.size() * sizeof(float));
        } else {
            auto d = p.tensor.data<double>();
            feed(d.data(), d.size() * sizeof(double));
        }
    }
    return h;
}

void Module::load_parameters(const std::vector<NamedParam>& source) {
    std::unordered_map<std::string, const NamedParam*> by_name;
    for (const auto& p : source) by_name[p.name] = &p;
    for (auto& p : named_parameters()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw DataError("load_parameters: missing tensor '" + p.name + "'");
        const Tensor& src = it->second->tensor;
        if (src.shape() != p.tensor.shape())
            throw DataError("load_parameters: shape mismatch for '" + p.name + "': file has " +
                            shape_str(src.shape()) + ", model wants " + shape_str(p.tensor.shape()));
        if (p.tensor.dtype() == DType::f32) {
            auto dst = p.tensor.mutable_data<float>();
            if (src.dtype() == DType::f32) {
                auto s = src.data<float>();
                std::copy(s.begin(), s.end(), dst.begin());
            } else {
                auto s = src.data<double>();
                for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(s[i]);
            }
        } else {
            auto dst = p.tensor.mutable_data<double>();
            if (src.dtype() == DType::f64) {
                auto s = src.data<double>();
                std::copy(s.begin(), s.end(), dst.begin());
            } else {
                auto s = src.data<float>();
                for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(s[i]);
            }
        }
    }
}

Tensor& Module::register_parameter(const std::string& name, Tensor t) {
    for (const auto& [n, _] : params_)
        if (n == name) throw ContractError("register_parameter: duplicate name '" + name + "'");
    t.set_requires_grad(true);
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
}

void Module::register_module(const std::string& name, Module& child) {
    for (const auto& [n, _] : children_)
        if (n == name) throw ContractError("register_module: duplicate name '" + name + "'");
    children_.emplace_back(name, &child);
}

Tensor kaiming_uniform(Rng& rng, const Shape& shape, int64_t fan_in, DType dt) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return rng.uniform_tensor(shape, -bound, bound, dt);
}

void Conv2d::init(int in_ch, int out_ch, int ksize, int stride, int padding, Rng& rng, DType dt) {
    stride_ = stride;
    padding_ = padding;
    out_ch_ = out_ch;
    int64_t fan_in = static_cast<int64_t>(in_ch) * ksize * ksize;
    weight = register_parameter("weight", kaiming_uniform(rng, {out_ch, in_ch, ksize, ksize}, fan_in, dt));
    bias = register_parameter("bias", zeros({out_ch}, dt));
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride_, padding_); }

void Linear::init(int in_features, int out_features, Rng& rng, DType dt) {
    weight = register_parameter("weight", kaiming_uniform(rng, {in_features, out_features}, in_features, dt));
    bias = register_parameter("bias", zeros({out_features}, dt));
}

Tensor Linear::forward(const Tensor& x) const { return matmul(x, weight) + bias; }

void GroupNorm::init(int channels, DType dt) {
    int group_size = std::min(8, channels);
    if (channels % group_size != 0)
        throw ConfigError("GroupNorm: channels " + std::to_string(channels) +
                          " not divisible by group size " + std::to_string(group_size));
    channels_ = channels;
    groups_ = channels / group_size;
    gamma = register_parameter("gamma", ones({channels}, dt));
    beta = register_parameter("beta", zeros({channels}, dt));
}

Tensor GroupNorm::forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != channels_)
        throw DimensionError("GroupNorm: expected [N," + std::to_string(channels_) + ",H,W], got " +
                             shape_str(x.shape()));
    return group_norm(x, gamma, beta, groups_);
}

void check_finite(const Tensor& t, const std::string& where) {
    if (!all_finite(t))
        throw NumericError("non-finite activation after " + where);
}

Tensor stack(const std::vector<Tensor>& ts) {
    if (ts.empty()) throw ContractError("stack: empty input");
    std::vector<Tensor> expanded;
    expanded.reserve(ts.size());
    for (const auto& t : ts) {
        Shape s = t.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(t, s));
    }
    return concat(expanded, 0);
}

}  // namespace ddpmcd::nn
