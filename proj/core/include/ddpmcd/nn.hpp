#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ddpmcd/ops.hpp"
#include "ddpmcd/random.hpp"
#include "ddpmcd/tensor.hpp"

namespace ddpmcd::nn {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Base for parameterized blocks. Submodules are registered by address, so a
// Module is neither copyable nor movable once its children are registered.
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    // Parameters in registration order, names joined with '.'.
    std::vector<NamedParam> named_parameters() const;
    int64_t parameter_count() const;
    void set_requires_grad_all(bool on);
    void zero_grad_all();
    // FNV-1a over the raw parameter bytes in registration order.
    uint64_t parameter_hash() const;
    // Replaces parameter values (by name) from a checkpoint tensor map.
    void load_parameters(const std::vector<NamedParam>& source);

protected:
    Tensor& register_parameter(const std::string& name, Tensor t);
    void register_module(const std::string& name, Module& child);

private:
    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Module*>> children_;
};

// Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in).
Tensor kaiming_uniform(Rng& rng, const Shape& shape, int64_t fan_in, DType dt);

class Conv2d : public Module {
public:
    Conv2d() = default;
    void init(int in_ch, int out_ch, int ksize, int stride, int padding, Rng& rng, DType dt);
    Tensor forward(const Tensor& x) const;
    int out_channels() const { return out_ch_; }

    Tensor weight, bias;

private:
    int stride_ = 1, padding_ = 0, out_ch_ = 0;
};

class Linear : public Module {
public:
    Linear() = default;
    void init(int in_features, int out_features, Rng& rng, DType dt);
    // x: [N, in] -> [N, out]
    Tensor forward(const Tensor& x) const;

    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

// Group normalization with group size min(8, channels); channels must divide
// evenly into groups.
class GroupNorm : public Module {
public:
    GroupNorm() = default;
    void init(int channels, DType dt);
    Tensor forward(const Tensor& x) const;  // [N,C,H,W]

    Tensor gamma, beta;

private:
    int channels_ = 0, groups_ = 0;
};

// Throws NumericError naming `where` if any value is non-finite.
void check_finite(const Tensor& t, const std::string& where);

// Stacks same-shaped [C,...] tensors into [N,C,...].
Tensor stack(const std::vector<Tensor>& ts);

}  // namespace ddpmcd::nn
