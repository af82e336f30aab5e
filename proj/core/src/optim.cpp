#include "ddpmcd/optim.hpp"

#include <cmath>

namespace ddpmcd::optim {

Adam::Adam(std::vector<nn::NamedParam> params, AdamOptions opt, bool decoupled)
    : params_(std::move(params)), opt_(opt), decoupled_(decoupled) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Storage::make(p.tensor.dtype(), p.tensor.numel()));
        v_.push_back(Storage::make(p.tensor.dtype(), p.tensor.numel()));
    }
}

namespace {
template <typename T>
void adam_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v,
                 const AdamOptions& o, bool decoupled, double lr, double bc1, double bc2) {
    const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
    const T one = static_cast<T>(1);
    const T eps = static_cast<T>(o.eps);
    const T wd = static_cast<T>(o.weight_decay);
    const T step_size = static_cast<T>(lr / bc1);
    const T vh_scale = static_cast<T>(1.0 / bc2);
    for (size_t i = 0; i < w.size(); ++i) {
        T grad = g[i];
        if (!decoupled && wd != T(0)) grad += wd * w[i];
        m[i] = b1 * m[i] + (one - b1) * grad;
        v[i] = b2 * v[i] + (one - b2) * grad * grad;
        if (decoupled && wd != T(0)) w[i] -= static_cast<T>(lr) * wd * w[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i] * vh_scale) + eps);
    }
}
}  // namespace

void Adam::step(double lr_now) {
    double lr = lr_now >= 0.0 ? lr_now : opt_.lr;
    ++step_;
    double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.tensor.has_grad())
            throw ContractError("Adam::step: parameter '" + p.name + "' has no gradient");
        Tensor g = p.tensor.grad();
        if (p.tensor.dtype() == DType::f32)
            adam_update<float>(p.tensor.mutable_data<float>(), g.data<float>(), m_[i].as<float>(),
                               v_[i].as<float>(), opt_, decoupled_, lr, bc1, bc2);
        else
            adam_update<double>(p.tensor.mutable_data<double>(), g.data<double>(), m_[i].as<double>(),
                                v_[i].as<double>(), opt_, decoupled_, lr, bc1, bc2);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

double clip_grad_norm(const std::vector<nn::NamedParam>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        Tensor g = p.tensor.grad();
        if (g.dtype() == DType::f32) {
            for (float x : g.data<float>()) sq += static_cast<double>(x) * static_cast<double>(x);
        } else {
            for (double x : g.data<double>()) sq += x * x;
        }
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            auto& grad = *p.tensor.impl()->grad;
            if (grad.dtype() == DType::f32)
                for (auto& x : grad.as<float>()) x = static_cast<float>(x * scale);
            else
                for (auto& x : grad.as<double>()) x *= scale;
        }
    }
    return norm;
}

double lr_warmup_then_constant(int64_t step, int64_t warmup_steps, double target_lr) {
    if (step < 0) throw ContractError("lr_warmup_then_constant: negative step");
    if (warmup_steps <= 0 || step >= warmup_steps) return target_lr;
    return target_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

double lr_linear_decay(int64_t epoch, int64_t total_epochs, double initial_lr) {
    if (epoch < 0) throw ContractError("lr_linear_decay: negative epoch");
    if (total_epochs <= 0 || epoch >= total_epochs) return 0.0;
    return initial_lr * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
}

}  // namespace ddpmcd::optim
