#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ddpmcd/ops.hpp"
#include "ddpmcd/random.hpp"

namespace testsupport {

inline bool close(double a, double b, double rtol = 1e-4, double atol = 1e-7) {
    return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

struct GradCheckResult {
    bool ok = true;
    std::string detail;
    int checked = 0;
};

// Central-difference gradient check at 64-bit precision. `fn` maps the input
// list to a scalar; every requires_grad input is probed (all elements, or a
// seeded random subset of max_probes when positive).
inline GradCheckResult gradcheck(const std::function<ddpmcd::Tensor(const std::vector<ddpmcd::Tensor>&)>& fn,
                                 std::vector<ddpmcd::Tensor> inputs, double h = 1e-5,
                                 double rtol = 1e-4, double atol = 1e-7, int max_probes = -1,
                                 uint64_t probe_seed = 1234) {
    using namespace ddpmcd;
    GradCheckResult res;

    for (auto& t : inputs)
        if (t.dtype() != DType::f64) {
            res.ok = false;
            res.detail = "gradcheck requires f64 inputs";
            return res;
        }

    for (auto& t : inputs) t.zero_grad();
    Tensor loss = fn(inputs);
    if (loss.numel() != 1) {
        res.ok = false;
        res.detail = "fn must return a scalar";
        return res;
    }
    loss.backward();

    std::vector<Tensor> analytic;
    for (auto& t : inputs)
        analytic.push_back(t.requires_grad() ? t.grad() : Tensor());

    Rng probe_rng(probe_seed);
    for (size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        int64_t n = inputs[k].numel();
        std::vector<int64_t> idx;
        if (max_probes > 0 && n > max_probes) {
            for (int p = 0; p < max_probes; ++p) idx.push_back(probe_rng.uniform_int(0, n - 1));
        } else {
            idx.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        }
        auto data = inputs[k].mutable_data<double>();
        for (int64_t i : idx) {
            double orig = data[static_cast<size_t>(i)];
            double fp, fm;
            {
                NoGradGuard no_grad;
                data[static_cast<size_t>(i)] = orig + h;
                fp = fn(inputs).item();
                data[static_cast<size_t>(i)] = orig - h;
                fm = fn(inputs).item();
                data[static_cast<size_t>(i)] = orig;
            }
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[k].at(i);
            ++res.checked;
            if (!close(a, numeric, rtol, atol)) {
                res.ok = false;
                res.detail = "input " + std::to_string(k) + " elem " + std::to_string(i) +
                             ": analytic " + std::to_string(a) + " vs numeric " +
                             std::to_string(numeric);
                return res;
            }
        }
    }
    return res;
}

}  // namespace testsupport
