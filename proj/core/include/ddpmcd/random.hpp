#pragma once

#include <cstdint>
#include <random>

#include "ddpmcd/tensor.hpp"

namespace ddpmcd {

// splitmix64 finalizer; used to derive independent stream seeds from a base
// seed plus structural keys (sample index, timestep, epoch, ...).
uint64_t mix_seed(uint64_t a);
uint64_t mix_seed(uint64_t a, uint64_t b);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d);

// Deterministic random stream. Gaussian draws use Box-Muller on the engine's
// uniforms so sequences are stable across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }
    // Uniform in (0,1].
    double uniform01();
    double uniform(double lo, double hi);
    // Integer uniform on [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi);
    double gaussian();

    Tensor gaussian_tensor(const Shape& shape, DType dt = DType::f32);
    Tensor uniform_tensor(const Shape& shape, double lo, double hi, DType dt = DType::f32);

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ddpmcd
