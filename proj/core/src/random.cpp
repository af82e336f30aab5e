#include "ddpmcd/random.hpp"

#include <cmath>
#include <numbers>

namespace ddpmcd {

namespace {
uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace

uint64_t mix_seed(uint64_t a) { return splitmix64(a); }
uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL)); }
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) { return mix_seed(mix_seed(a, b, c), d); }

double Rng::uniform01() {
    // 53-bit mantissa; +1 keeps the value strictly positive for log().
    return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(eng_() % span);
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Tensor Rng::gaussian_tensor(const Shape& shape, DType dt) {
    Tensor t = zeros(shape, dt);
    if (dt == DType::f32) {
        auto d = t.mutable_data<float>();
        for (auto& v : d) v = static_cast<float>(gaussian());
    } else {
        auto d = t.mutable_data<double>();
        for (auto& v : d) v = gaussian();
    }
    return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi, DType dt) {
    Tensor t = zeros(shape, dt);
    if (dt == DType::f32) {
        auto d = t.mutable_data<float>();
        for (auto& v : d) v = static_cast<float>(uniform(lo, hi));
    } else {
        auto d = t.mutable_data<double>();
        for (auto& v : d) v = uniform(lo, hi);
    }
    return t;
}

}  // namespace ddpmcd
