#include <doctest.h>

#include <cmath>

#include "ddpmcd/optim.hpp"

using namespace ddpmcd;
using namespace ddpmcd::optim;

namespace {
nn::NamedParam make_param(const char* name, std::vector<float> v) {
    Tensor t = from_vector({static_cast<int64_t>(v.size())}, v);
    t.set_requires_grad(true);
    return {name, t};
}

void set_grad(nn::NamedParam& p, std::vector<float> g) {
    Storage st = Storage::make(DType::f32, static_cast<int64_t>(g.size()));
    auto s = st.as<float>();
    std::copy(g.begin(), g.end(), s.begin());
    accumulate_grad(*p.tensor.impl(), st);
}
}  // namespace

TEST_CASE("adam: zero grad and zero weight decay leave parameters unchanged") {
    auto p = make_param("w", {1.0f, -2.0f, 3.0f});
    Adam adam({p}, {.lr = 0.1});
    set_grad(p, {0, 0, 0});
    adam.step();
    CHECK(p.tensor.at(0) == doctest::Approx(1.0));
    CHECK(p.tensor.at(1) == doctest::Approx(-2.0));
    CHECK(p.tensor.at(2) == doctest::Approx(3.0));
}

TEST_CASE("adam: first step with unit gradient moves by ~lr (bias-corrected)") {
    // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps) = lr.
    auto p = make_param("w", {0.5f});
    Adam adam({p}, {.lr = 0.01, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-12});
    set_grad(p, {1.0f});
    adam.step();
    CHECK(p.tensor.at(0) == doctest::Approx(0.5 - 0.01).epsilon(1e-6));
}

TEST_CASE("adam: two hand-executed steps with constant gradient") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 2.0;
    auto p = make_param("w", {1.0f});
    Adam adam({p}, {.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps});

    double m = 0, v = 0, w = 1.0;
    for (int t = 1; t <= 2; ++t) {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mh = m / (1 - std::pow(b1, t));
        double vh = v / (1 - std::pow(b2, t));
        w -= lr * mh / (std::sqrt(vh) + eps);

        set_grad(p, {static_cast<float>(g)});
        adam.step();
        p.tensor.zero_grad();
        CHECK(p.tensor.at(0) == doctest::Approx(w).epsilon(1e-5));
    }
}

TEST_CASE("adamw: decoupled decay shrinks weights multiplicatively under zero grad") {
    auto p = make_param("w", {2.0f, -4.0f});
    AdamW adamw({p}, {.lr = 0.1, .weight_decay = 0.5});
    set_grad(p, {0, 0});
    adamw.step();
    // w <- w - lr*wd*w = w * (1 - 0.05); moments stay zero so no further move
    CHECK(p.tensor.at(0) == doctest::Approx(2.0 * 0.95));
    CHECK(p.tensor.at(1) == doctest::Approx(-4.0 * 0.95));
}

TEST_CASE("adam with coupled decay differs from adamw on the same setup") {
    auto pa = make_param("w", {2.0f});
    auto pw = make_param("w", {2.0f});
    Adam adam({pa}, {.lr = 0.1, .weight_decay = 0.5});
    AdamW adamw({pw}, {.lr = 0.1, .weight_decay = 0.5});
    set_grad(pa, {1.0f});
    set_grad(pw, {1.0f});
    adam.step();
    adamw.step();
    CHECK(pa.tensor.at(0) != doctest::Approx(pw.tensor.at(0)).epsilon(1e-9));
}

TEST_CASE("missing gradient is a contract error naming the parameter") {
    auto p = make_param("conv1.weight", {1.0f});
    Adam adam({p}, {});
    CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("conv1.weight"), ContractError);
}

TEST_CASE("lr override argument takes precedence over configured lr") {
    auto p = make_param("w", {1.0f});
    Adam adam({p}, {.lr = 1.0, .eps = 1e-12});
    set_grad(p, {1.0f});
    adam.step(0.25);
    CHECK(p.tensor.at(0) == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("clip_grad_norm rescales only above the threshold") {
    auto p = make_param("w", {3.0f, 4.0f});
    set_grad(p, {3.0f, 4.0f});  // norm 5
    double norm = clip_grad_norm({p}, 10.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(p.tensor.grad().at(0) == doctest::Approx(3.0));

    norm = clip_grad_norm({p}, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(p.tensor.grad().at(0) == doctest::Approx(0.6));
    CHECK(p.tensor.grad().at(1) == doctest::Approx(0.8));
}

TEST_CASE("warmup schedule: linear ramp then constant") {
    CHECK(lr_warmup_then_constant(0, 100, 2e-4) == doctest::Approx(0.0));
    CHECK(lr_warmup_then_constant(50, 100, 2e-4) == doctest::Approx(1e-4));
    CHECK(lr_warmup_then_constant(100, 100, 2e-4) == doctest::Approx(2e-4));
    CHECK(lr_warmup_then_constant(5000, 100, 2e-4) == doctest::Approx(2e-4));
    // warmup_steps == 0 means constant from the start (documented, not an error)
    CHECK(lr_warmup_then_constant(0, 0, 2e-4) == doctest::Approx(2e-4));
}

TEST_CASE("linear decay schedule: endpoints, linearity, clamping") {
    CHECK(lr_linear_decay(0, 120, 1e-5) == doctest::Approx(1e-5));
    CHECK(lr_linear_decay(120, 120, 1e-5) == doctest::Approx(0.0));
    CHECK(lr_linear_decay(30, 120, 1e-5) == doctest::Approx(7.5e-6));
    CHECK(lr_linear_decay(500, 120, 1e-5) == doctest::Approx(0.0));
}

TEST_CASE("schedules are continuous at their breakpoints") {
    const double lr = 3e-4;
    double before = lr_warmup_then_constant(999, 1000, lr);
    double at = lr_warmup_then_constant(1000, 1000, lr);
    CHECK(std::abs(at - before) < lr / 500.0);
    double d_before = lr_linear_decay(119, 120, lr);
    double d_at = lr_linear_decay(120, 120, lr);
    CHECK(std::abs(d_before - d_at) < lr / 60.0);
}
