#include <doctest.h>

#include "ddpmcd/nn.hpp"
#include "ddpmcd/ops.hpp"
#include "gradcheck.hpp"

using namespace ddpmcd;
using testsupport::gradcheck;

namespace {

Tensor randn64(Rng& rng, const Shape& shape, bool rg = true) {
    Tensor t = rng.gaussian_tensor(shape, DType::f64);
    t.set_requires_grad(rg);
    return t;
}

// Shifts values away from zero so kinked ops (relu, abs, maximum ties) are
// probed on smooth regions only.
Tensor randn64_away_from_zero(Rng& rng, const Shape& shape, double margin = 0.15) {
    Tensor t = rng.gaussian_tensor(shape, DType::f64);
    auto d = t.mutable_data<double>();
    for (auto& v : d)
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
    t.set_requires_grad(true);
    return t;
}

}  // namespace

TEST_CASE("gradcheck: elementwise binary ops with and without broadcast") {
    Rng rng(100);
    auto check2 = [&](const char* name, auto op, const Shape& sa, const Shape& sb) {
        std::vector<Tensor> in{randn64(rng, sa), randn64(rng, sb)};
        auto r = gradcheck([&op](const std::vector<Tensor>& v) { return sum(op(v[0], v[1])); }, in);
        INFO(name, ": ", r.detail);
        CHECK(r.ok);
    };
    check2("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4}, {3, 4});
    check2("add bcast row", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4}, {4});
    check2("add bcast chan", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {2, 3, 2, 2},
           {1, 3, 1, 1});
    check2("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {3, 4}, {3, 4});
    check2("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {3, 4}, {3, 4});
    check2("mul bcast spatial", [](const Tensor& a, const Tensor& b) { return mul(a, b); },
           {2, 3, 2, 2}, {2, 1, 2, 2});
}

TEST_CASE("gradcheck: div away from zero denominators") {
    Rng rng(101);
    Tensor a = randn64(rng, {3, 3});
    Tensor b = randn64_away_from_zero(rng, {3, 3}, 0.5);
    auto r = gradcheck([](const std::vector<Tensor>& v) { return sum(div(v[0], v[1])); }, {a, b});
    CHECK(r.ok);
}

TEST_CASE("gradcheck: maximum away from ties") {
    Rng rng(102);
    Tensor a = randn64(rng, {4, 4});
    Tensor b = randn64(rng, {4, 4});
    // separate the operands so no |a-b| < 2h tie is probed
    auto da = a.mutable_data<double>();
    auto db = b.mutable_data<double>();
    for (size_t i = 0; i < da.size(); ++i)
        if (std::abs(da[i] - db[i]) < 0.1) da[i] += 0.2;
    auto r = gradcheck([](const std::vector<Tensor>& v) { return sum(maximum(v[0], v[1])); }, {a, b});
    CHECK(r.ok);
}

TEST_CASE("gradcheck: unary ops") {
    Rng rng(103);
    auto check1 = [&](const char* name, auto op, Tensor in) {
        auto r = gradcheck([&op](const std::vector<Tensor>& v) { return sum(op(v[0])); }, {in});
        INFO(name);
        CHECK(r.ok);
    };
    check1("neg", [](const Tensor& a) { return neg(a); }, randn64(rng, {3, 3}));
    check1("abs", [](const Tensor& a) { return abs(a); }, randn64_away_from_zero(rng, {3, 3}));
    check1("exp", [](const Tensor& a) { return exp(a); }, randn64(rng, {3, 3}));
    check1("silu", [](const Tensor& a) { return silu(a); }, randn64(rng, {3, 3}));
    check1("sigmoid", [](const Tensor& a) { return sigmoid(a); }, randn64(rng, {3, 3}));
    check1("relu", [](const Tensor& a) { return relu(a); }, randn64_away_from_zero(rng, {3, 3}));
    check1("add_scalar", [](const Tensor& a) { return a + 2.5; }, randn64(rng, {3, 3}));
    check1("mul_scalar", [](const Tensor& a) { return a * -1.7; }, randn64(rng, {3, 3}));

    Tensor pos = rng.uniform_tensor({3, 3}, 0.5, 3.0, DType::f64);
    pos.set_requires_grad(true);
    check1("log", [](const Tensor& a) { return log(a); }, pos);
    Tensor pos2 = rng.uniform_tensor({3, 3}, 0.5, 3.0, DType::f64);
    pos2.set_requires_grad(true);
    check1("sqrt", [](const Tensor& a) { return sqrt(a); }, pos2);
}

TEST_CASE("gradcheck: reductions and shape ops") {
    Rng rng(104);
    auto r1 = gradcheck([](const std::vector<Tensor>& v) { return mean(v[0]); },
                        {randn64(rng, {2, 3, 4})});
    CHECK(r1.ok);
    auto r2 = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(mul(sum(v[0], {1}, true), sum(v[0], {1}, true))); },
        {randn64(rng, {2, 3, 4})});
    CHECK(r2.ok);
    auto r3 = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(mul(mean(v[0], {0, 2}, false), full({3}, 2.0, DType::f64))); },
        {randn64(rng, {2, 3, 4})});
    CHECK(r3.ok);
    auto r4 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor p = permute(v[0], {2, 0, 1});
            return sum(mul(p, p));
        },
        {randn64(rng, {2, 3, 4})});
    CHECK(r4.ok);
    auto r5 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor r = reshape(v[0], {6, 4});
            return sum(mul(r, r));
        },
        {randn64(rng, {2, 3, 4})});
    CHECK(r5.ok);
    auto r6 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor c = concat({v[0], v[1]}, 1);
            return sum(mul(c, c));
        },
        {randn64(rng, {2, 2, 3}), randn64(rng, {2, 4, 3})});
    CHECK(r6.ok);
    auto r7 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor u = upsample_nearest2x(v[0]);
            return sum(mul(u, u));
        },
        {randn64(rng, {1, 2, 3, 3})});
    CHECK(r7.ok);
}

TEST_CASE("gradcheck: matmul incl. batched broadcast") {
    Rng rng(105);
    auto r1 = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); },
        {randn64(rng, {3, 4}), randn64(rng, {4, 2})});
    CHECK(r1.ok);
    auto r2 = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(matmul(v[0], v[1])); },
        {randn64(rng, {2, 3, 4}), randn64(rng, {2, 4, 2})});
    CHECK(r2.ok);
    auto r3 = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(matmul(v[0], v[1])); },
        {randn64(rng, {1, 3, 4}), randn64(rng, {5, 4, 2})});
    CHECK(r3.ok);
}

TEST_CASE("gradcheck: conv2d matches finite differences (spec example shapes)") {
    Rng rng(106);
    Tensor x = randn64(rng, {2, 3, 8, 8});
    Tensor w = randn64(rng, {4, 3, 3, 3});
    Tensor b = randn64(rng, {4});
    auto r = gradcheck(
        [](const std::vector<Tensor>& v) { return sum(conv2d(v[0], v[1], v[2], 1, 1)); }, {x, w, b},
        1e-5, 1e-4, 1e-7, 160);
    INFO(r.detail);
    CHECK(r.ok);

    // strided + pointwise variants
    auto r2 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor y = conv2d(v[0], v[1], v[2], 2, 1);
            return sum(mul(y, y));
        },
        {randn64(rng, {1, 2, 6, 6}), randn64(rng, {3, 2, 3, 3}), randn64(rng, {3})});
    CHECK(r2.ok);
    auto r3 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor y = conv2d(v[0], v[1], v[2], 1, 0);
            return sum(mul(y, y));
        },
        {randn64(rng, {2, 3, 4, 4}), randn64(rng, {5, 3, 1, 1}), randn64(rng, {5})});
    CHECK(r3.ok);
}

TEST_CASE("gradcheck: softmax, losses, group_norm") {
    Rng rng(107);
    auto r1 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor y = softmax(v[0], 1);
            return sum(mul(y, y));
        },
        {randn64(rng, {2, 4, 3})});
    CHECK(r1.ok);

    auto r2 = gradcheck(
        [](const std::vector<Tensor>& v) { return mse_loss(v[0], v[1]); },
        {randn64(rng, {3, 4}), randn64(rng, {3, 4})});
    CHECK(r2.ok);

    Tensor labels = zeros({2, 3, 3}, DType::f64);
    auto ld = labels.mutable_data<double>();
    Rng lrng(55);
    for (auto& v : ld) v = lrng.uniform01() < 0.5 ? 0.0 : 1.0;
    auto r3 = gradcheck(
        [&labels](const std::vector<Tensor>& v) { return ce_loss(v[0], labels); },
        {randn64(rng, {2, 2, 3, 3})});
    CHECK(r3.ok);

    auto r4 = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor y = group_norm(v[0], v[1], v[2], 2);
            return sum(mul(y, y));
        },
        {randn64(rng, {2, 4, 3, 3}), randn64(rng, {4}), randn64(rng, {4})});
    INFO(r4.detail);
    CHECK(r4.ok);
}

TEST_CASE("gradcheck: composite graph with shared subexpressions") {
    Rng rng(108);
    auto r = gradcheck(
        [](const std::vector<Tensor>& v) {
            Tensor h = silu(v[0]);
            Tensor y = h * h + h;  // h used twice: accumulation must be exact
            return mean(y);
        },
        {randn64(rng, {3, 5})});
    CHECK(r.ok);
}
