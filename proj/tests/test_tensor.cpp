#include <doctest.h>

#include "ddpmcd/ops.hpp"
#include "ddpmcd/random.hpp"

using namespace ddpmcd;

TEST_CASE("tensor basics and invariants") {
    Tensor t = from_vector({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(-1) == 3);
    CHECK(t.at(4) == doctest::Approx(5.0));
    CHECK_THROWS_AS(from_vector({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(t.item(), ContractError);
    CHECK(scalar_tensor(3.5).item() == doctest::Approx(3.5));
}

TEST_CASE("backward populates grads of reachable parameters only") {
    Tensor w = from_vector({3}, std::vector<float>{1, 2, 3});
    w.set_requires_grad(true);
    Tensor unused = from_vector({3}, std::vector<float>{5, 5, 5});
    unused.set_requires_grad(true);

    Tensor loss = sum(w * w);
    loss.backward();
    Tensor g = w.grad();
    CHECK(g.at(0) == doctest::Approx(2));
    CHECK(g.at(1) == doctest::Approx(4));
    CHECK(g.at(2) == doctest::Approx(6));
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("backward on non-scalar is a contract error") {
    Tensor w = ones({2, 2});
    w.set_requires_grad(true);
    Tensor y = w * 2.0;
    CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("grad accumulates across backward calls until cleared") {
    Tensor w = from_vector({1}, std::vector<float>{2});
    w.set_requires_grad(true);
    sum(w * w).backward();
    sum(w * w).backward();
    CHECK(w.grad().at(0) == doctest::Approx(8.0));  // 2 * dw of 4
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("broadcasting follows right-aligned rules and rejects mismatches") {
    Tensor a = from_vector({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    Tensor row = from_vector({3}, std::vector<float>{10, 20, 30});
    Tensor s = a + row;
    CHECK(s.at(0) == doctest::Approx(11));
    CHECK(s.at(5) == doctest::Approx(36));

    Tensor col = from_vector({2, 1}, std::vector<float>{100, 200});
    Tensor s2 = a + col;
    CHECK(s2.at(2) == doctest::Approx(103));
    CHECK(s2.at(3) == doctest::Approx(204));

    Tensor bad = ones({4});
    CHECK_THROWS_AS(a + bad, DimensionError);
}

TEST_CASE("channel-style broadcast matches explicit expansion") {
    Rng rng(5);
    Tensor x = rng.gaussian_tensor({2, 4, 3, 3});
    Tensor bias = rng.gaussian_tensor({1, 4, 1, 1});
    Tensor y = x + bias;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t i = 0; i < 9; ++i) {
                int64_t flat = ((n * 4 + c) * 9) + i;
                CHECK(y.at(flat) == doctest::Approx(x.at(flat) + bias.at(c)));
            }
}

TEST_CASE("dtype mixing is rejected") {
    Tensor a = ones({2});
    Tensor b = ones({2}, DType::f64);
    CHECK_THROWS_AS(a + b, ContractError);
}

TEST_CASE("reshape shares data; permute and concat move it") {
    Tensor a = from_vector({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    Tensor r = reshape(a, {3, 2});
    CHECK(r.at(0) == doctest::Approx(1));
    CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);

    Tensor p = permute(a, {1, 0});
    CHECK(p.dim(0) == 3);
    CHECK(p.at(0) == doctest::Approx(1));
    CHECK(p.at(1) == doctest::Approx(4));
    CHECK(p.at(2) == doctest::Approx(2));

    Tensor c = concat({a, a}, 0);
    CHECK(c.dim(0) == 4);
    CHECK(c.at(6) == doctest::Approx(1));
    Tensor c1 = concat({a, a}, 1);
    CHECK(c1.dim(1) == 6);
    CHECK(c1.at(3) == doctest::Approx(1));
}

TEST_CASE("upsample_nearest2x repeats pixels") {
    Tensor a = from_vector({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    Tensor u = upsample_nearest2x(a);
    CHECK(u.shape() == Shape{1, 1, 4, 4});
    CHECK(u.at(0) == doctest::Approx(1));
    CHECK(u.at(1) == doctest::Approx(1));
    CHECK(u.at(5) == doctest::Approx(1));
    CHECK(u.at(8) == doctest::Approx(3));
    CHECK(u.at(10) == doctest::Approx(4));
    CHECK(u.at(15) == doctest::Approx(4));
}

TEST_CASE("matmul shapes, batching and errors") {
    Tensor a = from_vector({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    Tensor b = from_vector({3, 2}, std::vector<float>{1, 0, 0, 1, 1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.at(0) == doctest::Approx(4));
    CHECK(c.at(3) == doctest::Approx(11));

    Tensor ab = ones({4, 2, 3});
    Tensor bb = ones({4, 3, 5});
    CHECK(matmul(ab, bb).shape() == Shape{4, 2, 5});
    // batch broadcast: [1,2,3] x [4,3,5]
    CHECK(matmul(ones({1, 2, 3}), bb).shape() == Shape{4, 2, 5});
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("conv2d examples") {
    SUBCASE("all-ones 3x3 valid conv sums the window") {
        Tensor x = ones({1, 1, 3, 3});
        Tensor w = ones({1, 1, 3, 3});
        Tensor b = zeros({1});
        Tensor y = conv2d(x, w, b, 1, 0);
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.item() == doctest::Approx(9.0));
    }
    SUBCASE("identity 1x1 kernel preserves the input") {
        Rng rng(3);
        Tensor x = rng.gaussian_tensor({1, 1, 5, 5});
        Tensor w = ones({1, 1, 1, 1});
        Tensor b = zeros({1});
        Tensor y = conv2d(x, w, b, 1, 0);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));
    }
    SUBCASE("shape arithmetic with stride and padding") {
        Tensor x = ones({2, 3, 8, 8});
        Rng rng(1);
        Tensor w = rng.gaussian_tensor({4, 3, 3, 3});
        Tensor b = zeros({4});
        CHECK(conv2d(x, w, b, 1, 1).shape() == Shape{2, 4, 8, 8});
        CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{2, 4, 4, 4});
    }
    SUBCASE("channel mismatch names the axis") {
        Tensor x = ones({1, 2, 4, 4});
        Tensor w = ones({1, 3, 3, 3});
        Tensor b = zeros({1});
        CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1), doctest::Contains("axis 1"), DimensionError);
    }
}

TEST_CASE("softmax normalizes along the requested axis") {
    Tensor x = from_vector({1, 2}, std::vector<float>{0, 0});
    Tensor y = softmax(x, 1);
    CHECK(y.at(0) == doctest::Approx(0.5));
    CHECK(y.at(1) == doctest::Approx(0.5));

    Rng rng(2);
    Tensor big = rng.gaussian_tensor({2, 3, 4});
    Tensor sm = softmax(big, 1);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < 4; ++i) {
            double s = 0;
            for (int64_t c = 0; c < 3; ++c) s += sm.at((n * 3 + c) * 4 + i);
            CHECK(s == doctest::Approx(1.0));
        }
}

TEST_CASE("loss examples") {
    SUBCASE("mse of identical tensors is zero") {
        Rng rng(4);
        Tensor a = rng.gaussian_tensor({3, 3});
        CHECK(mse_loss(a, a.clone()).item() == doctest::Approx(0.0));
    }
    SUBCASE("uniform logits give ln 2 for two classes") {
        Tensor logits = zeros({2, 2, 3, 3});
        Tensor labels = zeros({2, 3, 3});
        CHECK(ce_loss(logits, labels).item() == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("infinite-margin logits drive ce to zero") {
        Tensor logits = zeros({1, 2, 2, 2});
        auto d = logits.mutable_data<float>();
        for (int i = 0; i < 4; ++i) d[static_cast<size_t>(i)] = 50.0f;  // class 0 wins everywhere
        Tensor labels = zeros({1, 2, 2});
        CHECK(ce_loss(logits, labels).item() == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("non-binary label is a data error") {
        Tensor logits = zeros({1, 2, 2, 2});
        Tensor labels = zeros({1, 2, 2});
        labels.mutable_data<float>()[1] = 0.5f;
        CHECK_THROWS_AS(ce_loss(logits, labels), DataError);
        labels.mutable_data<float>()[1] = 2.0f;
        CHECK_THROWS_AS(ce_loss(logits, labels), DataError);
    }
}

TEST_CASE("maximum routes gradient to the larger operand, ties to the first") {
    Tensor a = from_vector({3}, std::vector<float>{1, 5, 2});
    Tensor b = from_vector({3}, std::vector<float>{3, 5, 1});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    sum(maximum(a, b)).backward();
    CHECK(a.grad().at(0) == doctest::Approx(0));
    CHECK(a.grad().at(1) == doctest::Approx(1));  // tie -> first operand
    CHECK(a.grad().at(2) == doctest::Approx(1));
    CHECK(b.grad().at(0) == doctest::Approx(1));
    CHECK(b.grad().at(1) == doctest::Approx(0));
    CHECK(b.grad().at(2) == doctest::Approx(0));
}

TEST_CASE("all ops stay finite on finite inputs") {
    Rng rng(9);
    Tensor x = rng.gaussian_tensor({2, 8, 4, 4});
    CHECK(all_finite(silu(x)));
    CHECK(all_finite(sigmoid(x)));
    CHECK(all_finite(softmax(x, 1)));
    CHECK(all_finite(exp(clamp(x, -5, 5))));
    CHECK(all_finite(group_norm(x, ones({8}), zeros({8}), 2)));
}

TEST_CASE("group_norm normalizes per group and applies affine") {
    Rng rng(11);
    Tensor x = rng.gaussian_tensor({2, 4, 3, 3});
    Tensor y = group_norm(x, ones({4}), zeros({4}), 2);
    // each (n, group) slice has mean ~0 and variance ~1
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t g = 0; g < 2; ++g) {
            double m = 0, v = 0;
            for (int64_t c = 0; c < 2; ++c)
                for (int64_t i = 0; i < 9; ++i) m += y.at(((n * 4 + g * 2 + c) * 9) + i);
            m /= 18.0;
            for (int64_t c = 0; c < 2; ++c)
                for (int64_t i = 0; i < 9; ++i) {
                    double d = y.at(((n * 4 + g * 2 + c) * 9) + i) - m;
                    v += d * d;
                }
            v /= 18.0;
            CHECK(m == doctest::Approx(0.0).epsilon(1e-4));
            CHECK(v == doctest::Approx(1.0).epsilon(1e-2));
        }
    Tensor y2 = group_norm(x, full({4}, 2.0), full({4}, 0.5), 2);
    CHECK(y2.at(0) == doctest::Approx(2.0 * y.at(0) + 0.5).epsilon(1e-4));
}

TEST_CASE("deterministic keyed rng streams") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        double va = a.gaussian();
        CHECK(va == b.gaussian());
        (void)c.gaussian();
    }
    CHECK(mix_seed(1, 2, 3) == mix_seed(1, 2, 3));
    CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
