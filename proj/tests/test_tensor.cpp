#include "doctest.h"
#include "ntk/rng.hpp"
#include "ntk/tensor.hpp"
#include "oracles.hpp"

using namespace ntk;

TEST_CASE("matmul identity and counting") {
    Tensor b = Rng(7).uniform_tensor(Shape{3, 5}, -1.0, 1.0);
    Tensor out = matmul(identity(3), b);
    CHECK(max_abs_diff(out, b) == 0.0);

    CountingSession session;
    Tensor a(Shape{2, 3});
    Tensor c(Shape{3, 4});
    matmul(a, c);
    CHECK(session.counter().fused_multiply_adds() == 24);
}

TEST_CASE("matmul matches the naive triple loop") {
    Rng rng(3);
    Tensor a = rng.uniform_tensor(Shape{4, 4}, -1.0, 1.0);
    Tensor b = rng.uniform_tensor(Shape{4, 4}, -1.0, 1.0);
    CHECK(max_abs_diff(matmul(a, b), oracle::matmul_naive(a, b)) <= 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a(Shape{2, 3});
    Tensor b(Shape{4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(4,2)") != std::string::npos);
    }
}

TEST_CASE("matmul associativity") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t m = 1 + static_cast<std::int64_t>(rng.uniform() * 7);
        const std::int64_t k = 1 + static_cast<std::int64_t>(rng.uniform() * 7);
        const std::int64_t p = 1 + static_cast<std::int64_t>(rng.uniform() * 7);
        const std::int64_t q = 1 + static_cast<std::int64_t>(rng.uniform() * 7);
        Tensor a = rng.uniform_tensor(Shape{m, k}, -1.0, 1.0);
        Tensor b = rng.uniform_tensor(Shape{k, p}, -1.0, 1.0);
        Tensor c = rng.uniform_tensor(Shape{p, q}, -1.0, 1.0);
        CHECK(rel_frobenius_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-10);
    }
}

TEST_CASE("flop counts are a pure function of shapes") {
    Rng rng(5);
    std::int64_t first = 0, second = 0;
    {
        CountingSession session;
        matmul(rng.gaussian_tensor(Shape{3, 7}), rng.gaussian_tensor(Shape{7, 2}));
        conv2d_circular(rng.gaussian_tensor(Shape{4, 4, 2}), rng.gaussian_tensor(Shape{3, 3, 2, 5}));
        first = session.counter().fused_multiply_adds();
    }
    {
        CountingSession session;
        matmul(rng.gaussian_tensor(Shape{3, 7}), rng.gaussian_tensor(Shape{7, 2}));
        conv2d_circular(rng.gaussian_tensor(Shape{4, 4, 2}), rng.gaussian_tensor(Shape{3, 3, 2, 5}));
        second = session.counter().fused_multiply_adds();
    }
    CHECK(first == second);
}

TEST_CASE("conv2d identity filter") {
    Rng rng(2);
    Tensor x = rng.gaussian_tensor(Shape{4, 5, 3});
    Tensor filt(Shape{1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) {
        filt.at(c * 3 + c) = 1.0;
    }
    CHECK(max_abs_diff(conv2d_circular(x, filt), x) == 0.0);
}

TEST_CASE("conv2d circular all-ones filter on constant input") {
    Tensor x = full(Shape{4, 4, 1}, 1.0);
    Tensor filt = full(Shape{3, 3, 1, 1}, 1.0);
    Tensor out = conv2d_circular(x, filt);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.at(i) == doctest::Approx(9.0).epsilon(1e-14));
    }
}

TEST_CASE("conv2d matches the explicit wraparound loop") {
    Rng rng(9);
    Tensor x = rng.gaussian_tensor(Shape{5, 5, 2});
    Tensor filt = rng.gaussian_tensor(Shape{3, 3, 2, 4});
    CHECK(max_abs_diff(conv2d_circular(x, filt), oracle::conv2d_naive(x, filt)) <= 1e-12);
    CountingSession session;
    conv2d_circular(x, filt);
    CHECK(session.counter().fused_multiply_adds() == 5 * 5 * 3 * 3 * 2 * 4);
}

TEST_CASE("conv2d channel mismatch") {
    CHECK_THROWS_AS(conv2d_circular(Tensor(Shape{4, 4, 2}), Tensor(Shape{3, 3, 3, 1})),
                    DimensionError);
}

TEST_CASE("elementwise basics") {
    Rng rng(1);
    Tensor x = rng.gaussian_tensor(Shape{3, 4});
    CHECK(max_abs_diff(add(x, zeros(Shape{3, 4})), x) == 0.0);

    Tensor v(Shape{3}, {-1.0, 0.0, 2.0});
    Tensor r = relu(v);
    CHECK(r.at(0) == 0.0);
    CHECK(r.at(1) == 0.0);
    CHECK(r.at(2) == 2.0);
    Tensor m = relu_mask(v);
    CHECK(m.at(0) == 0.0);
    CHECK(m.at(1) == 0.0);
    CHECK(m.at(2) == 1.0);

    Tensor a = rng.gaussian_tensor(Shape{2, 3});
    Tensor b = rng.gaussian_tensor(Shape{2, 3});
    Tensor prod = mul(a, b);
    for (std::int64_t i = 0; i < prod.numel(); ++i) {
        CHECK(prod.at(i) == doctest::Approx(a.at(i) * b.at(i)).epsilon(1e-15));
    }
    CHECK_THROWS_AS(add(Tensor(Shape{2, 3}), Tensor(Shape{2, 2})), DimensionError);
}

TEST_CASE("broadcasting follows trailing-dim alignment") {
    Tensor a = full(Shape{2, 3}, 1.0);
    Tensor b(Shape{3}, {1.0, 2.0, 3.0});
    Tensor s = add(a, b);
    CHECK(s.at(0) == 2.0);
    CHECK(s.at(1) == 3.0);
    CHECK(s.at(2) == 4.0);
    CHECK(s.at(3) == 2.0);
}

TEST_CASE("shape ops") {
    Rng rng(4);
    Tensor x = rng.gaussian_tensor(Shape{2, 3});
    Tensor back = reshape(reshape(x, Shape{3, 2}), Shape{2, 3});
    CHECK(max_abs_diff(back, x) == 0.0);

    Tensor six = reduce_sum(ones(Shape{2, 3}), {0, 1});
    CHECK(six.shape().rank() == 0);
    CHECK(six.at(0) == 6.0);

    Tensor img = rng.gaussian_tensor(Shape{4, 4, 2});
    Tensor pooled = global_avg_pool(img);
    for (std::int64_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::int64_t i = 0; i < 16; ++i) {
            s += img.at(i * 2 + c);
        }
        CHECK(pooled.at(c) == doctest::Approx(s / 16.0).epsilon(1e-14));
    }

    Tensor t = transpose(x, {1, 0});
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at(0) == x.at(0));
    CHECK(t.at(1) == x.at(3));

    Tensor bcast = broadcast_in_dim(Tensor(Shape{2}, {5.0, 7.0}), Shape{3, 2}, {1});
    CHECK(bcast.at(0) == 5.0);
    CHECK(bcast.at(1) == 7.0);
    CHECK(bcast.at(4) == 5.0);
    CHECK_THROWS_AS(reduce_sum(x, {3}), DimensionError);
}

TEST_CASE("zero extents are rejected") {
    CHECK_THROWS_AS(Shape({0, 2}), DimensionError);
    CHECK_THROWS_AS(Shape({-1}), DimensionError);
}

TEST_CASE("peak bytes tracks the live high-water mark") {
    CountingSession session;
    {
        Tensor big(Shape{100, 10});
        CHECK(session.counter().live_bytes() >= 100 * 10 * 8);
    }
    Tensor small(Shape{2, 2});
    CHECK(session.counter().peak_live_bytes() >= 100 * 10 * 8);
    const std::int64_t peak_before = session.counter().peak_live_bytes();
    Tensor tiny(Shape{1});
    CHECK(session.counter().peak_live_bytes() >= peak_before);
}
