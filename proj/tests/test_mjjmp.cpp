#include <cmath>

#include "doctest.h"
#include "ntk/mjjmp.hpp"
#include "oracles.hpp"

using namespace ntk;

namespace {

// Synthetic structured Jacobian of one kind over flat axis groups.
StructuredJacobian make_sj(StructureKind kind, std::int64_t c, std::int64_t y_res,
                           std::int64_t p_res, Rng& rng) {
    StructuredJacobian sj;
    StructureTag tag;
    tag.kind = kind;
    tag.block_count = c;
    switch (kind) {
        case StructureKind::NoStructure:
            sj.y_shape = Shape{y_res};
            sj.theta_shape = Shape{p_res};
            break;
        case StructureKind::BlockDiagonal:
        case StructureKind::ConstantBlockDiagonal:
            sj.y_shape = Shape{c, y_res};
            sj.theta_shape = Shape{c, p_res};
            tag.out_axes = {0};
            tag.param_axes = {0};
            sj.tags = {tag};
            break;
        case StructureKind::OutputBlockTiled:
            sj.y_shape = Shape{c, y_res};
            sj.theta_shape = Shape{p_res};
            tag.out_axes = {0};
            sj.tags = {tag};
            break;
        case StructureKind::InputBlockTiled:
            sj.y_shape = Shape{y_res};
            sj.theta_shape = Shape{c, p_res};
            tag.param_axes = {0};
            sj.tags = {tag};
            break;
        case StructureKind::BlockTiled:
            sj.y_shape = Shape{c, y_res};
            sj.theta_shape = Shape{c, p_res};
            tag.out_axes = {0};
            tag.param_axes = {0};
            sj.tags = {tag};
            break;
    }
    sj.subarray = rng.gaussian_tensor(subarray_shape(sj.y_shape, sj.theta_shape, sj.tags));
    return sj;
}

MjjmpOperands make_operands(StructureKind kind, std::int64_t c, std::int64_t y_res,
                            std::int64_t p_res, std::int64_t o, std::int64_t n1, std::int64_t n2,
                            Rng& rng) {
    MjjmpOperands ops;
    ops.o = o;
    for (std::int64_t i = 0; i < n1; ++i) {
        ops.b_subs.push_back(make_sj(kind, c, y_res, p_res, rng));
    }
    for (std::int64_t j = 0; j < n2; ++j) {
        ops.c_subs.push_back(make_sj(kind, c, y_res, p_res, rng));
    }
    ops.y1_shape = ops.b_subs[0].y_shape;
    ops.y2_shape = ops.c_subs[0].y_shape;
    ops.theta_shape = ops.b_subs[0].theta_shape;
    for (std::int64_t i = 0; i < n1; ++i) {
        ops.a_cots.push_back(rng.gaussian_tensor(Shape{o, ops.y1_shape.numel()}));
    }
    for (std::int64_t j = 0; j < n2; ++j) {
        ops.d_cots.push_back(rng.gaussian_tensor(Shape{o, ops.y2_shape.numel()}));
    }
    return ops;
}

// Dense evaluation of the batched summand from reconstructed Jacobians.
Tensor dense_reference(const MjjmpOperands& ops) {
    const std::int64_t n1 = static_cast<std::int64_t>(ops.a_cots.size());
    const std::int64_t n2 = static_cast<std::int64_t>(ops.d_cots.size());
    const std::int64_t o = ops.o;
    Tensor out(Shape{n1 * o, n2 * o});
    for (std::int64_t i = 0; i < n1; ++i) {
        Tensor jb = reconstruct(ops.b_subs[i]);
        for (std::int64_t j = 0; j < n2; ++j) {
            Tensor jc = reconstruct(ops.c_subs[j]);
            Tensor block =
                oracle::mjjmp_dense(ops.a_cots[i], jb, jc, ops.d_cots[j]);
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t b = 0; b < o; ++b) {
                    out.at((i * o + a) * n2 * o + j * o + b) = block.at(a * o + b);
                }
            }
        }
    }
    return out;
}

std::int64_t measured_flops(const MjjmpOperands& ops, ContractionOrder order) {
    CountingSession session;
    mjjmp_execute(ops, order);
    return session.counter().fused_multiply_adds();
}

}  // namespace

TEST_CASE("table costs for a dense layer summand are 36/30/12") {
    // Matrix-vector layer: y = c = w = 3, p = w^2, subarray is 1 x w.
    const Shape y{3, 1};
    const Shape theta{3, 3};
    StructureTag tag;
    tag.kind = StructureKind::ConstantBlockDiagonal;
    tag.out_axes = {0};
    tag.param_axes = {0};
    tag.block_count = 3;
    const std::vector<StructureTag> tags = {tag};
    const auto cost = [&](ContractionOrder order) {
        return mjjmp_cost(y, tags, y, tags, theta, 2, 1, 1, order).flops;
    };
    CHECK(cost(ContractionOrder::OutsideIn) == 36);
    CHECK(cost(ContractionOrder::LeftToRight) == 30);
    CHECK(cost(ContractionOrder::InsideOut) == 12);
    CHECK(select_order(y, tags, y, tags, theta, 2, 1, 1) == ContractionOrder::InsideOut);
}

TEST_CASE("dense no-structure cost includes the y^2 p inner term") {
    const Shape y{5};
    const Shape theta{7};
    const auto cost = mjjmp_cost(y, {}, y, {}, theta, 2, 1, 1, ContractionOrder::InsideOut);
    bool found = false;
    for (const auto& [label, value] : cost.terms) {
        if (label == std::string("inner_pair")) {
            found = true;
            CHECK(value == 5 * 5 * 7);
        }
    }
    CHECK(found);
}

TEST_CASE("c = 1 degenerates every structured row to the dense row") {
    Rng rng(0);
    for (StructureKind kind :
         {StructureKind::BlockDiagonal, StructureKind::ConstantBlockDiagonal,
          StructureKind::InputBlockTiled, StructureKind::OutputBlockTiled,
          StructureKind::BlockTiled}) {
        auto structured = make_sj(kind, 1, 4, 6, rng);
        auto dense = make_sj(StructureKind::NoStructure, 1, 4, 6, rng);
        for (ContractionOrder order : {ContractionOrder::OutsideIn, ContractionOrder::LeftToRight,
                                       ContractionOrder::InsideOut}) {
            const auto a = mjjmp_cost(structured.y_shape, structured.tags, structured.y_shape,
                                      structured.tags, structured.theta_shape, 3, 2, 2, order);
            const auto b = mjjmp_cost(dense.y_shape, dense.tags, dense.y_shape, dense.tags,
                                      dense.theta_shape, 3, 2, 2, order);
            CHECK(a.flops == b.flops);
        }
    }
}

TEST_CASE("execution equals the dense oracle for every structure kind") {
    Rng rng(17);
    for (StructureKind kind :
         {StructureKind::NoStructure, StructureKind::BlockDiagonal,
          StructureKind::ConstantBlockDiagonal, StructureKind::InputBlockTiled,
          StructureKind::OutputBlockTiled, StructureKind::BlockTiled}) {
        for (int draw = 0; draw < 30; ++draw) {
            const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform() * 3);
            const std::int64_t y_res = 1 + static_cast<std::int64_t>(rng.uniform() * 3);
            const std::int64_t p_res = 1 + static_cast<std::int64_t>(rng.uniform() * 3);
            const std::int64_t o = 1 + static_cast<std::int64_t>(rng.uniform() * 3);
            const std::int64_t n1 = 1 + static_cast<std::int64_t>(rng.uniform() * 2);
            const std::int64_t n2 = 1 + static_cast<std::int64_t>(rng.uniform() * 2);
            auto ops = make_operands(kind, c, y_res, p_res, o, n1, n2, rng);
            Tensor ref = dense_reference(ops);
            for (ContractionOrder order :
                 {ContractionOrder::OutsideIn, ContractionOrder::LeftToRight,
                  ContractionOrder::InsideOut, ContractionOrder::Auto}) {
                Tensor got = mjjmp_execute(ops, order);
                CHECK(rel_frobenius_diff(got, ref) <= 1e-10);
            }
        }
    }
}

TEST_CASE("measured flops stay within a factor of three of the cost model") {
    Rng rng(23);
    for (StructureKind kind :
         {StructureKind::NoStructure, StructureKind::BlockDiagonal,
          StructureKind::ConstantBlockDiagonal, StructureKind::InputBlockTiled,
          StructureKind::OutputBlockTiled, StructureKind::BlockTiled}) {
        for (int draw = 0; draw < 6; ++draw) {
            const std::int64_t c = 2 + static_cast<std::int64_t>(rng.uniform() * 5);
            const std::int64_t y_res = 2 + static_cast<std::int64_t>(rng.uniform() * 5);
            const std::int64_t p_res = 2 + static_cast<std::int64_t>(rng.uniform() * 5);
            const std::int64_t o = 2 + static_cast<std::int64_t>(rng.uniform() * 5);
            auto ops = make_operands(kind, c, y_res, p_res, o, 2, 2, rng);
            for (ContractionOrder order :
                 {ContractionOrder::OutsideIn, ContractionOrder::LeftToRight,
                  ContractionOrder::InsideOut}) {
                const auto cost =
                    mjjmp_cost(ops.y1_shape, ops.b_subs[0].tags, ops.y2_shape,
                               ops.c_subs[0].tags, ops.theta_shape, o, 2, 2, order);
                const double measured = static_cast<double>(measured_flops(ops, order));
                const double predicted = static_cast<double>(cost.flops);
                CHECK(measured / predicted <= 3.0);
                CHECK(measured / predicted >= 1.0 / 3.0);
            }
        }
    }
}

TEST_CASE("kronecker pull-out identity: A (I kron b^T)(I kron c^T)^T D = (b^T c) A D") {
    Rng rng(29);
    for (int draw = 0; draw < 100; ++draw) {
        const std::int64_t w = 2 + static_cast<std::int64_t>(rng.uniform() * 5);
        const std::int64_t o = 1 + static_cast<std::int64_t>(rng.uniform() * 4);
        Tensor b = rng.gaussian_tensor(Shape{1, w});
        Tensor c = rng.gaussian_tensor(Shape{1, w});
        Tensor a = rng.gaussian_tensor(Shape{o, w});
        Tensor d = rng.gaussian_tensor(Shape{o, w});
        Tensor kb = oracle::kron(identity(w), b);
        Tensor kc = oracle::kron(identity(w), c);
        Tensor lhs = oracle::mjjmp_dense(a, kb, kc, d);
        const double btc = dot(b, c);
        Tensor ad = oracle::mjjmp_dense(a, identity(w), identity(w), d);
        for (std::int64_t i = 0; i < lhs.numel(); ++i) {
            CHECK(std::abs(lhs.at(i) - btc * ad.at(i)) <= 1e-12 * std::max(1.0, std::abs(lhs.at(i))));
        }
    }
}

TEST_CASE("pulled-out scalar example: b=(1,2), c=(3,4) gives 11 I") {
    MjjmpOperands ops;
    ops.o = 2;
    ops.y1_shape = ops.y2_shape = Shape{2, 1};
    ops.theta_shape = Shape{2, 2};
    StructureTag tag;
    tag.kind = StructureKind::ConstantBlockDiagonal;
    tag.out_axes = {0};
    tag.param_axes = {0};
    tag.block_count = 2;
    StructuredJacobian sb;
    sb.y_shape = ops.y1_shape;
    sb.theta_shape = ops.theta_shape;
    sb.tags = {tag};
    sb.subarray = Tensor(Shape{1, 2}, {1.0, 2.0});
    StructuredJacobian sc = sb;
    sc.subarray = Tensor(Shape{1, 2}, {3.0, 4.0});
    ops.b_subs = {sb};
    ops.c_subs = {sc};
    ops.a_cots = {identity(2)};
    ops.d_cots = {identity(2)};
    for (ContractionOrder order : {ContractionOrder::OutsideIn, ContractionOrder::LeftToRight,
                                   ContractionOrder::InsideOut}) {
        Tensor got = mjjmp_execute(ops, order);
        CHECK(got.at(0) == doctest::Approx(11.0).epsilon(1e-14));
        CHECK(got.at(1) == doctest::Approx(0.0).epsilon(1e-14));
        CHECK(got.at(2) == doctest::Approx(0.0).epsilon(1e-14));
        CHECK(got.at(3) == doctest::Approx(11.0).epsilon(1e-14));
    }
}

TEST_CASE("block-diagonal execution matches the direct-sum identity") {
    Rng rng(31);
    const std::int64_t c = 3, yr = 2, pr = 2, o = 3;
    auto ops = make_operands(StructureKind::BlockDiagonal, c, yr, pr, o, 1, 1, rng);
    Tensor got = mjjmp_execute(ops, ContractionOrder::InsideOut);
    // sum_i A^i (B_i C_i^T) D^i^T with per-block slices.
    Tensor expect(Shape{o, o});
    for (std::int64_t blk = 0; blk < c; ++blk) {
        Tensor a_blk(Shape{o, yr}), d_blk(Shape{o, yr}), b_blk(Shape{yr, pr}), c_blk(Shape{yr, pr});
        for (std::int64_t a = 0; a < o; ++a) {
            for (std::int64_t r = 0; r < yr; ++r) {
                a_blk.at(a * yr + r) = ops.a_cots[0].at(a * c * yr + blk * yr + r);
                d_blk.at(a * yr + r) = ops.d_cots[0].at(a * c * yr + blk * yr + r);
            }
        }
        for (std::int64_t r = 0; r < yr; ++r) {
            for (std::int64_t q = 0; q < pr; ++q) {
                b_blk.at(r * pr + q) = ops.b_subs[0].subarray.at((blk * yr + r) * pr + q);
                c_blk.at(r * pr + q) = ops.c_subs[0].subarray.at((blk * yr + r) * pr + q);
            }
        }
        Tensor term = oracle::mjjmp_dense(a_blk, b_blk, c_blk, d_blk);
        for (std::int64_t i = 0; i < o * o; ++i) {
            expect.at(i) += term.at(i);
        }
    }
    CHECK(rel_frobenius_diff(got, expect) <= 1e-12);
}

TEST_CASE("output-tiled execution uses axis-summed cotangents") {
    Rng rng(37);
    const std::int64_t c = 3, yr = 2, pr = 4, o = 2;
    auto ops = make_operands(StructureKind::OutputBlockTiled, c, yr, pr, o, 1, 1, rng);
    Tensor got = mjjmp_execute(ops, ContractionOrder::InsideOut);
    Tensor a_sum(Shape{o, yr}), d_sum(Shape{o, yr});
    for (std::int64_t a = 0; a < o; ++a) {
        for (std::int64_t t = 0; t < c; ++t) {
            for (std::int64_t r = 0; r < yr; ++r) {
                a_sum.at(a * yr + r) += ops.a_cots[0].at(a * c * yr + t * yr + r);
                d_sum.at(a * yr + r) += ops.d_cots[0].at(a * c * yr + t * yr + r);
            }
        }
    }
    Tensor expect = oracle::mjjmp_dense(a_sum, ops.b_subs[0].subarray,
                                        ops.c_subs[0].subarray, d_sum);
    CHECK(rel_frobenius_diff(got, expect) <= 1e-12);
}

TEST_CASE("intersection keeps the largest common axis subsets") {
    const Shape theta{4, 4};
    // Side B structured along both axes, side C along axis 0 only.
    StructureTag both;
    both.kind = StructureKind::ConstantBlockDiagonal;
    both.out_axes = {0, 1};
    both.param_axes = {0, 1};
    both.block_count = 16;
    StructureTag first;
    first.kind = StructureKind::ConstantBlockDiagonal;
    first.out_axes = {0};
    first.param_axes = {0};
    first.block_count = 4;
    auto common = intersect_structures({both}, {first}, Shape{4, 4}, Shape{4, 2}, theta);
    REQUIRE(common.b_tags.size() == 1);
    CHECK(common.b_tags[0].kind == StructureKind::ConstantBlockDiagonal);
    CHECK(common.b_tags[0].param_axes == std::vector<int>{0});
    CHECK(common.b_tags[0].block_count == 4);

    auto same = intersect_structures({first}, {first}, Shape{4, 2}, Shape{4, 2}, theta);
    REQUIRE(same.b_tags.size() == 1);
    CHECK(same.b_tags[0].block_count == 4);

    StructureTag second;
    second.kind = StructureKind::ConstantBlockDiagonal;
    second.out_axes = {1};
    second.param_axes = {1};
    second.block_count = 4;
    auto disjoint = intersect_structures({first}, {second}, Shape{4, 2}, Shape{2, 4}, theta);
    CHECK(disjoint.b_tags.empty());
    CHECK(disjoint.c_tags.empty());
}

TEST_CASE("relaxation materializes dropped structure") {
    Rng rng(41);
    // 2*theta over a (3, 3) parameter: constant-block diagonal on both axes.
    StructuredJacobian fine;
    fine.y_shape = Shape{3, 3};
    fine.theta_shape = Shape{3, 3};
    StructureTag t;
    t.kind = StructureKind::ConstantBlockDiagonal;
    t.out_axes = {0, 1};
    t.param_axes = {0, 1};
    t.block_count = 9;
    fine.tags = {t};
    fine.subarray = Tensor(subarray_shape(fine.y_shape, fine.theta_shape, fine.tags));
    fine.subarray.at(0) = 2.0;

    StructureTag coarse;
    coarse.kind = StructureKind::ConstantBlockDiagonal;
    coarse.out_axes = {0};
    coarse.param_axes = {0};
    coarse.block_count = 3;
    StructuredJacobian relaxed = relax_to(fine, {coarse});
    CHECK(max_abs_diff(reconstruct(relaxed), reconstruct(fine)) == 0.0);
    CHECK(max_abs_diff(relaxed.subarray, scale(identity(3), 2.0)) == 0.0);
}

TEST_CASE("order argmin: inside-out wins for o < w, baseline sweeps win for o >> w") {
    // Dense-layer structure with y = c = w, p = w^2.
    auto cbd_tags = [](std::int64_t w) {
        StructureTag tag;
        tag.kind = StructureKind::ConstantBlockDiagonal;
        tag.out_axes = {0};
        tag.param_axes = {0};
        tag.block_count = w;
        return std::vector<StructureTag>{tag};
    };
    for (std::int64_t w : {4, 8, 16}) {
        for (std::int64_t o : {std::int64_t{1}, std::int64_t{2}, w / 2}) {
            if (o < 1) continue;
            CHECK(select_order(Shape{w, 1}, cbd_tags(w), Shape{w, 1}, cbd_tags(w), Shape{w, w}, o,
                               2, 2) == ContractionOrder::InsideOut);
        }
    }
    // For o >> w the structured path loses to plain JVP/VJP sweeps, which
    // cost n^2 o [fp] with [fp] = w^2 for this layer.
    const std::int64_t w = 4, n = 2;
    for (std::int64_t o : {64, 128}) {
        const std::int64_t structured =
            mjjmp_cost(Shape{w, 1}, cbd_tags(w), Shape{w, 1}, cbd_tags(w), Shape{w, w}, o, n, n,
                       select_order(Shape{w, 1}, cbd_tags(w), Shape{w, 1}, cbd_tags(w),
                                    Shape{w, w}, o, n, n))
                .flops;
        const std::int64_t baseline = n * n * o * w * w;
        CHECK(baseline < structured);
    }
    // And for o << w the structured inside-out beats the baseline.
    const std::int64_t big_w = 64;
    const std::int64_t structured_small_o =
        mjjmp_cost(Shape{big_w, 1}, cbd_tags(big_w), Shape{big_w, 1}, cbd_tags(big_w),
                   Shape{big_w, big_w}, 2, n, n, ContractionOrder::InsideOut)
            .flops;
    CHECK(structured_small_o < n * n * 2 * big_w * big_w);
}

TEST_CASE("cost ties break toward inside-out") {
    // Degenerate 1x1 everything: all orders cost the same.
    StructureTag tag;
    tag.kind = StructureKind::ConstantBlockDiagonal;
    tag.out_axes = {0};
    tag.param_axes = {0};
    tag.block_count = 1;
    CHECK(select_order(Shape{1}, {tag}, Shape{1}, {tag}, Shape{1}, 1, 1, 1) ==
          ContractionOrder::InsideOut);
}
