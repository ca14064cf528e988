#include <cmath>

#include "doctest.h"
#include "ntk/cost_model.hpp"
#include "oracles.hpp"

using namespace ntk;

namespace {

ModelSpec fcn_spec(int t, int w, int o, int input_dim = 0) {
    ModelSpec s;
    s.family = ModelSpec::Family::Fcn;
    s.depth = t;
    s.width = w;
    s.output_size = o;
    s.input_dim = input_dim;
    return s;
}

ModelSpec cnn_spec(int t, int d, int f, int w, int o) {
    ModelSpec s;
    s.family = ModelSpec::Family::Cnn;
    s.depth = t;
    s.width = w;
    s.output_size = o;
    s.pixels_h = d;
    s.pixels_w = 1;
    s.filter_h = f;
    s.filter_w = 1;
    return s;
}

std::int64_t measure(const Program& prog, Method m, std::int64_t n1, std::int64_t n2,
                     std::uint64_t seed) {
    Rng rng(seed);
    Params theta = init_params(prog, rng);
    Batch x1 = random_inputs(prog, n1, rng);
    Batch x2 = random_inputs(prog, n2, rng);
    CountingSession session;
    (void)compute_ntk(prog, theta, x1, x2, m);
    return session.counter().fused_multiply_adds();
}

}  // namespace

TEST_CASE("jacobian contraction breakdown carries the closed-form leading terms") {
    Program prog = build_fcn(fcn_spec(10, 64, 16));
    CostEstimate est = predict_generic(prog, Method::JacobianContraction, 2, 2);
    CHECK(est.term("n2_o2_t_w2") == 41943040);
    CHECK(est.term("n2_o3_w") == 1048576);
    std::int64_t sum = 0;
    for (const auto& [label, value] : est.term_breakdown) {
        sum += value;
    }
    CHECK(sum == est.flops);
}

TEST_CASE("breakdown labels cover the per-architecture terms") {
    Program fcn = build_fcn(fcn_spec(3, 16, 4));
    CHECK(predict_generic(fcn, Method::JacobianContraction, 2, 2).has_term("n2_o2_t_w2"));
    CHECK(predict_generic(fcn, Method::JacobianContraction, 2, 2).has_term("n2_o3_w"));
    CHECK(predict_generic(fcn, Method::NtkVectorProducts, 2, 2).has_term("n2_o_t_w2"));
    CHECK(predict_generic(fcn, Method::NtkVectorProducts, 2, 2).has_term("n2_o2_w"));
    CHECK(predict_generic(fcn, Method::StructuredDerivatives, 2, 2).has_term("n2_o2_t_w"));
    CHECK(predict_generic(fcn, Method::StructuredDerivatives, 2, 2).has_term("n2_o3"));
    CHECK(predict_generic(fcn, Method::StructuredDerivatives, 2, 2).has_term("n_j"));

    Program cnn = build_cnn(cnn_spec(2, 8, 3, 4, 2));
    CHECK(predict_generic(cnn, Method::JacobianContraction, 2, 2).has_term("n2_o2_t_f_w2"));
    CHECK(predict_generic(cnn, Method::NtkVectorProducts, 2, 2).has_term("n2_o_t_d_f_w2"));
    CHECK(predict_generic(cnn, Method::StructuredDerivatives, 2, 2).has_term("n2_o2_t_min"));
}

TEST_CASE("ntk-vector-products degenerate to the jacobian estimate at o = n = 1") {
    Program prog = build_fcn(fcn_spec(4, 12, 1));
    const std::int64_t vp = predict_generic(prog, Method::NtkVectorProducts, 1, 1).flops;
    const std::int64_t jc = predict_generic(prog, Method::JacobianContraction, 1, 1).flops;
    CHECK(static_cast<double>(vp) / static_cast<double>(jc) > 0.5);
    CHECK(static_cast<double>(vp) / static_cast<double>(jc) < 2.0);
}

TEST_CASE("cnn structured-derivatives term takes the cheapest contraction branch") {
    // For each conv layer the chosen order cost must equal the minimum of
    // the three order costs evaluated on the same structure.
    Program prog = build_cnn(cnn_spec(2, 16, 9, 8, 4));
    const LinearizedProgram lp = linearize_shapes(prog);
    for (std::size_t block = 0; block < lp.param_consumers.size(); ++block) {
        for (int l : lp.param_consumers[block]) {
            const Node& node = lp.linear.nodes[l];
            std::vector<Shape> shapes;
            for (const ValueRef& ref : node.inputs) {
                shapes.push_back(ref.kind == ValueRef::Kind::Param
                                     ? lp.linear.param_shapes[ref.index]
                                     : lp.linear.const_shapes[ref.index]);
            }
            const int slot = *node.param_input();
            const auto tags = structure_rule(node, shapes, slot);
            const Shape& theta = lp.linear.param_shapes[block];
            std::int64_t best = -1;
            for (ContractionOrder order :
                 {ContractionOrder::OutsideIn, ContractionOrder::LeftToRight,
                  ContractionOrder::InsideOut}) {
                const std::int64_t f =
                    mjjmp_cost(node.out_shape, tags, node.out_shape, tags, theta, 4, 1, 1, order)
                        .flops;
                best = best < 0 ? f : std::min(best, f);
            }
            const ContractionOrder chosen =
                select_order(node.out_shape, tags, node.out_shape, tags, theta, 4, 1, 1);
            CHECK(mjjmp_cost(node.out_shape, tags, node.out_shape, tags, theta, 4, 1, 1, chosen)
                      .flops == best);
        }
    }
}

TEST_CASE("select_method follows the use-when rules") {
    CHECK(select_method(build_fcn(fcn_spec(3, 64, 4)), 2, 2) == Method::StructuredDerivatives);
    CHECK(select_method(build_fcn(fcn_spec(3, 8, 64)), 1, 1) == Method::NtkVectorProducts);
    // Memory-constrained CNN with d > o*w avoids structured derivatives
    // (the n*d*f*w subarray dominates its footprint).
    Program cnn = build_cnn(cnn_spec(1, 100, 9, 2, 4));
    CHECK(select_method(cnn, 2, 2, true) != Method::StructuredDerivatives);
}

TEST_CASE("predictions are monotone in each model extent") {
    auto flops_of = [](const ModelSpec& spec, Method m) {
        return predict_generic(build_model(spec), m, 2, 2).flops;
    };
    for (Method m : {Method::JacobianContraction, Method::NtkVectorProducts,
                     Method::StructuredDerivatives}) {
        CHECK(flops_of(fcn_spec(4, 16, 4), m) <= flops_of(fcn_spec(5, 16, 4), m));
        CHECK(flops_of(fcn_spec(4, 16, 4), m) <= flops_of(fcn_spec(4, 24, 4), m));
        CHECK(flops_of(fcn_spec(4, 16, 4), m) <= flops_of(fcn_spec(4, 16, 6), m));
        CHECK(flops_of(cnn_spec(2, 8, 3, 4, 2), m) <= flops_of(cnn_spec(2, 12, 3, 4, 2), m));
        CHECK(flops_of(cnn_spec(2, 8, 3, 4, 2), m) <= flops_of(cnn_spec(2, 8, 5, 4, 2), m));
        const CostEstimate a = predict_generic(build_model(fcn_spec(4, 16, 4)), m, 2, 2);
        const CostEstimate b = predict_generic(build_model(fcn_spec(4, 16, 4)), m, 3, 2);
        const CostEstimate c = predict_generic(build_model(fcn_spec(4, 16, 4)), m, 2, 3);
        CHECK(a.flops <= b.flops);
        CHECK(a.flops <= c.flops);
    }
}

TEST_CASE("selection flips from structured derivatives near the o = w diagonal") {
    // Along o in {w/4, w/2, w, 2w, 4w} the choice moves from structured
    // derivatives to ntk-vector-products within one step of o = w.
    for (int w : {8, 16, 32}) {
        int flip_index = -1;
        const std::vector<int> os = {w / 4, w / 2, w, 2 * w, 4 * w};
        for (std::size_t i = 0; i < os.size(); ++i) {
            if (os[i] < 1) continue;
            const Method m = select_method(build_fcn(fcn_spec(10, w, os[i])), 2, 2);
            if (m == Method::StructuredDerivatives) {
                CHECK(flip_index == -1);  // no flip back
            } else if (flip_index == -1) {
                flip_index = static_cast<int>(i);
            }
        }
        REQUIRE(flip_index >= 0);
        // o = w sits at index 2; the flip must happen within one grid step.
        CHECK(flip_index >= 2);
        CHECK(flip_index <= 3);
    }
}

TEST_CASE("validation ratios stay within the calibration band") {
    for (int w : {16, 64}) {
        for (int o : {4, 16}) {
            for (int n : {1, 2}) {
                Program prog = build_fcn(fcn_spec(3, w, o));
                for (Method m : {Method::JacobianContraction, Method::NtkVectorProducts,
                                 Method::StructuredDerivatives}) {
                    const ValidationReport report =
                        validate_against_counter(prog, m, n, n, 99);
                    CHECK(report.total_ratio >= 0.2);
                    CHECK(report.total_ratio <= 5.0);
                    CHECK_FALSE(report.any_flagged);
                }
            }
        }
    }
}

TEST_CASE("doubling the width roughly quadruples jacobian-contraction flops") {
    Program narrow = build_fcn(fcn_spec(10, 32, 8));
    Program wide = build_fcn(fcn_spec(10, 64, 8));
    const double ratio =
        static_cast<double>(measure(wide, Method::JacobianContraction, 2, 2, 1)) /
        static_cast<double>(measure(narrow, Method::JacobianContraction, 2, 2, 1));
    CHECK(ratio >= 3.2);
    CHECK(ratio <= 4.8);
}

TEST_CASE("doubling the batch quadruples the contraction-dominated terms") {
    Program prog = build_fcn(fcn_spec(10, 32, 8));
    auto contraction_phase = [&](std::int64_t n) {
        Rng rng(2);
        Params theta = init_params(prog, rng);
        Batch x1 = random_inputs(prog, n, rng);
        Batch x2 = random_inputs(prog, n, rng);
        CountingSession session;
        (void)ntk_jacobian_contraction(prog, theta, x1, x2);
        return session.counter().phase_fmas().at("contraction");
    };
    const double ratio = static_cast<double>(contraction_phase(4)) /
                         static_cast<double>(contraction_phase(2));
    CHECK(ratio == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("memory prediction tracks the measured peak within a wide band") {
    Program prog = build_fcn(fcn_spec(3, 32, 8));
    for (Method m : {Method::JacobianContraction, Method::NtkVectorProducts,
                     Method::StructuredDerivatives}) {
        const ValidationReport report = validate_against_counter(prog, m, 2, 2, 5);
        const double ratio = static_cast<double>(report.measured_peak_bytes) /
                             static_cast<double>(report.predicted_bytes);
        CHECK(ratio >= 0.1);
        CHECK(ratio <= 10.0);
    }
}

TEST_CASE("validation report serializes the required fields") {
    Program prog = build_fcn(fcn_spec(2, 8, 3));
    const ValidationReport report =
        validate_against_counter(prog, Method::StructuredDerivatives, 1, 2, 3);
    const std::string json = report.to_json();
    CHECK(json.find("\"method\"") != std::string::npos);
    CHECK(json.find("\"predicted_flops\"") != std::string::npos);
    CHECK(json.find("\"measured_flops\"") != std::string::npos);
    CHECK(json.find("\"per_term\"") != std::string::npos);
}
