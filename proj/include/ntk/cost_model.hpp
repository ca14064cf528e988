#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ntk/ntk.hpp"
#include "ntk/program.hpp"

namespace ntk {

struct CostEstimate {
    std::int64_t flops = 0;         // fused multiply-add units; sum of the breakdown
    std::int64_t memory_bytes = 0;  // max over the additive memory terms
    std::vector<std::pair<std::string, std::int64_t>> term_breakdown;

    std::int64_t term(const std::string& label) const;
    bool has_term(const std::string& label) const;
};

// Shape-only operation counts of a program; no numerics are evaluated.
// Sweep costs mirror the engine's counting rules exactly.
struct ProgramStats {
    std::int64_t forward_fmas = 0;    // one forward pass
    std::int64_t capture_fmas = 0;    // mask extraction during linearization
    std::int64_t jvp_fmas = 0;        // one tangent evaluation (linearized)
    std::int64_t jvp_top_fmas = 0;    // portion from output-sized tangent nodes
    std::int64_t vjp_sweep_fmas = 0;  // one-row pullback incl. parameter cotangents
    std::int64_t cot_sweep_fmas = 0;  // one-row propagation only (linearized)
    std::int64_t param_count = 0;     // p
    std::int64_t total_node_elems = 0;  // y
    std::int64_t max_node_elems = 0;    // y^l
    std::int64_t max_param_elems = 0;   // p^l
    std::int64_t output_size = 0;       // o
    std::int64_t subarray_elems = 0;    // j, summed over parameter-consuming nodes
};

ProgramStats analyze_program(const Program& prog);

// Analytic FLOP/memory prediction per method via shape traversal. The
// breakdown carries the per-architecture leading terms (contractions and
// MJJMP summands at their exact closed-form values) plus the sweep costs.
CostEstimate predict_generic(const Program& prog, Method method, std::int64_t n1,
                             std::int64_t n2);

// Argmin of predicted flops over the three concrete methods; ties prefer
// StructuredDerivatives, then NtkVectorProducts, then JacobianContraction.
// In memory-constrained mode the argmin is over predicted peak bytes.
Method select_method(const Program& prog, std::int64_t n1, std::int64_t n2,
                     bool memory_constrained = false);

struct ValidationReport {
    Method method = Method::JacobianContraction;
    std::int64_t predicted_flops = 0;
    std::int64_t measured_flops = 0;
    std::int64_t predicted_bytes = 0;
    std::int64_t measured_peak_bytes = 0;
    double total_ratio = 0.0;
    // (term class, measured, predicted, ratio) for the major cost classes.
    struct TermRatio {
        std::string label;
        std::int64_t measured = 0;
        std::int64_t predicted = 0;
        double ratio = 0.0;
        bool flagged = false;  // outside [0.2, 5]
    };
    std::vector<TermRatio> per_term;
    bool any_flagged = false;
    std::string to_json() const;
};

// Runs the method with seeded inputs under a counting session and compares
// measured against predicted FLOPs per term class.
ValidationReport validate_against_counter(const Program& prog, Method method, std::int64_t n1,
                                          std::int64_t n2, std::uint64_t seed);

}  // namespace ntk
