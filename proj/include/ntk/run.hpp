#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ntk/cost_model.hpp"
#include "ntk/ntk.hpp"
#include "ntk/program.hpp"

namespace ntk {

// One reproducible NTK computation: the seed fully determines parameters and
// inputs, so identical configs yield identical outputs in sequential mode.
struct RunConfig {
    ModelSpec model;
    Method method = Method::Auto;
    std::int64_t n1 = 1;
    std::int64_t n2 = 1;
    std::uint64_t seed = 0;
    bool count_flops = false;
    bool include_values = false;
    bool timing = false;
    std::uint64_t mem_cap_bytes = 0;       // 0: default 4 GiB guard
    std::int64_t oracle_cap_elems = 0;     // 0: default 1e6 (n*o*p guard)
    double check_tol = 1e-9;
};

// Draws parameters, then the two input batches, from one seeded stream.
struct ProblemInstance {
    Program prog;
    Params params;
    Batch x1, x2;
};
ProblemInstance make_instance(const ModelSpec& model, std::int64_t n1, std::int64_t n2,
                              std::uint64_t seed);

// JSON result with the selected method, predicted costs, optional measured
// FLOPs and NTK values. Throws ResourceCapError when the predicted memory
// exceeds the cap.
std::string run_compute(const RunConfig& config);

struct CheckOutcome {
    bool ok = false;
    double max_error = 0.0;
    std::string report_json;
};

// Three-way + dense-oracle equivalence for one config; the oracle runs only
// when n*o*p fits the cap. corrupt_structure_rule is the negative-control
// hook.
CheckOutcome run_check(const RunConfig& config, bool corrupt_structure_rule);

// Equivalence over a small built-in FCN/CNN grid.
CheckOutcome run_check_default(std::uint64_t seed, double tol, std::int64_t oracle_cap_elems,
                               bool corrupt_structure_rule);

// predict_generic breakdown as JSON (all three methods when method == Auto).
std::string run_cost(const RunConfig& config);

struct SweepPoint {
    std::int64_t w = 0, o = 0, n = 0, t = 0, d = 1, f = 1;
    std::string method;
    std::int64_t measured_flops = 0;
    double flops_per_entry = 0.0;
    std::int64_t predicted_flops = 0;
    std::int64_t peak_bytes = 0;
    std::string error;

    std::string csv_row() const;
    static const char* csv_header();
};

SweepPoint run_sweep_point(const ModelSpec& model, Method method, std::int64_t n,
                           std::uint64_t seed);

// Oracle cap: explicit value if positive, else NTK_MEM_CAP_BYTES / 8, else
// the 1e6-element default.
std::int64_t resolve_oracle_cap(std::int64_t requested_elems);
std::uint64_t resolve_mem_cap(std::uint64_t requested_bytes);

}  // namespace ntk
