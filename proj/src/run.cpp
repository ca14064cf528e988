#include "ntk/run.hpp"

#include <chrono>
#include <cstdlib>
#include <sstream>

#include "json.hpp"
#include "ntk/rng.hpp"
#include "ntk/structure.hpp"

namespace ntk {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json spec_json(const ModelSpec& spec) { return ordered_json::parse(spec.to_json()); }

ordered_json estimate_json(const CostEstimate& est) {
    ordered_json j;
    j["flops"] = est.flops;
    j["memory_bytes"] = est.memory_bytes;
    ordered_json terms;
    for (const auto& [label, value] : est.term_breakdown) {
        terms[label] = value;
    }
    j["terms"] = terms;
    return j;
}

struct CorruptionGuard {
    explicit CorruptionGuard(bool enable) : enabled_(enable) {
        if (enabled_) set_structure_rule_corruption(true);
    }
    ~CorruptionGuard() {
        if (enabled_) set_structure_rule_corruption(false);
    }
    bool enabled_;
};

}  // namespace

std::int64_t resolve_oracle_cap(std::int64_t requested_elems) {
    if (requested_elems > 0) {
        return requested_elems;
    }
    if (const char* env = std::getenv("NTK_MEM_CAP_BYTES")) {
        const long long bytes = std::atoll(env);
        if (bytes > 0) {
            return static_cast<std::int64_t>(bytes / 8);
        }
    }
    return 1'000'000;
}

std::uint64_t resolve_mem_cap(std::uint64_t requested_bytes) {
    if (requested_bytes > 0) {
        return requested_bytes;
    }
    if (const char* env = std::getenv("NTK_MEM_CAP_BYTES")) {
        const long long bytes = std::atoll(env);
        if (bytes > 0) {
            return static_cast<std::uint64_t>(bytes);
        }
    }
    return 4ull << 30;
}

ProblemInstance make_instance(const ModelSpec& model, std::int64_t n1, std::int64_t n2,
                              std::uint64_t seed) {
    if (n1 < 1 || n2 < 1) {
        throw SpecError("batch sizes must be >= 1");
    }
    ProblemInstance inst;
    inst.prog = build_model(model);
    Rng rng(seed);
    inst.params = init_params(inst.prog, rng);
    inst.x1 = random_inputs(inst.prog, n1, rng);
    inst.x2 = random_inputs(inst.prog, n2, rng);
    return inst;
}

std::string run_compute(const RunConfig& config) {
    ProblemInstance inst = make_instance(config.model, config.n1, config.n2, config.seed);
    Method method = config.method;
    const bool auto_selected = method == Method::Auto;
    if (auto_selected) {
        method = select_method(inst.prog, config.n1, config.n2);
    }
    const CostEstimate predicted = predict_generic(inst.prog, method, config.n1, config.n2);
    const std::uint64_t cap = resolve_mem_cap(config.mem_cap_bytes);
    if (static_cast<std::uint64_t>(predicted.memory_bytes) > cap) {
        throw ResourceCapError("predicted memory " + std::to_string(predicted.memory_bytes) +
                               " bytes exceeds cap " + std::to_string(cap));
    }

    ordered_json result;
    result["model"] = spec_json(config.model);
    result["method_requested"] = method_name(config.method);
    result["method"] = method_name(method);
    result["auto_selected"] = auto_selected;
    result["n1"] = config.n1;
    result["n2"] = config.n2;
    result["seed"] = config.seed;
    result["sequential"] = true;
    result["predicted"] = estimate_json(predicted);

    const auto t0 = std::chrono::steady_clock::now();
    NtkMatrix theta;
    if (config.count_flops) {
        CountingSession session;
        theta = compute_ntk(inst.prog, inst.params, inst.x1, inst.x2, method);
        ordered_json measured;
        measured["flops"] = session.counter().fused_multiply_adds();
        measured["peak_bytes"] = session.counter().peak_live_bytes();
        ordered_json phases;
        for (const auto& [phase, fmas] : session.counter().phase_fmas()) {
            phases[phase] = fmas;
        }
        measured["phases"] = phases;
        const std::int64_t entries =
            config.n1 * config.n2 * inst.prog.output_size() * inst.prog.output_size();
        measured["flops_per_entry"] = static_cast<double>(session.counter().fused_multiply_adds()) /
                                      static_cast<double>(entries);
        result["measured"] = measured;
    } else {
        theta = compute_ntk(inst.prog, inst.params, inst.x1, inst.x2, method);
    }
    if (config.timing) {
        const auto t1 = std::chrono::steady_clock::now();
        result["wall_ms"] =
            std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count() / 1000.0;
    }
    result["ntk_shape"] = {theta.n1 * theta.o, theta.n2 * theta.o};
    if (config.include_values) {
        Tensor flat = theta.flat();
        result["ntk"] = std::vector<double>(flat.data(), flat.data() + flat.numel());
    }
    return result.dump(2) + "\n";
}

namespace {

struct CheckPointResult {
    double max_error = 0.0;
    ordered_json json;
};

CheckPointResult check_one(const ModelSpec& model, std::int64_t n1, std::int64_t n2,
                           std::uint64_t seed, std::int64_t oracle_cap_elems) {
    ProblemInstance inst = make_instance(model, n1, n2, seed);
    const std::int64_t o = inst.prog.output_size();
    const std::int64_t oracle_size = std::max(n1, n2) * o * inst.prog.param_count();
    const std::int64_t cap = resolve_oracle_cap(oracle_cap_elems);
    if (oracle_size > cap) {
        throw ResourceCapError("dense oracle size n*o*p = " + std::to_string(oracle_size) +
                               " exceeds cap " + std::to_string(cap));
    }
    std::vector<std::pair<std::string, NtkMatrix>> results;
    results.emplace_back("jacobian_contraction",
                         ntk_jacobian_contraction(inst.prog, inst.params, inst.x1, inst.x2));
    results.emplace_back("ntk_vector_products",
                         ntk_vector_products(inst.prog, inst.params, inst.x1, inst.x2));
    results.emplace_back("structured_derivatives",
                         ntk_structured_derivatives(inst.prog, inst.params, inst.x1, inst.x2));
    results.emplace_back("dense_oracle", dense_ntk_oracle(inst.prog, inst.params, inst.x1, inst.x2));

    CheckPointResult out;
    ordered_json errors;
    for (std::size_t a = 0; a < results.size(); ++a) {
        ordered_json row;
        for (std::size_t b = 0; b < results.size(); ++b) {
            const double err = rel_frobenius_diff(results[a].second.values, results[b].second.values);
            row[results[b].first] = err;
            out.max_error = std::max(out.max_error, err);
        }
        errors[results[a].first] = row;
    }
    out.json["model"] = spec_json(model);
    out.json["n1"] = n1;
    out.json["n2"] = n2;
    out.json["error_matrix"] = errors;
    out.json["max_error"] = out.max_error;
    return out;
}

CheckOutcome finish_check(std::vector<CheckPointResult> points, double tol) {
    CheckOutcome outcome;
    ordered_json j;
    j["points"] = ordered_json::array();
    for (auto& p : points) {
        outcome.max_error = std::max(outcome.max_error, p.max_error);
        j["points"].push_back(p.json);
    }
    outcome.ok = outcome.max_error <= tol;
    j["max_error"] = outcome.max_error;
    j["tolerance"] = tol;
    j["ok"] = outcome.ok;
    outcome.report_json = j.dump(2) + "\n";
    return outcome;
}

}  // namespace

CheckOutcome run_check(const RunConfig& config, bool corrupt_structure_rule) {
    CorruptionGuard guard(corrupt_structure_rule);
    std::vector<CheckPointResult> points;
    points.push_back(check_one(config.model, config.n1, config.n2, config.seed,
                               config.oracle_cap_elems));
    return finish_check(std::move(points), config.check_tol);
}

CheckOutcome run_check_default(std::uint64_t seed, double tol, std::int64_t oracle_cap_elems,
                               bool corrupt_structure_rule) {
    CorruptionGuard guard(corrupt_structure_rule);
    std::vector<CheckPointResult> points;
    auto fcn = [&](int t, int w, int o) {
        ModelSpec spec;
        spec.family = ModelSpec::Family::Fcn;
        spec.depth = t;
        spec.width = w;
        spec.output_size = o;
        return spec;
    };
    auto cnn = [&](int t, int d, int f, int w, int o) {
        ModelSpec spec;
        spec.family = ModelSpec::Family::Cnn;
        spec.depth = t;
        spec.width = w;
        spec.output_size = o;
        spec.pixels_h = d;
        spec.pixels_w = 1;
        spec.filter_h = f;
        spec.filter_w = 1;
        return spec;
    };
    points.push_back(check_one(fcn(2, 8, 3), 2, 2, seed, oracle_cap_elems));
    points.push_back(check_one(fcn(1, 4, 2), 1, 2, seed + 1, oracle_cap_elems));
    points.push_back(check_one(fcn(0, 4, 4), 2, 1, seed + 2, oracle_cap_elems));
    points.push_back(check_one(cnn(2, 8, 3, 2, 2), 2, 2, seed + 3, oracle_cap_elems));
    points.push_back(check_one(cnn(1, 9, 3, 2, 5), 2, 1, seed + 4, oracle_cap_elems));
    return finish_check(std::move(points), tol);
}

std::string run_cost(const RunConfig& config) {
    Program prog = build_model(config.model);
    ordered_json j;
    j["model"] = spec_json(config.model);
    j["n1"] = config.n1;
    j["n2"] = config.n2;
    auto one = [&](Method m) { return estimate_json(predict_generic(prog, m, config.n1, config.n2)); };
    if (config.method == Method::Auto) {
        j["estimates"]["jacobian_contraction"] = one(Method::JacobianContraction);
        j["estimates"]["ntk_vector_products"] = one(Method::NtkVectorProducts);
        j["estimates"]["structured_derivatives"] = one(Method::StructuredDerivatives);
        j["selected"] = method_name(select_method(prog, config.n1, config.n2));
    } else {
        j["estimates"][method_name(config.method)] = one(config.method);
    }
    return j.dump(2) + "\n";
}

const char* SweepPoint::csv_header() {
    return "w,o,n,t,d,f,method,measured_flops,flops_per_entry,predicted_flops,peak_bytes,error";
}

std::string SweepPoint::csv_row() const {
    std::ostringstream os;
    os << w << "," << o << "," << n << "," << t << "," << d << "," << f << "," << method << ",";
    if (error.empty()) {
        os << measured_flops << "," << flops_per_entry << "," << predicted_flops << ","
           << peak_bytes << ",";
    } else {
        std::string clean = error;
        for (char& c : clean) {
            if (c == ',' || c == '\n') c = ';';
        }
        os << ",,,," << clean;
    }
    return os.str();
}

SweepPoint run_sweep_point(const ModelSpec& model, Method method, std::int64_t n,
                           std::uint64_t seed) {
    SweepPoint point;
    point.w = model.width;
    point.o = model.output_size;
    point.n = n;
    point.t = model.depth;
    point.d = model.family == ModelSpec::Family::Cnn ? model.pixel_count() : 1;
    point.f = model.family == ModelSpec::Family::Cnn ? model.filter_size() : 1;
    point.method = method_name(method);
    try {
        ProblemInstance inst = make_instance(model, n, n, seed);
        Method m = method == Method::Auto ? select_method(inst.prog, n, n) : method;
        point.method = method_name(m);
        point.predicted_flops = predict_generic(inst.prog, m, n, n).flops;
        CountingSession session;
        (void)compute_ntk(inst.prog, inst.params, inst.x1, inst.x2, m);
        point.measured_flops = session.counter().fused_multiply_adds();
        point.peak_bytes = session.counter().peak_live_bytes();
        const std::int64_t o = inst.prog.output_size();
        point.flops_per_entry =
            static_cast<double>(point.measured_flops) / static_cast<double>(n * n * o * o);
    } catch (const NtkError& e) {
        point.error = e.what();
    }
    return point;
}

}  // namespace ntk
