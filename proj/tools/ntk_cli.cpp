// Command-line front end for the NTK engine. Talks to the core exclusively
// through the C API in ntk/ntk_c.h.
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ntk/ntk_c.h"

namespace {

using nlohmann::json;

int report_error(int code) {
    std::cerr << "error: " << ntk_last_error() << "\n";
    return code;
}

bool write_output(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return true;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) {
        std::cerr << "error: cannot write " << out_path << "\n";
        return false;
    }
    out << text;
    return true;
}

struct CommonOpts {
    std::string model_path;
    std::string method = "auto";
    std::int64_t n1 = 1, n2 = 1;
    std::uint64_t seed = 0;
    bool count_flops = false;
    bool values = false;
    bool timing = false;
    bool sequential = true;
    std::string out_path;
    std::string format = "json";
};

void add_common(CLI::App* cmd, CommonOpts* opts, bool with_method = true) {
    cmd->add_option("--model", opts->model_path, "Path to a model spec JSON file");
    if (with_method) {
        cmd->add_option("--method", opts->method,
                        "jacobian-contraction | ntk-vector-products | structured-derivatives | "
                        "auto")
            ->default_val("auto");
    }
    cmd->add_option("--n1", opts->n1, "Left batch size")->default_val(1);
    cmd->add_option("--n2", opts->n2, "Right batch size")->default_val(1);
    cmd->add_option("--seed", opts->seed, "Seed for parameters and inputs")->default_val(0);
    cmd->add_flag("--count-flops", opts->count_flops, "Run with the FLOP counter enabled");
    cmd->add_option("--out", opts->out_path, "Output file (stdout if omitted)");
    cmd->add_option("--format", opts->format, "json | csv")->default_val("json");
    cmd->add_flag("--sequential", opts->sequential,
                  "Force sequential execution (always on; accepted for compatibility)");
}

int load_model(const std::string& path, ntk_model** model) {
    if (path.empty()) {
        std::cerr << "error: --model is required\n";
        return NTK_ERR_SPEC;
    }
    const int rc = ntk_model_from_file(path.c_str(), model);
    if (rc != NTK_OK) {
        return report_error(rc);
    }
    return NTK_OK;
}

std::string sweep_csv_header() {
    return "w,o,n,t,d,f,method,measured_flops,flops_per_entry,predicted_flops,peak_bytes,error";
}

// One sweep/compute row in the stable CSV schema.
std::string result_to_csv_row(const json& result, const std::string& error) {
    const json model = result.value("model", json::object());
    std::ostringstream os;
    const std::string family = model.value("family", "fcn");
    std::int64_t d = 1, f = 1;
    if (family == "cnn") {
        const auto px = model.value("pixels", json::array({1, 1}));
        const auto fl = model.value("filter", json::array({1, 1}));
        d = px[0].get<std::int64_t>() * px[1].get<std::int64_t>();
        f = fl[0].get<std::int64_t>() * fl[1].get<std::int64_t>();
    }
    os << model.value("width", 0) << "," << model.value("output_size", 0) << ","
       << result.value("n1", 0) << "," << model.value("depth", 0) << "," << d << "," << f << ","
       << result.value("method", "") << ",";
    if (!error.empty()) {
        std::string clean = error;
        for (char& c : clean) {
            if (c == ',' || c == '\n') c = ';';
        }
        os << ",,,," << clean;
        return os.str();
    }
    const json measured = result.value("measured", json::object());
    const json predicted = result.value("predicted", json::object());
    os << measured.value("flops", 0LL) << "," << measured.value("flops_per_entry", 0.0) << ","
       << predicted.value("flops", 0LL) << "," << measured.value("peak_bytes", 0LL) << ",";
    return os.str();
}

int cmd_compute(const CommonOpts& opts) {
    ntk_model* model = nullptr;
    int rc = load_model(opts.model_path, &model);
    if (rc != NTK_OK) return rc;
    char* out = nullptr;
    rc = ntk_compute(model, opts.method.c_str(), opts.n1, opts.n2, opts.seed,
                     opts.count_flops || opts.format == "csv" ? 1 : 0, opts.values ? 1 : 0,
                     opts.timing ? 1 : 0, 0, &out);
    ntk_model_free(model);
    if (rc != NTK_OK) return report_error(rc);
    std::string text(out);
    ntk_string_free(out);
    if (opts.format == "csv") {
        const json result = json::parse(text);
        text = sweep_csv_header() + "\n" + result_to_csv_row(result, "") + "\n";
    }
    return write_output(text, opts.out_path) ? 0 : 1;
}

int cmd_check(const CommonOpts& opts, double tol, bool corrupt) {
    char* out = nullptr;
    int rc;
    if (opts.model_path.empty()) {
        rc = ntk_check_default(opts.seed, tol, 0, corrupt ? 1 : 0, &out);
    } else {
        ntk_model* model = nullptr;
        rc = load_model(opts.model_path, &model);
        if (rc != NTK_OK) return rc;
        rc = ntk_check(model, opts.n1, opts.n2, opts.seed, tol, 0, corrupt ? 1 : 0, &out);
        ntk_model_free(model);
    }
    if (out) {
        std::string text(out);
        ntk_string_free(out);
        if (!write_output(text, opts.out_path)) return 1;
    }
    if (rc != NTK_OK) {
        std::cerr << "error: " << ntk_last_error() << "\n";
        return rc;
    }
    return 0;
}

int cmd_cost(const CommonOpts& opts) {
    ntk_model* model = nullptr;
    int rc = load_model(opts.model_path, &model);
    if (rc != NTK_OK) return rc;
    char* out = nullptr;
    rc = ntk_cost(model, opts.method.c_str(), opts.n1, opts.n2, &out);
    ntk_model_free(model);
    if (rc != NTK_OK) return report_error(rc);
    std::string text(out);
    ntk_string_free(out);
    return write_output(text, opts.out_path) ? 0 : 1;
}

struct SweepOpts {
    std::string family = "fcn";
    std::vector<std::int64_t> ws, os_, ns, ts, ds, fs;
    std::vector<std::string> methods;
    std::int64_t input_dim = 0;
    std::uint64_t seed = 0;
    std::string out_path;
};

int cmd_sweep(const SweepOpts& opts) {
    std::ostringstream csv;
    csv << sweep_csv_header() << "\n";
    auto ds = opts.ds.empty() ? std::vector<std::int64_t>{1} : opts.ds;
    auto fs = opts.fs.empty() ? std::vector<std::int64_t>{1} : opts.fs;
    for (std::int64_t t : opts.ts) {
        for (std::int64_t w : opts.ws) {
            for (std::int64_t o : opts.os_) {
                for (std::int64_t d : ds) {
                    for (std::int64_t f : fs) {
                        json spec;
                        spec["family"] = opts.family;
                        spec["depth"] = t;
                        spec["width"] = w;
                        spec["output_size"] = o;
                        if (opts.family == "cnn") {
                            spec["pixels"] = d;
                            spec["filter"] = f;
                        } else if (opts.input_dim > 0) {
                            spec["input_dim"] = opts.input_dim;
                        }
                        for (std::int64_t n : opts.ns) {
                            for (const std::string& method : opts.methods) {
                                ntk_model* model = nullptr;
                                int rc =
                                    ntk_model_from_json(spec.dump().c_str(), &model);
                                if (rc != NTK_OK) {
                                    json stub;
                                    stub["model"] = spec;
                                    stub["n1"] = n;
                                    stub["method"] = method;
                                    csv << result_to_csv_row(stub, ntk_last_error()) << "\n";
                                    continue;
                                }
                                char* out = nullptr;
                                rc = ntk_compute(model, method.c_str(), n, n, opts.seed, 1, 0, 0,
                                                 0, &out);
                                if (rc == NTK_OK) {
                                    csv << result_to_csv_row(json::parse(out), "") << "\n";
                                } else {
                                    json stub;
                                    stub["model"] = spec;
                                    stub["n1"] = n;
                                    stub["method"] = method;
                                    csv << result_to_csv_row(stub, ntk_last_error()) << "\n";
                                }
                                if (out) ntk_string_free(out);
                                ntk_model_free(model);
                            }
                        }
                    }
                }
            }
        }
    }
    return write_output(csv.str(), opts.out_path) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Finite-width neural tangent kernel computation and benchmarking"};
    app.require_subcommand(1);

    CommonOpts compute_opts;
    CLI::App* compute = app.add_subcommand("compute", "Compute an NTK and write the result");
    add_common(compute, &compute_opts);
    compute->add_flag("--values", compute_opts.values, "Include NTK entries in the output");
    compute->add_flag("--timing", compute_opts.timing, "Include wall-clock time (informational)");

    CommonOpts check_opts;
    double tol = 1e-9;
    bool corrupt = false;
    CLI::App* check = app.add_subcommand(
        "check", "Verify the three methods against the dense oracle (default grid or --model)");
    add_common(check, &check_opts, false);
    check->add_option("--tol", tol, "Max allowed pairwise relative Frobenius error")
        ->default_val(1e-9);
    check->add_flag("--corrupt-structure-rule", corrupt,
                    "Testing hook: corrupt a structure rule so the check must fail");

    CommonOpts cost_opts;
    CLI::App* cost = app.add_subcommand("cost", "Print the analytic cost prediction breakdown");
    add_common(cost, &cost_opts);

    SweepOpts sweep_opts;
    CLI::App* sweep = app.add_subcommand("sweep", "Benchmark a grid and emit CSV");
    sweep->add_option("--family", sweep_opts.family, "fcn | cnn")->default_val("fcn");
    sweep->add_option("--grid-w", sweep_opts.ws, "Widths")->delimiter(',');
    sweep->add_option("--grid-o", sweep_opts.os_, "Output sizes")->delimiter(',');
    sweep->add_option("--grid-n", sweep_opts.ns, "Batch sizes")->delimiter(',');
    sweep->add_option("--grid-t", sweep_opts.ts, "Depths")->delimiter(',');
    sweep->add_option("--grid-d", sweep_opts.ds, "Pixel counts (cnn)")->delimiter(',');
    sweep->add_option("--grid-f", sweep_opts.fs, "Filter sizes (cnn)")->delimiter(',');
    sweep->add_option("--methods", sweep_opts.methods, "Methods to run")->delimiter(',');
    sweep->add_option("--input-dim", sweep_opts.input_dim, "FCN input size (default: width)");
    sweep->add_option("--seed", sweep_opts.seed, "Seed")->default_val(0);
    sweep->add_option("--out", sweep_opts.out_path, "Output CSV path");

    CLI11_PARSE(app, argc, argv);

    if (compute->parsed()) return cmd_compute(compute_opts);
    if (check->parsed()) return cmd_check(check_opts, tol, corrupt);
    if (cost->parsed()) return cmd_cost(cost_opts);
    if (sweep->parsed()) return cmd_sweep(sweep_opts);
    return 0;
}
