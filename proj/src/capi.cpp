#include "ntk/ntk_c.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "ntk/run.hpp"

struct ntk_model {
    ntk::ModelSpec spec;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) {
        std::memcpy(out, s.c_str(), s.size() + 1);
    }
    return out;
}

int fail(int code, const std::string& message) {
    g_last_error = message;
    return code;
}

// Maps engine exceptions onto the C error codes.
template <typename F>
int guarded(F&& f) {
    try {
        g_last_error.clear();
        return f();
    } catch (const ntk::SpecError& e) {
        return fail(NTK_ERR_SPEC, e.what());
    } catch (const ntk::DimensionError& e) {
        return fail(NTK_ERR_SPEC, e.what());
    } catch (const ntk::ResourceCapError& e) {
        return fail(NTK_ERR_RESOURCE_CAP, e.what());
    } catch (const std::exception& e) {
        return fail(NTK_ERR, e.what());
    }
}

ntk::Method parse_method(const char* method) {
    return ntk::method_from_name(method ? method : "auto");
}

}  // namespace

extern "C" {

const char* ntk_last_error(void) { return g_last_error.c_str(); }

void ntk_string_free(char* s) { std::free(s); }

int ntk_model_from_json(const char* json_text, ntk_model** out) {
    return guarded([&] {
        if (!json_text || !out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        auto spec = ntk::ModelSpec::from_json(json_text);
        // Validate eagerly so bad specs fail at creation time.
        (void)ntk::build_model(spec);
        *out = new ntk_model{spec};
        return static_cast<int>(NTK_OK);
    });
}

int ntk_model_from_file(const char* path, ntk_model** out) {
    return guarded([&] {
        if (!path || !out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        std::ifstream in(path);
        if (!in) {
            return fail(NTK_ERR_SPEC, std::string("cannot open model file ") + path);
        }
        std::ostringstream buffer;
        buffer << in.rdbuf();
        return ntk_model_from_json(buffer.str().c_str(), out);
    });
}

void ntk_model_free(ntk_model* model) { delete model; }

int ntk_model_describe(const ntk_model* model, char** json_out) {
    return guarded([&] {
        if (!model || !json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        *json_out = dup_string(model->spec.to_json());
        return static_cast<int>(NTK_OK);
    });
}

int ntk_compute(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
                uint64_t seed, int count_flops, int include_values, int timing,
                uint64_t mem_cap_bytes, char** json_out) {
    return guarded([&] {
        if (!model || !json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        ntk::RunConfig config;
        config.model = model->spec;
        config.method = parse_method(method);
        config.n1 = n1;
        config.n2 = n2;
        config.seed = seed;
        config.count_flops = count_flops != 0;
        config.include_values = include_values != 0;
        config.timing = timing != 0;
        config.mem_cap_bytes = mem_cap_bytes;
        *json_out = dup_string(ntk::run_compute(config));
        return static_cast<int>(NTK_OK);
    });
}

int ntk_check(const ntk_model* model, int64_t n1, int64_t n2, uint64_t seed, double tol,
              int64_t oracle_cap_elems, int corrupt_structure_rule, char** json_out) {
    return guarded([&] {
        if (!model || !json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        ntk::RunConfig config;
        config.model = model->spec;
        config.n1 = n1;
        config.n2 = n2;
        config.seed = seed;
        config.check_tol = tol > 0 ? tol : 1e-9;
        config.oracle_cap_elems = oracle_cap_elems;
        const auto outcome = ntk::run_check(config, corrupt_structure_rule != 0);
        *json_out = dup_string(outcome.report_json);
        if (!outcome.ok) {
            return fail(NTK_ERR_EQUIVALENCE, "equivalence check failed with max error " +
                                                 std::to_string(outcome.max_error));
        }
        return static_cast<int>(NTK_OK);
    });
}

int ntk_check_default(uint64_t seed, double tol, int64_t oracle_cap_elems,
                      int corrupt_structure_rule, char** json_out) {
    return guarded([&] {
        if (!json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        const auto outcome = ntk::run_check_default(seed, tol > 0 ? tol : 1e-9, oracle_cap_elems,
                                                    corrupt_structure_rule != 0);
        *json_out = dup_string(outcome.report_json);
        if (!outcome.ok) {
            return fail(NTK_ERR_EQUIVALENCE, "equivalence check failed with max error " +
                                                 std::to_string(outcome.max_error));
        }
        return static_cast<int>(NTK_OK);
    });
}

int ntk_cost(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
             char** json_out) {
    return guarded([&] {
        if (!model || !json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        ntk::RunConfig config;
        config.model = model->spec;
        config.method = parse_method(method);
        config.n1 = n1;
        config.n2 = n2;
        *json_out = dup_string(ntk::run_cost(config));
        return static_cast<int>(NTK_OK);
    });
}

int ntk_validate(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
                 uint64_t seed, char** json_out) {
    return guarded([&] {
        if (!model || !json_out) {
            return fail(NTK_ERR_SPEC, "null argument");
        }
        ntk::Program prog = ntk::build_model(model->spec);
        const auto report =
            ntk::validate_against_counter(prog, parse_method(method), n1, n2, seed);
        *json_out = dup_string(report.to_json());
        return static_cast<int>(NTK_OK);
    });
}

}  // extern "C"
