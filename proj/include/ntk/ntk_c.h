/* C interface to the NTK engine. All functions return an error code and
 * report results as JSON documents owned by the caller (free with
 * ntk_string_free). Handles are opaque; a model handle is immutable after
 * creation and safe to share across threads for read-only use. */
#ifndef NTK_C_H
#define NTK_C_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct ntk_model ntk_model;

enum {
    NTK_OK = 0,
    NTK_ERR = 1,
    NTK_ERR_SPEC = 2,
    NTK_ERR_EQUIVALENCE = 3,
    NTK_ERR_RESOURCE_CAP = 4
};

/* Message for the last error on the calling thread; empty string if none. */
const char* ntk_last_error(void);
void ntk_string_free(char* s);

/* Model spec JSON: {"family":"fcn","depth":...,"width":...,"output_size":...,
 * "input_dim":...,"nonlinearity":"relu","bias":false} or family "cnn" with
 * "pixels" and "filter" (integer totals or [h, w] pairs). */
int ntk_model_from_json(const char* json_text, ntk_model** out);
int ntk_model_from_file(const char* path, ntk_model** out);
void ntk_model_free(ntk_model* model);
int ntk_model_describe(const ntk_model* model, char** json_out);

/* method: "jacobian-contraction" | "ntk-vector-products" |
 * "structured-derivatives" | "auto".
 * Runs sequentially; the seed fully determines parameters and inputs.
 * mem_cap_bytes = 0 uses NTK_MEM_CAP_BYTES or a 4 GiB default. */
int ntk_compute(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
                uint64_t seed, int count_flops, int include_values, int timing,
                uint64_t mem_cap_bytes, char** json_out);

/* Three-way + dense-oracle equivalence. Returns NTK_OK when the maximum
 * pairwise relative Frobenius error is within tol; NTK_ERR_EQUIVALENCE when
 * not. oracle_cap_elems = 0 uses NTK_MEM_CAP_BYTES/8 or 1e6 elements.
 * corrupt_structure_rule is a negative-control test hook. */
int ntk_check(const ntk_model* model, int64_t n1, int64_t n2, uint64_t seed, double tol,
              int64_t oracle_cap_elems, int corrupt_structure_rule, char** json_out);

/* Equivalence over the built-in default model grid. */
int ntk_check_default(uint64_t seed, double tol, int64_t oracle_cap_elems,
                      int corrupt_structure_rule, char** json_out);

/* Analytic cost prediction with per-term breakdown; method "auto" reports
 * all three methods and the selected one. */
int ntk_cost(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
             char** json_out);

/* Measured-vs-predicted FLOP validation report. */
int ntk_validate(const ntk_model* model, const char* method, int64_t n1, int64_t n2,
                 uint64_t seed, char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* NTK_C_H */
