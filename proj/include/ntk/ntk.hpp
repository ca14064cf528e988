#pragma once

#include <cstdint>
#include <vector>

#include "ntk/autodiff.hpp"
#include "ntk/mjjmp.hpp"
#include "ntk/program.hpp"

namespace ntk {

enum class Method { JacobianContraction, NtkVectorProducts, StructuredDerivatives, Auto };

const char* method_name(Method method);
Method method_from_name(const std::string& name);

// Batched tangent kernel. Flattening is batch-major then output-major:
// flat row = input_index * o + output_index.
struct NtkMatrix {
    std::int64_t n1 = 0, n2 = 0, o = 0;
    Tensor values;  // (n1, n2, o, o)

    double entry(std::int64_t i, std::int64_t j, std::int64_t a, std::int64_t b) const {
        return values.at(((i * n2 + j) * o + a) * o + b);
    }
    Tensor flat() const;  // (n1*o, n2*o)
    static NtkMatrix from_flat(const Tensor& flat, std::int64_t n1, std::int64_t n2,
                               std::int64_t o);
};

// Theta = sum_l J1^l (J2^l)^T, contracted one parameter block at a time.
NtkMatrix ntk_jacobian_contraction(const Program& prog, const Params& params, const Batch& x1,
                                   const Batch& x2);

// Theta columns via JVP(VJP(e_v)) per input pair, with per-side residuals
// computed once and reused across pairs.
NtkMatrix ntk_vector_products(const Program& prog, const Params& params, const Batch& x1,
                              const Batch& x2);

// Linearize, compute primitive-output cotangents without weight-space
// cotangents, then accumulate one structured MJJMP per summand.
NtkMatrix ntk_structured_derivatives(const Program& prog, const Params& params, const Batch& x1,
                                     const Batch& x2, JMode j_mode = JMode::Rule,
                                     ContractionOrder order = ContractionOrder::Auto);

// Dense reference: materialized Jacobians multiplied directly.
NtkMatrix dense_ntk_oracle(const Program& prog, const Params& params, const Batch& x1,
                           const Batch& x2);

NtkMatrix compute_ntk(const Program& prog, const Params& params, const Batch& x1, const Batch& x2,
              Method method);

// v in R^{n2 o} -> Theta v in R^{n1 o} without materializing Theta.
// Residuals are cached at construction; one application costs one pullback
// and one pushforward per input.
class NtkVectorProductOperator {
public:
    NtkVectorProductOperator(const Program& prog, const Params& params, const Batch& x1,
                             const Batch& x2);
    std::vector<double> apply(const std::vector<double>& v) const;
    std::int64_t rows() const { return n1_ * o_; }
    std::int64_t cols() const { return n2_ * o_; }

private:
    const Program& prog_;
    Params params_;
    Batch x2_;
    LinearizedProgram lin1_;
    std::vector<EvalTrace> traces2_;
    std::int64_t n1_, n2_, o_;
};

}  // namespace ntk
