#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "ntk/program.hpp"

namespace ntk {

using Params = std::vector<Tensor>;
using Batch = std::vector<Tensor>;

struct EvalTrace {
    std::vector<Tensor> values;  // per node
};

EvalTrace forward_trace(const Program& prog, const Params& params, const Tensor& x);

// Transpose rule for one primitive: pull an R-row cotangent matrix
// (R, numel(output)) back to (R, numel(inputs[which])). Counts the arithmetic
// it performs.
Tensor node_transpose(const Node& node, const std::vector<Tensor>& input_values,
                      const Tensor& cot_rows, int which_input);

// Directional derivative of one linear primitive w.r.t. a single input slot.
Tensor node_tangent(const Node& node, const std::vector<Tensor>& input_values,
                    const Tensor& tangent, int which_input);

// A program with only linear primitives: parameter slots are tangent inputs,
// per-input constants are captured from the primal evaluation, and ReLU is
// replaced by multiplication with a captured 0/1 mask.
struct LinearizedProgram {
    Program linear;
    // consts[input_index][slot] holds the captured values for one primal input.
    std::vector<std::vector<Tensor>> consts;
    // Linear node ids consuming each parameter block.
    std::vector<std::vector<int>> param_consumers;

    // Fused accumulate plan: Add nodes whose two operands are matmul/conv
    // nodes consumed only by the Add evaluate as a single accumulation.
    struct FusedAdd {
        int add_node, lhs, rhs;
    };
    std::vector<FusedAdd> fused;

    std::int64_t batch_size() const { return static_cast<std::int64_t>(consts.size()); }
    // Evaluates the tangent map for one captured input; returns the output
    // node value.
    Tensor eval(std::int64_t input_index, const Params& theta_tangent) const;
    // Per-node values of the tangent evaluation (fused operands share storage
    // with their Add node).
    std::vector<Tensor> eval_nodes_linear(std::int64_t input_index,
                                          const Params& theta_tangent) const;
    // Reverse sweep: cotangent matrices (rows x numel(node)) of the output
    // w.r.t. each node in `wanted`, seeded with `seed` (rows x o).
    std::vector<Tensor> node_cotangents(std::int64_t input_index, const Tensor& seed,
                                        const std::vector<int>& wanted) const;
};

LinearizedProgram linearize(const Program& prog, const Params& params, const Batch& x_batch);
// Same linear structure, but with constant shapes only (no captured values);
// used for shape-level cost analysis.
LinearizedProgram linearize_shapes(const Program& prog);

// Forward-mode product [df/dtheta] theta_t per input, shape (n, o).
Tensor jvp(const Program& prog, const Params& params, const Batch& x_batch,
           const Params& theta_tangent);

// Reverse-mode pullbacks. The batched form returns one cotangent set per
// input; vjp_summed accumulates them into the gradient convention.
Params vjp_from_trace(const Program& prog, const Params& params, const EvalTrace& trace,
                      const Tensor& x, const std::vector<double>& cot_out);
std::vector<Params> vjp(const Program& prog, const Params& params, const Batch& x_batch,
                        const Tensor& cot_batch);
Params vjp_summed(const Program& prog, const Params& params, const Batch& x_batch,
                  const Tensor& cot_batch);

enum class JacobianMode { Forward, Reverse, Auto };

// Dense Jacobian, shape (n, o, p) with parameter blocks concatenated in
// block order. Reverse mode runs o identity-row pullbacks; forward mode runs
// p identity-column pushforwards; Auto picks forward iff p < n*o.
Tensor jacobian(const Program& prog, const Params& params, const Batch& x_batch,
                JacobianMode mode = JacobianMode::Auto);

// Emits per-parameter-block batched cotangents J^l of shape (n*o, p_l) in
// reverse topological block order, holding only the live cotangent frontier
// in between. Rows are input-major (row = input*o + output).
class BlockCotangentStream {
public:
    BlockCotangentStream(const Program& prog, const Params& params, const Batch& x_batch);
    std::optional<std::pair<int, Tensor>> next();

private:
    const Program& prog_;
    std::vector<EvalTrace> traces_;
    Batch xs_;
    std::vector<std::vector<Tensor>> cots_;  // [input][node] live cotangents
    std::vector<int> pending_consumers_;     // per param block
    std::vector<bool> block_touched_;
    std::vector<Tensor> block_acc_;          // per param block (n*o, p_l)
    std::vector<int> ready_;                 // blocks ready to emit (stack)
    int next_node_;
    std::int64_t n_, o_;
    const Params& params_;

    void advance_node();
};

}  // namespace ntk
