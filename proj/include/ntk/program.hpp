#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ntk/rng.hpp"
#include "ntk/tensor.hpp"

namespace ntk {

enum class PrimitiveKind {
    MatMul,
    Conv2dCircular,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Reshape,
    Transpose,
    BroadcastInDim,
    ReduceSum,
    GlobalAvgPool,
};

const char* kind_name(PrimitiveKind kind);
// Every kind except Relu is linear in all of its inputs.
bool is_linear(PrimitiveKind kind);

struct NodeAttrs {
    double scale = 1.0;             // Scale
    Shape target_shape;             // Reshape, BroadcastInDim
    std::vector<int> perm;          // Transpose
    std::vector<int> axes;          // ReduceSum
    std::vector<int> broadcast_dims;  // BroadcastInDim
};

// A node input: an earlier node's output, a trainable parameter slot, the
// program input, or a captured constant (linearized programs only).
struct ValueRef {
    enum class Kind { Node, Param, Input, Const } kind;
    int index = 0;

    static ValueRef node(int i) { return {Kind::Node, i}; }
    static ValueRef param(int i) { return {Kind::Param, i}; }
    static ValueRef input() { return {Kind::Input, 0}; }
    static ValueRef constant(int i) { return {Kind::Const, i}; }
};

struct Node {
    int id = 0;
    PrimitiveKind kind = PrimitiveKind::MatMul;
    std::vector<ValueRef> inputs;
    NodeAttrs attrs;
    Shape out_shape;  // filled by Program::finalize

    // Index into `inputs` of the parameter slot, if any.
    std::optional<int> param_input() const;
};

// A DAG of primitives over parameter slots and one input placeholder,
// topologically ordered (node ids equal positions).
struct Program {
    std::vector<Node> nodes;
    std::vector<Shape> param_shapes;
    std::vector<Shape> const_shapes;  // non-empty only for linearized programs
    Shape input_shape;
    int output_node = -1;

    std::int64_t param_count() const;
    std::int64_t output_size() const { return nodes[output_node].out_shape.numel(); }
    // Infers node output shapes and checks the DAG invariants. Throws
    // DimensionError naming the offending node.
    void finalize();
};

// Shape of one primitive application given resolved input shapes.
Shape infer_node_shape(const Node& node, const std::vector<Shape>& input_shapes);
// Applies one primitive to resolved input values.
Tensor apply_node(const Node& node, const std::vector<Tensor>& inputs);

struct ModelSpec {
    enum class Family { Fcn, Cnn };
    enum class Nonlinearity { Relu, Identity };

    Family family = Family::Fcn;
    int depth = 1;        // t: number of hidden layers
    int width = 1;        // w: hidden width / channel count
    int output_size = 1;  // o
    int input_dim = 0;    // fcn input size; 0 means "equal to width"
    int pixels_h = 0, pixels_w = 0;  // cnn spatial extents
    int filter_h = 0, filter_w = 0;  // cnn filter extents
    Nonlinearity nonlinearity = Nonlinearity::Relu;
    bool bias = false;

    std::int64_t pixel_count() const { return std::int64_t(pixels_h) * pixels_w; }
    std::int64_t filter_size() const { return std::int64_t(filter_h) * filter_w; }

    static ModelSpec from_json(const std::string& text);
    std::string to_json() const;
};

// t+1 matmul layers interleaved with t nonlinearities; 2t+1 primitives.
Program build_fcn(const ModelSpec& spec);
// t circular conv layers with nonlinearities, then global average pooling and
// a dense readout; 2t+2 primitives.
Program build_cnn(const ModelSpec& spec);
Program build_model(const ModelSpec& spec);

// Parameters drawn i.i.d. Gaussian scaled by 1/sqrt(fan-in), in block order.
std::vector<Tensor> init_params(const Program& prog, Rng& rng);
// Batch of standard Gaussian inputs, shape (n, *input_shape).
std::vector<Tensor> random_inputs(const Program& prog, std::int64_t n, Rng& rng);

// Evaluates each node for one input; returns the per-node value table.
std::vector<Tensor> eval_nodes(const Program& prog, const std::vector<Tensor>& params,
                               const Tensor& x, const std::vector<Tensor>& consts = {});
// Batch evaluation; x_batch holds n tensors of input_shape, output is (n, o).
Tensor evaluate(const Program& prog, const std::vector<Tensor>& params,
                const std::vector<Tensor>& x_batch);

}  // namespace ntk
