#include "ntk/program.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace ntk {

const char* kind_name(PrimitiveKind kind) {
    switch (kind) {
        case PrimitiveKind::MatMul: return "matmul";
        case PrimitiveKind::Conv2dCircular: return "conv2d_circular";
        case PrimitiveKind::Add: return "add";
        case PrimitiveKind::Sub: return "sub";
        case PrimitiveKind::Mul: return "mul";
        case PrimitiveKind::Scale: return "scale";
        case PrimitiveKind::Relu: return "relu";
        case PrimitiveKind::Reshape: return "reshape";
        case PrimitiveKind::Transpose: return "transpose";
        case PrimitiveKind::BroadcastInDim: return "broadcast_in_dim";
        case PrimitiveKind::ReduceSum: return "reduce_sum";
        case PrimitiveKind::GlobalAvgPool: return "global_avg_pool";
    }
    return "?";
}

bool is_linear(PrimitiveKind kind) { return kind != PrimitiveKind::Relu; }

std::optional<int> Node::param_input() const {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].kind == ValueRef::Kind::Param) {
            return static_cast<int>(i);
        }
    }
    return std::nullopt;
}

std::int64_t Program::param_count() const {
    std::int64_t p = 0;
    for (const auto& s : param_shapes) {
        p += s.numel();
    }
    return p;
}

Shape infer_node_shape(const Node& node, const std::vector<Shape>& in) {
    switch (node.kind) {
        case PrimitiveKind::MatMul: {
            if (in.size() != 2 || in[0].rank() != 2 || in[1].rank() != 2 ||
                in[0].dim(1) != in[1].dim(0)) {
                throw DimensionError("node " + std::to_string(node.id) + " matmul mismatch: " +
                                     in[0].str() + " x " + in[1].str());
            }
            return Shape{in[0].dim(0), in[1].dim(1)};
        }
        case PrimitiveKind::Conv2dCircular: {
            if (in.size() != 2 || in[0].rank() != 3 || in[1].rank() != 4 ||
                in[0].dim(2) != in[1].dim(2)) {
                throw DimensionError("node " + std::to_string(node.id) + " conv mismatch: " +
                                     in[0].str() + " * " + in[1].str());
            }
            return Shape{in[0].dim(0), in[0].dim(1), in[1].dim(3)};
        }
        case PrimitiveKind::Add:
        case PrimitiveKind::Sub:
        case PrimitiveKind::Mul:
            if (in.size() != 2) {
                throw DimensionError("node " + std::to_string(node.id) + " needs two inputs");
            }
            return broadcast_shape(in[0], in[1]);
        case PrimitiveKind::Scale:
        case PrimitiveKind::Relu:
            return in[0];
        case PrimitiveKind::Reshape:
            if (node.attrs.target_shape.numel() != in[0].numel()) {
                throw DimensionError("node " + std::to_string(node.id) + " reshape " + in[0].str() +
                                     " to " + node.attrs.target_shape.str());
            }
            return node.attrs.target_shape;
        case PrimitiveKind::Transpose: {
            if (node.attrs.perm.size() != in[0].rank()) {
                throw DimensionError("node " + std::to_string(node.id) + " transpose rank mismatch");
            }
            std::vector<std::int64_t> d;
            for (int p : node.attrs.perm) {
                d.push_back(in[0].dim(p));
            }
            return Shape(d);
        }
        case PrimitiveKind::BroadcastInDim:
            return node.attrs.target_shape;
        case PrimitiveKind::ReduceSum: {
            std::vector<bool> reduce(in[0].rank(), false);
            for (int ax : node.attrs.axes) {
                if (ax < 0 || ax >= static_cast<int>(in[0].rank())) {
                    throw DimensionError("node " + std::to_string(node.id) + " reduce axis invalid");
                }
                reduce[ax] = true;
            }
            std::vector<std::int64_t> d;
            for (std::size_t i = 0; i < in[0].rank(); ++i) {
                if (!reduce[i]) d.push_back(in[0].dim(i));
            }
            return Shape(d);
        }
        case PrimitiveKind::GlobalAvgPool:
            if (in[0].rank() != 3) {
                throw DimensionError("node " + std::to_string(node.id) + " global_avg_pool needs rank 3");
            }
            return Shape{in[0].dim(2), 1};
    }
    throw NtkError("unreachable");
}

Tensor apply_node(const Node& node, const std::vector<Tensor>& in) {
    switch (node.kind) {
        case PrimitiveKind::MatMul: return matmul(in[0], in[1]);
        case PrimitiveKind::Conv2dCircular: return conv2d_circular(in[0], in[1]);
        case PrimitiveKind::Add: return add(in[0], in[1]);
        case PrimitiveKind::Sub: return sub(in[0], in[1]);
        case PrimitiveKind::Mul: return mul(in[0], in[1]);
        case PrimitiveKind::Scale: return scale(in[0], node.attrs.scale);
        case PrimitiveKind::Relu: return relu(in[0]);
        case PrimitiveKind::Reshape: return reshape(in[0], node.attrs.target_shape);
        case PrimitiveKind::Transpose: return transpose(in[0], node.attrs.perm);
        case PrimitiveKind::BroadcastInDim:
            return broadcast_in_dim(in[0], node.attrs.target_shape, node.attrs.broadcast_dims);
        case PrimitiveKind::ReduceSum: return reduce_sum(in[0], node.attrs.axes);
        case PrimitiveKind::GlobalAvgPool: return global_avg_pool(in[0]);
    }
    throw NtkError("unreachable");
}

void Program::finalize() {
    if (nodes.empty()) {
        throw SpecError("program has no nodes");
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        Node& node = nodes[i];
        node.id = static_cast<int>(i);
        int param_slots = 0;
        std::vector<Shape> in_shapes;
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Node:
                    if (ref.index < 0 || ref.index >= static_cast<int>(i)) {
                        throw SpecError("node " + std::to_string(i) +
                                        " references node " + std::to_string(ref.index) +
                                        " out of topological order");
                    }
                    in_shapes.push_back(nodes[ref.index].out_shape);
                    break;
                case ValueRef::Kind::Param:
                    if (ref.index < 0 || ref.index >= static_cast<int>(param_shapes.size())) {
                        throw SpecError("node " + std::to_string(i) + " references missing parameter");
                    }
                    ++param_slots;
                    in_shapes.push_back(param_shapes[ref.index]);
                    break;
                case ValueRef::Kind::Input:
                    in_shapes.push_back(input_shape);
                    break;
                case ValueRef::Kind::Const:
                    if (ref.index < 0 || ref.index >= static_cast<int>(const_shapes.size())) {
                        throw SpecError("node " + std::to_string(i) + " references missing constant");
                    }
                    in_shapes.push_back(const_shapes[ref.index]);
                    break;
            }
        }
        if (param_slots > 1) {
            throw SpecError("node " + std::to_string(i) + " has more than one parameter slot");
        }
        node.out_shape = infer_node_shape(node, in_shapes);
    }
    if (output_node < 0 || output_node >= static_cast<int>(nodes.size())) {
        throw SpecError("program output node is invalid");
    }
}

namespace {

ModelSpec::Nonlinearity parse_nonlinearity(const std::string& s) {
    if (s == "relu") return ModelSpec::Nonlinearity::Relu;
    if (s == "identity") return ModelSpec::Nonlinearity::Identity;
    throw SpecError("unknown nonlinearity '" + s + "'");
}

// Scalar pixel/filter counts denote a 1-D layout (d, 1).
void parse_extent_pair(const nlohmann::json& v, int& h, int& w, const char* what) {
    if (v.is_number_integer()) {
        h = v.get<int>();
        w = 1;
    } else if (v.is_array() && v.size() == 2) {
        h = v[0].get<int>();
        w = v[1].get<int>();
    } else {
        throw SpecError(std::string(what) + " must be an integer or a [h, w] pair");
    }
}

}  // namespace

ModelSpec ModelSpec::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("model spec is not valid JSON: ") + e.what());
    }
    ModelSpec spec;
    try {
        const std::string family = j.at("family").get<std::string>();
        if (family == "fcn") {
            spec.family = Family::Fcn;
        } else if (family == "cnn") {
            spec.family = Family::Cnn;
        } else {
            throw SpecError("unknown family '" + family + "'");
        }
        spec.depth = j.at("depth").get<int>();
        spec.width = j.at("width").get<int>();
        spec.output_size = j.at("output_size").get<int>();
        if (j.contains("input_dim")) spec.input_dim = j["input_dim"].get<int>();
        if (j.contains("pixels")) parse_extent_pair(j["pixels"], spec.pixels_h, spec.pixels_w, "pixels");
        if (j.contains("filter")) parse_extent_pair(j["filter"], spec.filter_h, spec.filter_w, "filter");
        if (j.contains("nonlinearity")) {
            spec.nonlinearity = parse_nonlinearity(j["nonlinearity"].get<std::string>());
        }
        if (j.contains("bias")) spec.bias = j["bias"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("model spec field error: ") + e.what());
    }
    return spec;
}

std::string ModelSpec::to_json() const {
    nlohmann::ordered_json j;
    j["family"] = family == Family::Fcn ? "fcn" : "cnn";
    j["depth"] = depth;
    j["width"] = width;
    j["output_size"] = output_size;
    if (family == Family::Fcn) {
        j["input_dim"] = input_dim > 0 ? input_dim : width;
    } else {
        j["pixels"] = {pixels_h, pixels_w};
        j["filter"] = {filter_h, filter_w};
    }
    j["nonlinearity"] = nonlinearity == Nonlinearity::Relu ? "relu" : "identity";
    j["bias"] = bias;
    return j.dump();
}

namespace {

void check_positive(std::int64_t v, const char* what) {
    if (v < 1) {
        throw SpecError(std::string(what) + " must be >= 1, got " + std::to_string(v));
    }
}

// Appends a dense layer (matmul of the parameter with `x`, optional bias).
ValueRef append_dense(Program& prog, ValueRef x, std::int64_t rows, std::int64_t cols, bool bias) {
    const int param_index = static_cast<int>(prog.param_shapes.size());
    prog.param_shapes.push_back(Shape{rows, cols});
    Node mm;
    mm.kind = PrimitiveKind::MatMul;
    mm.inputs = {ValueRef::param(param_index), x};
    prog.nodes.push_back(mm);
    ValueRef out = ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
    if (bias) {
        const int b_index = static_cast<int>(prog.param_shapes.size());
        prog.param_shapes.push_back(Shape{rows, 1});
        Node addn;
        addn.kind = PrimitiveKind::Add;
        addn.inputs = {out, ValueRef::param(b_index)};
        prog.nodes.push_back(addn);
        out = ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
    }
    return out;
}

ValueRef append_relu(Program& prog, ValueRef x) {
    Node n;
    n.kind = PrimitiveKind::Relu;
    n.inputs = {x};
    prog.nodes.push_back(n);
    return ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
}

}  // namespace

Program build_fcn(const ModelSpec& spec) {
    if (spec.family != ModelSpec::Family::Fcn) {
        throw SpecError("build_fcn requires family fcn");
    }
    check_positive(spec.width, "width");
    check_positive(spec.output_size, "output_size");
    if (spec.depth < 0) {
        throw SpecError("depth must be >= 0");
    }
    const std::int64_t w = spec.width;
    const std::int64_t d_in = spec.input_dim > 0 ? spec.input_dim : w;
    Program prog;
    prog.input_shape = Shape{d_in, 1};
    ValueRef x = ValueRef::input();
    std::int64_t in_size = d_in;
    for (int l = 0; l < spec.depth; ++l) {
        x = append_dense(prog, x, w, in_size, spec.bias);
        if (spec.nonlinearity == ModelSpec::Nonlinearity::Relu) {
            x = append_relu(prog, x);
        }
        in_size = w;
    }
    x = append_dense(prog, x, spec.output_size, in_size, spec.bias);
    prog.output_node = x.index;
    prog.finalize();
    return prog;
}

Program build_cnn(const ModelSpec& spec) {
    if (spec.family != ModelSpec::Family::Cnn) {
        throw SpecError("build_cnn requires family cnn");
    }
    check_positive(spec.width, "width");
    check_positive(spec.output_size, "output_size");
    check_positive(spec.pixels_h, "pixels");
    check_positive(spec.pixels_w, "pixels");
    check_positive(spec.filter_h, "filter");
    check_positive(spec.filter_w, "filter");
    if (spec.depth < 0) {
        throw SpecError("depth must be >= 0");
    }
    const std::int64_t w = spec.width;
    Program prog;
    prog.input_shape = Shape{spec.pixels_h, spec.pixels_w, w};
    ValueRef x = ValueRef::input();
    for (int l = 0; l < spec.depth; ++l) {
        const int param_index = static_cast<int>(prog.param_shapes.size());
        prog.param_shapes.push_back(Shape{spec.filter_h, spec.filter_w, w, w});
        Node conv;
        conv.kind = PrimitiveKind::Conv2dCircular;
        conv.inputs = {x, ValueRef::param(param_index)};
        prog.nodes.push_back(conv);
        x = ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
        if (spec.bias) {
            const int b_index = static_cast<int>(prog.param_shapes.size());
            prog.param_shapes.push_back(Shape{w});
            Node addn;
            addn.kind = PrimitiveKind::Add;
            addn.inputs = {x, ValueRef::param(b_index)};
            prog.nodes.push_back(addn);
            x = ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
        }
        if (spec.nonlinearity == ModelSpec::Nonlinearity::Relu) {
            x = append_relu(prog, x);
        }
    }
    Node pool;
    pool.kind = PrimitiveKind::GlobalAvgPool;
    pool.inputs = {x};
    prog.nodes.push_back(pool);
    x = ValueRef::node(static_cast<int>(prog.nodes.size()) - 1);
    x = append_dense(prog, x, spec.output_size, w, spec.bias);
    prog.output_node = x.index;
    prog.finalize();
    return prog;
}

Program build_model(const ModelSpec& spec) {
    return spec.family == ModelSpec::Family::Fcn ? build_fcn(spec) : build_cnn(spec);
}

std::vector<Tensor> init_params(const Program& prog, Rng& rng) {
    std::vector<Tensor> params;
    params.reserve(prog.param_shapes.size());
    for (const Shape& s : prog.param_shapes) {
        std::int64_t fan_in = 1;
        if (s.rank() == 2) {
            fan_in = s.dim(1);
        } else if (s.rank() == 4) {
            fan_in = s.dim(0) * s.dim(1) * s.dim(2);
        } else {
            fan_in = s.numel();
        }
        params.push_back(rng.gaussian_tensor(s, 1.0 / std::sqrt(static_cast<double>(fan_in))));
    }
    return params;
}

std::vector<Tensor> random_inputs(const Program& prog, std::int64_t n, Rng& rng) {
    std::vector<Tensor> xs;
    xs.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        xs.push_back(rng.gaussian_tensor(prog.input_shape));
    }
    return xs;
}

std::vector<Tensor> eval_nodes(const Program& prog, const std::vector<Tensor>& params,
                               const Tensor& x, const std::vector<Tensor>& consts) {
    if (x.shape() != prog.input_shape) {
        throw DimensionError("input shape " + x.shape().str() + " does not match program input " +
                             prog.input_shape.str());
    }
    for (std::size_t i = 0; i < prog.param_shapes.size(); ++i) {
        if (i >= params.size() || params[i].shape() != prog.param_shapes[i]) {
            throw DimensionError("parameter " + std::to_string(i) + " does not conform to " +
                                 prog.param_shapes[i].str());
        }
    }
    std::vector<Tensor> values(prog.nodes.size());
    std::vector<Tensor> inputs;
    for (const Node& node : prog.nodes) {
        inputs.clear();
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Node: inputs.push_back(values[ref.index]); break;
                case ValueRef::Kind::Param: inputs.push_back(params[ref.index]); break;
                case ValueRef::Kind::Input: inputs.push_back(x); break;
                case ValueRef::Kind::Const: inputs.push_back(consts.at(ref.index)); break;
            }
        }
        values[node.id] = apply_node(node, inputs);
    }
    return values;
}

Tensor evaluate(const Program& prog, const std::vector<Tensor>& params,
                const std::vector<Tensor>& x_batch) {
    const std::int64_t n = static_cast<std::int64_t>(x_batch.size());
    const std::int64_t o = prog.output_size();
    Tensor out(Shape{std::max<std::int64_t>(n, 1), o});
    for (std::int64_t i = 0; i < n; ++i) {
        auto values = eval_nodes(prog, params, x_batch[i]);
        const Tensor& y = values[prog.output_node];
        for (std::int64_t k = 0; k < o; ++k) {
            out.at(i * o + k) = y.at(k);
        }
    }
    return out;
}

}  // namespace ntk
