#include "ntk/autodiff.hpp"

#include <algorithm>
#include <cstring>

namespace ntk {

namespace {

std::int64_t rows_of(const Tensor& cot) { return cot.shape().dim(0); }

// out[r,:] (M,P) = lhs[r,:] (M,K) * rhs (K,P), optionally transposing rhs.
void matmul_rows(const double* lhs, const double* rhs, double* out, std::int64_t m,
                 std::int64_t k, std::int64_t p) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double a = lhs[i * k + kk];
            const double* b = rhs + kk * p;
            double* c = out + i * p;
            for (std::int64_t j = 0; j < p; ++j) {
                c[j] += a * b[j];
            }
        }
    }
}

Tensor reduce_cot_to_shape(const Tensor& cot, const Shape& out_shape, const Shape& in_shape) {
    const std::int64_t r = rows_of(cot);
    Tensor result(Shape{r, in_shape.numel()});
    if (in_shape == out_shape) {
        result = Tensor(result.shape(), cot.values());
        return result;
    }
    // Sum over axes where the input was broadcast (missing or extent 1).
    const std::size_t rank = out_shape.rank();
    const std::size_t off = rank - in_shape.rank();
    const auto in_strides = row_major_strides(in_shape);
    std::vector<std::int64_t> strides(rank, 0);
    for (std::size_t i = off; i < rank; ++i) {
        if (in_shape.dim(i - off) != 1) {
            strides[i] = in_strides[i - off];
        }
    }
    const std::int64_t out_numel = out_shape.numel();
    for (std::int64_t row = 0; row < r; ++row) {
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t dst = 0;
        const double* src = cot.data() + row * out_numel;
        double* res = result.data() + row * in_shape.numel();
        for (std::int64_t flat = 0; flat < out_numel; ++flat) {
            res[dst] += src[flat];
            for (std::size_t d = rank; d-- > 0;) {
                ++idx[d];
                dst += strides[d];
                if (idx[d] < out_shape.dim(d)) {
                    break;
                }
                idx[d] = 0;
                dst -= strides[d] * out_shape.dim(d);
            }
        }
    }
    count_flops(r * out_numel);
    return result;
}

// Multiplies each cotangent row elementwise by `other` broadcast to out_shape.
Tensor mul_cot_by_broadcast(const Tensor& cot, const Shape& out_shape, const Tensor& other) {
    const std::int64_t r = rows_of(cot);
    const std::int64_t out_numel = out_shape.numel();
    Tensor result(Shape{r, out_numel});
    const std::size_t rank = out_shape.rank();
    const std::size_t off = rank - other.shape().rank();
    const auto other_strides_own = row_major_strides(other.shape());
    std::vector<std::int64_t> strides(rank, 0);
    for (std::size_t i = off; i < rank; ++i) {
        if (other.shape().dim(i - off) != 1) {
            strides[i] = other_strides_own[i - off];
        }
    }
    for (std::int64_t row = 0; row < r; ++row) {
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t src = 0;
        for (std::int64_t flat = 0; flat < out_numel; ++flat) {
            result.at(row * out_numel + flat) = cot.at(row * out_numel + flat) * other.at(src);
            for (std::size_t d = rank; d-- > 0;) {
                ++idx[d];
                src += strides[d];
                if (idx[d] < out_shape.dim(d)) {
                    break;
                }
                idx[d] = 0;
                src -= strides[d] * out_shape.dim(d);
            }
        }
    }
    count_flops(r * out_numel);
    return result;
}

void accumulate(Tensor& dst, const Tensor& src) {
    for (std::int64_t i = 0; i < dst.numel(); ++i) {
        dst.at(i) += src.at(i);
    }
    count_flops(dst.numel());
}

}  // namespace

EvalTrace forward_trace(const Program& prog, const Params& params, const Tensor& x) {
    return EvalTrace{eval_nodes(prog, params, x)};
}

Tensor node_transpose(const Node& node, const std::vector<Tensor>& in, const Tensor& cot,
                      int which) {
    const std::int64_t r = rows_of(cot);
    switch (node.kind) {
        case PrimitiveKind::MatMul: {
            const std::int64_t m = node.out_shape.dim(0);
            const std::int64_t p = node.out_shape.dim(1);
            if (which == 0) {
                // d/dA of A(M,K)B(K,P): cot (M,P) x B^T (P,K).
                const Tensor& b = in[1];
                const std::int64_t k = b.shape().dim(0);
                Tensor bt = transpose(b, {1, 0});
                Tensor out(Shape{r, m * k});
                for (std::int64_t row = 0; row < r; ++row) {
                    matmul_rows(cot.data() + row * m * p, bt.data(), out.data() + row * m * k, m, p,
                                k);
                }
                count_flops(r * m * p * k);
                return out;
            }
            // d/dB: A^T (K,M) x cot (M,P).
            const Tensor& a = in[0];
            const std::int64_t k = a.shape().dim(1);
            Tensor at = transpose(a, {1, 0});
            Tensor out(Shape{r, k * p});
            for (std::int64_t row = 0; row < r; ++row) {
                matmul_rows(at.data(), cot.data() + row * m * p, out.data() + row * k * p, k, m, p);
            }
            count_flops(r * k * m * p);
            return out;
        }
        case PrimitiveKind::Conv2dCircular: {
            const Shape& xs = in[0].shape();
            const Shape& fs = in[1].shape();
            const std::int64_t dh = xs.dim(0), dw = xs.dim(1), cin = xs.dim(2);
            const std::int64_t fh = fs.dim(0), fw = fs.dim(1), cout = fs.dim(3);
            const std::int64_t ch = fh / 2, cw = fw / 2;
            if (which == 0) {
                const Tensor& f = in[1];
                Tensor out(Shape{r, dh * dw * cin});
                for (std::int64_t row = 0; row < r; ++row) {
                    const double* pc = cot.data() + row * dh * dw * cout;
                    double* po = out.data() + row * dh * dw * cin;
                    for (std::int64_t i = 0; i < dh; ++i) {
                        for (std::int64_t j = 0; j < dw; ++j) {
                            for (std::int64_t a = 0; a < fh; ++a) {
                                const std::int64_t ii = ((i - (a - ch)) % dh + dh) % dh;
                                for (std::int64_t b = 0; b < fw; ++b) {
                                    const std::int64_t jj = ((j - (b - cw)) % dw + dw) % dw;
                                    const double* crow = pc + (ii * dw + jj) * cout;
                                    const double* frow = f.data() + ((a * fw + b) * cin) * cout;
                                    double* orow = po + (i * dw + j) * cin;
                                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                                        double s = 0.0;
                                        const double* fc = frow + ci * cout;
                                        for (std::int64_t co = 0; co < cout; ++co) {
                                            s += fc[co] * crow[co];
                                        }
                                        orow[ci] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                count_flops(r * dh * dw * fh * fw * cin * cout);
                return out;
            }
            const Tensor& x = in[0];
            Tensor out(Shape{r, fh * fw * cin * cout});
            for (std::int64_t row = 0; row < r; ++row) {
                const double* pc = cot.data() + row * dh * dw * cout;
                double* po = out.data() + row * fh * fw * cin * cout;
                for (std::int64_t a = 0; a < fh; ++a) {
                    for (std::int64_t b = 0; b < fw; ++b) {
                        for (std::int64_t i = 0; i < dh; ++i) {
                            const std::int64_t ii = ((i + a - ch) % dh + dh) % dh;
                            for (std::int64_t j = 0; j < dw; ++j) {
                                const std::int64_t jj = ((j + b - cw) % dw + dw) % dw;
                                const double* xrow = x.data() + (ii * dw + jj) * cin;
                                const double* crow = pc + (i * dw + j) * cout;
                                double* orow = po + (a * fw + b) * cin * cout;
                                for (std::int64_t ci = 0; ci < cin; ++ci) {
                                    const double xv = xrow[ci];
                                    double* oc = orow + ci * cout;
                                    for (std::int64_t co = 0; co < cout; ++co) {
                                        oc[co] += xv * crow[co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            count_flops(r * dh * dw * fh * fw * cin * cout);
            return out;
        }
        case PrimitiveKind::Add:
            return reduce_cot_to_shape(cot, node.out_shape, in[which].shape());
        case PrimitiveKind::Sub: {
            Tensor reduced = reduce_cot_to_shape(cot, node.out_shape, in[which].shape());
            if (which == 1) {
                reduced = scale(reduced, -1.0);
            }
            return reduced;
        }
        case PrimitiveKind::Mul: {
            const Tensor& other = in[which == 0 ? 1 : 0];
            Tensor weighted = mul_cot_by_broadcast(cot, node.out_shape, other);
            return reduce_cot_to_shape(weighted, node.out_shape, in[which].shape());
        }
        case PrimitiveKind::Scale:
            return scale(cot, node.attrs.scale);
        case PrimitiveKind::Relu: {
            Tensor mask = relu_mask(in[0]);
            return mul_cot_by_broadcast(cot, node.out_shape, reshape(mask, node.out_shape));
        }
        case PrimitiveKind::Reshape:
            return Tensor(Shape{r, in[0].shape().numel()}, cot.values());
        case PrimitiveKind::Transpose: {
            // Scatter each cotangent row back through the permutation.
            const Shape& in_shape = in[0].shape();
            const std::int64_t n = in_shape.numel();
            Tensor out(Shape{r, n});
            const auto in_strides = row_major_strides(in_shape);
            const std::size_t rank = in_shape.rank();
            for (std::int64_t row = 0; row < r; ++row) {
                std::vector<std::int64_t> idx(rank, 0);
                std::int64_t src = 0;
                for (std::int64_t flat = 0; flat < n; ++flat) {
                    out.at(row * n + src) = cot.at(row * n + flat);
                    for (std::size_t d = rank; d-- > 0;) {
                        ++idx[d];
                        src += in_strides[node.attrs.perm[d]];
                        if (idx[d] < node.out_shape.dim(d)) {
                            break;
                        }
                        idx[d] = 0;
                        src -= in_strides[node.attrs.perm[d]] * node.out_shape.dim(d);
                    }
                }
            }
            return out;
        }
        case PrimitiveKind::BroadcastInDim: {
            // Sum over target axes that are not images of input axes.
            const Shape& in_shape = in[0].shape();
            const Shape& out_shape = node.out_shape;
            const std::int64_t out_numel = out_shape.numel();
            Tensor out(Shape{r, in_shape.numel()});
            const auto in_strides = row_major_strides(in_shape);
            std::vector<std::int64_t> strides(out_shape.rank(), 0);
            for (std::size_t i = 0; i < node.attrs.broadcast_dims.size(); ++i) {
                strides[node.attrs.broadcast_dims[i]] = in_strides[i];
            }
            for (std::int64_t row = 0; row < r; ++row) {
                std::vector<std::int64_t> idx(out_shape.rank(), 0);
                std::int64_t dst = 0;
                for (std::int64_t flat = 0; flat < out_numel; ++flat) {
                    out.at(row * in_shape.numel() + dst) += cot.at(row * out_numel + flat);
                    for (std::size_t d = out_shape.rank(); d-- > 0;) {
                        ++idx[d];
                        dst += strides[d];
                        if (idx[d] < out_shape.dim(d)) {
                            break;
                        }
                        idx[d] = 0;
                        dst -= strides[d] * out_shape.dim(d);
                    }
                }
            }
            count_flops(r * out_numel);
            return out;
        }
        case PrimitiveKind::ReduceSum: {
            // Spread each cotangent entry over the reduced axes.
            const Shape& in_shape = in[0].shape();
            const std::int64_t in_numel = in_shape.numel();
            const std::int64_t out_numel = node.out_shape.numel();
            std::vector<bool> reduce(in_shape.rank(), false);
            for (int ax : node.attrs.axes) {
                reduce[ax] = true;
            }
            const auto out_strides = row_major_strides(node.out_shape);
            std::vector<std::int64_t> map(in_shape.rank(), 0);
            {
                std::size_t k = 0;
                for (std::size_t i = 0; i < in_shape.rank(); ++i) {
                    if (!reduce[i]) map[i] = out_strides[k++];
                }
            }
            Tensor out(Shape{r, in_numel});
            for (std::int64_t row = 0; row < r; ++row) {
                std::vector<std::int64_t> idx(in_shape.rank(), 0);
                std::int64_t src = 0;
                for (std::int64_t flat = 0; flat < in_numel; ++flat) {
                    out.at(row * in_numel + flat) = cot.at(row * out_numel + src);
                    for (std::size_t d = in_shape.rank(); d-- > 0;) {
                        ++idx[d];
                        src += map[d];
                        if (idx[d] < in_shape.dim(d)) {
                            break;
                        }
                        idx[d] = 0;
                        src -= map[d] * in_shape.dim(d);
                    }
                }
            }
            return out;
        }
        case PrimitiveKind::GlobalAvgPool: {
            const Shape& in_shape = in[0].shape();
            const std::int64_t dh = in_shape.dim(0), dw = in_shape.dim(1), c = in_shape.dim(2);
            const double inv = 1.0 / static_cast<double>(dh * dw);
            Tensor out(Shape{r, dh * dw * c});
            for (std::int64_t row = 0; row < r; ++row) {
                for (std::int64_t s = 0; s < dh * dw; ++s) {
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        out.at(row * dh * dw * c + s * c + ch) = cot.at(row * c + ch) * inv;
                    }
                }
            }
            count_flops(r * dh * dw * c);
            return out;
        }
    }
    throw NtkError("unreachable");
}

Tensor node_tangent(const Node& node, const std::vector<Tensor>& in, const Tensor& tangent,
                    int which) {
    switch (node.kind) {
        case PrimitiveKind::MatMul:
        case PrimitiveKind::Conv2dCircular:
        case PrimitiveKind::Mul: {
            std::vector<Tensor> sub = in;
            sub[which] = reshape(tangent, in[which].shape());
            return apply_node(node, sub);
        }
        case PrimitiveKind::Add:
        case PrimitiveKind::Sub: {
            Tensor t = reshape(tangent, in[which].shape());
            Tensor out = add(t, zeros(node.out_shape));
            if (node.kind == PrimitiveKind::Sub && which == 1) {
                out = scale(out, -1.0);
            }
            return out;
        }
        case PrimitiveKind::Scale:
        case PrimitiveKind::Reshape:
        case PrimitiveKind::Transpose:
        case PrimitiveKind::BroadcastInDim:
        case PrimitiveKind::ReduceSum:
        case PrimitiveKind::GlobalAvgPool: {
            std::vector<Tensor> sub = in;
            sub[0] = reshape(tangent, in[0].shape());
            return apply_node(node, sub);
        }
        case PrimitiveKind::Relu:
            throw UnsupportedPrimitiveError("relu has no linear tangent rule");
    }
    throw NtkError("unreachable");
}

// ---------------------------------------------------------------------------
// Linearization

namespace {

struct CaptureRecipe {
    enum class Kind { NodeValue, ParamValue, InputValue, ReluMask } kind;
    int orig_index = 0;  // node id or param index; relu node id for masks
};

struct LinearBuilder {
    const Program& orig;
    Program linear;
    std::vector<CaptureRecipe> recipes;
    std::vector<std::optional<ValueRef>> tangent;  // per original node
    std::vector<int> node_const_slot;              // per original node, -1 if not captured
    std::vector<int> param_const_slot;
    int input_const_slot = -1;
    std::vector<int> relu_mask_slot;  // per original node

    explicit LinearBuilder(const Program& p)
        : orig(p),
          tangent(p.nodes.size()),
          node_const_slot(p.nodes.size(), -1),
          param_const_slot(p.param_shapes.size(), -1),
          relu_mask_slot(p.nodes.size(), -1) {
        linear.param_shapes = p.param_shapes;
        linear.input_shape = p.input_shape;
    }

    int add_const(const Shape& shape, CaptureRecipe recipe) {
        const int slot = static_cast<int>(linear.const_shapes.size());
        linear.const_shapes.push_back(shape);
        recipes.push_back(recipe);
        return slot;
    }

    // Captured primal value of an original operand.
    ValueRef const_of(const ValueRef& ref) {
        switch (ref.kind) {
            case ValueRef::Kind::Node: {
                if (node_const_slot[ref.index] < 0) {
                    node_const_slot[ref.index] =
                        add_const(orig.nodes[ref.index].out_shape,
                                  {CaptureRecipe::Kind::NodeValue, ref.index});
                }
                return ValueRef::constant(node_const_slot[ref.index]);
            }
            case ValueRef::Kind::Param: {
                if (param_const_slot[ref.index] < 0) {
                    param_const_slot[ref.index] = add_const(
                        orig.param_shapes[ref.index], {CaptureRecipe::Kind::ParamValue, ref.index});
                }
                return ValueRef::constant(param_const_slot[ref.index]);
            }
            case ValueRef::Kind::Input: {
                if (input_const_slot < 0) {
                    input_const_slot =
                        add_const(orig.input_shape, {CaptureRecipe::Kind::InputValue, 0});
                }
                return ValueRef::constant(input_const_slot);
            }
            case ValueRef::Kind::Const:
                throw UnsupportedPrimitiveError("cannot linearize an already-linearized program");
        }
        throw NtkError("unreachable");
    }

    std::optional<ValueRef> tangent_of(const ValueRef& ref) {
        switch (ref.kind) {
            case ValueRef::Kind::Node: return tangent[ref.index];
            case ValueRef::Kind::Param: return ValueRef::param(ref.index);
            case ValueRef::Kind::Input: return std::nullopt;  // inputs are not differentiated
            case ValueRef::Kind::Const:
                throw UnsupportedPrimitiveError("cannot linearize an already-linearized program");
        }
        throw NtkError("unreachable");
    }

    ValueRef emit(PrimitiveKind kind, std::vector<ValueRef> inputs, NodeAttrs attrs = {}) {
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.attrs = std::move(attrs);
        linear.nodes.push_back(n);
        return ValueRef::node(static_cast<int>(linear.nodes.size()) - 1);
    }

    // Broadcasts a tangent of `from` shape into `to` shape if needed.
    ValueRef broadcast_tangent(ValueRef t, const Shape& from, const Shape& to) {
        if (from == to) {
            return t;
        }
        NodeAttrs attrs;
        attrs.target_shape = to;
        const std::size_t off = to.rank() - from.rank();
        // Trailing-aligned broadcast; extent-1 axes are not representable by
        // broadcast_in_dim alone, so reshape them away first.
        std::vector<std::int64_t> kept;
        std::vector<int> dims;
        for (std::size_t i = 0; i < from.rank(); ++i) {
            if (from.dim(i) != 1 || to.dim(i + off) == 1) {
                kept.push_back(from.dim(i));
                dims.push_back(static_cast<int>(i + off));
            }
        }
        if (kept.size() != from.rank()) {
            NodeAttrs rs;
            rs.target_shape = Shape(kept);
            t = emit(PrimitiveKind::Reshape, {t}, rs);
        }
        attrs.broadcast_dims = dims;
        return emit(PrimitiveKind::BroadcastInDim, {t}, attrs);
    }

    void build() {
        for (const Node& node : orig.nodes) {
            tangent[node.id] = build_node(node);
        }
        const auto out_t = tangent[orig.output_node];
        if (!out_t.has_value()) {
            throw NtkError("program output does not depend on parameters");
        }
        ValueRef out = *out_t;
        if (out.kind != ValueRef::Kind::Node) {
            NodeAttrs rs;
            rs.target_shape = orig.nodes[orig.output_node].out_shape;
            out = emit(PrimitiveKind::Reshape, {out}, rs);
        }
        linear.output_node = out.index;
        linear.finalize();
    }

    std::optional<ValueRef> build_node(const Node& node) {
        switch (node.kind) {
            case PrimitiveKind::MatMul:
            case PrimitiveKind::Conv2dCircular:
            case PrimitiveKind::Mul: {
                auto ta = tangent_of(node.inputs[0]);
                auto tb = tangent_of(node.inputs[1]);
                std::optional<ValueRef> parts[2];
                if (ta) {
                    parts[0] = emit(node.kind, {*ta, const_of(node.inputs[1])}, node.attrs);
                }
                if (tb) {
                    parts[1] = emit(node.kind, {const_of(node.inputs[0]), *tb}, node.attrs);
                }
                if (parts[0] && parts[1]) {
                    return emit(PrimitiveKind::Add, {*parts[0], *parts[1]});
                }
                if (parts[0]) return parts[0];
                if (parts[1]) return parts[1];
                return std::nullopt;
            }
            case PrimitiveKind::Add:
            case PrimitiveKind::Sub: {
                auto ta = tangent_of(node.inputs[0]);
                auto tb = tangent_of(node.inputs[1]);
                const Shape& sa = operand_shape(node.inputs[0]);
                const Shape& sb = operand_shape(node.inputs[1]);
                if (ta && tb) {
                    ValueRef a = broadcast_tangent(*ta, sa, node.out_shape);
                    ValueRef b = broadcast_tangent(*tb, sb, node.out_shape);
                    return emit(node.kind, {a, b});
                }
                if (ta) {
                    return broadcast_tangent(*ta, sa, node.out_shape);
                }
                if (tb) {
                    ValueRef b = broadcast_tangent(*tb, sb, node.out_shape);
                    if (node.kind == PrimitiveKind::Sub) {
                        NodeAttrs attrs;
                        attrs.scale = -1.0;
                        return emit(PrimitiveKind::Scale, {b}, attrs);
                    }
                    return b;
                }
                return std::nullopt;
            }
            case PrimitiveKind::Relu: {
                auto ta = tangent_of(node.inputs[0]);
                if (!ta) return std::nullopt;
                if (relu_mask_slot[node.id] < 0) {
                    relu_mask_slot[node.id] =
                        add_const(node.out_shape, {CaptureRecipe::Kind::ReluMask, node.id});
                }
                return emit(PrimitiveKind::Mul,
                            {ValueRef::constant(relu_mask_slot[node.id]), *ta});
            }
            case PrimitiveKind::Scale:
            case PrimitiveKind::Reshape:
            case PrimitiveKind::Transpose:
            case PrimitiveKind::BroadcastInDim:
            case PrimitiveKind::ReduceSum:
            case PrimitiveKind::GlobalAvgPool: {
                auto ta = tangent_of(node.inputs[0]);
                if (!ta) return std::nullopt;
                return emit(node.kind, {*ta}, node.attrs);
            }
        }
        throw NtkError("unreachable");
    }

    const Shape& operand_shape(const ValueRef& ref) const {
        switch (ref.kind) {
            case ValueRef::Kind::Node: return orig.nodes[ref.index].out_shape;
            case ValueRef::Kind::Param: return orig.param_shapes[ref.index];
            case ValueRef::Kind::Input: return orig.input_shape;
            case ValueRef::Kind::Const: break;
        }
        throw NtkError("unreachable");
    }
};

void plan_fusion(LinearizedProgram& lp) {
    const Program& prog = lp.linear;
    std::vector<int> consumers(prog.nodes.size(), 0);
    for (const Node& node : prog.nodes) {
        for (const ValueRef& ref : node.inputs) {
            if (ref.kind == ValueRef::Kind::Node) {
                ++consumers[ref.index];
            }
        }
    }
    ++consumers[prog.output_node];
    for (const Node& node : prog.nodes) {
        if (node.kind != PrimitiveKind::Add || node.inputs.size() != 2) continue;
        const ValueRef& a = node.inputs[0];
        const ValueRef& b = node.inputs[1];
        if (a.kind != ValueRef::Kind::Node || b.kind != ValueRef::Kind::Node) continue;
        const PrimitiveKind ka = prog.nodes[a.index].kind;
        const PrimitiveKind kb = prog.nodes[b.index].kind;
        const bool fusable_kinds = (ka == PrimitiveKind::MatMul && kb == PrimitiveKind::MatMul) ||
                                   (ka == PrimitiveKind::Conv2dCircular &&
                                    kb == PrimitiveKind::Conv2dCircular);
        if (fusable_kinds && consumers[a.index] == 1 && consumers[b.index] == 1 &&
            prog.nodes[a.index].out_shape == prog.nodes[b.index].out_shape) {
            lp.fused.push_back({node.id, a.index, b.index});
        }
    }
}

void collect_param_consumers(LinearizedProgram& lp) {
    lp.param_consumers.assign(lp.linear.param_shapes.size(), {});
    for (const Node& node : lp.linear.nodes) {
        if (auto slot = node.param_input()) {
            lp.param_consumers[node.inputs[*slot].index].push_back(node.id);
        }
    }
}

LinearizedProgram linearize_structure(const Program& prog, std::vector<CaptureRecipe>* recipes) {
    LinearBuilder builder(prog);
    builder.build();
    LinearizedProgram lp;
    lp.linear = std::move(builder.linear);
    *recipes = std::move(builder.recipes);
    plan_fusion(lp);
    collect_param_consumers(lp);
    return lp;
}

}  // namespace

LinearizedProgram linearize_shapes(const Program& prog) {
    std::vector<CaptureRecipe> recipes;
    return linearize_structure(prog, &recipes);
}

LinearizedProgram linearize(const Program& prog, const Params& params, const Batch& x_batch) {
    std::vector<CaptureRecipe> recipes;
    LinearizedProgram lp = linearize_structure(prog, &recipes);
    lp.consts.reserve(x_batch.size());
    for (const Tensor& x : x_batch) {
        EvalTrace trace = forward_trace(prog, params, x);
        std::vector<Tensor> consts;
        consts.reserve(recipes.size());
        for (const CaptureRecipe& r : recipes) {
            switch (r.kind) {
                case CaptureRecipe::Kind::NodeValue:
                    consts.push_back(trace.values[r.orig_index]);
                    break;
                case CaptureRecipe::Kind::ParamValue:
                    consts.push_back(params[r.orig_index]);
                    break;
                case CaptureRecipe::Kind::InputValue:
                    consts.push_back(x);
                    break;
                case CaptureRecipe::Kind::ReluMask: {
                    const Node& relu_node = prog.nodes[r.orig_index];
                    const ValueRef& src = relu_node.inputs[0];
                    const Tensor* v = nullptr;
                    Tensor tmp;
                    switch (src.kind) {
                        case ValueRef::Kind::Node: v = &trace.values[src.index]; break;
                        case ValueRef::Kind::Param: v = &params[src.index]; break;
                        case ValueRef::Kind::Input: v = &x; break;
                        case ValueRef::Kind::Const: throw NtkError("unexpected const");
                    }
                    tmp = relu_mask(*v);
                    consts.push_back(reshape(tmp, relu_node.out_shape));
                    break;
                }
            }
        }
        lp.consts.push_back(std::move(consts));
    }
    return lp;
}

std::vector<Tensor> LinearizedProgram::eval_nodes_linear(std::int64_t input_index,
                                                         const Params& theta_tangent) const {
    const Program& prog = linear;
    const std::vector<Tensor>& cs = consts.at(static_cast<std::size_t>(input_index));
    enum class Role : unsigned char { None, Lhs, Rhs, AddSite };
    std::vector<Role> role(prog.nodes.size(), Role::None);
    std::vector<int> partner(prog.nodes.size(), -1);
    for (const FusedAdd& f : fused) {
        role[f.lhs] = Role::Lhs;
        role[f.rhs] = Role::Rhs;
        role[f.add_node] = Role::AddSite;
        partner[f.rhs] = f.lhs;
        partner[f.add_node] = f.lhs;
    }
    std::vector<Tensor> values(prog.nodes.size());
    std::vector<Tensor> ins;
    for (const Node& node : prog.nodes) {
        ins.clear();
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Node: ins.push_back(values[ref.index]); break;
                case ValueRef::Kind::Param: ins.push_back(theta_tangent[ref.index]); break;
                case ValueRef::Kind::Const: ins.push_back(cs[ref.index]); break;
                case ValueRef::Kind::Input:
                    throw NtkError("linear program references the raw input");
            }
        }
        switch (role[node.id]) {
            case Role::Rhs:
                if (node.kind == PrimitiveKind::MatMul) {
                    matmul_acc(values[partner[node.id]], ins[0], ins[1]);
                } else {
                    conv2d_circular_acc(values[partner[node.id]], ins[0], ins[1]);
                }
                break;
            case Role::AddSite:
                values[node.id] = std::move(values[partner[node.id]]);
                break;
            default:
                values[node.id] = apply_node(node, ins);
        }
    }
    return values;
}

Tensor LinearizedProgram::eval(std::int64_t input_index, const Params& theta_tangent) const {
    auto values = eval_nodes_linear(input_index, theta_tangent);
    return values[linear.output_node];
}

std::vector<Tensor> LinearizedProgram::node_cotangents(std::int64_t input_index,
                                                       const Tensor& seed,
                                                       const std::vector<int>& wanted) const {
    const Program& prog = linear;
    const std::vector<Tensor>& cs = consts.at(static_cast<std::size_t>(input_index));
    std::vector<Tensor> cot(prog.nodes.size());
    std::vector<bool> has_cot(prog.nodes.size(), false);
    const std::int64_t rows = seed.shape().dim(0);
    cot[prog.output_node] =
        Tensor(Shape{rows, prog.nodes[prog.output_node].out_shape.numel()}, seed.values());
    has_cot[prog.output_node] = true;

    std::vector<Tensor> result(wanted.size());
    std::vector<int> wanted_of_node(prog.nodes.size(), -1);
    for (std::size_t i = 0; i < wanted.size(); ++i) {
        wanted_of_node[wanted[i]] = static_cast<int>(i);
    }

    std::vector<Tensor> ins;
    for (int v = static_cast<int>(prog.nodes.size()) - 1; v >= 0; --v) {
        if (!has_cot[v]) continue;
        const Node& node = prog.nodes[v];
        if (wanted_of_node[v] >= 0) {
            result[wanted_of_node[v]] = cot[v];
        }
        ins.clear();
        for (const ValueRef& ref : node.inputs) {
            if (ref.kind == ValueRef::Kind::Const) {
                ins.push_back(cs[ref.index]);
            } else if (ref.kind == ValueRef::Kind::Node) {
                // Placeholder with the right shape; transpose rules only read
                // the sibling operand.
                ins.push_back(Tensor(prog.nodes[ref.index].out_shape));
            } else {
                ins.push_back(Tensor(prog.param_shapes[ref.index]));
            }
        }
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            if (node.inputs[s].kind != ValueRef::Kind::Node) continue;
            const int u = node.inputs[s].index;
            Tensor contrib = node_transpose(node, ins, cot[v], static_cast<int>(s));
            if (has_cot[u]) {
                accumulate(cot[u], contrib);
            } else {
                cot[u] = std::move(contrib);
                has_cot[u] = true;
            }
        }
        cot[v] = Tensor();
        has_cot[v] = false;
    }
    return result;
}

// ---------------------------------------------------------------------------
// jvp / vjp / jacobian

Tensor jvp(const Program& prog, const Params& params, const Batch& x_batch,
           const Params& theta_tangent) {
    for (std::size_t i = 0; i < prog.param_shapes.size(); ++i) {
        if (i >= theta_tangent.size() || theta_tangent[i].shape() != prog.param_shapes[i]) {
            throw DimensionError("tangent block " + std::to_string(i) + " does not conform to " +
                                 prog.param_shapes[i].str());
        }
    }
    LinearizedProgram lp = linearize(prog, params, x_batch);
    const std::int64_t n = static_cast<std::int64_t>(x_batch.size());
    const std::int64_t o = prog.output_size();
    Tensor out(Shape{std::max<std::int64_t>(n, 1), o});
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor y = lp.eval(i, theta_tangent);
        for (std::int64_t k = 0; k < o; ++k) {
            out.at(i * o + k) = y.at(k);
        }
    }
    return out;
}

namespace {

// Reverse sweep over the original program with parameter accumulation.
// seed has shape (R, o); returns per-block (R, p_l) cotangents.
std::vector<Tensor> param_pullback(const Program& prog, const Params& params,
                                   const EvalTrace& trace, const Tensor& x,
                                   const Tensor& seed) {
    const std::int64_t rows = seed.shape().dim(0);
    std::vector<Tensor> blocks(prog.param_shapes.size());
    std::vector<bool> block_set(prog.param_shapes.size(), false);
    std::vector<Tensor> cot(prog.nodes.size());
    std::vector<bool> has_cot(prog.nodes.size(), false);
    cot[prog.output_node] =
        Tensor(Shape{rows, prog.nodes[prog.output_node].out_shape.numel()}, seed.values());
    has_cot[prog.output_node] = true;
    std::vector<Tensor> ins;
    for (int v = static_cast<int>(prog.nodes.size()) - 1; v >= 0; --v) {
        if (!has_cot[v]) continue;
        const Node& node = prog.nodes[v];
        ins.clear();
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Node: ins.push_back(trace.values[ref.index]); break;
                case ValueRef::Kind::Param: ins.push_back(params[ref.index]); break;
                case ValueRef::Kind::Input: ins.push_back(x); break;
                case ValueRef::Kind::Const: throw NtkError("unexpected const in program");
            }
        }
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            const ValueRef& ref = node.inputs[s];
            if (ref.kind == ValueRef::Kind::Node) {
                Tensor contrib = node_transpose(node, ins, cot[v], static_cast<int>(s));
                if (has_cot[ref.index]) {
                    accumulate(cot[ref.index], contrib);
                } else {
                    cot[ref.index] = std::move(contrib);
                    has_cot[ref.index] = true;
                }
            } else if (ref.kind == ValueRef::Kind::Param) {
                Tensor contrib = node_transpose(node, ins, cot[v], static_cast<int>(s));
                if (block_set[ref.index]) {
                    accumulate(blocks[ref.index], contrib);
                } else {
                    blocks[ref.index] = std::move(contrib);
                    block_set[ref.index] = true;
                }
            }
        }
        cot[v] = Tensor();
        has_cot[v] = false;
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (!block_set[b]) {
            blocks[b] = Tensor(Shape{rows, prog.param_shapes[b].numel()});
        }
    }
    return blocks;
}

Tensor identity_rows(std::int64_t o) { return identity(o); }

}  // namespace

Params vjp_from_trace(const Program& prog, const Params& params, const EvalTrace& trace,
                      const Tensor& x, const std::vector<double>& cot_out) {
    const std::int64_t o = prog.output_size();
    if (static_cast<std::int64_t>(cot_out.size()) != o) {
        throw DimensionError("cotangent length " + std::to_string(cot_out.size()) +
                             " does not match output size " + std::to_string(o));
    }
    Tensor seed(Shape{1, o}, cot_out);
    auto blocks = param_pullback(prog, params, trace, x, seed);
    Params result;
    result.reserve(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        result.push_back(reshape(blocks[i], prog.param_shapes[i]));
    }
    return result;
}

std::vector<Params> vjp(const Program& prog, const Params& params, const Batch& x_batch,
                        const Tensor& cot_batch) {
    const std::int64_t n = static_cast<std::int64_t>(x_batch.size());
    const std::int64_t o = prog.output_size();
    if (cot_batch.shape() != Shape{n, o}) {
        throw DimensionError("cotangent batch shape " + cot_batch.shape().str() +
                             " does not match " + Shape{n, o}.str());
    }
    std::vector<Params> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        EvalTrace trace = forward_trace(prog, params, x_batch[i]);
        std::vector<double> cot(cot_batch.data() + i * o, cot_batch.data() + (i + 1) * o);
        out.push_back(vjp_from_trace(prog, params, trace, x_batch[i], cot));
    }
    return out;
}

Params vjp_summed(const Program& prog, const Params& params, const Batch& x_batch,
                  const Tensor& cot_batch) {
    auto per_input = vjp(prog, params, x_batch, cot_batch);
    Params total;
    for (std::size_t b = 0; b < prog.param_shapes.size(); ++b) {
        total.push_back(Tensor(prog.param_shapes[b]));
    }
    for (const Params& p : per_input) {
        for (std::size_t b = 0; b < p.size(); ++b) {
            accumulate(total[b], p[b]);
        }
    }
    return total;
}

Tensor jacobian(const Program& prog, const Params& params, const Batch& x_batch,
                JacobianMode mode) {
    const std::int64_t n = static_cast<std::int64_t>(x_batch.size());
    const std::int64_t o = prog.output_size();
    const std::int64_t p = prog.param_count();
    if (mode == JacobianMode::Auto) {
        mode = p < n * o ? JacobianMode::Forward : JacobianMode::Reverse;
    }
    Tensor out(Shape{n, o, p});
    if (mode == JacobianMode::Reverse) {
        Tensor seed = identity_rows(o);
        for (std::int64_t i = 0; i < n; ++i) {
            EvalTrace trace = forward_trace(prog, params, x_batch[i]);
            auto blocks = param_pullback(prog, params, trace, x_batch[i], seed);
            std::int64_t offset = 0;
            for (std::size_t b = 0; b < blocks.size(); ++b) {
                const std::int64_t pb = prog.param_shapes[b].numel();
                for (std::int64_t r = 0; r < o; ++r) {
                    std::memcpy(out.data() + (i * o + r) * p + offset,
                                blocks[b].data() + r * pb, sizeof(double) * pb);
                }
                offset += pb;
            }
        }
        return out;
    }
    LinearizedProgram lp = linearize(prog, params, x_batch);
    Params basis;
    for (const Shape& s : prog.param_shapes) {
        basis.push_back(Tensor(s));
    }
    std::int64_t offset = 0;
    for (std::size_t b = 0; b < prog.param_shapes.size(); ++b) {
        const std::int64_t pb = prog.param_shapes[b].numel();
        for (std::int64_t k = 0; k < pb; ++k) {
            basis[b].at(k) = 1.0;
            for (std::int64_t i = 0; i < n; ++i) {
                Tensor col = lp.eval(i, basis);
                for (std::int64_t r = 0; r < o; ++r) {
                    out.at((i * o + r) * p + offset + k) = col.at(r);
                }
            }
            basis[b].at(k) = 0.0;
        }
        offset += pb;
    }
    return out;
}

// ---------------------------------------------------------------------------
// BlockCotangentStream

BlockCotangentStream::BlockCotangentStream(const Program& prog, const Params& params,
                                           const Batch& x_batch)
    : prog_(prog),
      pending_consumers_(prog.param_shapes.size(), 0),
      block_touched_(prog.param_shapes.size(), false),
      block_acc_(prog.param_shapes.size()),
      next_node_(static_cast<int>(prog.nodes.size()) - 1),
      n_(static_cast<std::int64_t>(x_batch.size())),
      o_(prog.output_size()),
      params_(params) {
    for (const Node& node : prog.nodes) {
        if (auto slot = node.param_input()) {
            ++pending_consumers_[node.inputs[*slot].index];
        }
    }
    traces_.reserve(x_batch.size());
    xs_ = x_batch;
    cots_.resize(x_batch.size());
    Tensor seed = identity(o_);
    for (std::size_t i = 0; i < x_batch.size(); ++i) {
        traces_.push_back(forward_trace(prog, params, x_batch[i]));
        cots_[i].resize(prog.nodes.size());
        cots_[i][prog.output_node] =
            Tensor(Shape{o_, prog.nodes[prog.output_node].out_shape.numel()}, seed.values());
    }
    for (std::size_t b = 0; b < prog.param_shapes.size(); ++b) {
        block_acc_[b] = Tensor(Shape{n_ * o_, prog.param_shapes[b].numel()});
        if (pending_consumers_[b] == 0) {
            ready_.push_back(static_cast<int>(b));
        }
    }
    // Emit in descending block order when several are trivially ready.
    std::sort(ready_.begin(), ready_.end());
}

void BlockCotangentStream::advance_node() {
    const Node& node = prog_.nodes[next_node_];
    for (std::int64_t i = 0; i < n_; ++i) {
        Tensor& cot = cots_[i][next_node_];
        if (!cot.defined() || cot.numel() == 0) continue;
        std::vector<Tensor> ins;
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Node: ins.push_back(traces_[i].values[ref.index]); break;
                case ValueRef::Kind::Param: ins.push_back(params_[ref.index]); break;
                case ValueRef::Kind::Input: ins.push_back(xs_[i]); break;
                case ValueRef::Kind::Const: throw NtkError("unexpected const in program");
            }
        }
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            const ValueRef& ref = node.inputs[s];
            if (ref.kind == ValueRef::Kind::Node) {
                Tensor contrib = node_transpose(node, ins, cot, static_cast<int>(s));
                Tensor& dst = cots_[i][ref.index];
                if (dst.defined() && dst.numel() > 0) {
                    accumulate(dst, contrib);
                } else {
                    dst = std::move(contrib);
                }
            } else if (ref.kind == ValueRef::Kind::Param) {
                Tensor contrib = node_transpose(node, ins, cot, static_cast<int>(s));
                const std::int64_t pb = contrib.shape().dim(1);
                const bool first = !block_touched_[ref.index];
                for (std::int64_t r = 0; r < o_; ++r) {
                    double* dst = block_acc_[ref.index].data() + (i * o_ + r) * pb;
                    const double* src = contrib.data() + r * pb;
                    if (first) {
                        std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(pb));
                    } else {
                        for (std::int64_t k = 0; k < pb; ++k) {
                            dst[k] += src[k];
                        }
                    }
                }
                if (!first) {
                    count_flops(o_ * pb);
                }
            }
        }
        cot = Tensor();
    }
    if (auto slot = node.param_input()) {
        const int b = node.inputs[*slot].index;
        block_touched_[b] = true;
        if (--pending_consumers_[b] == 0) {
            ready_.push_back(b);
        }
    }
    --next_node_;
}

std::optional<std::pair<int, Tensor>> BlockCotangentStream::next() {
    while (ready_.empty() && next_node_ >= 0) {
        advance_node();
    }
    if (ready_.empty()) {
        return std::nullopt;
    }
    const int b = ready_.back();
    ready_.pop_back();
    Tensor block = std::move(block_acc_[b]);
    block_acc_[b] = Tensor();
    return std::make_pair(b, std::move(block));
}

}  // namespace ntk
