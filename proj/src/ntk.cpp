#include "ntk/ntk.hpp"

#include <algorithm>
#include <cstring>

#include "ntk/cost_model.hpp"

namespace ntk {

const char* method_name(Method method) {
    switch (method) {
        case Method::JacobianContraction: return "jacobian_contraction";
        case Method::NtkVectorProducts: return "ntk_vector_products";
        case Method::StructuredDerivatives: return "structured_derivatives";
        case Method::Auto: return "auto";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    if (name == "jacobian-contraction" || name == "jacobian_contraction") {
        return Method::JacobianContraction;
    }
    if (name == "ntk-vector-products" || name == "ntk_vector_products") {
        return Method::NtkVectorProducts;
    }
    if (name == "structured-derivatives" || name == "structured_derivatives") {
        return Method::StructuredDerivatives;
    }
    if (name == "auto") {
        return Method::Auto;
    }
    throw SpecError("unknown method '" + name + "'");
}

Tensor NtkMatrix::flat() const {
    Tensor out(Shape{n1 * o, n2 * o});
    for (std::int64_t i = 0; i < n1; ++i) {
        for (std::int64_t j = 0; j < n2; ++j) {
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t b = 0; b < o; ++b) {
                    out.at((i * o + a) * n2 * o + j * o + b) = entry(i, j, a, b);
                }
            }
        }
    }
    return out;
}

NtkMatrix NtkMatrix::from_flat(const Tensor& flat, std::int64_t n1, std::int64_t n2,
                               std::int64_t o) {
    NtkMatrix m;
    m.n1 = n1;
    m.n2 = n2;
    m.o = o;
    m.values = Tensor(Shape{n1, n2, o, o});
    for (std::int64_t i = 0; i < n1; ++i) {
        for (std::int64_t j = 0; j < n2; ++j) {
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t b = 0; b < o; ++b) {
                    m.values.at(((i * n2 + j) * o + a) * o + b) =
                        flat.at((i * o + a) * n2 * o + j * o + b);
                }
            }
        }
    }
    return m;
}

namespace {

void check_batches(const Program& prog, const Batch& x1, const Batch& x2) {
    if (x1.empty() || x2.empty()) {
        throw DimensionError("NTK computation needs non-empty input batches");
    }
    for (const Tensor& x : x1) {
        if (x.shape() != prog.input_shape) {
            throw DimensionError("input shape " + x.shape().str() + " does not match " +
                                 prog.input_shape.str());
        }
    }
    for (const Tensor& x : x2) {
        if (x.shape() != prog.input_shape) {
            throw DimensionError("input shape " + x.shape().str() + " does not match " +
                                 prog.input_shape.str());
        }
    }
}

}  // namespace

NtkMatrix ntk_jacobian_contraction(const Program& prog, const Params& params, const Batch& x1,
                                   const Batch& x2) {
    check_batches(prog, x1, x2);
    const std::int64_t n1 = static_cast<std::int64_t>(x1.size());
    const std::int64_t n2 = static_cast<std::int64_t>(x2.size());
    const std::int64_t o = prog.output_size();
    Tensor theta_flat(Shape{n1 * o, n2 * o});
    auto streams = [&] {
        PhaseScope phase("forward");
        return std::make_pair(BlockCotangentStream(prog, params, x1),
                              BlockCotangentStream(prog, params, x2));
    }();
    while (true) {
        auto [b1, b2] = [&] {
            PhaseScope phase("vjp_sweep");
            auto lhs = streams.first.next();
            auto rhs = streams.second.next();
            return std::make_pair(std::move(lhs), std::move(rhs));
        }();
        if (!b1.has_value() || !b2.has_value()) {
            break;
        }
        if (b1->first != b2->first) {
            throw NtkError("block streams diverged");
        }
        PhaseScope phase("contraction");
        Tensor j2t = transpose(b2->second, {1, 0});
        matmul_acc(theta_flat, b1->second, j2t);
    }
    return NtkMatrix::from_flat(theta_flat, n1, n2, o);
}

NtkMatrix ntk_vector_products(const Program& prog, const Params& params, const Batch& x1,
                              const Batch& x2) {
    check_batches(prog, x1, x2);
    const std::int64_t n1 = static_cast<std::int64_t>(x1.size());
    const std::int64_t n2 = static_cast<std::int64_t>(x2.size());
    const std::int64_t o = prog.output_size();
    LinearizedProgram lin1 = [&] {
        PhaseScope phase("forward");
        return linearize(prog, params, x1);
    }();
    std::vector<EvalTrace> traces2;
    {
        PhaseScope phase("forward");
        traces2.reserve(x2.size());
        for (const Tensor& x : x2) {
            traces2.push_back(forward_trace(prog, params, x));
        }
    }
    Tensor theta_flat(Shape{n1 * o, n2 * o});
    std::vector<double> unit(static_cast<std::size_t>(o), 0.0);
    for (std::int64_t j = 0; j < n2; ++j) {
        for (std::int64_t v = 0; v < o; ++v) {
            unit[static_cast<std::size_t>(v)] = 1.0;
            Params cot = [&] {
                PhaseScope phase("vjp_sweep");
                return vjp_from_trace(prog, params, traces2[j], x2[j], unit);
            }();
            unit[static_cast<std::size_t>(v)] = 0.0;
            PhaseScope phase("jvp_sweep");
            for (std::int64_t i = 0; i < n1; ++i) {
                Tensor col = lin1.eval(i, cot);
                for (std::int64_t a = 0; a < o; ++a) {
                    theta_flat.at((i * o + a) * n2 * o + j * o + v) = col.at(a);
                }
            }
        }
    }
    return NtkMatrix::from_flat(theta_flat, n1, n2, o);
}

NtkMatrix ntk_structured_derivatives(const Program& prog, const Params& params, const Batch& x1,
                                     const Batch& x2, JMode j_mode, ContractionOrder order) {
    check_batches(prog, x1, x2);
    const std::int64_t n1 = static_cast<std::int64_t>(x1.size());
    const std::int64_t n2 = static_cast<std::int64_t>(x2.size());
    const std::int64_t o = prog.output_size();

    LinearizedProgram lin1 = [&] {
        PhaseScope phase("forward");
        return linearize(prog, params, x1);
    }();
    LinearizedProgram lin2 = [&] {
        PhaseScope phase("forward");
        return linearize(prog, params, x2);
    }();
    const Program& lp = lin1.linear;

    // Nodes whose cotangents feed some summand.
    std::vector<int> wanted;
    for (const auto& consumers : lin1.param_consumers) {
        wanted.insert(wanted.end(), consumers.begin(), consumers.end());
    }
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
    std::vector<int> wanted_index(lp.nodes.size(), -1);
    for (std::size_t k = 0; k < wanted.size(); ++k) {
        wanted_index[wanted[k]] = static_cast<int>(k);
    }

    Tensor seed = identity(o);
    std::vector<std::vector<Tensor>> cots1(n1), cots2(n2);
    {
        PhaseScope phase("cotangent_sweep");
        for (std::int64_t i = 0; i < n1; ++i) {
            cots1[i] = lin1.node_cotangents(i, seed, wanted);
        }
        for (std::int64_t j = 0; j < n2; ++j) {
            cots2[j] = lin2.node_cotangents(j, seed, wanted);
        }
    }

    // Jacobian subarrays per (side, input, parameter-consuming node).
    auto resolve_inputs = [&](const LinearizedProgram& lin, const Node& node,
                              std::int64_t input) {
        std::vector<Tensor> ins;
        for (const ValueRef& ref : node.inputs) {
            switch (ref.kind) {
                case ValueRef::Kind::Const:
                    ins.push_back(lin.consts[input][ref.index]);
                    break;
                case ValueRef::Kind::Param:
                    ins.push_back(Tensor(lp.param_shapes[ref.index]));
                    break;
                case ValueRef::Kind::Node:
                    ins.push_back(Tensor(lp.nodes[ref.index].out_shape));
                    break;
                case ValueRef::Kind::Input:
                    throw NtkError("linear program references the raw input");
            }
        }
        return ins;
    };
    auto subarrays_for = [&](const LinearizedProgram& lin, std::int64_t n) {
        std::vector<std::vector<StructuredJacobian>> subs(n);
        PhaseScope phase("subarray");
        for (std::int64_t i = 0; i < n; ++i) {
            subs[i].resize(wanted.size());
            for (std::size_t k = 0; k < wanted.size(); ++k) {
                const Node& node = lp.nodes[wanted[k]];
                const int slot = *node.param_input();
                subs[i][k] = structured_jacobian(node, resolve_inputs(lin, node, i), slot, j_mode);
            }
        }
        return subs;
    };
    auto subs1 = subarrays_for(lin1, n1);
    auto subs2 = subarrays_for(lin2, n2);

    Tensor theta_flat(Shape{n1 * o, n2 * o});
    for (std::size_t block = 0; block < lin1.param_consumers.size(); ++block) {
        const auto& consumers = lin1.param_consumers[block];
        for (int l1 : consumers) {
            for (int l2 : consumers) {
                MjjmpOperands ops;
                ops.o = o;
                ops.y1_shape = lp.nodes[l1].out_shape;
                ops.y2_shape = lp.nodes[l2].out_shape;
                ops.theta_shape = lp.param_shapes[block];
                const int k1 = wanted_index[l1];
                const int k2 = wanted_index[l2];
                for (std::int64_t i = 0; i < n1; ++i) {
                    ops.a_cots.push_back(cots1[i][k1]);
                    ops.b_subs.push_back(subs1[i][k1]);
                }
                for (std::int64_t j = 0; j < n2; ++j) {
                    ops.d_cots.push_back(cots2[j][k2]);
                    ops.c_subs.push_back(subs2[j][k2]);
                }
                PhaseScope phase("mjjmp");
                Tensor summand = mjjmp_execute(ops, order);
                for (std::int64_t e = 0; e < theta_flat.numel(); ++e) {
                    theta_flat.at(e) += summand.at(e);
                }
                count_flops(theta_flat.numel());
            }
        }
    }
    return NtkMatrix::from_flat(theta_flat, n1, n2, o);
}

NtkMatrix dense_ntk_oracle(const Program& prog, const Params& params, const Batch& x1,
                           const Batch& x2) {
    check_batches(prog, x1, x2);
    const std::int64_t n1 = static_cast<std::int64_t>(x1.size());
    const std::int64_t n2 = static_cast<std::int64_t>(x2.size());
    const std::int64_t o = prog.output_size();
    const std::int64_t p = prog.param_count();
    Tensor j1 = jacobian(prog, params, x1, JacobianMode::Reverse);
    Tensor j2 = jacobian(prog, params, x2, JacobianMode::Reverse);
    Tensor theta_flat = matmul(reshape(j1, Shape{n1 * o, p}),
                               transpose(reshape(j2, Shape{n2 * o, p}), {1, 0}));
    return NtkMatrix::from_flat(theta_flat, n1, n2, o);
}

NtkMatrix compute_ntk(const Program& prog, const Params& params, const Batch& x1, const Batch& x2,
              Method method) {
    if (method == Method::Auto) {
        method = select_method(prog, static_cast<std::int64_t>(x1.size()),
                               static_cast<std::int64_t>(x2.size()));
    }
    switch (method) {
        case Method::JacobianContraction: return ntk_jacobian_contraction(prog, params, x1, x2);
        case Method::NtkVectorProducts: return ntk_vector_products(prog, params, x1, x2);
        case Method::StructuredDerivatives:
            return ntk_structured_derivatives(prog, params, x1, x2);
        case Method::Auto: break;
    }
    throw NtkError("unreachable");
}

NtkVectorProductOperator::NtkVectorProductOperator(const Program& prog, const Params& params,
                                                   const Batch& x1, const Batch& x2)
    : prog_(prog),
      params_(params),
      x2_(x2),
      lin1_(linearize(prog, params, x1)),
      n1_(static_cast<std::int64_t>(x1.size())),
      n2_(static_cast<std::int64_t>(x2.size())),
      o_(prog.output_size()) {
    check_batches(prog, x1, x2);
    traces2_.reserve(x2.size());
    for (const Tensor& x : x2) {
        traces2_.push_back(forward_trace(prog, params, x));
    }
}

std::vector<double> NtkVectorProductOperator::apply(const std::vector<double>& v) const {
    if (static_cast<std::int64_t>(v.size()) != n2_ * o_) {
        throw DimensionError("vector length " + std::to_string(v.size()) +
                             " does not match NTK columns " + std::to_string(n2_ * o_));
    }
    Params u;
    for (std::int64_t j = 0; j < n2_; ++j) {
        std::vector<double> cot(v.begin() + j * o_, v.begin() + (j + 1) * o_);
        Params pulled = vjp_from_trace(prog_, params_, traces2_[j], x2_[j], cot);
        if (u.empty()) {
            u = std::move(pulled);
            continue;
        }
        for (std::size_t b = 0; b < u.size(); ++b) {
            for (std::int64_t k = 0; k < u[b].numel(); ++k) {
                u[b].at(k) += pulled[b].at(k);
            }
        }
        count_flops(prog_.param_count());
    }
    std::vector<double> out(static_cast<std::size_t>(n1_ * o_), 0.0);
    for (std::int64_t i = 0; i < n1_; ++i) {
        Tensor col = lin1_.eval(i, u);
        for (std::int64_t a = 0; a < o_; ++a) {
            out[static_cast<std::size_t>(i * o_ + a)] = col.at(a);
        }
    }
    return out;
}

}  // namespace ntk
