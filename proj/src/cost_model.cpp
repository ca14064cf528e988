#include "ntk/cost_model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "ntk/rng.hpp"

namespace ntk {

std::int64_t CostEstimate::term(const std::string& label) const {
    for (const auto& [name, value] : term_breakdown) {
        if (name == label) return value;
    }
    return 0;
}

bool CostEstimate::has_term(const std::string& label) const {
    for (const auto& [name, value] : term_breakdown) {
        if (name == label) return true;
    }
    return false;
}

namespace {

enum class Family { Fcn, Cnn, Generic };

Family detect_family(const Program& prog) {
    bool conv = false, plain = true;
    for (const Node& node : prog.nodes) {
        if (node.kind == PrimitiveKind::Conv2dCircular ||
            node.kind == PrimitiveKind::GlobalAvgPool) {
            conv = true;
        } else if (node.kind != PrimitiveKind::MatMul && node.kind != PrimitiveKind::Relu &&
                   node.kind != PrimitiveKind::Add) {
            plain = false;
        }
    }
    if (conv) return Family::Cnn;
    return plain ? Family::Fcn : Family::Generic;
}

Shape resolved_shape(const Program& prog, const ValueRef& ref) {
    switch (ref.kind) {
        case ValueRef::Kind::Node: return prog.nodes[ref.index].out_shape;
        case ValueRef::Kind::Param: return prog.param_shapes[ref.index];
        case ValueRef::Kind::Input: return prog.input_shape;
        case ValueRef::Kind::Const: return prog.const_shapes[ref.index];
    }
    throw NtkError("unreachable");
}

std::vector<Shape> input_shapes_of(const Program& prog, const Node& node) {
    std::vector<Shape> shapes;
    shapes.reserve(node.inputs.size());
    for (const ValueRef& ref : node.inputs) {
        shapes.push_back(resolved_shape(prog, ref));
    }
    return shapes;
}

// Mirrors the kernels' counting rules for one primitive application.
std::int64_t apply_fmas(const Node& node, const std::vector<Shape>& in) {
    switch (node.kind) {
        case PrimitiveKind::MatMul:
            return in[0].dim(0) * in[0].dim(1) * in[1].dim(1);
        case PrimitiveKind::Conv2dCircular:
            return in[0].dim(0) * in[0].dim(1) * in[1].dim(0) * in[1].dim(1) * in[1].dim(2) *
                   in[1].dim(3);
        case PrimitiveKind::Add:
        case PrimitiveKind::Sub:
        case PrimitiveKind::Mul:
        case PrimitiveKind::Scale:
        case PrimitiveKind::Relu:
            return node.out_shape.numel();
        case PrimitiveKind::Reshape:
        case PrimitiveKind::Transpose:
        case PrimitiveKind::BroadcastInDim:
            return 0;
        case PrimitiveKind::ReduceSum:
        case PrimitiveKind::GlobalAvgPool:
            return in[0].numel();
    }
    throw NtkError("unreachable");
}

// Mirrors node_transpose's counting for an R-row pullback into one slot.
std::int64_t transpose_fmas(const Node& node, const std::vector<Shape>& in, int which,
                            std::int64_t r) {
    const std::int64_t out = node.out_shape.numel();
    switch (node.kind) {
        case PrimitiveKind::MatMul:
            return r * node.out_shape.dim(0) * node.out_shape.dim(1) *
                   (which == 0 ? in[1].dim(0) : in[0].dim(1));
        case PrimitiveKind::Conv2dCircular:
            return r * in[0].dim(0) * in[0].dim(1) * in[1].dim(0) * in[1].dim(1) * in[1].dim(2) *
                   in[1].dim(3);
        case PrimitiveKind::Add:
            return in[which] == node.out_shape ? 0 : r * out;
        case PrimitiveKind::Sub:
            return (in[which] == node.out_shape ? 0 : r * out) +
                   (which == 1 ? r * in[1].numel() : 0);
        case PrimitiveKind::Mul:
            return r * out + (in[which] == node.out_shape ? 0 : r * out);
        case PrimitiveKind::Scale:
            return r * out;
        case PrimitiveKind::Relu:
            return out + r * out;
        case PrimitiveKind::Reshape:
        case PrimitiveKind::Transpose:
        case PrimitiveKind::ReduceSum:
            return 0;
        case PrimitiveKind::BroadcastInDim:
            return r * out;
        case PrimitiveKind::GlobalAvgPool:
            return r * in[0].numel();
    }
    throw NtkError("unreachable");
}

std::vector<bool> influences_output(const Program& prog) {
    std::vector<bool> live(prog.nodes.size(), false);
    live[prog.output_node] = true;
    for (int v = static_cast<int>(prog.nodes.size()) - 1; v >= 0; --v) {
        if (!live[v]) continue;
        for (const ValueRef& ref : prog.nodes[v].inputs) {
            if (ref.kind == ValueRef::Kind::Node) {
                live[ref.index] = true;
            }
        }
    }
    return live;
}

// One reverse sweep with R cotangent rows: transpose rules, cotangent
// accumulation for fan-out, and (optionally) parameter accumulation. The
// block-stream path adds into its accumulator on every edge; the pullback
// path moves the first contribution.
std::int64_t sweep_fmas(const Program& prog, std::int64_t r, bool into_params,
                        bool param_acc_every_edge = false) {
    const auto live = influences_output(prog);
    std::vector<int> consumers(prog.nodes.size(), 0);
    std::vector<int> block_edges(prog.param_shapes.size(), 0);
    std::int64_t total = 0;
    for (const Node& node : prog.nodes) {
        if (!live[node.id]) continue;
        const auto in = input_shapes_of(prog, node);
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            const ValueRef& ref = node.inputs[s];
            if (ref.kind == ValueRef::Kind::Node) {
                total += transpose_fmas(node, in, static_cast<int>(s), r);
                ++consumers[ref.index];
            } else if (ref.kind == ValueRef::Kind::Param && into_params) {
                total += transpose_fmas(node, in, static_cast<int>(s), r);
                ++block_edges[ref.index];
            }
        }
    }
    if (into_params) {
        for (std::size_t b = 0; b < prog.param_shapes.size(); ++b) {
            const int paid = param_acc_every_edge ? block_edges[b]
                                                  : std::max(block_edges[b] - 1, 0);
            total += paid * r * prog.param_shapes[b].numel();
        }
    }
    for (const Node& node : prog.nodes) {
        if (consumers[node.id] > 1) {
            total += (consumers[node.id] - 1) * r * node.out_shape.numel();
        }
    }
    return total;
}

std::int64_t linear_jvp_fmas(const LinearizedProgram& lp, bool top_only, std::int64_t o) {
    std::vector<bool> fused_site(lp.linear.nodes.size(), false);
    for (const auto& f : lp.fused) {
        fused_site[f.add_node] = true;
    }
    std::int64_t total = 0;
    for (const Node& node : lp.linear.nodes) {
        if (fused_site[node.id]) continue;
        const bool is_top = node.out_shape.numel() == o;
        if (top_only != is_top) continue;
        total += apply_fmas(node, input_shapes_of(lp.linear, node));
    }
    return total;
}

}  // namespace

ProgramStats analyze_program(const Program& prog) {
    ProgramStats st;
    st.output_size = prog.output_size();
    st.param_count = prog.param_count();
    for (const Shape& s : prog.param_shapes) {
        st.max_param_elems = std::max(st.max_param_elems, s.numel());
    }
    for (const Node& node : prog.nodes) {
        st.forward_fmas += apply_fmas(node, input_shapes_of(prog, node));
        st.total_node_elems += node.out_shape.numel();
        st.max_node_elems = std::max(st.max_node_elems, node.out_shape.numel());
        if (node.kind == PrimitiveKind::Relu) {
            st.capture_fmas += node.out_shape.numel();
        }
    }
    st.vjp_sweep_fmas = sweep_fmas(prog, 1, true);

    const LinearizedProgram lp = linearize_shapes(prog);
    st.jvp_top_fmas = linear_jvp_fmas(lp, true, st.output_size);
    st.jvp_fmas = st.jvp_top_fmas + linear_jvp_fmas(lp, false, st.output_size);
    st.cot_sweep_fmas = sweep_fmas(lp.linear, 1, false);
    for (std::size_t block = 0; block < lp.param_consumers.size(); ++block) {
        for (int l : lp.param_consumers[block]) {
            const Node& node = lp.linear.nodes[l];
            const auto shapes = input_shapes_of(lp.linear, node);
            const int slot = *node.param_input();
            st.subarray_elems +=
                subarray_shape(node.out_shape, shapes[slot], structure_rule(node, shapes, slot))
                    .numel();
        }
    }
    return st;
}

CostEstimate predict_generic(const Program& prog, Method method, std::int64_t n1,
                             std::int64_t n2) {
    if (method == Method::Auto) {
        throw SpecError("predict_generic requires a concrete method");
    }
    const ProgramStats st = analyze_program(prog);
    const Family family = detect_family(prog);
    const std::int64_t o = st.output_size;
    const std::int64_t nmax = std::max(n1, n2);
    const std::int64_t pair = n1 * n2;
    CostEstimate est;
    auto add_term = [&](const std::string& label, std::int64_t value) {
        for (auto& [name, v] : est.term_breakdown) {
            if (name == label) {
                v += value;
                est.flops += value;
                return;
            }
        }
        est.term_breakdown.emplace_back(label, value);
        est.flops += value;
    };
    auto is_top_block = [&](std::size_t b) {
        const Shape& s = prog.param_shapes[b];
        return s.rank() == 2 && s.dim(0) == o && s.dim(1) != o;
    };

    switch (method) {
        case Method::JacobianContraction: {
            // One forward plus an o-row pullback per input, then the
            // block-by-block contraction of the two Jacobians.
            add_term("n_o_fp",
                     (n1 + n2) * (st.forward_fmas + sweep_fmas(prog, o, true)));
            for (std::size_t b = 0; b < prog.param_shapes.size(); ++b) {
                const std::int64_t contraction = pair * o * o * prog.param_shapes[b].numel();
                const char* label = is_top_block(b)
                                        ? "n2_o3_w"
                                        : (family == Family::Fcn
                                               ? "n2_o2_t_w2"
                                               : (family == Family::Cnn ? "n2_o2_t_f_w2"
                                                                        : "n2_o2_p"));
                if (family == Family::Generic) label = "n2_o2_p";
                add_term(label, contraction);
            }
            est.memory_bytes =
                8 * std::max({pair * o * o, nmax * o * (st.max_node_elems + st.max_param_elems),
                              nmax * st.total_node_elems, st.param_count});
            break;
        }
        case Method::NtkVectorProducts: {
            add_term("side_prep", n1 * (st.forward_fmas + st.capture_fmas) +
                                      n2 * st.forward_fmas + n2 * o * sweep_fmas(prog, 1, true));
            const std::int64_t rest = st.jvp_fmas - st.jvp_top_fmas;
            if (family == Family::Fcn) {
                add_term("n2_o_t_w2", pair * o * rest);
                add_term("n2_o2_w", pair * o * st.jvp_top_fmas);
            } else if (family == Family::Cnn) {
                add_term("n2_o_t_d_f_w2", pair * o * rest);
                add_term("n2_o2_w", pair * o * st.jvp_top_fmas);
            } else {
                add_term("n2_o_fp", pair * o * st.jvp_fmas);
            }
            est.memory_bytes =
                8 * std::max({pair * o * o, nmax * o * (st.max_node_elems + st.max_param_elems),
                              nmax * st.total_node_elems, st.param_count});
            break;
        }
        case Method::StructuredDerivatives: {
            add_term("n_o_fp", (n1 + n2) * (st.forward_fmas + st.capture_fmas) +
                                   (n1 + n2) * sweep_fmas(linearize_shapes(prog).linear, o, false));
            const LinearizedProgram lp = linearize_shapes(prog);
            std::int64_t max_sub = 0;
            for (std::size_t block = 0; block < lp.param_consumers.size(); ++block) {
                const auto& consumers = lp.param_consumers[block];
                for (int l1 : consumers) {
                    for (int l2 : consumers) {
                        const Node& a = lp.linear.nodes[l1];
                        const Node& b = lp.linear.nodes[l2];
                        const auto sa = input_shapes_of(lp.linear, a);
                        const auto sb = input_shapes_of(lp.linear, b);
                        const int slot_a = *a.param_input();
                        const int slot_b = *b.param_input();
                        const auto tags_a = structure_rule(a, sa, slot_a);
                        const auto tags_b = structure_rule(b, sb, slot_b);
                        const Shape& theta = lp.linear.param_shapes[block];
                        const ContractionOrder best = select_order(
                            a.out_shape, tags_a, b.out_shape, tags_b, theta, o, n1, n2);
                        const MjjmpCost cost = mjjmp_cost(a.out_shape, tags_a, b.out_shape,
                                                          tags_b, theta, o, n1, n2, best);
                        const char* label =
                            is_top_block(block)
                                ? "n2_o3"
                                : (family == Family::Fcn
                                       ? "n2_o2_t_w"
                                       : (family == Family::Cnn ? "n2_o2_t_min" : "mjjmp"));
                        add_term(label, cost.flops);
                        max_sub = std::max(max_sub, cost.subarray_bytes / 8);
                    }
                }
            }
            // Accumulating each summand into the kernel is counted work.
            std::int64_t summands = 0;
            for (const auto& consumers : lp.param_consumers) {
                summands += static_cast<std::int64_t>(consumers.size() * consumers.size());
            }
            add_term("accumulate", pair * o * o * summands);
            add_term("n_j", (n1 + n2) * st.subarray_elems);
            est.memory_bytes = 8 * std::max({pair * o * o, nmax * o * st.max_node_elems,
                                             nmax * st.subarray_elems,
                                             nmax * st.total_node_elems, st.param_count});
            break;
        }
        case Method::Auto:
            break;
    }
    return est;
}

Method select_method(const Program& prog, std::int64_t n1, std::int64_t n2,
                     bool memory_constrained) {
    const Method methods[] = {Method::StructuredDerivatives, Method::NtkVectorProducts,
                              Method::JacobianContraction};
    Method best = Method::StructuredDerivatives;
    std::int64_t best_cost = -1;
    for (Method m : methods) {
        const CostEstimate est = predict_generic(prog, m, n1, n2);
        const std::int64_t cost = memory_constrained ? est.memory_bytes : est.flops;
        if (best_cost < 0 || cost < best_cost) {
            best = m;
            best_cost = cost;
        }
    }
    return best;
}

std::string ValidationReport::to_json() const {
    nlohmann::ordered_json j;
    j["method"] = method_name(method);
    j["predicted_flops"] = predicted_flops;
    j["measured_flops"] = measured_flops;
    j["predicted_bytes"] = predicted_bytes;
    j["measured_peak_bytes"] = measured_peak_bytes;
    j["total_ratio"] = total_ratio;
    j["per_term"] = nlohmann::ordered_json::array();
    for (const TermRatio& t : per_term) {
        nlohmann::ordered_json e;
        e["term"] = t.label;
        e["measured"] = t.measured;
        e["predicted"] = t.predicted;
        e["ratio"] = t.ratio;
        e["flagged"] = t.flagged;
        j["per_term"].push_back(e);
    }
    j["any_flagged"] = any_flagged;
    return j.dump();
}

ValidationReport validate_against_counter(const Program& prog, Method method, std::int64_t n1,
                                          std::int64_t n2, std::uint64_t seed) {
    if (method == Method::Auto) {
        method = select_method(prog, n1, n2);
    }
    ValidationReport report;
    report.method = method;
    const CostEstimate predicted = predict_generic(prog, method, n1, n2);
    report.predicted_flops = predicted.flops;
    report.predicted_bytes = predicted.memory_bytes;

    Rng rng(seed);
    Params params = init_params(prog, rng);
    Batch x1 = random_inputs(prog, n1, rng);
    Batch x2 = random_inputs(prog, n2, rng);

    std::map<std::string, std::int64_t> phases;
    {
        CountingSession session;
        (void)compute_ntk(prog, params, x1, x2, method);
        report.measured_flops = session.counter().fused_multiply_adds();
        report.measured_peak_bytes = session.counter().peak_live_bytes();
        phases = session.counter().phase_fmas();
    }
    report.total_ratio = predicted.flops > 0
                             ? static_cast<double>(report.measured_flops) /
                                   static_cast<double>(predicted.flops)
                             : 0.0;

    auto phase_sum = [&](std::initializer_list<const char*> names) {
        std::int64_t s = 0;
        for (const char* n : names) {
            auto it = phases.find(n);
            if (it != phases.end()) s += it->second;
        }
        return s;
    };
    auto term_sum = [&](std::initializer_list<const char*> labels) {
        std::int64_t s = 0;
        for (const char* l : labels) {
            s += predicted.term(l);
        }
        return s;
    };
    auto push = [&](const std::string& label, std::int64_t measured, std::int64_t pred,
                    bool flaggable) {
        ValidationReport::TermRatio t;
        t.label = label;
        t.measured = measured;
        t.predicted = pred;
        t.ratio = pred > 0 ? static_cast<double>(measured) / static_cast<double>(pred) : 0.0;
        t.flagged = flaggable && pred > 0 && (t.ratio < 0.2 || t.ratio > 5.0);
        report.any_flagged |= t.flagged;
        report.per_term.push_back(std::move(t));
    };

    switch (method) {
        case Method::JacobianContraction:
            push("fp_part", phase_sum({"forward", "vjp_sweep"}), predicted.term("n_o_fp"), true);
            push("contraction", phase_sum({"contraction"}),
                 term_sum({"n2_o2_t_w2", "n2_o2_t_f_w2", "n2_o2_p", "n2_o3_w"}), true);
            break;
        case Method::NtkVectorProducts:
            push("side_prep", phase_sum({"forward", "vjp_sweep"}), predicted.term("side_prep"),
                 true);
            push("jvp_part", phase_sum({"jvp_sweep"}),
                 term_sum({"n2_o_t_w2", "n2_o_t_d_f_w2", "n2_o_fp", "n2_o2_w"}), true);
            break;
        case Method::StructuredDerivatives:
            push("fp_part", phase_sum({"forward", "cotangent_sweep"}), predicted.term("n_o_fp"),
                 true);
            push("mjjmp", phase_sum({"mjjmp", "mjjmp_prepare"}),
                 term_sum({"n2_o2_t_w", "n2_o2_t_min", "mjjmp", "n2_o3"}), true);
            // Subarray extraction is data movement; the n*j prediction tracks
            // stored elements, so it is reported without a flag.
            push("n_j", phase_sum({"subarray"}), predicted.term("n_j"), false);
            break;
        case Method::Auto:
            break;
    }
    const double r = report.total_ratio;
    if (r < 0.2 || r > 5.0) {
        report.any_flagged = true;
    }
    return report;
}

}  // namespace ntk
