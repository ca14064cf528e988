#include "ntk/mjjmp.hpp"

#include <algorithm>
#include <map>

namespace ntk {

namespace {

std::int64_t axes_product(const Shape& shape, const std::vector<int>& axes) {
    std::int64_t p = 1;
    for (int a : axes) p *= shape.dim(a);
    return p;
}

bool same_tag(const StructureTag& a, const StructureTag& b) {
    return a.kind == b.kind && a.out_axes == b.out_axes && a.param_axes == b.param_axes &&
           a.block_count == b.block_count;
}

bool same_tags(const std::vector<StructureTag>& a, const std::vector<StructureTag>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!same_tag(a[i], b[i])) return false;
    }
    return true;
}

// One structured unit keyed by its parameter axes. Tags decompose into
// per-axis atoms when their axis extents pair up; flat groups over unequal
// extents (reshape-style) stay whole.
struct Atom {
    StructureKind kind;
    std::vector<int> param_axes;  // key (listed order significant)
    std::vector<int> out_axes;    // empty for InputBlockTiled
    std::int64_t c = 1;
};

void decompose(const std::vector<StructureTag>& tags, const Shape& y, const Shape& theta,
               std::vector<Atom>* atoms, std::vector<StructureTag>* obt) {
    for (const StructureTag& tag : tags) {
        switch (tag.kind) {
            case StructureKind::OutputBlockTiled:
                obt->push_back(tag);
                break;
            case StructureKind::InputBlockTiled:
                for (int a : tag.param_axes) {
                    atoms->push_back({StructureKind::InputBlockTiled, {a}, {}, theta.dim(a)});
                }
                break;
            case StructureKind::BlockTiled: {
                StructureTag t;
                t.kind = StructureKind::OutputBlockTiled;
                t.out_axes = tag.out_axes;
                t.block_count = axes_product(y, tag.out_axes);
                obt->push_back(std::move(t));
                for (int a : tag.param_axes) {
                    atoms->push_back({StructureKind::InputBlockTiled, {a}, {}, theta.dim(a)});
                }
                break;
            }
            case StructureKind::ConstantBlockDiagonal:
            case StructureKind::BlockDiagonal: {
                bool per_axis = tag.out_axes.size() == tag.param_axes.size();
                if (per_axis) {
                    for (std::size_t i = 0; i < tag.out_axes.size(); ++i) {
                        if (y.dim(tag.out_axes[i]) != theta.dim(tag.param_axes[i])) {
                            per_axis = false;
                            break;
                        }
                    }
                }
                if (per_axis) {
                    for (std::size_t i = 0; i < tag.out_axes.size(); ++i) {
                        atoms->push_back({tag.kind,
                                          {tag.param_axes[i]},
                                          {tag.out_axes[i]},
                                          theta.dim(tag.param_axes[i])});
                    }
                } else {
                    atoms->push_back({tag.kind, tag.param_axes, tag.out_axes, tag.block_count});
                }
                break;
            }
            case StructureKind::NoStructure:
                throw StructureError("NoStructure cannot appear as a tag");
        }
    }
}

StructureKind combine_kinds(StructureKind a, StructureKind b) {
    using K = StructureKind;
    if (a == K::ConstantBlockDiagonal && b == K::ConstantBlockDiagonal) {
        return K::ConstantBlockDiagonal;
    }
    const bool a_diag = a == K::ConstantBlockDiagonal || a == K::BlockDiagonal;
    const bool b_diag = b == K::ConstantBlockDiagonal || b == K::BlockDiagonal;
    if (a_diag && b_diag) return K::BlockDiagonal;
    if (a == K::InputBlockTiled && b == K::InputBlockTiled) return K::InputBlockTiled;
    return K::NoStructure;
}

}  // namespace

const char* order_name(ContractionOrder order) {
    switch (order) {
        case ContractionOrder::OutsideIn: return "outside_in";
        case ContractionOrder::LeftToRight: return "left_to_right";
        case ContractionOrder::InsideOut: return "inside_out";
        case ContractionOrder::Auto: return "auto";
    }
    return "?";
}

CommonStructure intersect_structures(const std::vector<StructureTag>& b_tags,
                                     const std::vector<StructureTag>& c_tags, const Shape& y1,
                                     const Shape& y2, const Shape& theta) {
    std::vector<Atom> b_atoms, c_atoms;
    CommonStructure out;
    decompose(b_tags, y1, theta, &b_atoms, &out.b_tags);
    decompose(c_tags, y2, theta, &c_atoms, &out.c_tags);

    std::map<std::vector<int>, std::pair<int, int>> by_key;  // param axes -> atom indices
    for (std::size_t i = 0; i < b_atoms.size(); ++i) {
        by_key[b_atoms[i].param_axes].first = static_cast<int>(i) + 1;
    }
    for (std::size_t i = 0; i < c_atoms.size(); ++i) {
        by_key[c_atoms[i].param_axes].second = static_cast<int>(i) + 1;
    }
    for (const auto& [key, pair] : by_key) {
        if (pair.first == 0 || pair.second == 0) continue;
        const Atom& ba = b_atoms[pair.first - 1];
        const Atom& ca = c_atoms[pair.second - 1];
        const StructureKind kind = combine_kinds(ba.kind, ca.kind);
        if (kind == StructureKind::NoStructure) continue;
        StructureTag bt, ct;
        bt.kind = ct.kind = kind;
        bt.param_axes = ct.param_axes = key;
        bt.block_count = ct.block_count = ba.c;
        bt.out_axes = ba.out_axes;
        ct.out_axes = ca.out_axes;
        out.b_tags.push_back(std::move(bt));
        out.c_tags.push_back(std::move(ct));
    }
    return out;
}

StructuredJacobian relax_to(const StructuredJacobian& sj, const std::vector<StructureTag>& tags) {
    if (same_tags(sj.tags, tags)) {
        return sj;
    }
    StructuredJacobian out;
    out.y_shape = sj.y_shape;
    out.theta_shape = sj.theta_shape;
    out.tags = tags;
    const Shape want = subarray_shape(out.y_shape, out.theta_shape, tags);
    Tensor sub(want);

    // Canonical layout bookkeeping for the target tags.
    std::vector<int> bd_tags;
    std::vector<bool> y_used(out.y_shape.rank(), false), th_used(out.theta_shape.rank(), false);
    for (std::size_t t = 0; t < tags.size(); ++t) {
        for (int a : tags[t].out_axes) y_used[a] = true;
        for (int a : tags[t].param_axes) th_used[a] = true;
        if (tags[t].kind == StructureKind::BlockDiagonal) bd_tags.push_back(static_cast<int>(t));
    }
    std::vector<int> y_res, th_res;
    for (std::size_t a = 0; a < out.y_shape.rank(); ++a) {
        if (!y_used[a]) y_res.push_back(static_cast<int>(a));
    }
    for (std::size_t a = 0; a < out.theta_shape.rank(); ++a) {
        if (!th_used[a]) th_res.push_back(static_cast<int>(a));
    }

    const std::int64_t total = want.numel();
    std::vector<std::int64_t> yc(out.y_shape.rank(), 0), pc(out.theta_shape.rank(), 0);
    for (std::int64_t flat = 0; flat < total; ++flat) {
        // Decode the canonical subarray index into representative (iy, ip).
        std::fill(yc.begin(), yc.end(), 0);
        std::fill(pc.begin(), pc.end(), 0);
        std::int64_t rest = flat;
        std::vector<std::int64_t> parts;
        std::int64_t divisor = 1;
        // Walk dims from last to first: th_res, y_res, bd blocks.
        for (std::size_t k = th_res.size(); k-- > 0;) {
            const std::int64_t d = out.theta_shape.dim(th_res[k]);
            pc[th_res[k]] = rest % d;
            rest /= d;
            divisor *= d;
        }
        for (std::size_t k = y_res.size(); k-- > 0;) {
            const std::int64_t d = out.y_shape.dim(y_res[k]);
            yc[y_res[k]] = rest % d;
            rest /= d;
        }
        for (std::size_t k = bd_tags.size(); k-- > 0;) {
            const StructureTag& tag = tags[bd_tags[k]];
            std::int64_t v = rest % tag.block_count;
            rest /= tag.block_count;
            // Pin both sides of the diagonal block.
            std::int64_t vy = v;
            for (std::size_t m = tag.out_axes.size(); m-- > 0;) {
                yc[tag.out_axes[m]] = vy % out.y_shape.dim(tag.out_axes[m]);
                vy /= out.y_shape.dim(tag.out_axes[m]);
            }
            std::int64_t vp = v;
            for (std::size_t m = tag.param_axes.size(); m-- > 0;) {
                pc[tag.param_axes[m]] = vp % out.theta_shape.dim(tag.param_axes[m]);
                vp /= out.theta_shape.dim(tag.param_axes[m]);
            }
        }
        std::int64_t iy = 0, ip = 0;
        for (std::size_t d = 0; d < out.y_shape.rank(); ++d) {
            iy = iy * out.y_shape.dim(d) + yc[d];
        }
        for (std::size_t d = 0; d < out.theta_shape.rank(); ++d) {
            ip = ip * out.theta_shape.dim(d) + pc[d];
        }
        sub.at(flat) = structured_entry(sj, iy, ip);
    }
    out.subarray = std::move(sub);
    return out;
}

namespace {

// Merged common-structure dimensions of one summand.
struct NormalForm {
    std::int64_t c_cbd = 1, c_bd = 1;
    std::int64_t y1r = 1, y2r = 1, pr = 1;
    std::int64_t gamma = 1;
    bool presum1 = false, presum2 = false;
    std::int64_t y1_full = 1, y2_full = 1;
    CommonStructure common;
    // Per-side axis orderings for the (o, c_cbd, c_bd, y_r) cotangent layout.
    std::vector<int> y1_perm, y2_perm;  // cbd axes, bd axes, residual axes
    std::vector<int> y1_obt_axes, y2_obt_axes;
};

// Orders target tags canonically: CBD atoms, then BD, then IBT (by parameter
// axis key), with output tiles last. Both sides share the atom order.
void canonical_tag_order(std::vector<StructureTag>* tags) {
    auto rank_of = [](const StructureTag& t) {
        switch (t.kind) {
            case StructureKind::ConstantBlockDiagonal: return 0;
            case StructureKind::BlockDiagonal: return 1;
            case StructureKind::InputBlockTiled: return 2;
            case StructureKind::OutputBlockTiled: return 3;
            default: return 4;
        }
    };
    std::stable_sort(tags->begin(), tags->end(),
                     [&](const StructureTag& a, const StructureTag& b) {
                         const int ra = rank_of(a), rb = rank_of(b);
                         if (ra != rb) return ra < rb;
                         return a.param_axes < b.param_axes;
                     });
}

NormalForm build_normal_form(const Shape& y1, const std::vector<StructureTag>& b_tags,
                             const Shape& y2, const std::vector<StructureTag>& c_tags,
                             const Shape& theta) {
    NormalForm nf;
    nf.common = intersect_structures(b_tags, c_tags, y1, y2, theta);
    canonical_tag_order(&nf.common.b_tags);
    canonical_tag_order(&nf.common.c_tags);
    nf.y1_full = y1.numel();
    nf.y2_full = y2.numel();

    auto side = [&](const Shape& y, const std::vector<StructureTag>& tags, std::int64_t* y_res,
                    std::vector<int>* perm, std::vector<int>* obt_axes, bool* presum) {
        std::vector<bool> used(y.rank(), false);
        std::vector<int> cbd_axes, bd_axes;
        for (const StructureTag& tag : tags) {
            if (tag.kind == StructureKind::OutputBlockTiled) {
                for (int a : tag.out_axes) {
                    obt_axes->push_back(a);
                    used[a] = true;
                }
                *presum = true;
            } else {
                for (int a : tag.out_axes) {
                    used[a] = true;
                    (tag.kind == StructureKind::BlockDiagonal ? bd_axes : cbd_axes).push_back(a);
                }
            }
        }
        perm->insert(perm->end(), cbd_axes.begin(), cbd_axes.end());
        perm->insert(perm->end(), bd_axes.begin(), bd_axes.end());
        for (std::size_t a = 0; a < y.rank(); ++a) {
            if (!used[a]) {
                perm->push_back(static_cast<int>(a));
                *y_res *= y.dim(a);
            }
        }
    };
    side(y1, nf.common.b_tags, &nf.y1r, &nf.y1_perm, &nf.y1_obt_axes, &nf.presum1);
    side(y2, nf.common.c_tags, &nf.y2r, &nf.y2_perm, &nf.y2_obt_axes, &nf.presum2);

    std::vector<bool> th_used(theta.rank(), false);
    for (const StructureTag& tag : nf.common.b_tags) {
        switch (tag.kind) {
            case StructureKind::ConstantBlockDiagonal:
                nf.c_cbd *= tag.block_count;
                break;
            case StructureKind::BlockDiagonal:
                nf.c_bd *= tag.block_count;
                break;
            case StructureKind::InputBlockTiled:
                nf.gamma *= tag.block_count;
                break;
            default:
                break;
        }
        for (int a : tag.param_axes) th_used[a] = true;
    }
    for (std::size_t a = 0; a < theta.rank(); ++a) {
        if (!th_used[a]) nf.pr *= theta.dim(a);
    }
    return nf;
}

struct CostTerm {
    const char* label;
    std::int64_t k;
    int a1, a2, ao;

    std::int64_t value(std::int64_t n1, std::int64_t n2, std::int64_t o) const {
        std::int64_t v = k;
        for (int i = 0; i < a1; ++i) v *= n1;
        for (int i = 0; i < a2; ++i) v *= n2;
        for (int i = 0; i < ao; ++i) v *= o;
        return v;
    }
    bool dominated_by(const CostTerm& other) const {
        return k <= other.k && a1 <= other.a1 && a2 <= other.a2 && ao <= other.ao;
    }
    bool same_signature(const CostTerm& other) const {
        return k == other.k && a1 == other.a1 && a2 == other.a2 && ao == other.ao;
    }
};

std::vector<CostTerm> order_terms(const NormalForm& nf, ContractionOrder order) {
    const std::int64_t ce = nf.c_cbd, cb = nf.c_bd;
    std::vector<CostTerm> terms;
    if (nf.presum1) terms.push_back({"presum_left", nf.y1_full, 1, 0, 1});
    if (nf.presum2) terms.push_back({"presum_right", nf.y2_full, 0, 1, 1});
    switch (order) {
        case ContractionOrder::OutsideIn:
            terms.push_back({"ab_left", ce * cb * nf.y1r * nf.pr, 1, 0, 1});
            terms.push_back({"dc_right", ce * cb * nf.y2r * nf.pr, 0, 1, 1});
            terms.push_back({"outer_pair", ce * cb * nf.pr, 1, 1, 2});
            break;
        case ContractionOrder::LeftToRight:
            terms.push_back({"ab_left", ce * cb * nf.y1r * nf.pr, 1, 0, 1});
            terms.push_back({"abc_pair", ce * cb * nf.pr * nf.y2r, 1, 1, 1});
            terms.push_back({"right_pair", ce * cb * nf.y2r, 1, 1, 2});
            break;
        case ContractionOrder::InsideOut:
            terms.push_back({"inner_pair", cb * nf.y1r * nf.y2r * nf.pr, 1, 1, 0});
            terms.push_back({"mid_pair", ce * cb * nf.y1r * nf.y2r, 1, 1, 1});
            terms.push_back({"right_pair", ce * cb * nf.y2r, 1, 1, 2});
            break;
        case ContractionOrder::Auto:
            throw NtkError("auto order has no term list");
    }
    return terms;
}

// Drops terms that are dominated for every n1, n2, o >= 1.
std::vector<CostTerm> prune_terms(std::vector<CostTerm> terms) {
    std::vector<CostTerm> kept;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        bool drop = false;
        for (std::size_t j = 0; j < terms.size() && !drop; ++j) {
            if (i == j) continue;
            if (terms[i].dominated_by(terms[j]) &&
                (!terms[i].same_signature(terms[j]) || j < i)) {
                drop = true;
            }
        }
        if (!drop) kept.push_back(terms[i]);
    }
    return kept;
}

}  // namespace

MjjmpCost mjjmp_cost(const Shape& y1, const std::vector<StructureTag>& b_tags, const Shape& y2,
                     const std::vector<StructureTag>& c_tags, const Shape& theta, std::int64_t o,
                     std::int64_t n1, std::int64_t n2, ContractionOrder order) {
    if (order == ContractionOrder::Auto) {
        throw NtkError("mjjmp_cost requires a concrete order");
    }
    const NormalForm nf = build_normal_form(y1, b_tags, y2, c_tags, theta);
    MjjmpCost cost;
    for (const CostTerm& t : prune_terms(order_terms(nf, order))) {
        const std::int64_t v = t.value(n1, n2, o);
        cost.terms.emplace_back(t.label, v);
        cost.flops += v;
    }
    const std::int64_t sub_elems = nf.c_bd * nf.pr * (nf.y1r + nf.y2r);
    cost.subarray_bytes = 8 * (n1 * nf.c_bd * nf.y1r * nf.pr + n2 * nf.c_bd * nf.y2r * nf.pr);
    (void)sub_elems;
    const std::int64_t ce_cb = nf.c_cbd * nf.c_bd;
    switch (order) {
        case ContractionOrder::OutsideIn:
            cost.peak_intermediate_bytes = 8 * (n1 + n2) * o * ce_cb * nf.pr;
            break;
        case ContractionOrder::LeftToRight:
            cost.peak_intermediate_bytes = 8 * (n1 * o * ce_cb * nf.pr + o * ce_cb * nf.y2r);
            break;
        case ContractionOrder::InsideOut:
            cost.peak_intermediate_bytes =
                8 * (nf.c_bd * nf.y1r * nf.y2r + o * ce_cb * nf.y2r);
            break;
        case ContractionOrder::Auto:
            break;
    }
    return cost;
}

ContractionOrder select_order(const Shape& y1, const std::vector<StructureTag>& b_tags,
                              const Shape& y2, const std::vector<StructureTag>& c_tags,
                              const Shape& theta, std::int64_t o, std::int64_t n1,
                              std::int64_t n2) {
    const ContractionOrder orders[] = {ContractionOrder::InsideOut, ContractionOrder::LeftToRight,
                                       ContractionOrder::OutsideIn};
    ContractionOrder best = ContractionOrder::InsideOut;
    std::int64_t best_flops = -1;
    for (ContractionOrder order : orders) {
        const std::int64_t f =
            mjjmp_cost(y1, b_tags, y2, c_tags, theta, o, n1, n2, order).flops;
        if (best_flops < 0 || f < best_flops) {
            best = order;
            best_flops = f;
        }
    }
    return best;
}

namespace {

// Gathers one cotangent (o, y_numel) into the canonical (o, ce, cb, yr)
// layout, presumming output-tiled axes.
Tensor canonicalize_cotangent(const Tensor& cot, const Shape& y_shape,
                              const std::vector<int>& perm, const std::vector<int>& obt_axes,
                              std::int64_t o) {
    const std::int64_t y_full = y_shape.numel();
    std::int64_t reduced = 1;
    for (std::size_t d = 0; d < perm.size(); ++d) {
        reduced *= y_shape.dim(perm[d]);
    }
    Tensor out(Shape{o, std::max<std::int64_t>(reduced, 1)});
    const auto strides = row_major_strides(y_shape);
    // Destination stride per source axis: obt axes collapse to 0.
    std::vector<std::int64_t> dst_stride(y_shape.rank(), 0);
    {
        std::int64_t s = 1;
        for (std::size_t d = perm.size(); d-- > 0;) {
            dst_stride[perm[d]] = s;
            s *= y_shape.dim(perm[d]);
        }
    }
    const std::size_t rank = y_shape.rank();
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t r = 0; r < o; ++r) {
        std::fill(idx.begin(), idx.end(), 0);
        std::int64_t dst = 0;
        const double* src = cot.data() + r * y_full;
        double* po = out.data() + r * reduced;
        for (std::int64_t flat = 0; flat < y_full; ++flat) {
            po[dst] += src[flat];
            for (std::size_t d = rank; d-- > 0;) {
                ++idx[d];
                dst += dst_stride[d];
                if (idx[d] < y_shape.dim(d)) break;
                idx[d] = 0;
                dst -= dst_stride[d] * y_shape.dim(d);
            }
        }
    }
    if (!obt_axes.empty()) {
        count_flops(o * y_full);
    }
    return out;
}

}  // namespace

Tensor mjjmp_execute(const MjjmpOperands& ops, ContractionOrder order) {
    const std::int64_t n1 = static_cast<std::int64_t>(ops.a_cots.size());
    const std::int64_t n2 = static_cast<std::int64_t>(ops.d_cots.size());
    const std::int64_t o = ops.o;
    if (ops.b_subs.size() != static_cast<std::size_t>(n1) ||
        ops.c_subs.size() != static_cast<std::size_t>(n2) || n1 == 0 || n2 == 0) {
        throw StructureError("mjjmp operand batch sizes are inconsistent");
    }
    const std::vector<StructureTag>& b_tags = ops.b_subs[0].tags;
    const std::vector<StructureTag>& c_tags = ops.c_subs[0].tags;
    if (order == ContractionOrder::Auto) {
        order = select_order(ops.y1_shape, b_tags, ops.y2_shape, c_tags, ops.theta_shape, o, n1,
                             n2);
    }
    const NormalForm nf =
        build_normal_form(ops.y1_shape, b_tags, ops.y2_shape, c_tags, ops.theta_shape);
    const std::int64_t ce = nf.c_cbd, cb = nf.c_bd;
    const std::int64_t y1r = nf.y1r, y2r = nf.y2r, pr = nf.pr;
    const double gamma = static_cast<double>(nf.gamma);

    // Relax subarrays to the common tags and canonicalize cotangents.
    std::vector<Tensor> subB(n1), subC(n2), A(n1), D(n2);
    {
        PhaseScope phase("mjjmp_prepare");
        for (std::int64_t i = 0; i < n1; ++i) {
            subB[i] = relax_to(ops.b_subs[i], nf.common.b_tags).subarray;
            A[i] = canonicalize_cotangent(ops.a_cots[i], ops.y1_shape, nf.y1_perm, nf.y1_obt_axes,
                                          o);
        }
        for (std::int64_t j = 0; j < n2; ++j) {
            subC[j] = relax_to(ops.c_subs[j], nf.common.c_tags).subarray;
            D[j] = canonicalize_cotangent(ops.d_cots[j], ops.y2_shape, nf.y2_perm, nf.y2_obt_axes,
                                          o);
        }
    }

    Tensor result(Shape{n1 * o, n2 * o});
    auto emit = [&](std::int64_t i, std::int64_t j, const double* block) {
        // block is (o, o) for pair (i, j).
        for (std::int64_t a = 0; a < o; ++a) {
            double* dst = result.data() + (i * o + a) * n2 * o + j * o;
            const double* src = block + a * o;
            for (std::int64_t b = 0; b < o; ++b) {
                dst[b] = gamma * src[b];
            }
        }
        if (nf.gamma != 1) count_flops(o * o);
    };

    // Final contraction shared by all orders: (o, ce, cb, m) x (o, ce, cb, m).
    auto pair_contract = [&](const double* left, const double* right, std::int64_t m,
                             double* block) {
        std::fill(block, block + o * o, 0.0);
        const std::int64_t inner = ce * cb * m;
        for (std::int64_t a = 0; a < o; ++a) {
            const double* l = left + a * inner;
            for (std::int64_t b = 0; b < o; ++b) {
                const double* r = right + b * inner;
                double s = 0.0;
                for (std::int64_t k = 0; k < inner; ++k) {
                    s += l[k] * r[k];
                }
                block[a * o + b] = s;
            }
        }
        count_flops(o * o * inner);
    };

    std::vector<double> block(static_cast<std::size_t>(o * o));

    if (order == ContractionOrder::OutsideIn) {
        // AB[i], DC[j]: (o, ce, cb, pr); then pairwise inner product.
        auto half = [&](const Tensor& cot, const Tensor& sub, std::int64_t yr) {
            Tensor out(Shape{o, std::max<std::int64_t>(ce * cb * pr, 1)});
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t e = 0; e < ce; ++e) {
                    for (std::int64_t b = 0; b < cb; ++b) {
                        const double* c = cot.data() + ((a * ce + e) * cb + b) * yr;
                        const double* s = sub.data() + b * yr * pr;
                        double* dst = out.data() + ((a * ce + e) * cb + b) * pr;
                        for (std::int64_t r = 0; r < yr; ++r) {
                            const double cv = c[r];
                            const double* srow = s + r * pr;
                            for (std::int64_t q = 0; q < pr; ++q) {
                                dst[q] += cv * srow[q];
                            }
                        }
                    }
                }
            }
            count_flops(o * ce * cb * yr * pr);
            return out;
        };
        std::vector<Tensor> AB(n1), DC(n2);
        for (std::int64_t i = 0; i < n1; ++i) AB[i] = half(A[i], subB[i], y1r);
        for (std::int64_t j = 0; j < n2; ++j) DC[j] = half(D[j], subC[j], y2r);
        for (std::int64_t i = 0; i < n1; ++i) {
            for (std::int64_t j = 0; j < n2; ++j) {
                pair_contract(AB[i].data(), DC[j].data(), pr, block.data());
                emit(i, j, block.data());
            }
        }
        return result;
    }

    if (order == ContractionOrder::LeftToRight) {
        std::vector<Tensor> AB(n1);
        for (std::int64_t i = 0; i < n1; ++i) {
            Tensor out(Shape{o, std::max<std::int64_t>(ce * cb * pr, 1)});
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t e = 0; e < ce; ++e) {
                    for (std::int64_t b = 0; b < cb; ++b) {
                        const double* c = A[i].data() + ((a * ce + e) * cb + b) * y1r;
                        const double* s = subB[i].data() + b * y1r * pr;
                        double* dst = out.data() + ((a * ce + e) * cb + b) * pr;
                        for (std::int64_t r = 0; r < y1r; ++r) {
                            const double cv = c[r];
                            const double* srow = s + r * pr;
                            for (std::int64_t q = 0; q < pr; ++q) {
                                dst[q] += cv * srow[q];
                            }
                        }
                    }
                }
            }
            count_flops(o * ce * cb * y1r * pr);
            AB[i] = std::move(out);
        }
        Tensor abc(Shape{o, std::max<std::int64_t>(ce * cb * y2r, 1)});
        for (std::int64_t i = 0; i < n1; ++i) {
            for (std::int64_t j = 0; j < n2; ++j) {
                std::fill(abc.data(), abc.data() + abc.numel(), 0.0);
                for (std::int64_t a = 0; a < o; ++a) {
                    for (std::int64_t e = 0; e < ce; ++e) {
                        for (std::int64_t b = 0; b < cb; ++b) {
                            const double* l = AB[i].data() + ((a * ce + e) * cb + b) * pr;
                            const double* s = subC[j].data() + b * y2r * pr;
                            double* dst = abc.data() + ((a * ce + e) * cb + b) * y2r;
                            for (std::int64_t sidx = 0; sidx < y2r; ++sidx) {
                                const double* srow = s + sidx * pr;
                                double acc = 0.0;
                                for (std::int64_t q = 0; q < pr; ++q) {
                                    acc += l[q] * srow[q];
                                }
                                dst[sidx] = acc;
                            }
                        }
                    }
                }
                count_flops(o * ce * cb * y2r * pr);
                pair_contract(abc.data(), D[j].data(), y2r, block.data());
                emit(i, j, block.data());
            }
        }
        return result;
    }

    // Inside-out.
    Tensor m(Shape{std::max<std::int64_t>(cb * y1r * y2r, 1)});
    Tensor t(Shape{o, std::max<std::int64_t>(ce * cb * y2r, 1)});
    for (std::int64_t i = 0; i < n1; ++i) {
        for (std::int64_t j = 0; j < n2; ++j) {
            std::fill(m.data(), m.data() + m.numel(), 0.0);
            for (std::int64_t b = 0; b < cb; ++b) {
                const double* pb = subB[i].data() + b * y1r * pr;
                const double* pcs = subC[j].data() + b * y2r * pr;
                double* pm = m.data() + b * y1r * y2r;
                for (std::int64_t r = 0; r < y1r; ++r) {
                    for (std::int64_t s = 0; s < y2r; ++s) {
                        double acc = 0.0;
                        const double* br = pb + r * pr;
                        const double* cs = pcs + s * pr;
                        for (std::int64_t q = 0; q < pr; ++q) {
                            acc += br[q] * cs[q];
                        }
                        pm[r * y2r + s] = acc;
                    }
                }
            }
            count_flops(cb * y1r * y2r * pr);
            std::fill(t.data(), t.data() + t.numel(), 0.0);
            for (std::int64_t a = 0; a < o; ++a) {
                for (std::int64_t e = 0; e < ce; ++e) {
                    for (std::int64_t b = 0; b < cb; ++b) {
                        const double* c = A[i].data() + ((a * ce + e) * cb + b) * y1r;
                        const double* pm = m.data() + b * y1r * y2r;
                        double* dst = t.data() + ((a * ce + e) * cb + b) * y2r;
                        for (std::int64_t r = 0; r < y1r; ++r) {
                            const double cv = c[r];
                            const double* mrow = pm + r * y2r;
                            for (std::int64_t s = 0; s < y2r; ++s) {
                                dst[s] += cv * mrow[s];
                            }
                        }
                    }
                }
            }
            count_flops(o * ce * cb * y1r * y2r);
            pair_contract(t.data(), D[j].data(), y2r, block.data());
            emit(i, j, block.data());
        }
    }
    return result;
}

}  // namespace ntk
