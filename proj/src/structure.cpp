#include "ntk/structure.hpp"

#include <algorithm>
#include <atomic>

namespace ntk {

namespace {

std::atomic<bool> g_corrupt_rules{false};

std::int64_t axes_product(const Shape& shape, const std::vector<int>& axes) {
    std::int64_t p = 1;
    for (int a : axes) {
        p *= shape.dim(a);
    }
    return p;
}

void check_axes(const Shape& shape, const std::vector<int>& axes, const char* what) {
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(shape.rank())) {
            throw StructureError(std::string(what) + " axis out of range for " + shape.str());
        }
    }
}

// Flat row-major value of the coordinates of `idx` restricted to `axes`, in
// listed order.
std::int64_t group_value(const std::vector<std::int64_t>& coords, const Shape& shape,
                         const std::vector<int>& axes) {
    std::int64_t v = 0;
    for (int a : axes) {
        v = v * shape.dim(a) + coords[a];
    }
    return v;
}

std::vector<std::int64_t> unflatten(std::int64_t flat, const Shape& shape) {
    std::vector<std::int64_t> coords(shape.rank(), 0);
    for (std::size_t d = shape.rank(); d-- > 0;) {
        coords[d] = flat % shape.dim(d);
        flat /= shape.dim(d);
    }
    return coords;
}

struct TagLayout {
    std::vector<int> bd_tags;                   // indices into tags
    std::vector<int> y_res_axes, th_res_axes;   // ascending
    std::vector<std::int64_t> sub_dims;         // canonical subarray dims
};

TagLayout tag_layout(const Shape& y_shape, const Shape& theta_shape,
                     const std::vector<StructureTag>& tags) {
    std::vector<bool> y_used(y_shape.rank(), false);
    std::vector<bool> th_used(theta_shape.rank(), false);
    TagLayout layout;
    for (std::size_t t = 0; t < tags.size(); ++t) {
        const StructureTag& tag = tags[t];
        check_axes(y_shape, tag.out_axes, "out");
        check_axes(theta_shape, tag.param_axes, "param");
        for (int a : tag.out_axes) {
            if (y_used[a]) throw StructureError("output axis used by two tags");
            y_used[a] = true;
        }
        for (int a : tag.param_axes) {
            if (th_used[a]) throw StructureError("parameter axis used by two tags");
            th_used[a] = true;
        }
        const std::int64_t cy = axes_product(y_shape, tag.out_axes);
        const std::int64_t cp = axes_product(theta_shape, tag.param_axes);
        switch (tag.kind) {
            case StructureKind::ConstantBlockDiagonal:
            case StructureKind::BlockDiagonal:
                if (cy != cp || cy != tag.block_count) {
                    throw StructureError("block-diagonal tag extents do not match block count");
                }
                if (tag.kind == StructureKind::BlockDiagonal) {
                    layout.bd_tags.push_back(static_cast<int>(t));
                }
                break;
            case StructureKind::OutputBlockTiled:
                if (!tag.param_axes.empty() || cy != tag.block_count) {
                    throw StructureError("output-block-tiled tag is inconsistent");
                }
                break;
            case StructureKind::InputBlockTiled:
                if (!tag.out_axes.empty() || cp != tag.block_count) {
                    throw StructureError("input-block-tiled tag is inconsistent");
                }
                break;
            case StructureKind::BlockTiled:
                if (cy != tag.block_count || cp != tag.block_count) {
                    throw StructureError("block-tiled tag extents do not match block count");
                }
                break;
            case StructureKind::NoStructure:
                throw StructureError("NoStructure cannot appear as a tag");
        }
    }
    for (std::size_t a = 0; a < y_shape.rank(); ++a) {
        if (!y_used[a]) layout.y_res_axes.push_back(static_cast<int>(a));
    }
    for (std::size_t a = 0; a < theta_shape.rank(); ++a) {
        if (!th_used[a]) layout.th_res_axes.push_back(static_cast<int>(a));
    }
    for (int t : layout.bd_tags) {
        layout.sub_dims.push_back(tags[t].block_count);
    }
    for (int a : layout.y_res_axes) {
        layout.sub_dims.push_back(y_shape.dim(a));
    }
    for (int a : layout.th_res_axes) {
        layout.sub_dims.push_back(theta_shape.dim(a));
    }
    return layout;
}

}  // namespace

const char* structure_name(StructureKind kind) {
    switch (kind) {
        case StructureKind::NoStructure: return "none";
        case StructureKind::BlockDiagonal: return "block_diagonal";
        case StructureKind::ConstantBlockDiagonal: return "constant_block_diagonal";
        case StructureKind::InputBlockTiled: return "input_block_tiled";
        case StructureKind::OutputBlockTiled: return "output_block_tiled";
        case StructureKind::BlockTiled: return "block_tiled";
    }
    return "?";
}

Shape subarray_shape(const Shape& y_shape, const Shape& theta_shape,
                     const std::vector<StructureTag>& tags) {
    return Shape(tag_layout(y_shape, theta_shape, tags).sub_dims);
}

double structured_entry(const StructuredJacobian& sj, std::int64_t iy, std::int64_t ip) {
    const auto yc = unflatten(iy, sj.y_shape);
    const auto pc = unflatten(ip, sj.theta_shape);
    for (const StructureTag& tag : sj.tags) {
        if (tag.kind == StructureKind::ConstantBlockDiagonal ||
            tag.kind == StructureKind::BlockDiagonal) {
            const std::int64_t vy = group_value(yc, sj.y_shape, tag.out_axes);
            const std::int64_t vp = group_value(pc, sj.theta_shape, tag.param_axes);
            if (vy != vp) {
                return 0.0;
            }
        }
    }
    const TagLayout layout = tag_layout(sj.y_shape, sj.theta_shape, sj.tags);
    std::int64_t sub_flat = 0;
    for (int t : layout.bd_tags) {
        const StructureTag& tag = sj.tags[t];
        sub_flat = sub_flat * tag.block_count + group_value(yc, sj.y_shape, tag.out_axes);
    }
    for (int a : layout.y_res_axes) {
        sub_flat = sub_flat * sj.y_shape.dim(a) + yc[a];
    }
    for (int a : layout.th_res_axes) {
        sub_flat = sub_flat * sj.theta_shape.dim(a) + pc[a];
    }
    return sj.subarray.at(sub_flat);
}

Tensor reconstruct(const StructuredJacobian& sj) {
    if (sj.subarray.shape() != subarray_shape(sj.y_shape, sj.theta_shape, sj.tags)) {
        throw StructureError("subarray shape " + sj.subarray.shape().str() +
                             " does not match tags (expected " +
                             subarray_shape(sj.y_shape, sj.theta_shape, sj.tags).str() + ")");
    }
    const std::int64_t y = sj.y_numel(), p = sj.p_numel();
    Tensor dense(Shape{y, p});
    for (std::int64_t iy = 0; iy < y; ++iy) {
        for (std::int64_t ip = 0; ip < p; ++ip) {
            dense.at(iy * p + ip) = structured_entry(sj, iy, ip);
        }
    }
    return dense;
}

std::vector<StructureTag> structure_rule(const Node& node, const std::vector<Shape>& in,
                                         int param_slot) {
    if (!is_linear(node.kind)) {
        throw UnsupportedPrimitiveError(std::string("no structure rule for nonlinear primitive ") +
                                        kind_name(node.kind));
    }
    const Shape& theta = in[param_slot];
    const Shape& out = node.out_shape;
    std::vector<StructureTag> tags;
    auto cbd = [&](std::vector<int> oa, std::vector<int> pa) {
        StructureTag t;
        t.kind = StructureKind::ConstantBlockDiagonal;
        t.block_count = axes_product(out, oa);
        t.out_axes = std::move(oa);
        t.param_axes = std::move(pa);
        tags.push_back(std::move(t));
    };
    switch (node.kind) {
        case PrimitiveKind::MatMul:
            if (param_slot == 0) {
                cbd({0}, {0});
            } else {
                cbd({1}, {1});
            }
            return tags;
        case PrimitiveKind::Conv2dCircular:
            if (param_slot == 1) {
                cbd({2}, {3});
                return tags;
            }
            return {};  // unannotated: dy/dx of a convolution is circulant, not blocked
        case PrimitiveKind::Add:
        case PrimitiveKind::Sub: {
            // Matched axes are constant-block diagonal; axes the parameter
            // lacks are output tiles.
            const std::size_t off = out.rank() - theta.rank();
            std::vector<int> oa, pa, tiled;
            for (std::size_t i = 0; i < off; ++i) {
                tiled.push_back(static_cast<int>(i));
            }
            for (std::size_t i = 0; i < theta.rank(); ++i) {
                if (theta.dim(i) == out.dim(i + off)) {
                    oa.push_back(static_cast<int>(i + off));
                    pa.push_back(static_cast<int>(i));
                } else {
                    tiled.push_back(static_cast<int>(i + off));  // theta extent 1
                }
            }
            if (!oa.empty()) {
                cbd(oa, pa);
            }
            if (!tiled.empty()) {
                std::sort(tiled.begin(), tiled.end());
                StructureTag t;
                t.kind = StructureKind::OutputBlockTiled;
                t.out_axes = tiled;
                t.block_count = axes_product(out, tiled);
                tags.push_back(std::move(t));
            }
            return tags;
        }
        case PrimitiveKind::Mul: {
            // Block diagonal along the axes the parameter shares with the
            // output; broadcast axes of the parameter stay in the blocks.
            const std::size_t off = out.rank() - theta.rank();
            StructureTag t;
            t.kind = StructureKind::BlockDiagonal;
            for (std::size_t i = 0; i < theta.rank(); ++i) {
                if (theta.dim(i) == out.dim(i + off)) {
                    t.out_axes.push_back(static_cast<int>(i + off));
                    t.param_axes.push_back(static_cast<int>(i));
                }
            }
            t.block_count = axes_product(out, t.out_axes);
            tags.push_back(std::move(t));
            return tags;
        }
        case PrimitiveKind::Scale: {
            std::vector<int> all;
            for (std::size_t i = 0; i < theta.rank(); ++i) all.push_back(static_cast<int>(i));
            std::vector<int> oa = all;
            cbd(std::move(oa), std::move(all));
            return tags;
        }
        case PrimitiveKind::Reshape: {
            std::vector<int> oa, pa;
            for (std::size_t i = 0; i < out.rank(); ++i) oa.push_back(static_cast<int>(i));
            for (std::size_t i = 0; i < theta.rank(); ++i) pa.push_back(static_cast<int>(i));
            cbd(std::move(oa), std::move(pa));
            return tags;
        }
        case PrimitiveKind::Transpose: {
            std::vector<int> oa, pa;
            for (std::size_t i = 0; i < out.rank(); ++i) {
                oa.push_back(static_cast<int>(i));
                pa.push_back(node.attrs.perm[i]);
            }
            cbd(std::move(oa), std::move(pa));
            return tags;
        }
        case PrimitiveKind::BroadcastInDim: {
            std::vector<int> oa, pa, tiled;
            std::vector<bool> mapped(out.rank(), false);
            for (std::size_t i = 0; i < node.attrs.broadcast_dims.size(); ++i) {
                oa.push_back(node.attrs.broadcast_dims[i]);
                pa.push_back(static_cast<int>(i));
                mapped[node.attrs.broadcast_dims[i]] = true;
            }
            for (std::size_t i = 0; i < out.rank(); ++i) {
                if (!mapped[i]) tiled.push_back(static_cast<int>(i));
            }
            if (!oa.empty()) cbd(std::move(oa), std::move(pa));
            if (!tiled.empty()) {
                StructureTag t;
                t.kind = StructureKind::OutputBlockTiled;
                t.out_axes = tiled;
                t.block_count = axes_product(out, tiled);
                tags.push_back(std::move(t));
            }
            return tags;
        }
        case PrimitiveKind::ReduceSum: {
            std::vector<bool> reduced(theta.rank(), false);
            for (int ax : node.attrs.axes) reduced[ax] = true;
            std::vector<int> oa, pa, ibt;
            int k = 0;
            for (std::size_t i = 0; i < theta.rank(); ++i) {
                if (reduced[i]) {
                    ibt.push_back(static_cast<int>(i));
                } else {
                    oa.push_back(k++);
                    pa.push_back(static_cast<int>(i));
                }
            }
            if (!oa.empty()) cbd(std::move(oa), std::move(pa));
            if (!ibt.empty()) {
                StructureTag t;
                t.kind = StructureKind::InputBlockTiled;
                t.param_axes = ibt;
                t.block_count = axes_product(theta, ibt);
                tags.push_back(std::move(t));
            }
            return tags;
        }
        case PrimitiveKind::GlobalAvgPool: {
            cbd({0}, {2});
            StructureTag t;
            t.kind = StructureKind::InputBlockTiled;
            t.param_axes = {0, 1};
            t.block_count = theta.dim(0) * theta.dim(1);
            tags.push_back(std::move(t));
            return tags;
        }
        case PrimitiveKind::Relu:
            break;
    }
    throw UnsupportedPrimitiveError("unreachable");
}

namespace {

// Composes full coordinates: structured groups pinned to per-tag flat values,
// residual axes enumerated separately.
struct ProbeIndexer {
    const Shape& shape;
    const std::vector<int>& res_axes;

    std::vector<std::int64_t> coords(const std::vector<StructureTag>& tags, bool use_out_axes,
                                     const std::vector<std::int64_t>& tag_values,
                                     std::int64_t res_flat) const {
        std::vector<std::int64_t> c(shape.rank(), 0);
        for (std::size_t t = 0; t < tags.size(); ++t) {
            const auto& axes = use_out_axes ? tags[t].out_axes : tags[t].param_axes;
            std::int64_t v = tag_values[t];
            for (std::size_t k = axes.size(); k-- > 0;) {
                c[axes[k]] = v % shape.dim(axes[k]);
                v /= shape.dim(axes[k]);
            }
        }
        for (std::size_t k = res_axes.size(); k-- > 0;) {
            c[res_axes[k]] = res_flat % shape.dim(res_axes[k]);
            res_flat /= shape.dim(res_axes[k]);
        }
        return c;
    }

    std::int64_t flatten(const std::vector<std::int64_t>& coords) const {
        std::int64_t f = 0;
        for (std::size_t d = 0; d < shape.rank(); ++d) {
            f = f * shape.dim(d) + coords[d];
        }
        return f;
    }
};

// Closed-form subarrays for the annotated primitives.
bool rule_subarray(const Node& node, const std::vector<Tensor>& in, int param_slot,
                   const std::vector<StructureTag>& tags, Tensor* out) {
    switch (node.kind) {
        case PrimitiveKind::MatMul: {
            const Tensor& other = in[param_slot == 0 ? 1 : 0];
            Tensor sub = param_slot == 0 ? transpose(other, {1, 0}) : Tensor(other);
            if (g_corrupt_rules.load()) {
                sub = scale(sub, 1.01);
            }
            *out = std::move(sub);
            return true;
        }
        case PrimitiveKind::Conv2dCircular: {
            if (param_slot != 1) return false;
            // Wraparound input patches: sub[s, a, b, ci] = x[s + (a,b) - center].
            const Tensor& x = in[0];
            const Shape& fs = in[1].shape();
            const std::int64_t dh = x.shape().dim(0), dw = x.shape().dim(1), cin = x.shape().dim(2);
            const std::int64_t fh = fs.dim(0), fw = fs.dim(1);
            const std::int64_t ch = fh / 2, cw = fw / 2;
            Tensor sub(Shape{dh, dw, fh, fw, cin});
            for (std::int64_t i = 0; i < dh; ++i) {
                for (std::int64_t j = 0; j < dw; ++j) {
                    for (std::int64_t a = 0; a < fh; ++a) {
                        const std::int64_t ii = ((i + a - ch) % dh + dh) % dh;
                        for (std::int64_t b = 0; b < fw; ++b) {
                            const std::int64_t jj = ((j + b - cw) % dw + dw) % dw;
                            for (std::int64_t ci = 0; ci < cin; ++ci) {
                                sub.at((((i * dw + j) * fh + a) * fw + b) * cin + ci) =
                                    x.at((ii * dw + jj) * cin + ci);
                            }
                        }
                    }
                }
            }
            *out = std::move(sub);
            return true;
        }
        case PrimitiveKind::Add:
            *out = full(subarray_shape(node.out_shape, in[param_slot].shape(), tags), 1.0);
            return true;
        case PrimitiveKind::Sub:
            *out = full(subarray_shape(node.out_shape, in[param_slot].shape(), tags),
                        param_slot == 0 ? 1.0 : -1.0);
            return true;
        case PrimitiveKind::Mul: {
            const Tensor& other = in[param_slot == 0 ? 1 : 0];
            const Shape& theta = in[param_slot].shape();
            const Shape sub_shape = subarray_shape(node.out_shape, theta, tags);
            Tensor sub(sub_shape);
            const StructureTag& tag = tags[0];
            std::vector<int> res_axes;
            {
                std::vector<bool> used(node.out_shape.rank(), false);
                for (int a : tag.out_axes) used[a] = true;
                for (std::size_t i = 0; i < node.out_shape.rank(); ++i) {
                    if (!used[i]) res_axes.push_back(static_cast<int>(i));
                }
            }
            const std::size_t rank = node.out_shape.rank();
            const std::size_t off = rank - other.shape().rank();
            const auto other_own = row_major_strides(other.shape());
            std::vector<std::int64_t> ostrides(rank, 0);
            for (std::size_t i = off; i < rank; ++i) {
                if (other.shape().dim(i - off) != 1) ostrides[i] = other_own[i - off];
            }
            const std::int64_t c = tag.block_count;
            std::int64_t res_count = 1;
            for (int a : res_axes) res_count *= node.out_shape.dim(a);
            std::vector<std::int64_t> coords(rank, 0);
            for (std::int64_t b = 0; b < c; ++b) {
                for (std::int64_t rflat = 0; rflat < res_count; ++rflat) {
                    std::int64_t v = b;
                    for (std::size_t k = tag.out_axes.size(); k-- > 0;) {
                        coords[tag.out_axes[k]] = v % node.out_shape.dim(tag.out_axes[k]);
                        v /= node.out_shape.dim(tag.out_axes[k]);
                    }
                    std::int64_t r = rflat;
                    for (std::size_t k = res_axes.size(); k-- > 0;) {
                        coords[res_axes[k]] = r % node.out_shape.dim(res_axes[k]);
                        r /= node.out_shape.dim(res_axes[k]);
                    }
                    std::int64_t osrc = 0;
                    for (std::size_t d = 0; d < rank; ++d) {
                        osrc += ostrides[d] * coords[d];
                    }
                    sub.at(b * res_count + rflat) = other.at(osrc);
                }
            }
            *out = std::move(sub);
            return true;
        }
        case PrimitiveKind::Scale:
            *out = full(subarray_shape(node.out_shape, in[param_slot].shape(), tags),
                        node.attrs.scale);
            return true;
        case PrimitiveKind::Reshape:
        case PrimitiveKind::Transpose:
        case PrimitiveKind::BroadcastInDim:
        case PrimitiveKind::ReduceSum:
            *out = full(subarray_shape(node.out_shape, in[param_slot].shape(), tags), 1.0);
            return true;
        case PrimitiveKind::GlobalAvgPool: {
            const Shape& theta = in[param_slot].shape();
            *out = full(subarray_shape(node.out_shape, theta, tags),
                        1.0 / static_cast<double>(theta.dim(0) * theta.dim(1)));
            return true;
        }
        case PrimitiveKind::Relu:
            return false;
    }
    return false;
}

}  // namespace

StructuredJacobian structured_jacobian(const Node& node, const std::vector<Tensor>& in,
                                       int param_slot, JMode mode, bool* used_fallback) {
    if (!is_linear(node.kind)) {
        throw UnsupportedPrimitiveError(std::string("cannot differentiate nonlinear primitive ") +
                                        kind_name(node.kind));
    }
    std::vector<Shape> in_shapes;
    in_shapes.reserve(in.size());
    for (const Tensor& t : in) {
        in_shapes.push_back(t.shape());
    }
    StructuredJacobian sj;
    sj.y_shape = node.out_shape;
    sj.theta_shape = in_shapes[param_slot];
    sj.tags = structure_rule(node, in_shapes, param_slot);
    if (used_fallback) *used_fallback = false;

    if (mode == JMode::Rule) {
        Tensor sub;
        if (rule_subarray(node, in, param_slot, sj.tags, &sub)) {
            const Shape want = subarray_shape(sj.y_shape, sj.theta_shape, sj.tags);
            sj.subarray = reshape(sub, want);
            return sj;
        }
        if (used_fallback) *used_fallback = true;
        mode = JMode::Auto;
    }

    const TagLayout layout = tag_layout(sj.y_shape, sj.theta_shape, sj.tags);
    std::int64_t y_res = 1, th_res = 1, bd = 1;
    for (int a : layout.y_res_axes) y_res *= sj.y_shape.dim(a);
    for (int a : layout.th_res_axes) th_res *= sj.theta_shape.dim(a);
    for (int t : layout.bd_tags) bd *= sj.tags[t].block_count;
    if (mode == JMode::Auto) {
        mode = th_res < y_res ? JMode::Forward : JMode::Reverse;
    }

    Tensor sub(Shape(layout.sub_dims));
    const ProbeIndexer y_idx{sj.y_shape, layout.y_res_axes};
    const ProbeIndexer th_idx{sj.theta_shape, layout.th_res_axes};
    std::vector<std::int64_t> tag_values(sj.tags.size(), 0);

    for (std::int64_t b = 0; b < bd; ++b) {
        {
            std::int64_t v = b;
            for (std::size_t k = layout.bd_tags.size(); k-- > 0;) {
                tag_values[layout.bd_tags[k]] = v % sj.tags[layout.bd_tags[k]].block_count;
                v /= sj.tags[layout.bd_tags[k]].block_count;
            }
        }
        if (mode == JMode::Reverse) {
            Tensor cot(Shape{1, sj.y_numel()});
            for (std::int64_t r = 0; r < y_res; ++r) {
                const auto yc = y_idx.coords(sj.tags, true, tag_values, r);
                const std::int64_t iy = y_idx.flatten(yc);
                cot.at(iy) = 1.0;
                Tensor pulled = node_transpose(node, in, cot, param_slot);
                cot.at(iy) = 0.0;
                for (std::int64_t q = 0; q < th_res; ++q) {
                    const auto pcoords = th_idx.coords(sj.tags, false, tag_values, q);
                    sub.at((b * y_res + r) * th_res + q) = pulled.at(th_idx.flatten(pcoords));
                }
            }
        } else {
            Tensor tangent(sj.theta_shape);
            for (std::int64_t q = 0; q < th_res; ++q) {
                const auto pcoords = th_idx.coords(sj.tags, false, tag_values, q);
                const std::int64_t ip = th_idx.flatten(pcoords);
                tangent.at(ip) = 1.0;
                Tensor pushed = node_tangent(node, in, tangent, param_slot);
                tangent.at(ip) = 0.0;
                for (std::int64_t r = 0; r < y_res; ++r) {
                    const auto yc = y_idx.coords(sj.tags, true, tag_values, r);
                    sub.at((b * y_res + r) * th_res + q) = pushed.at(y_idx.flatten(yc));
                }
            }
        }
    }
    sj.subarray = std::move(sub);
    return sj;
}

void set_structure_rule_corruption(bool enabled) { g_corrupt_rules.store(enabled); }

bool structure_rule_corruption() { return g_corrupt_rules.load(); }

}  // namespace ntk
