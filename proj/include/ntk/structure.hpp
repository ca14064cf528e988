#pragma once

#include <cstdint>
#include <vector>

#include "ntk/autodiff.hpp"
#include "ntk/program.hpp"

namespace ntk {

enum class StructureKind {
    NoStructure,
    BlockDiagonal,
    ConstantBlockDiagonal,
    InputBlockTiled,
    OutputBlockTiled,
    BlockTiled,
};

const char* structure_name(StructureKind kind);

// One structured axis group of a primitive Jacobian dy/dtheta.
//
// Group matching uses flat row-major indices over the listed axes, in listed
// order, so reshapes and transposes are expressible:
//   ConstantBlockDiagonal / BlockDiagonal: the flattened y coordinates over
//     out_axes must equal the flattened theta coordinates over param_axes
//     (extent products must match); BlockDiagonal additionally indexes the
//     subarray by that block value.
//   OutputBlockTiled: out_axes only; the Jacobian is tiled along them.
//   InputBlockTiled: param_axes only; tiled along them.
//   BlockTiled: tiled along both listed groups.
struct StructureTag {
    StructureKind kind = StructureKind::NoStructure;
    std::vector<int> out_axes;
    std::vector<int> param_axes;
    std::int64_t block_count = 1;  // c
};

// The smallest subarray of a primitive Jacobian plus the metadata needed to
// reconstruct the dense (y, p) matrix. Subarray layout (row-major):
//   [one axis of extent c per BlockDiagonal tag, in tag order]
//   ++ [unstructured y axes, ascending] ++ [unstructured theta axes, ascending]
struct StructuredJacobian {
    Shape y_shape;
    Shape theta_shape;
    std::vector<StructureTag> tags;
    Tensor subarray;

    std::int64_t y_numel() const { return y_shape.numel(); }
    std::int64_t p_numel() const { return theta_shape.numel(); }
};

// Expected subarray shape for a tag set (validates tag consistency).
Shape subarray_shape(const Shape& y_shape, const Shape& theta_shape,
                     const std::vector<StructureTag>& tags);

// Entry J[iy, ip] of the dense primitive Jacobian encoded by `sj`.
double structured_entry(const StructuredJacobian& sj, std::int64_t iy, std::int64_t ip);

// Dense (y, p) Jacobian assembled from the subarray and tags.
Tensor reconstruct(const StructuredJacobian& sj);

// Structure annotation for one primitive's Jacobian w.r.t. the input in
// `param_slot`. Shapes are the resolved input shapes of the node. Returns an
// empty list (NoStructure) for unannotated slots; throws for nonlinear kinds.
std::vector<StructureTag> structure_rule(const Node& node, const std::vector<Shape>& input_shapes,
                                         int param_slot);

enum class JMode { Forward, Reverse, Auto, Rule };

// Computes the Jacobian subarray for a linear node w.r.t. one input slot.
// `input_values` must hold resolved values for the sibling operands (the slot
// being differentiated is read only for its shape). Rule mode uses the
// closed-form per-primitive subarray; Forward/Reverse probe the node with
// reduced identity tangents/cotangents; Auto picks the cheaper probe side.
// When no closed-form rule exists in Rule mode the computation falls back to
// Auto and sets *used_fallback.
StructuredJacobian structured_jacobian(const Node& node, const std::vector<Tensor>& input_values,
                                       int param_slot, JMode mode = JMode::Rule,
                                       bool* used_fallback = nullptr);

// Test hook: perturbs the matmul rule-mode subarray so that equivalence
// checks must fail. Never enabled outside negative-control tests.
void set_structure_rule_corruption(bool enabled);
bool structure_rule_corruption();

}  // namespace ntk
