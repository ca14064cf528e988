#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ntk/structure.hpp"

namespace ntk {

enum class ContractionOrder { OutsideIn, LeftToRight, InsideOut, Auto };

const char* order_name(ContractionOrder order);

struct MjjmpCost {
    std::int64_t flops = 0;
    // n*j: bytes of the stored Jacobian subarrays across the batch.
    std::int64_t subarray_bytes = 0;
    // Contraction scratch for the chosen order, reported separately from the
    // subarray term.
    std::int64_t peak_intermediate_bytes = 0;
    std::vector<std::pair<std::string, std::int64_t>> terms;
};

// Batched operands of one NTK summand Theta[l, l1, l2]. Cotangents are
// (o, numel(y_i)) per input; subarrays are per input with tags shared within
// a side. B and C refer to the same parameter block.
struct MjjmpOperands {
    std::int64_t o = 0;
    Shape y1_shape, y2_shape, theta_shape;
    std::vector<Tensor> a_cots;              // n1 entries
    std::vector<Tensor> d_cots;              // n2 entries
    std::vector<StructuredJacobian> b_subs;  // n1 entries
    std::vector<StructuredJacobian> c_subs;  // n2 entries
};

// The largest common structure usable by both sides: per-side tag lists with
// aligned parameter-axis groups (kinds matched through the CBD <= BD lattice,
// side-local output tiles kept). Axes without common structure are
// materialized into the subarrays.
struct CommonStructure {
    std::vector<StructureTag> b_tags, c_tags;
};

CommonStructure intersect_structures(const std::vector<StructureTag>& b_tags,
                                     const std::vector<StructureTag>& c_tags, const Shape& y1,
                                     const Shape& y2, const Shape& theta);

// Re-expresses a structured Jacobian with a coarser tag list, materializing
// dropped structure into the subarray.
StructuredJacobian relax_to(const StructuredJacobian& sj, const std::vector<StructureTag>& tags);

// Predicted cost of one contraction order, from the Table of per-structure
// MJJMP costs evaluated on the common-structure dimensions. Terms that are
// dominated for every batch and output size are omitted.
MjjmpCost mjjmp_cost(const Shape& y1, const std::vector<StructureTag>& b_tags, const Shape& y2,
                     const std::vector<StructureTag>& c_tags, const Shape& theta, std::int64_t o,
                     std::int64_t n1, std::int64_t n2, ContractionOrder order);

// Picks the cheapest order; ties break InsideOut > LeftToRight > OutsideIn.
ContractionOrder select_order(const Shape& y1, const std::vector<StructureTag>& b_tags,
                              const Shape& y2, const std::vector<StructureTag>& c_tags,
                              const Shape& theta, std::int64_t o, std::int64_t n1,
                              std::int64_t n2);

// Evaluates the summand for all input pairs into an (n1*o, n2*o) block.
Tensor mjjmp_execute(const MjjmpOperands& operands,
                     ContractionOrder order = ContractionOrder::Auto);

}  // namespace ntk
