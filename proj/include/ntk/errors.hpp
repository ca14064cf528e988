#pragma once

#include <stdexcept>
#include <string>

namespace ntk {

struct NtkError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis mismatch in a tensor kernel or program evaluation.
struct DimensionError : NtkError {
    using NtkError::NtkError;
};

// Invalid model specification (non-positive extents, bad JSON, unknown keys).
struct SpecError : NtkError {
    using NtkError::NtkError;
};

// Inconsistent structure tags or subarray shapes.
struct StructureError : NtkError {
    using NtkError::NtkError;
};

// A primitive outside the supported linear set where a linear one is required.
struct UnsupportedPrimitiveError : NtkError {
    using NtkError::NtkError;
};

// Dense-oracle size guard tripped.
struct ResourceCapError : NtkError {
    using NtkError::NtkError;
};

}  // namespace ntk
