#pragma once

#include <stdexcept>
#include <string>

namespace scd {

// Shape/dimension disagreements between tensors or between a tensor and an op.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid op or config parameter (stride, factor, temperature, ...).
struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad input data: out-of-range labels, malformed files, missing pairs.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A mean/ratio was requested over zero contributing elements.
struct EmptyReductionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where the pipeline cannot continue (fp32 training abort).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace scd
