#pragma once

#include <stdexcept>
#include <string>

namespace mimg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatches between tensors.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid model or run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required, or training divergence.
struct NumericError : Error {
    using Error::Error;
};

// Value outside the documented domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

// Malformed file contents (checkpoints, images, configs).
struct FormatError : Error {
    using Error::Error;
};

// Unknown caption token.
struct VocabError : Error {
    using Error::Error;
};

} // namespace mimg
