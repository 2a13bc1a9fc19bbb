#ifndef EMBDISTILL_ERRORS_HPP
#define EMBDISTILL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace embd {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or length mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Input is mathematically unusable (zero norm, zero variance, ...).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

// Train-mode batch statistics cannot be formed (batch of 1, constant column).
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

// A forward cache does not match the gradient it is asked to propagate.
class ContractViolationError : public Error {
public:
    using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t byte_offset)
        : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    explicit FormatError(const std::string& what) : Error(what), offset(0) {}
    std::size_t offset;
};

// Invalid configuration value or incompatible option combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Batch sampling cannot satisfy the requested shape.
class SamplingError : public Error {
public:
    using Error::Error;
};

// Operation called on an object whose state forbids it.
class StateError : public Error {
public:
    using Error::Error;
};

// Retrieval evaluation has no valid queries.
class EvalError : public Error {
public:
    using Error::Error;
};

// Training loss became non-finite.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace embd

#endif
