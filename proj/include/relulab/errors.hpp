#pragma once

#include <stdexcept>
#include <string>

namespace relulab {

// Shapes of the operands do not fit together.
class DimensionError : public std::invalid_argument {
public:
    explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// A documented precondition was violated (fully-masked row, log of a
// non-positive value, zero-variance residual, ...).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

}  // namespace relulab
