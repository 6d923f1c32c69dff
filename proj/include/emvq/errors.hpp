#ifndef EMVQ_ERRORS_HPP
#define EMVQ_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace emvq {

// Malformed files, containers, digests, or incompatible checkpoints.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses and other numerical failures.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace emvq

#endif
