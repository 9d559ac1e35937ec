#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace unidiff {

// Malformed or truncated artifact file; offset is the byte position where
// decoding failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Numerical failure during training (NaN/Inf loss and the like).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad configuration file, unknown key or unparsable value.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace unidiff
