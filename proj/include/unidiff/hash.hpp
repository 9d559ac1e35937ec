#pragma once

#include <cstddef>
#include <span>
#include <string>

namespace unidiff {

// Hex-encoded SHA-256 digest.
std::string sha256_hex(std::span<const std::byte> bytes);

template <typename T>
std::string sha256_hex_of(std::span<const T> values) {
    return sha256_hex(std::as_bytes(values));
}

}  // namespace unidiff
