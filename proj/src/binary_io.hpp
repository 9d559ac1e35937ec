#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "unidiff/errors.hpp"

namespace unidiff::detail {

static_assert(std::endian::native == std::endian::little, "container formats assume a little-endian host");

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    void put_string16(const std::string& s) {
        put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    void put_string32(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::size_t size() const { return bytes_.size(); }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        T v;
        get_bytes(&v, sizeof(T), what);
        return v;
    }
    void get_bytes(void* out, std::size_t n, const char* what) {
        if (n > bytes_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::string get_string16(const char* what) {
        const auto n = get<std::uint16_t>(what);
        std::string s(n, '\0');
        get_bytes(s.data(), n, what);
        return s;
    }
    std::string get_string32(const char* what) {
        const auto n = get<std::uint32_t>(what);
        if (n > bytes_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
        std::string s(n, '\0');
        get_bytes(s.data(), n, what);
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::uint8_t* cursor() const { return bytes_.data() + pos_; }
    void skip(std::size_t n, const char* what) {
        if (n > bytes_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
        pos_ += n;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace unidiff::detail
