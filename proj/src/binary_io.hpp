#pragma once

// Little-endian byte buffers shared by the HSDS and checkpoint formats.

#include "hsprobe/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hsprobe::detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const std::vector<char>& bytes() const noexcept { return bytes_; }
    void reserve(std::size_t n) { bytes_.reserve(n); }

private:
    template <class U>
    void put_le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
        }
    }

    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(const std::vector<char>& bytes, std::string what)
        : bytes_(bytes), what_(std::move(what)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le<std::uint8_t>()); }
    std::uint16_t u16() { return get_le<std::uint16_t>(); }
    std::uint32_t u32() { return get_le<std::uint32_t>(); }
    std::uint64_t u64() { return get_le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string_view raw(std::size_t n) {
        need(n);
        std::string_view view(bytes_.data() + pos_, n);
        pos_ += n;
        return view;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            fail(ErrorKind::truncated, what_ + ": unexpected end of file at byte " + std::to_string(pos_));
        }
    }

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    template <class U>
    U get_le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
        }
        pos_ += sizeof(U);
        return v;
    }

    const std::vector<char>& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);

// Writes through a sibling temporary file and renames it into place.
void write_file(const std::filesystem::path& path, const std::vector<char>& bytes);

}  // namespace hsprobe::detail
