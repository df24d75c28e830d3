#pragma once

// Little-endian byte encoding shared by the checkpoint and codec containers.

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltashift/error.hpp"

namespace deltashift {

// CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
uint64_t crc64(std::span<const uint8_t> bytes);

class byte_writer {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) { put_le(v, 2); }
    void u32(uint32_t v) { put_le(v, 4); }
    void u64(uint64_t v) { put_le(v, 8); }

    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        u32(bits);
    }

    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        u64(bits);
    }

    void raw(std::span<const uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    // u16 length prefix + UTF-8 bytes
    void name(const std::string & s);

    // appends the CRC-64 of everything written so far
    void seal() { u64(crc64(buf_)); }

    const std::vector<uint8_t> & bytes() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }

private:
    void put_le(uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
        }
    }

    std::vector<uint8_t> buf_;
};

// Reads a sealed container. The constructor verifies the trailing CRC only when
// check() is called, so that header errors are reported ahead of checksum errors.
class byte_reader {
public:
    explicit byte_reader(std::span<const uint8_t> bytes) : data_(bytes) {}

    uint8_t u8() { return static_cast<uint8_t>(get_le(1)); }
    uint16_t u16() { return static_cast<uint16_t>(get_le(2)); }
    uint32_t u32() { return static_cast<uint32_t>(get_le(4)); }
    uint64_t u64() { return get_le(8); }

    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::span<const uint8_t> raw(size_t n);
    std::string name();

    // bytes left before the 8-byte CRC trailer
    size_t remaining_body() const { return data_.size() < 8 + pos_ ? 0 : data_.size() - 8 - pos_; }
    size_t position() const { return pos_; }

    // checks that the body is fully consumed and the trailer matches
    void finish();

private:
    uint64_t get_le(int n);

    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

std::vector<uint8_t> read_file(const std::string & path);

// writes to a sibling temp file then renames over the target
void write_file_atomic(const std::string & path, std::span<const uint8_t> bytes);
void write_text_atomic(const std::string & path, std::string_view text);

} // namespace deltashift
