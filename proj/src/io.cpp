#include "deltashift/io.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace deltashift {

const char * to_string(error_kind kind) {
    switch (kind) {
        case error_kind::validation:     return "validation";
        case error_kind::io:             return "io";
        case error_kind::corrupt_header: return "corrupt_header";
        case error_kind::truncated:      return "truncated";
        case error_kind::duplicate_name: return "duplicate_name";
        case error_kind::checksum:       return "checksum";
        case error_kind::numerical:      return "numerical";
    }
    return "unknown";
}

namespace {

constexpr uint64_t k_crc64_poly_reflected = 0xC96C5795D7870F42ULL;

constexpr std::array<uint64_t, 256> make_crc64_table() {
    std::array<uint64_t, 256> table{};
    for (uint64_t i = 0; i < 256; ++i) {
        uint64_t crc = i;
        for (int k = 0; k < 8; ++k) {
            crc = (crc & 1) ? (crc >> 1) ^ k_crc64_poly_reflected : crc >> 1;
        }
        table[i] = crc;
    }
    return table;
}

constexpr auto k_crc64_table = make_crc64_table();

} // namespace

uint64_t crc64(std::span<const uint8_t> bytes) {
    uint64_t crc = ~0ULL;
    for (uint8_t b : bytes) {
        crc = k_crc64_table[(crc ^ b) & 0xFF] ^ (crc >> 8);
    }
    return ~crc;
}

void byte_writer::name(const std::string & s) {
    require(!s.empty(), "tensor name must be non-empty");
    require(s.size() <= 0xFFFF, "tensor name longer than 65535 bytes: " + s.substr(0, 32) + "...");
    u16(static_cast<uint16_t>(s.size()));
    raw(std::string_view(s));
}

uint64_t byte_reader::get_le(int n) {
    const auto bytes = raw(static_cast<size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
        v |= static_cast<uint64_t>(bytes[i]) << (8 * i);
    }
    return v;
}

std::span<const uint8_t> byte_reader::raw(size_t n) {
    if (n > remaining_body()) {
        fail(error_kind::truncated, "payload truncated at byte " + std::to_string(pos_));
    }
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::string byte_reader::name() {
    const uint16_t len = u16();
    if (len == 0) {
        fail(error_kind::corrupt_header, "empty tensor name at byte " + std::to_string(pos_));
    }
    const auto bytes = raw(len);
    return std::string(bytes.begin(), bytes.end());
}

void byte_reader::finish() {
    if (data_.size() < 8 || pos_ != data_.size() - 8) {
        fail(error_kind::corrupt_header, "unexpected trailing bytes before checksum");
    }
    const uint64_t expected = crc64(data_.first(pos_));
    uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) {
        stored |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    }
    if (stored != expected) {
        fail(error_kind::checksum, "CRC-64 mismatch");
    }
}

std::vector<uint8_t> read_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(error_kind::io, "cannot open " + path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        fail(error_kind::io, "read failed: " + path);
    }
    return bytes;
}

void write_file_atomic(const std::string & path, std::span<const uint8_t> bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(error_kind::io, "cannot open " + tmp + " for writing");
        }
        out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            fail(error_kind::io, "write failed: " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        fail(error_kind::io, "rename to " + path + " failed: " + ec.message());
    }
}

void write_text_atomic(const std::string & path, std::string_view text) {
    write_file_atomic(path, std::span<const uint8_t>(reinterpret_cast<const uint8_t *>(text.data()), text.size()));
}

} // namespace deltashift
