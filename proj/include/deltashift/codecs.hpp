#pragma once

// Delta codecs: DARE (random drop and rescale) and BitDelta (per-tensor scale
// times a packed sign bitfield), plus the DLTC container and storage accounting.
//
// DLTC layout (little-endian):
//   "DLTC" | u32 version=1 | u8 codec (0=DARE, 1=BITDELTA) | u32 tensor_count
//   per tensor: u16 name_len | name | u8 rank | u64 dims[rank]
//     DARE:     u64 p (IEEE-754 bits) | u64 seed | u64 nnz | u64 idx[nnz] | f32 val[nnz]
//     BITDELTA: f64 alpha | u8 bits[ceil(n/8)]   (element i -> byte i/8, bit i%8; 1 = positive)
//   u64 CRC-64 of all preceding bytes

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "deltashift/tensor_store.hpp"

namespace deltashift {

enum class codec_kind : uint8_t { dare = 0, bitdelta = 1 };

const char * to_string(codec_kind kind);
codec_kind parse_codec_kind(std::string_view s);

struct dare_config {
    double sparse_rate = 0.0; // fraction dropped, in [0, 1)
    uint64_t seed = 0;
};

void validate(const dare_config & cfg);

struct dare_tensor {
    std::string name;
    std::vector<uint64_t> shape;
    std::vector<uint64_t> indices; // strictly increasing flat offsets
    std::vector<float> values;     // already rescaled by 1/(1-p)
};

struct dare_compressed {
    dare_config config;
    std::vector<dare_tensor> tensors; // canonical name order
};

struct bitdelta_tensor {
    std::string name;
    std::vector<uint64_t> shape;
    double alpha = 0.0;
    std::vector<uint8_t> signs; // ceil(n/8) bytes, pad bits zero
};

struct bitdelta_compressed {
    std::vector<bitdelta_tensor> tensors;
};

struct compressed_delta {
    std::variant<dare_compressed, bitdelta_compressed> payload;

    codec_kind kind() const { return payload.index() == 0 ? codec_kind::dare : codec_kind::bitdelta; }
    const dare_compressed & dare() const;
    const bitdelta_compressed & bitdelta() const;
};

// Counter-based keep decision for element `index` of tensor `name`: keep with
// probability 1 - sparse_rate. Pure function of its arguments, so the mask is
// independent of evaluation order.
uint64_t dare_tensor_key(uint64_t seed, std::string_view name);
bool dare_keep(uint64_t tensor_key, uint64_t index, double sparse_rate);

compressed_delta dare_compress(const tensor_map & delta, const dare_config & cfg);
tensor_map dare_decompress(const compressed_delta & c);

// Mean absolute value, accumulated in 64-bit.
double bitdelta_scale(std::span<const float> values);
compressed_delta bitdelta_compress(const tensor_map & delta);
tensor_map bitdelta_decompress(const compressed_delta & c);

tensor_map decompress(const compressed_delta & c);

std::vector<uint8_t> serialize_compressed(const compressed_delta & c);
compressed_delta parse_compressed(std::span<const uint8_t> bytes);
void save_compressed(const compressed_delta & c, const std::string & path);
compressed_delta load_compressed(const std::string & path);

// Bit layout accounting. storage_bits(c) == 8 * serialize_compressed(c).size().
namespace layout {
constexpr uint64_t container_header_bits = (4 + 4 + 1 + 4) * 8;
constexpr uint64_t container_trailer_bits = 8 * 8;
// u16 name length + name + u8 rank + u64 dims
uint64_t tensor_header_bits(std::string_view name, size_t rank);
constexpr uint64_t dare_tensor_config_bits = 3 * 64; // p, seed, nnz
constexpr uint64_t dare_entry_bits = 64 + 32;
constexpr uint64_t bitdelta_scale_bits = 64;
inline uint64_t bitdelta_sign_bits(uint64_t numel) { return 8 * ((numel + 7) / 8); }
} // namespace layout

uint64_t storage_bits(const compressed_delta & c);

} // namespace deltashift
