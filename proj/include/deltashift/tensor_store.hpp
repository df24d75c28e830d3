#pragma once

// Named float32 tensors, the elementwise arithmetic the reconstruction
// equations need, and the DLTS checkpoint container.
//
// DLTS layout (little-endian):
//   "DLTS" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | u64 payload_bytes | f32 data[]
//   u64 CRC-64 of all preceding bytes

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deltashift {

uint64_t shape_numel(std::span<const uint64_t> shape);
std::string shape_to_string(std::span<const uint64_t> shape);

struct tensor {
    std::string name;
    std::vector<uint64_t> shape;
    std::vector<float> data; // row-major

    uint64_t numel() const { return shape_numel(shape); }
};

// Selects which tensors participate in flatten-based computations. An empty
// filter selects everything.
using name_filter = std::function<bool(std::string_view)>;

class tensor_map {
public:
    tensor_map() = default;

    // Validates names, shapes and finiteness; entries are stored in canonical
    // (lexicographic by name) order regardless of input order.
    explicit tensor_map(std::vector<tensor> entries, std::map<std::string, std::string> metadata = {});

    const std::vector<tensor> & entries() const { return entries_; }
    const std::map<std::string, std::string> & metadata() const { return metadata_; }

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    uint64_t param_count() const;

    const tensor * find(std::string_view name) const;
    const tensor & at(std::string_view name) const;

    // identical name and shape sets
    bool aligned_with(const tensor_map & other) const;

private:
    std::vector<tensor> entries_;
    std::map<std::string, std::string> metadata_;
};

void require_aligned(const tensor_map & a, const tensor_map & b, std::string_view what);

// Same names, shapes and bit patterns (so +0 != -0).
bool bitwise_equal(const tensor_map & a, const tensor_map & b);

tensor_map map_add(const tensor_map & a, const tensor_map & b);
tensor_map map_sub(const tensor_map & a, const tensor_map & b);
tensor_map map_scale(const tensor_map & a, double s);

// Builds a map with the same names/shapes as `like` and all-zero data.
tensor_map zeros_like(const tensor_map & like);

// Concatenation of tensor data in canonical name order.
std::vector<float> flatten_concat(const tensor_map & a, const name_filter & filter = {});

// 64-bit accumulation in both overload sets.
double dot(std::span<const float> u, std::span<const float> v);
double dot(std::span<const double> u, std::span<const double> v);
double l2_norm(std::span<const float> u);
double l2_norm(std::span<const double> u);

std::vector<uint8_t> serialize_checkpoint(const tensor_map & map);
tensor_map parse_checkpoint(std::span<const uint8_t> bytes);

void save_checkpoint(const tensor_map & map, const std::string & path);
tensor_map load_checkpoint(const std::string & path);

} // namespace deltashift
