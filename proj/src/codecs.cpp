#include "deltashift/codecs.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "deltashift/error.hpp"
#include "deltashift/io.hpp"

namespace deltashift {

namespace {

constexpr char k_magic[4] = {'D', 'L', 'T', 'C'};
constexpr uint32_t k_version = 1;

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::vector<uint8_t> pack_signs(std::span<const float> values) {
    std::vector<uint8_t> bits((values.size() + 7) / 8, 0);
    for (size_t i = 0; i < values.size(); ++i) {
        if (values[i] > 0.0f) {
            bits[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
        }
    }
    return bits;
}

void validate_dare_tensor(const dare_tensor & t) {
    const uint64_t n = shape_numel(t.shape);
    if (t.indices.size() != t.values.size()) {
        fail(error_kind::validation, "DARE tensor '" + t.name + "': index/value length mismatch");
    }
    for (size_t k = 0; k < t.indices.size(); ++k) {
        if (t.indices[k] >= n) {
            fail(error_kind::validation, "DARE tensor '" + t.name + "': index " + std::to_string(t.indices[k]) +
                                             " out of range for " + std::to_string(n) + " elements");
        }
        if (k > 0 && t.indices[k] <= t.indices[k - 1]) {
            fail(error_kind::validation, "DARE tensor '" + t.name + "': indices not strictly increasing");
        }
    }
}

void validate_bitdelta_tensor(const bitdelta_tensor & t) {
    const uint64_t n = shape_numel(t.shape);
    if (t.signs.size() != (n + 7) / 8) {
        fail(error_kind::validation, "BitDelta tensor '" + t.name + "': bitfield length " +
                                         std::to_string(t.signs.size()) + " does not match " + std::to_string(n) +
                                         " elements");
    }
    if (n % 8 != 0) {
        const uint8_t pad_mask = static_cast<uint8_t>(0xFF << (n % 8));
        if (t.signs.back() & pad_mask) {
            fail(error_kind::validation, "BitDelta tensor '" + t.name + "': nonzero pad bits");
        }
    }
    if (!(t.alpha >= 0.0) || !std::isfinite(t.alpha)) {
        fail(error_kind::validation, "BitDelta tensor '" + t.name + "': invalid scale");
    }
}

} // namespace

const char * to_string(codec_kind kind) {
    return kind == codec_kind::dare ? "dare" : "bitdelta";
}

codec_kind parse_codec_kind(std::string_view s) {
    if (s == "dare") return codec_kind::dare;
    if (s == "bitdelta") return codec_kind::bitdelta;
    fail(error_kind::validation, "unknown codec '" + std::string(s) + "' (expected dare|bitdelta)");
}

void validate(const dare_config & cfg) {
    if (!(cfg.sparse_rate >= 0.0 && cfg.sparse_rate < 1.0)) {
        fail(error_kind::validation, "DARE sparse rate must be in [0, 1), got " + std::to_string(cfg.sparse_rate));
    }
}

const dare_compressed & compressed_delta::dare() const {
    if (const auto * p = std::get_if<dare_compressed>(&payload)) {
        return *p;
    }
    fail(error_kind::validation, "expected a DARE payload, got BitDelta");
}

const bitdelta_compressed & compressed_delta::bitdelta() const {
    if (const auto * p = std::get_if<bitdelta_compressed>(&payload)) {
        return *p;
    }
    fail(error_kind::validation, "expected a BitDelta payload, got DARE");
}

uint64_t dare_tensor_key(uint64_t seed, std::string_view name) {
    return splitmix64(seed ^ splitmix64(fnv1a64(name)));
}

bool dare_keep(uint64_t tensor_key, uint64_t index, double sparse_rate) {
    const uint64_t h = splitmix64(tensor_key + (index + 1) * 0xD1B54A32D192ED03ULL);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53; // [0, 1)
    return u >= sparse_rate;
}

compressed_delta dare_compress(const tensor_map & delta, const dare_config & cfg) {
    validate(cfg);
    const double rescale = 1.0 / (1.0 - cfg.sparse_rate);
    dare_compressed out{cfg, {}};
    out.tensors.reserve(delta.size());
    for (const auto & t : delta.entries()) {
        dare_tensor dt{t.name, t.shape, {}, {}};
        const uint64_t key = dare_tensor_key(cfg.seed, t.name);
        for (uint64_t i = 0; i < t.data.size(); ++i) {
            // zeros decode to zero either way; storing them would only cost bits
            if (t.data[i] != 0.0f && dare_keep(key, i, cfg.sparse_rate)) {
                dt.indices.push_back(i);
                dt.values.push_back(static_cast<float>(static_cast<double>(t.data[i]) * rescale));
            }
        }
        out.tensors.push_back(std::move(dt));
    }
    return compressed_delta{std::move(out)};
}

tensor_map dare_decompress(const compressed_delta & c) {
    const auto & d = c.dare();
    std::vector<tensor> out;
    out.reserve(d.tensors.size());
    for (const auto & dt : d.tensors) {
        validate_dare_tensor(dt);
        tensor t{dt.name, dt.shape, std::vector<float>(shape_numel(dt.shape), 0.0f)};
        for (size_t k = 0; k < dt.indices.size(); ++k) {
            t.data[dt.indices[k]] = dt.values[k];
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

double bitdelta_scale(std::span<const float> values) {
    if (values.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (float v : values) {
        sum += std::fabs(static_cast<double>(v));
    }
    return sum / static_cast<double>(values.size());
}

compressed_delta bitdelta_compress(const tensor_map & delta) {
    bitdelta_compressed out;
    out.tensors.reserve(delta.size());
    for (const auto & t : delta.entries()) {
        // stored at the precision it decodes to, so recompressing a decoded delta is a fixed point
        const double alpha = static_cast<float>(bitdelta_scale(t.data));
        out.tensors.push_back(bitdelta_tensor{t.name, t.shape, alpha, pack_signs(t.data)});
    }
    return compressed_delta{std::move(out)};
}

tensor_map bitdelta_decompress(const compressed_delta & c) {
    const auto & b = c.bitdelta();
    std::vector<tensor> out;
    out.reserve(b.tensors.size());
    for (const auto & bt : b.tensors) {
        validate_bitdelta_tensor(bt);
        const float a = static_cast<float>(bt.alpha);
        tensor t{bt.name, bt.shape, std::vector<float>(shape_numel(bt.shape))};
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = ((bt.signs[i / 8] >> (i % 8)) & 1u) ? a : -a;
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

tensor_map decompress(const compressed_delta & c) {
    return c.kind() == codec_kind::dare ? dare_decompress(c) : bitdelta_decompress(c);
}

std::vector<uint8_t> serialize_compressed(const compressed_delta & c) {
    byte_writer w;
    w.raw(std::string_view(k_magic, 4));
    w.u32(k_version);
    w.u8(static_cast<uint8_t>(c.kind()));
    auto header = [&](const std::string & name, const std::vector<uint64_t> & shape) {
        w.name(name);
        w.u8(static_cast<uint8_t>(shape.size()));
        for (uint64_t d : shape) {
            w.u64(d);
        }
    };
    if (c.kind() == codec_kind::dare) {
        const auto & d = c.dare();
        w.u32(static_cast<uint32_t>(d.tensors.size()));
        for (const auto & t : d.tensors) {
            validate_dare_tensor(t);
            header(t.name, t.shape);
            w.f64(d.config.sparse_rate);
            w.u64(d.config.seed);
            w.u64(t.indices.size());
            for (uint64_t i : t.indices) {
                w.u64(i);
            }
            for (float v : t.values) {
                w.f32(v);
            }
        }
    } else {
        const auto & b = c.bitdelta();
        w.u32(static_cast<uint32_t>(b.tensors.size()));
        for (const auto & t : b.tensors) {
            validate_bitdelta_tensor(t);
            header(t.name, t.shape);
            w.f64(t.alpha);
            w.raw(t.signs);
        }
    }
    w.seal();
    return w.take();
}

compressed_delta parse_compressed(std::span<const uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), k_magic, 4) != 0) {
        fail(error_kind::corrupt_header, "bad magic: not a DLTC container");
    }
    if (bytes.size() < layout::container_header_bits / 8 + 8) {
        fail(error_kind::corrupt_header, "codec container header too short");
    }
    byte_reader r(bytes);
    r.raw(4);
    const uint32_t version = r.u32();
    if (version != k_version) {
        fail(error_kind::corrupt_header, "unsupported codec container version " + std::to_string(version));
    }
    const uint8_t tag = r.u8();
    if (tag > 1) {
        fail(error_kind::corrupt_header, "unknown codec tag " + std::to_string(tag));
    }
    const uint32_t count = r.u32();

    auto read_header = [&](std::string & name, std::vector<uint64_t> & shape) {
        name = r.name();
        const uint8_t rank = r.u8();
        if (rank == 0) {
            fail(error_kind::corrupt_header, "tensor '" + name + "' has rank 0");
        }
        shape.resize(rank);
        for (auto & d : shape) {
            d = r.u64();
            if (d == 0) {
                fail(error_kind::corrupt_header, "tensor '" + name + "' has a zero dimension");
            }
        }
    };

    compressed_delta out;
    if (tag == static_cast<uint8_t>(codec_kind::dare)) {
        dare_compressed d;
        for (uint32_t k = 0; k < count; ++k) {
            dare_tensor t;
            read_header(t.name, t.shape);
            dare_config cfg{r.f64(), r.u64()};
            validate(cfg);
            if (k == 0) {
                d.config = cfg;
            } else if (std::memcmp(&cfg.sparse_rate, &d.config.sparse_rate, sizeof(double)) != 0 ||
                       cfg.seed != d.config.seed) {
                fail(error_kind::corrupt_header, "DARE tensors disagree on sparse rate / seed");
            }
            const uint64_t nnz = r.u64();
            if (nnz > r.remaining_body() / 12) {
                fail(error_kind::truncated, "DARE tensor '" + t.name + "' payload truncated");
            }
            t.indices.resize(nnz);
            t.values.resize(nnz);
            for (auto & i : t.indices) {
                i = r.u64();
            }
            for (auto & v : t.values) {
                v = r.f32();
            }
            d.tensors.push_back(std::move(t));
        }
        out.payload = std::move(d);
    } else {
        bitdelta_compressed b;
        for (uint32_t k = 0; k < count; ++k) {
            bitdelta_tensor t;
            read_header(t.name, t.shape);
            t.alpha = r.f64();
            const auto bits = r.raw((shape_numel(t.shape) + 7) / 8);
            t.signs.assign(bits.begin(), bits.end());
            b.tensors.push_back(std::move(t));
        }
        out.payload = std::move(b);
    }
    r.finish();
    // structural checks after the checksum so bit-rot reports as a checksum error
    if (out.kind() == codec_kind::dare) {
        for (const auto & t : out.dare().tensors) validate_dare_tensor(t);
    } else {
        for (const auto & t : out.bitdelta().tensors) validate_bitdelta_tensor(t);
    }
    return out;
}

void save_compressed(const compressed_delta & c, const std::string & path) {
    write_file_atomic(path, serialize_compressed(c));
}

compressed_delta load_compressed(const std::string & path) {
    return parse_compressed(read_file(path));
}

uint64_t layout::tensor_header_bits(std::string_view name, size_t rank) {
    return 16 + 8 * static_cast<uint64_t>(name.size()) + 8 + 64 * static_cast<uint64_t>(rank);
}

uint64_t storage_bits(const compressed_delta & c) {
    uint64_t bits = layout::container_header_bits + layout::container_trailer_bits;
    if (c.kind() == codec_kind::dare) {
        for (const auto & t : c.dare().tensors) {
            bits += layout::tensor_header_bits(t.name, t.shape.size()) + layout::dare_tensor_config_bits +
                    layout::dare_entry_bits * t.indices.size();
        }
    } else {
        for (const auto & t : c.bitdelta().tensors) {
            bits += layout::tensor_header_bits(t.name, t.shape.size()) + layout::bitdelta_scale_bits +
                    layout::bitdelta_sign_bits(shape_numel(t.shape));
        }
    }
    return bits;
}

} // namespace deltashift
