#include "deltashift/tensor_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "deltashift/error.hpp"
#include "deltashift/io.hpp"

namespace deltashift {

namespace {

constexpr char k_magic[4] = {'D', 'L', 'T', 'S'};
constexpr uint32_t k_version = 1;

void check_finite(const tensor & t) {
    for (size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            fail(error_kind::numerical, "non-finite value in tensor '" + t.name + "' at index " + std::to_string(i));
        }
    }
}

template <typename Op>
tensor_map elementwise(const tensor_map & a, const tensor_map & b, std::string_view what, Op op) {
    require_aligned(a, b, what);
    std::vector<tensor> out;
    out.reserve(a.size());
    for (size_t k = 0; k < a.size(); ++k) {
        const tensor & ta = a.entries()[k];
        const tensor & tb = b.entries()[k];
        tensor t{ta.name, ta.shape, std::vector<float>(ta.data.size())};
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = op(ta.data[i], tb.data[i]);
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

} // namespace

uint64_t shape_numel(std::span<const uint64_t> shape) {
    uint64_t n = 1;
    for (uint64_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_to_string(std::span<const uint64_t> shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

tensor_map::tensor_map(std::vector<tensor> entries, std::map<std::string, std::string> metadata)
    : entries_(std::move(entries)), metadata_(std::move(metadata)) {
    std::sort(entries_.begin(), entries_.end(), [](const tensor & x, const tensor & y) { return x.name < y.name; });
    for (size_t k = 0; k < entries_.size(); ++k) {
        const tensor & t = entries_[k];
        require(!t.name.empty(), "tensor name must be non-empty");
        if (k > 0 && entries_[k - 1].name == t.name) {
            fail(error_kind::duplicate_name, "duplicate tensor name '" + t.name + "'");
        }
        require(!t.shape.empty(), "tensor '" + t.name + "' has rank 0");
        require(t.shape.size() <= 255, "tensor '" + t.name + "' has rank > 255");
        for (uint64_t d : t.shape) {
            require(d >= 1, "tensor '" + t.name + "' has a zero dimension " + shape_to_string(t.shape));
        }
        require(t.data.size() == t.numel(),
                "tensor '" + t.name + "' data length " + std::to_string(t.data.size()) + " does not match shape " +
                    shape_to_string(t.shape));
        check_finite(t);
    }
}

uint64_t tensor_map::param_count() const {
    uint64_t n = 0;
    for (const auto & t : entries_) {
        n += t.data.size();
    }
    return n;
}

const tensor * tensor_map::find(std::string_view name) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                               [](const tensor & t, std::string_view n) { return t.name < n; });
    if (it == entries_.end() || it->name != name) {
        return nullptr;
    }
    return &*it;
}

const tensor & tensor_map::at(std::string_view name) const {
    const tensor * t = find(name);
    if (!t) {
        fail(error_kind::validation, "missing tensor '" + std::string(name) + "'");
    }
    return *t;
}

bool tensor_map::aligned_with(const tensor_map & other) const {
    if (entries_.size() != other.entries_.size()) {
        return false;
    }
    for (size_t k = 0; k < entries_.size(); ++k) {
        if (entries_[k].name != other.entries_[k].name || entries_[k].shape != other.entries_[k].shape) {
            return false;
        }
    }
    return true;
}

void require_aligned(const tensor_map & a, const tensor_map & b, std::string_view what) {
    if (!a.aligned_with(b)) {
        fail(error_kind::validation, std::string(what) + ": tensor maps are not aligned (names/shapes differ)");
    }
}

bool bitwise_equal(const tensor_map & a, const tensor_map & b) {
    if (!a.aligned_with(b)) {
        return false;
    }
    for (size_t k = 0; k < a.size(); ++k) {
        const auto & x = a.entries()[k].data;
        const auto & y = b.entries()[k].data;
        if (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

tensor_map map_add(const tensor_map & a, const tensor_map & b) {
    return elementwise(a, b, "map_add", [](float x, float y) { return x + y; });
}

tensor_map map_sub(const tensor_map & a, const tensor_map & b) {
    return elementwise(a, b, "map_sub", [](float x, float y) { return x - y; });
}

tensor_map map_scale(const tensor_map & a, double s) {
    std::vector<tensor> out;
    out.reserve(a.size());
    for (const auto & ta : a.entries()) {
        tensor t{ta.name, ta.shape, std::vector<float>(ta.data.size())};
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = static_cast<float>(static_cast<double>(ta.data[i]) * s);
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

tensor_map zeros_like(const tensor_map & like) {
    std::vector<tensor> out;
    out.reserve(like.size());
    for (const auto & t : like.entries()) {
        out.push_back(tensor{t.name, t.shape, std::vector<float>(t.data.size(), 0.0f)});
    }
    return tensor_map(std::move(out));
}

std::vector<float> flatten_concat(const tensor_map & a, const name_filter & filter) {
    std::vector<float> flat;
    flat.reserve(a.param_count());
    for (const auto & t : a.entries()) {
        if (filter && !filter(t.name)) {
            continue;
        }
        flat.insert(flat.end(), t.data.begin(), t.data.end());
    }
    return flat;
}

double dot(std::span<const float> u, std::span<const float> v) {
    require(u.size() == v.size(), "dot: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double acc = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        acc += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    }
    return acc;
}

double dot(std::span<const double> u, std::span<const double> v) {
    require(u.size() == v.size(), "dot: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double acc = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        acc += u[i] * v[i];
    }
    return acc;
}

double l2_norm(std::span<const float> u) { return std::sqrt(dot(u, u)); }
double l2_norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

std::vector<uint8_t> serialize_checkpoint(const tensor_map & map) {
    require(map.size() <= std::numeric_limits<uint32_t>::max(), "too many tensors");
    byte_writer w;
    w.raw(std::string_view(k_magic, 4));
    w.u32(k_version);
    w.u32(static_cast<uint32_t>(map.size()));
    for (const auto & t : map.entries()) {
        w.name(t.name);
        w.u8(static_cast<uint8_t>(t.shape.size()));
        for (uint64_t d : t.shape) {
            w.u64(d);
        }
        w.u64(static_cast<uint64_t>(t.data.size()) * sizeof(float));
        for (float v : t.data) {
            w.f32(v);
        }
    }
    w.seal();
    return w.take();
}

tensor_map parse_checkpoint(std::span<const uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), k_magic, 4) != 0) {
        fail(error_kind::corrupt_header, "bad magic: not a DLTS checkpoint");
    }
    if (bytes.size() < 4 + 4 + 4 + 8) {
        fail(error_kind::corrupt_header, "checkpoint header too short");
    }
    byte_reader r(bytes);
    r.raw(4);
    const uint32_t version = r.u32();
    if (version != k_version) {
        fail(error_kind::corrupt_header, "unsupported checkpoint version " + std::to_string(version));
    }
    const uint32_t count = r.u32();
    std::vector<tensor> entries;
    std::set<std::string> seen;
    for (uint32_t k = 0; k < count; ++k) {
        tensor t;
        t.name = r.name();
        if (!seen.insert(t.name).second) {
            fail(error_kind::duplicate_name, "duplicate tensor name '" + t.name + "' in checkpoint");
        }
        const uint8_t rank = r.u8();
        if (rank == 0) {
            fail(error_kind::corrupt_header, "tensor '" + t.name + "' has rank 0");
        }
        t.shape.resize(rank);
        for (auto & d : t.shape) {
            d = r.u64();
            if (d == 0) {
                fail(error_kind::corrupt_header, "tensor '" + t.name + "' has a zero dimension");
            }
        }
        const uint64_t payload = r.u64();
        const uint64_t numel = t.numel();
        if (numel > payload || payload != numel * sizeof(float)) {
            fail(error_kind::corrupt_header, "tensor '" + t.name + "' payload length " + std::to_string(payload) +
                                                 " does not match shape " + shape_to_string(t.shape));
        }
        if (payload > r.remaining_body()) {
            fail(error_kind::truncated, "tensor '" + t.name + "' payload truncated");
        }
        t.data.resize(numel);
        for (auto & v : t.data) {
            v = r.f32();
        }
        entries.push_back(std::move(t));
    }
    r.finish();
    return tensor_map(std::move(entries));
}

void save_checkpoint(const tensor_map & map, const std::string & path) {
    const auto bytes = serialize_checkpoint(map);
    write_file_atomic(path, bytes);
}

tensor_map load_checkpoint(const std::string & path) {
    return parse_checkpoint(read_file(path));
}

} // namespace deltashift
