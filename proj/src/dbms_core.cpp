#include "deltashift/dbms_core.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>

#include "deltashift/error.hpp"
#include "deltashift/io.hpp"

namespace deltashift {

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string & key, const std::string & s) {
    char * end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
        fail(error_kind::validation, "manifest: bad number for '" + key + "': '" + s + "'");
    }
    return v;
}

uint64_t parse_u64(const std::string & key, const std::string & s) {
    char * end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || s[0] == '-' || end != s.c_str() + s.size()) {
        fail(error_kind::validation, "manifest: bad integer for '" + key + "': '" + s + "'");
    }
    return v;
}

using manifest_map = std::map<std::string, std::string>;

manifest_map parse_manifest(const std::string & path) {
    const auto bytes = read_file(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    manifest_map kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(error_kind::validation, "manifest " + path + ": malformed line '" + line + "'");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

const std::string & field(const manifest_map & kv, const std::string & key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
        fail(error_kind::validation, "manifest: missing key '" + key + "'");
    }
    return it->second;
}

// Applies fn(pre, tau, extra, out) per element with matching tensors.
template <typename Fn>
tensor_map combine3(const tensor_map & a, const tensor_map & b, const tensor_map & c, std::string_view what, Fn fn) {
    require_aligned(a, b, what);
    require_aligned(a, c, what);
    std::vector<tensor> out;
    out.reserve(a.size());
    for (size_t k = 0; k < a.size(); ++k) {
        const auto & ta = a.entries()[k];
        const auto & tb = b.entries()[k];
        const auto & tc = c.entries()[k];
        tensor t{ta.name, ta.shape, std::vector<float>(ta.data.size())};
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = fn(ta.data[i], tb.data[i], tc.data[i]);
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

double population_variance(std::span<const double> v) {
    if (v.empty()) {
        return 0.0;
    }
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return acc / static_cast<double>(v.size());
}

} // namespace

void validate(const codec_spec & spec) {
    if (spec.kind == codec_kind::dare) {
        validate(spec.dare());
    }
}

compressed_delta compress(const tensor_map & delta, const codec_spec & spec) {
    validate(spec);
    return spec.kind == codec_kind::dare ? dare_compress(delta, spec.dare()) : bitdelta_compress(delta);
}

bool base_vector::is_zero() const {
    for (const auto & t : compressed.bitdelta().tensors) {
        if (t.alpha != 0.0) {
            return false;
        }
    }
    return true;
}

base_vector make_base_vector(compressed_delta compressed, uint64_t task_count) {
    require(compressed.kind() == codec_kind::bitdelta, "base vector must be BitDelta-compressed");
    require(task_count >= 1, "base vector task count must be >= 1");
    tensor_map decoded = bitdelta_decompress(compressed);
    return base_vector{std::move(compressed), std::move(decoded), task_count};
}

tensor_map average_model(std::span<const tensor_map> models) {
    require(!models.empty(), "average_model: need at least one model");
    const tensor_map & first = models.front();
    for (const auto & m : models) {
        require_aligned(first, m, "average_model");
    }
    const double inv_n = 1.0 / static_cast<double>(models.size());
    std::vector<tensor> out;
    for (size_t k = 0; k < first.size(); ++k) {
        const auto & t0 = first.entries()[k];
        std::vector<double> acc(t0.data.size(), 0.0);
        for (const auto & m : models) {
            const auto & d = m.entries()[k].data;
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
        tensor t{t0.name, t0.shape, std::vector<float>(acc.size())};
        for (size_t i = 0; i < acc.size(); ++i) t.data[i] = static_cast<float>(acc[i] * inv_n);
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

base_vector compute_base_vector(std::span<const tensor_map> models, const tensor_map & pretrained) {
    require(!models.empty(), "compute_base_vector: need at least one finetuned model");
    for (const auto & m : models) {
        require_aligned(pretrained, m, "compute_base_vector");
    }
    const double inv_n = 1.0 / static_cast<double>(models.size());
    std::vector<tensor> avg_delta;
    for (size_t k = 0; k < pretrained.size(); ++k) {
        const auto & tp = pretrained.entries()[k];
        std::vector<double> acc(tp.data.size(), 0.0);
        for (const auto & m : models) {
            const auto & d = m.entries()[k].data;
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
        tensor t{tp.name, tp.shape, std::vector<float>(acc.size())};
        for (size_t i = 0; i < acc.size(); ++i) {
            t.data[i] = static_cast<float>(acc[i] * inv_n - static_cast<double>(tp.data[i]));
        }
        avg_delta.push_back(std::move(t));
    }
    return make_base_vector(bitdelta_compress(tensor_map(std::move(avg_delta))), models.size());
}

double init_lambda1(const tensor_map & finetuned, const tensor_map & pretrained, const tensor_map & tau,
                    const name_filter & filter) {
    require_aligned(finetuned, pretrained, "init_lambda1");
    require_aligned(finetuned, tau, "init_lambda1");
    const auto wt = flatten_concat(finetuned, filter);
    const auto wp = flatten_concat(pretrained, filter);
    const auto tb = flatten_concat(tau, filter);
    double num = 0.0;
    for (size_t i = 0; i < tb.size(); ++i) {
        num += (static_cast<double>(wt[i]) - static_cast<double>(wp[i])) * static_cast<double>(tb[i]);
    }
    const double den = dot(tb, tb);
    if (den == 0.0) {
        fail(error_kind::numerical, "init_lambda1: base vector is zero; lambda1 is undefined");
    }
    return num / den;
}

double init_lambda1(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                    const name_filter & filter) {
    return init_lambda1(finetuned, pretrained, base.decoded, filter);
}

double init_lambda1_or_zero(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                            const name_filter & filter) {
    try {
        return init_lambda1(finetuned, pretrained, base, filter);
    } catch (const error & e) {
        if (e.kind() == error_kind::numerical) {
            return 0.0;
        }
        throw;
    }
}

tensor_map shifted_base(const tensor_map & pretrained, const tensor_map & tau, double lambda1) {
    require_aligned(pretrained, tau, "shifted_base");
    std::vector<tensor> out;
    for (size_t k = 0; k < pretrained.size(); ++k) {
        const auto & tp = pretrained.entries()[k];
        const auto & tt = tau.entries()[k];
        tensor t{tp.name, tp.shape, std::vector<float>(tp.data.size())};
        for (size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = static_cast<float>(static_cast<double>(tp.data[i]) + lambda1 * static_cast<double>(tt.data[i]));
        }
        out.push_back(std::move(t));
    }
    return tensor_map(std::move(out));
}

tensor_map shifted_base(const tensor_map & pretrained, const base_vector & base, double lambda1) {
    return shifted_base(pretrained, base.decoded, lambda1);
}

compressed_delta compress_task(const tensor_map & finetuned, const tensor_map & pretrained, const tensor_map & tau,
                               double lambda1, const codec_spec & codec) {
    require_aligned(finetuned, pretrained, "compress_task");
    // materialise the shifted base so that lambda1 = 0 reproduces W_t - W_pre bit for bit
    return compress(map_sub(finetuned, shifted_base(pretrained, tau, lambda1)), codec);
}

compressed_delta compress_task(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                               double lambda1, const codec_spec & codec) {
    return compress_task(finetuned, pretrained, base.decoded, lambda1, codec);
}

task_artifact make_artifact(std::string task_id, const tensor_map & finetuned, const tensor_map & pretrained,
                            const base_vector & base, double lambda1, double lambda2, const codec_spec & codec) {
    task_artifact a;
    a.task_id = std::move(task_id);
    a.delta = compress_task(finetuned, pretrained, base, lambda1, codec);
    a.lambda1 = lambda1;
    a.lambda2 = lambda2;
    a.codec = codec;
    return a;
}

tensor_map reconstruct(const tensor_map & pretrained, const tensor_map & tau, const task_artifact & artifact) {
    const tensor_map delta = decompress(artifact.delta);
    const double l1 = artifact.lambda1;
    const double l2 = artifact.lambda2;
    return combine3(pretrained, tau, delta, "reconstruct", [l1, l2](float p, float t, float d) {
        return static_cast<float>(static_cast<double>(p) + l1 * static_cast<double>(t) + l2 * static_cast<double>(d));
    });
}

tensor_map reconstruct(const tensor_map & pretrained, const base_vector & base, const task_artifact & artifact) {
    return reconstruct(pretrained, base.decoded, artifact);
}

tensor_map reconstruct_uncompressed_base(const tensor_map & pretrained, const tensor_map & avg_model,
                                         const task_artifact & artifact) {
    require_aligned(pretrained, avg_model, "reconstruct_uncompressed_base");
    return reconstruct(pretrained, map_sub(avg_model, pretrained), artifact);
}

residual_diagnostics_record residual_diagnostics(const tensor_map & finetuned, const tensor_map & pretrained,
                                                 const tensor_map & tau, double lambda1) {
    require_aligned(finetuned, pretrained, "residual_diagnostics");
    require_aligned(finetuned, tau, "residual_diagnostics");
    const auto wt = flatten_concat(finetuned);
    const auto wp = flatten_concat(pretrained);
    const auto tb = flatten_concat(tau);
    std::vector<double> ori(wt.size()), ours(wt.size()), base(wt.size());
    for (size_t i = 0; i < wt.size(); ++i) {
        ori[i] = static_cast<double>(wt[i]) - static_cast<double>(wp[i]);
        base[i] = static_cast<double>(tb[i]);
        ours[i] = ori[i] - lambda1 * base[i];
    }
    residual_diagnostics_record r;
    r.residual_dot_base = dot(ours, base);
    r.norm_ori_sq = dot(ori, ori);
    r.norm_ours_sq = dot(ours, ours);
    r.lambda_sq_norm_base_sq = lambda1 * lambda1 * dot(base, base);
    r.var_ori = population_variance(ori);
    r.var_ours = population_variance(ours);
    r.var_base = population_variance(base);
    return r;
}

residual_diagnostics_record residual_diagnostics(const tensor_map & finetuned, const tensor_map & pretrained,
                                                 const base_vector & base, double lambda1) {
    return residual_diagnostics(finetuned, pretrained, base.decoded, lambda1);
}

std::string format_manifest(const task_artifact & a) {
    std::string s;
    s += "task_id=" + a.task_id + "\n";
    s += "lambda1=" + format_double(a.lambda1) + "\n";
    s += "lambda2=" + format_double(a.lambda2) + "\n";
    s += std::string("codec=") + to_string(a.codec.kind) + "\n";
    s += "sparse_rate=" + format_double(a.codec.sparse_rate) + "\n";
    s += "seed=" + std::to_string(a.codec.seed) + "\n";
    s += "steps=" + std::to_string(a.provenance.steps) + "\n";
    s += "final_loss=" + format_double(a.provenance.final_loss) + "\n";
    return s;
}

void save_artifact(const task_artifact & artifact, const std::string & stem) {
    require(artifact.task_id.find('\n') == std::string::npos, "task id must not contain newlines");
    save_compressed(artifact.delta, stem + ".dltc");
    write_text_atomic(stem + ".manifest", format_manifest(artifact));
}

task_artifact load_artifact(const std::string & stem) {
    const manifest_map kv = parse_manifest(stem + ".manifest");
    task_artifact a;
    a.task_id = field(kv, "task_id");
    a.lambda1 = parse_double("lambda1", field(kv, "lambda1"));
    a.lambda2 = parse_double("lambda2", field(kv, "lambda2"));
    a.codec.kind = parse_codec_kind(field(kv, "codec"));
    a.codec.sparse_rate = parse_double("sparse_rate", field(kv, "sparse_rate"));
    a.codec.seed = parse_u64("seed", field(kv, "seed"));
    a.provenance.steps = parse_u64("steps", field(kv, "steps"));
    a.provenance.final_loss = parse_double("final_loss", field(kv, "final_loss"));
    validate(a.codec);
    a.delta = load_compressed(stem + ".dltc");
    if (a.delta.kind() != a.codec.kind) {
        fail(error_kind::validation, "artifact " + stem + ": manifest codec does not match container");
    }
    if (a.codec.kind == codec_kind::dare) {
        const auto & cfg = a.delta.dare().config;
        if (!a.delta.dare().tensors.empty() && (cfg.sparse_rate != a.codec.sparse_rate || cfg.seed != a.codec.seed)) {
            fail(error_kind::validation, "artifact " + stem + ": manifest DARE config does not match container");
        }
    }
    return a;
}

void save_base_vector(const base_vector & base, const std::string & stem) {
    save_compressed(base.compressed, stem + ".dltc");
    write_text_atomic(stem + ".manifest", "task_count=" + std::to_string(base.task_count) + "\n");
}

base_vector load_base_vector(const std::string & stem) {
    const manifest_map kv = parse_manifest(stem + ".manifest");
    const uint64_t n = parse_u64("task_count", field(kv, "task_count"));
    return make_base_vector(load_compressed(stem + ".dltc"), n);
}

} // namespace deltashift
