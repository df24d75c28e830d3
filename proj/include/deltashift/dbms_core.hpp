#pragma once

// Dynamic base model shift: every task delta is taken against
//   W_base(t) = W_pre + lambda1(t) * tau_base
// where tau_base is the BitDelta-compressed average delta of all tasks, and
// reconstruction is
//   W'(t) = W_pre + lambda1 * tau_base + lambda2 * C(W_t - W_pre - lambda1 * tau_base).
// lambda1 = 0, lambda2 = 1 recovers plain delta compression against W_pre.

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "deltashift/codecs.hpp"
#include "deltashift/tensor_store.hpp"

namespace deltashift {

struct codec_spec {
    codec_kind kind = codec_kind::dare;
    double sparse_rate = 0.0; // DARE only
    uint64_t seed = 0;        // DARE only

    dare_config dare() const { return {sparse_rate, seed}; }
};

void validate(const codec_spec & spec);
compressed_delta compress(const tensor_map & delta, const codec_spec & spec);

struct base_vector {
    compressed_delta compressed; // always BitDelta
    tensor_map decoded;          // bitdelta_decompress(compressed)
    uint64_t task_count = 0;

    bool is_zero() const;
};

// Rebuilds the decoded cache from a BitDelta payload.
base_vector make_base_vector(compressed_delta compressed, uint64_t task_count);

// Uniform average of the finetuned models, accumulated in 64-bit.
tensor_map average_model(std::span<const tensor_map> models);

base_vector compute_base_vector(std::span<const tensor_map> models, const tensor_map & pretrained);

// Least-squares coefficient of (W_t - W_pre) on tau: <W_t - W_pre, tau> / <tau, tau>
// over the flattened (canonical order) parameters. Throws error_kind::numerical
// when tau is zero over the selected tensors.
double init_lambda1(const tensor_map & finetuned, const tensor_map & pretrained, const tensor_map & tau,
                    const name_filter & filter = {});
double init_lambda1(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                    const name_filter & filter = {});

// init_lambda1, or 0 (the plain paradigm) when the base vector is degenerate.
double init_lambda1_or_zero(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                            const name_filter & filter = {});

tensor_map shifted_base(const tensor_map & pretrained, const tensor_map & tau, double lambda1);
tensor_map shifted_base(const tensor_map & pretrained, const base_vector & base, double lambda1);

// C(W_t - shifted_base(lambda1)).
compressed_delta compress_task(const tensor_map & finetuned, const tensor_map & pretrained, const tensor_map & tau,
                               double lambda1, const codec_spec & codec);
compressed_delta compress_task(const tensor_map & finetuned, const tensor_map & pretrained, const base_vector & base,
                               double lambda1, const codec_spec & codec);

struct train_provenance {
    uint64_t steps = 0;
    double final_loss = 0.0;
};

struct task_artifact {
    std::string task_id;
    compressed_delta delta;
    double lambda1 = 0.0;
    double lambda2 = 1.0;
    codec_spec codec;
    train_provenance provenance;
};

task_artifact make_artifact(std::string task_id, const tensor_map & finetuned, const tensor_map & pretrained,
                            const base_vector & base, double lambda1, double lambda2, const codec_spec & codec);

// W_pre + lambda1 * tau + lambda2 * decoded delta, evaluated in 64-bit and rounded once.
tensor_map reconstruct(const tensor_map & pretrained, const tensor_map & tau, const task_artifact & artifact);
tensor_map reconstruct(const tensor_map & pretrained, const base_vector & base, const task_artifact & artifact);

// Same reconstruction with the raw average delta (avg_model - W_pre) as tau.
tensor_map reconstruct_uncompressed_base(const tensor_map & pretrained, const tensor_map & avg_model,
                                         const task_artifact & artifact);

struct residual_diagnostics_record {
    double residual_dot_base = 0.0;      // <D_ours, tau>
    double norm_ori_sq = 0.0;            // |D_ori|^2,  D_ori = W_t - W_pre
    double norm_ours_sq = 0.0;           // |D_ours|^2, D_ours = D_ori - lambda1 * tau
    double lambda_sq_norm_base_sq = 0.0; // lambda1^2 |tau|^2
    // population variances, reported but not asserted equal
    double var_ori = 0.0;
    double var_ours = 0.0;
    double var_base = 0.0;
};

residual_diagnostics_record residual_diagnostics(const tensor_map & finetuned, const tensor_map & pretrained,
                                                 const tensor_map & tau, double lambda1);
residual_diagnostics_record residual_diagnostics(const tensor_map & finetuned, const tensor_map & pretrained,
                                                 const base_vector & base, double lambda1);

// Artifact files: <stem>.dltc (codec container) and <stem>.manifest (key=value).
std::string format_manifest(const task_artifact & artifact);
void save_artifact(const task_artifact & artifact, const std::string & stem);
task_artifact load_artifact(const std::string & stem);

void save_base_vector(const base_vector & base, const std::string & stem);
base_vector load_base_vector(const std::string & stem);

} // namespace deltashift
