#pragma once

// Synthetic desk-scale experiment suite. A pretrained MLP is finetuned by
// full-batch gradient descent on N regression tasks whose targets share a
// common component; the resulting model family exercises the compression
// pipeline, lambda sweeps, the init ablation and storage accounting.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deltashift/dbms_core.hpp"
#include "deltashift/lambda_train.hpp"

namespace deltashift {

struct suite_config {
    size_t task_count = 8;
    size_t input_dim = 16;
    size_t hidden_dim = 32;
    size_t output_dim = 4;
    activation act = activation::tanh;
    double weight_scale = 1.0;     // pretrained init std = weight_scale / sqrt(fan_in)
    double shared_strength = 1.0;  // magnitude of the target shift common to all tasks
    double shared_spread = 0.0;    // task t scales the shared shift by 1 + shared_spread * u_t, u_t ~ U[-1, 1]
    double task_noise = 0.3;       // magnitude of the task-specific target shift
    size_t dataset_size = 200;     // finetune set size and unlabeled pool size
    size_t eval_size = 100;
    size_t finetune_steps = 200;
    double finetune_lr = 0.05;
    bool identical_task_data = false; // every task reuses task 0's inputs
    uint64_t seed = 0;
};

void validate(const suite_config & cfg);

struct task_data {
    std::string task_id;
    tensor_map finetuned;
    batch finetune_inputs;
    batch pool;         // unlabeled inputs the lambdas are trained on
    batch eval_inputs;  // held out
    matrix eval_targets;
};

struct synthetic_suite {
    suite_config config;
    forward_model model;
    tensor_map pretrained;
    std::vector<task_data> tasks;

    const task_data & task(const std::string & task_id) const;
    size_t task_index(const std::string & task_id) const;
    std::vector<tensor_map> finetuned_models() const;
};

synthetic_suite generate_suite(const suite_config & cfg);

// Suite on disk: <dir>/suite.cfg, pretrained.dlts, <task>.finetuned.dlts and
// <task>.data.dlts (finetune_inputs, pool, eval_inputs, eval_targets).
void save_suite(const synthetic_suite & suite, const std::string & dir);
synthetic_suite load_suite(const std::string & dir);

struct eval_metrics {
    double eval_mse = 0.0;              // against stored targets
    double relative_output_error = 0.0; // |f(W) - f(W_t)|_F / |f(W_t)|_F on the eval set
};

eval_metrics evaluate(const tensor_map & weights, const synthetic_suite & suite, const std::string & task_id);

enum class method { vanilla, dbms_init, dbms_trained };
const char * to_string(method m);
method parse_method(std::string_view s);

// Codec seed used for task `task_index`; DARE masks differ across tasks but
// are shared by every method on the same task.
codec_spec task_codec(const codec_spec & codec, size_t task_index);

struct pipeline_row {
    std::string task_id;
    method how = method::vanilla;
    codec_kind codec = codec_kind::dare;
    double sparse_rate = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 1.0;
    double recon_l2 = 0.0;
    double eval_mse = 0.0;
    double rel_out_err = 0.0;
    uint64_t bits = 0;
};

struct pipeline_result {
    std::vector<pipeline_row> rows;
    std::vector<task_artifact> artifacts;
    std::vector<std::vector<trace_row>> traces; // DBMS_TRAINED only
};

// Artifact + metrics for fixed lambdas; the code path shared by the pipeline and the sweep.
struct lambda_eval {
    task_artifact artifact;
    tensor_map reconstruction;
    eval_metrics metrics;
};
lambda_eval evaluate_lambdas(const synthetic_suite & suite, const base_vector & base, size_t task_index,
                             const codec_spec & codec, double lambda1, double lambda2,
                             const tensor_map * uncompressed_tau = nullptr);

pipeline_result run_pipeline(const synthetic_suite & suite, const base_vector & base, const codec_spec & codec,
                             method how, const train_config & train);

// Training inputs for task `task_index`, with the per-task sample seed.
train_config task_train_config(const train_config & train, size_t task_index);

struct grid_axis {
    double min = 0.0;
    double max = 0.0;
    size_t steps = 2;

    double value(size_t i) const;
};

struct sweep_result {
    std::string task_id;
    std::vector<double> lambda1_values;
    std::vector<double> lambda2_values;
    std::vector<double> rel_out_err; // [i1 * lambda2_values.size() + i2]
    std::vector<double> pre_codec_residual; // |W_t - shifted_base(lambda1)|, per lambda1
    long vanilla_i1 = -1;            // grid position of (0, 1) if present
    long vanilla_i2 = -1;
    size_t argmin_i1 = 0;
    size_t argmin_i2 = 0;

    double at(size_t i1, size_t i2) const { return rel_out_err[i1 * lambda2_values.size() + i2]; }
};

sweep_result sweep_lambda_grid(const synthetic_suite & suite, const base_vector & base, const std::string & task_id,
                               const codec_spec & codec, const grid_axis & lambda1, const grid_axis & lambda2,
                               bool uncompressed_base = false);

struct ablation_row {
    std::string task_id;
    double initial_loss_a = 0.0;
    double initial_loss_b = 0.0;
    double loss_a = 0.0; // after train.steps steps
    double loss_b = 0.0;
};

struct ablation_result {
    init_strategy a = init_strategy::projection;
    init_strategy b = init_strategy::ones;
    std::vector<ablation_row> rows;
    std::vector<std::vector<trace_row>> traces_a;
    std::vector<std::vector<trace_row>> traces_b;
    double fraction_a_le_b = 0.0;
};

ablation_result ablation_init(const synthetic_suite & suite, const base_vector & base, const codec_spec & codec,
                              const train_config & train, init_strategy a, init_strategy b);

struct storage_report_result {
    std::vector<std::string> task_ids;
    std::vector<uint64_t> task_bits;         // DBMS artifacts
    std::vector<uint64_t> vanilla_task_bits; // lambda1 = 0 artifacts
    uint64_t base_bits = 0;
    uint64_t lambda_bits_per_task = 128;
    uint64_t vanilla_total = 0;
    uint64_t dbms_total = 0;
    double overhead_per_task = 0.0; // (base_bits + 128 N) / N
    double ratio = 0.0;             // dbms_total / vanilla_total
};

storage_report_result storage_report(const std::vector<task_artifact> & artifacts,
                                     const std::vector<task_artifact> & vanilla_artifacts, const base_vector & base);

// CSV output. Every file starts with
//   # deltashift-report v1, kind=<kind>, seed=<n>
std::string report_header(std::string_view kind, uint64_t seed);
std::string format_pipeline_csv(std::span<const pipeline_row> rows, uint64_t seed);
std::vector<pipeline_row> parse_pipeline_csv(const std::string & text);
std::string format_sweep_csv(const sweep_result & sweep, uint64_t seed);
std::string format_ablation_csv(const ablation_result & ablation, uint64_t seed);
std::string format_storage_csv(const storage_report_result & report, uint64_t seed);

// Runs fn(i) for i in [0, n) on up to DELTASHIFT_THREADS threads (default:
// hardware concurrency). Results must be written to per-index slots.
void parallel_for(size_t n, const std::function<void(size_t)> & fn);

} // namespace deltashift
