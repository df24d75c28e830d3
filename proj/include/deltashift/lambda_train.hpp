#pragma once

// Training of the two per-task modulators (lambda1, lambda2) against the
// output-matching objective
//   L(l1, l2) = mean over samples and outputs of (f(W'(l1, l2); x) - f(W_t; x))^2
// where W' is the reconstruction with the task delta recompressed at l1.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deltashift/dbms_core.hpp"
#include "deltashift/error.hpp"
#include "deltashift/tensor_store.hpp"

namespace deltashift {

enum class activation { tanh, relu };

struct linear_layer {
    std::string weight; // [out, in]
    std::optional<std::string> bias; // [out]
};

struct activation_layer {
    activation fn = activation::tanh;
};

using layer = std::variant<linear_layer, activation_layer>;

struct forward_model {
    std::vector<layer> layers;
    size_t input_dim = 0;
    size_t output_dim = 0;
};

// fc1 -> act -> fc2 with tensors fc1.weight, fc1.bias, fc2.weight, fc2.bias.
forward_model make_mlp(size_t input_dim, size_t hidden_dim, size_t output_dim, activation act = activation::tanh);

// Checks that every referenced tensor exists with a compatible shape.
void validate_weights(const forward_model & model, const tensor_map & weights);

struct matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data; // row-major

    matrix() = default;
    matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double & operator()(size_t r, size_t c) { return data[r * cols + c]; }
    double operator()(size_t r, size_t c) const { return data[r * cols + c]; }
};

struct batch {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> inputs; // rows x cols

    batch() = default;
    batch(size_t r, size_t c, std::vector<float> x);

    batch select(std::span<const size_t> row_indices) const;
};

// 64-bit working copy of a weight map used inside the training loop.
struct dense_tensor {
    std::vector<uint64_t> shape;
    std::vector<double> data;
};
using dense_weights = std::map<std::string, dense_tensor, std::less<>>;

dense_weights to_dense(const tensor_map & weights);

matrix forward(const forward_model & model, const tensor_map & weights, const batch & x);
matrix forward(const forward_model & model, const dense_weights & weights, const batch & x);

// Forward pass plus its directional derivative along `direction` (same layout as weights).
struct jvp_result {
    matrix value;
    matrix tangent;
};
jvp_result forward_jvp(const forward_model & model, const dense_weights & weights, const dense_weights & direction,
                       const batch & x);

double mean_squared_difference(const matrix & a, const matrix & b);
double distill_loss(const forward_model & model, const tensor_map & teacher, const tensor_map & student,
                    const batch & x);

enum class gradient_mode { finite_diff, analytic };
const char * to_string(gradient_mode mode);
gradient_mode parse_gradient_mode(std::string_view s);

// Everything loss_at needs for one task and one batch. The DARE keep mask is
// fixed at construction (derived from the codec seed exactly as dare_compress
// does), so the objective is deterministic across steps.
class loss_context {
public:
    loss_context(const forward_model & model, const tensor_map & pretrained, const tensor_map & tau,
                 const tensor_map & finetuned, const codec_spec & codec, batch x);

    // reconstructed weights and their partial derivatives in (l1, l2)
    struct student {
        dense_weights weights;
        dense_weights d_lambda1;
        dense_weights d_lambda2;
    };
    student build_student(double lambda1, double lambda2, bool with_derivatives) const;

    const forward_model & model() const { return *model_; }
    const batch & inputs() const { return x_; }
    const matrix & teacher_outputs() const { return teacher_; }
    const codec_spec & codec() const { return codec_; }

private:
    const forward_model * model_;
    dense_weights pretrained_;
    dense_weights tau_;
    dense_weights finetuned_;
    codec_spec codec_;
    std::map<std::string, std::vector<uint8_t>, std::less<>> keep_; // DARE only
    batch x_;
    matrix teacher_;
};

double loss_at(double lambda1, double lambda2, const loss_context & ctx);

struct gradient_result {
    double g1 = 0.0;
    double g2 = 0.0;
    double loss = 0.0; // loss at the evaluation point
};

// FINITE_DIFF: central differences with step fd_step * max(1, |lambda|).
// ANALYTIC: chain rule with the sign pattern / keep mask held fixed.
gradient_result gradient(double lambda1, double lambda2, const loss_context & ctx, gradient_mode mode,
                         double fd_step = 1e-4);

struct adam_state {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::array<double, 2> m{};
    std::array<double, 2> v{};
    uint64_t step = 0;
};

void adam_step(adam_state & state, std::array<double, 2> & params, const std::array<double, 2> & grads);

enum class init_strategy { projection, ones };
const char * to_string(init_strategy s);
init_strategy parse_init_strategy(std::string_view s);

struct train_config {
    uint64_t steps = 500;
    double sample_fraction = 0.1;
    size_t batch_size = 0; // 0: the whole sample every step
    gradient_mode mode = gradient_mode::finite_diff;
    double fd_step = 1e-4;
    double lr = 1e-4;
    uint64_t sample_seed = 0;
    init_strategy init = init_strategy::projection;
};

void validate(const train_config & cfg);

struct trace_row {
    uint64_t step = 0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double loss = 0.0;
    double grad1 = 0.0;
    double grad2 = 0.0;
};

std::string format_trace_csv(std::span<const trace_row> trace);

struct train_inputs {
    std::string task_id;
    const forward_model * model = nullptr;
    const tensor_map * pretrained = nullptr;
    const tensor_map * finetuned = nullptr;
    const base_vector * base = nullptr;
    codec_spec codec;
    const batch * pool = nullptr; // unlabeled inputs to sample from
    // resume from these (lambda1, lambda2) instead of applying cfg.init
    std::optional<std::array<double, 2>> start;
};

struct train_result {
    task_artifact artifact;
    std::vector<trace_row> trace; // one row per step, values before the update
    double initial_loss = 0.0;    // on the full sample, at the initial lambdas
    double final_loss = 0.0;      // on the full sample, at the final lambdas
};

// Raised on a non-finite loss; carries the steps completed so far.
class training_aborted : public error {
public:
    training_aborted(const std::string & msg, std::vector<trace_row> trace)
        : error(error_kind::numerical, msg), trace_(std::move(trace)) {}
    const std::vector<trace_row> & trace() const { return trace_; }

private:
    std::vector<trace_row> trace_;
};

// Seeded sample of ceil(fraction * rows) distinct rows.
std::vector<size_t> sample_rows(size_t rows, double fraction, uint64_t seed);

train_result train_task(const train_inputs & in, const train_config & cfg);

} // namespace deltashift
