#include "deltashift/lambda_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "deltashift/random.hpp"

namespace deltashift {

namespace {

const dense_tensor & lookup(const dense_weights & w, const std::string & name) {
    auto it = w.find(name);
    if (it == w.end()) {
        fail(error_kind::validation, "forward: missing tensor '" + name + "'");
    }
    return it->second;
}

// Runs the layer stack on `value`; when `tangent` is non-null it is propagated
// alongside as the directional derivative along `direction`.
void run_layers(const forward_model & model, const dense_weights & weights, const dense_weights * direction,
                matrix & value, matrix * tangent) {
    for (const auto & l : model.layers) {
        if (const auto * lin = std::get_if<linear_layer>(&l)) {
            const dense_tensor & w = lookup(weights, lin->weight);
            if (w.shape.size() != 2 || w.shape[1] != value.cols) {
                fail(error_kind::validation, "forward: weight '" + lin->weight + "' has shape " +
                                                 shape_to_string(w.shape) + ", input has " +
                                                 std::to_string(value.cols) + " columns");
            }
            const size_t out_dim = w.shape[0];
            const size_t in_dim = w.shape[1];
            const dense_tensor * b = nullptr;
            if (lin->bias) {
                b = &lookup(weights, *lin->bias);
                if (b->data.size() != out_dim) {
                    fail(error_kind::validation, "forward: bias '" + *lin->bias + "' does not match " +
                                                     std::to_string(out_dim) + " outputs");
                }
            }
            matrix next(value.rows, out_dim);
            for (size_t r = 0; r < value.rows; ++r) {
                const double * a = &value.data[r * in_dim];
                for (size_t o = 0; o < out_dim; ++o) {
                    const double * wr = &w.data[o * in_dim];
                    double z = b ? b->data[o] : 0.0;
                    for (size_t i = 0; i < in_dim; ++i) z += a[i] * wr[i];
                    next(r, o) = z;
                }
            }
            if (tangent) {
                const dense_tensor & dw = lookup(*direction, lin->weight);
                const dense_tensor * db = lin->bias ? &lookup(*direction, *lin->bias) : nullptr;
                matrix next_t(value.rows, out_dim);
                for (size_t r = 0; r < value.rows; ++r) {
                    const double * a = &value.data[r * in_dim];
                    const double * at = &tangent->data[r * in_dim];
                    for (size_t o = 0; o < out_dim; ++o) {
                        const double * wr = &w.data[o * in_dim];
                        const double * dwr = &dw.data[o * in_dim];
                        double z = db ? db->data[o] : 0.0;
                        for (size_t i = 0; i < in_dim; ++i) z += at[i] * wr[i] + a[i] * dwr[i];
                        next_t(r, o) = z;
                    }
                }
                *tangent = std::move(next_t);
            }
            value = std::move(next);
        } else {
            const auto fn = std::get<activation_layer>(l).fn;
            for (size_t k = 0; k < value.data.size(); ++k) {
                const double z = value.data[k];
                if (fn == activation::tanh) {
                    const double y = std::tanh(z);
                    value.data[k] = y;
                    if (tangent) tangent->data[k] *= 1.0 - y * y;
                } else {
                    value.data[k] = z > 0.0 ? z : 0.0;
                    if (tangent && !(z > 0.0)) tangent->data[k] = 0.0;
                }
            }
        }
    }
    if (value.cols != model.output_dim) {
        fail(error_kind::validation, "forward: network produced " + std::to_string(value.cols) + " outputs, expected " +
                                         std::to_string(model.output_dim));
    }
}

matrix input_matrix(const forward_model & model, const batch & x) {
    if (x.cols != model.input_dim) {
        fail(error_kind::validation, "forward: batch has " + std::to_string(x.cols) + " columns, model expects " +
                                         std::to_string(model.input_dim));
    }
    matrix m(x.rows, x.cols);
    for (size_t k = 0; k < m.data.size(); ++k) m.data[k] = x.inputs[k];
    return m;
}

dense_weights dense_zeros_like(const dense_weights & like) {
    dense_weights out;
    for (const auto & [name, t] : like) {
        out.emplace(name, dense_tensor{t.shape, std::vector<double>(t.data.size(), 0.0)});
    }
    return out;
}

double sq(double x) { return x * x; }

} // namespace

forward_model make_mlp(size_t input_dim, size_t hidden_dim, size_t output_dim, activation act) {
    forward_model m;
    m.input_dim = input_dim;
    m.output_dim = output_dim;
    m.layers.push_back(linear_layer{"fc1.weight", "fc1.bias"});
    m.layers.push_back(activation_layer{act});
    m.layers.push_back(linear_layer{"fc2.weight", "fc2.bias"});
    (void) hidden_dim; // carried by the weight shapes
    return m;
}

void validate_weights(const forward_model & model, const tensor_map & weights) {
    batch probe(1, model.input_dim, std::vector<float>(model.input_dim, 0.0f));
    forward(model, weights, probe);
}

batch::batch(size_t r, size_t c, std::vector<float> x) : rows(r), cols(c), inputs(std::move(x)) {
    require(rows >= 1, "batch must have at least one row");
    require(inputs.size() == rows * cols, "batch data length does not match rows x cols");
    for (float v : inputs) {
        if (!std::isfinite(v)) {
            fail(error_kind::numerical, "batch contains a non-finite input");
        }
    }
}

batch batch::select(std::span<const size_t> row_indices) const {
    std::vector<float> out;
    out.reserve(row_indices.size() * cols);
    for (size_t r : row_indices) {
        require(r < rows, "batch::select: row out of range");
        out.insert(out.end(), inputs.begin() + static_cast<std::ptrdiff_t>(r * cols),
                   inputs.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }
    return batch(row_indices.size(), cols, std::move(out));
}

dense_weights to_dense(const tensor_map & weights) {
    dense_weights out;
    for (const auto & t : weights.entries()) {
        out.emplace(t.name, dense_tensor{t.shape, std::vector<double>(t.data.begin(), t.data.end())});
    }
    return out;
}

matrix forward(const forward_model & model, const tensor_map & weights, const batch & x) {
    return forward(model, to_dense(weights), x);
}

matrix forward(const forward_model & model, const dense_weights & weights, const batch & x) {
    matrix value = input_matrix(model, x);
    run_layers(model, weights, nullptr, value, nullptr);
    return value;
}

jvp_result forward_jvp(const forward_model & model, const dense_weights & weights, const dense_weights & direction,
                       const batch & x) {
    jvp_result r;
    r.value = input_matrix(model, x);
    r.tangent = matrix(x.rows, x.cols);
    run_layers(model, weights, &direction, r.value, &r.tangent);
    return r;
}

double mean_squared_difference(const matrix & a, const matrix & b) {
    require(a.rows == b.rows && a.cols == b.cols, "mean_squared_difference: shape mismatch");
    require(!a.data.empty(), "mean_squared_difference: empty matrices");
    double acc = 0.0;
    for (size_t k = 0; k < a.data.size(); ++k) acc += sq(a.data[k] - b.data[k]);
    return acc / static_cast<double>(a.data.size());
}

double distill_loss(const forward_model & model, const tensor_map & teacher, const tensor_map & student,
                    const batch & x) {
    return mean_squared_difference(forward(model, student, x), forward(model, teacher, x));
}

const char * to_string(gradient_mode mode) {
    return mode == gradient_mode::finite_diff ? "finite-diff" : "analytic";
}

gradient_mode parse_gradient_mode(std::string_view s) {
    if (s == "finite-diff" || s == "fd") return gradient_mode::finite_diff;
    if (s == "analytic") return gradient_mode::analytic;
    fail(error_kind::validation, "unknown gradient mode '" + std::string(s) + "' (expected finite-diff|analytic)");
}

loss_context::loss_context(const forward_model & model, const tensor_map & pretrained, const tensor_map & tau,
                           const tensor_map & finetuned, const codec_spec & codec, batch x)
    : model_(&model), codec_(codec), x_(std::move(x)) {
    require_aligned(pretrained, tau, "loss_context");
    require_aligned(pretrained, finetuned, "loss_context");
    validate(codec);
    pretrained_ = to_dense(pretrained);
    tau_ = to_dense(tau);
    finetuned_ = to_dense(finetuned);
    if (codec.kind == codec_kind::dare) {
        for (const auto & t : pretrained.entries()) {
            const uint64_t key = dare_tensor_key(codec.seed, t.name);
            std::vector<uint8_t> mask(t.data.size());
            for (uint64_t i = 0; i < mask.size(); ++i) {
                mask[i] = dare_keep(key, i, codec.sparse_rate) ? 1 : 0;
            }
            keep_.emplace(t.name, std::move(mask));
        }
    }
    teacher_ = forward(model, finetuned_, x_);
}

loss_context::student loss_context::build_student(double lambda1, double lambda2, bool with_derivatives) const {
    student s;
    s.weights = dense_zeros_like(pretrained_);
    if (with_derivatives) {
        s.d_lambda1 = dense_zeros_like(pretrained_);
        s.d_lambda2 = dense_zeros_like(pretrained_);
    }
    const double rescale = codec_.kind == codec_kind::dare ? 1.0 / (1.0 - codec_.sparse_rate) : 0.0;
    std::vector<double> residual;
    for (const auto & [name, pre] : pretrained_) {
        const auto & tau = tau_.find(name)->second.data;
        const auto & ft = finetuned_.find(name)->second.data;
        const size_t n = pre.data.size();
        residual.resize(n);
        for (size_t i = 0; i < n; ++i) {
            residual[i] = ft[i] - pre.data[i] - lambda1 * tau[i];
        }
        auto & w = s.weights.find(name)->second.data;
        double * d1 = with_derivatives ? s.d_lambda1.find(name)->second.data.data() : nullptr;
        double * d2 = with_derivatives ? s.d_lambda2.find(name)->second.data.data() : nullptr;

        if (codec_.kind == codec_kind::dare) {
            const auto & mask = keep_.find(name)->second;
            for (size_t i = 0; i < n; ++i) {
                const double c = mask[i] ? residual[i] * rescale : 0.0;
                w[i] = pre.data[i] + lambda1 * tau[i] + lambda2 * c;
                if (d1) {
                    // dC/dl1 = -tau / (1 - p) on kept entries
                    d1[i] = tau[i] - (mask[i] ? lambda2 * tau[i] * rescale : 0.0);
                    d2[i] = c;
                }
            }
        } else {
            double alpha = 0.0;
            double d_alpha = 0.0; // d alpha / d l1 with the sign pattern frozen
            for (size_t i = 0; i < n; ++i) {
                alpha += std::fabs(residual[i]);
                if (residual[i] > 0.0) d_alpha -= tau[i];
                else if (residual[i] < 0.0) d_alpha += tau[i];
            }
            alpha /= static_cast<double>(n);
            d_alpha /= static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                const double sign = residual[i] > 0.0 ? 1.0 : -1.0;
                w[i] = pre.data[i] + lambda1 * tau[i] + lambda2 * sign * alpha;
                if (d1) {
                    d1[i] = tau[i] + lambda2 * sign * d_alpha;
                    d2[i] = sign * alpha;
                }
            }
        }
    }
    return s;
}

double loss_at(double lambda1, double lambda2, const loss_context & ctx) {
    const auto s = ctx.build_student(lambda1, lambda2, false);
    return mean_squared_difference(forward(ctx.model(), s.weights, ctx.inputs()), ctx.teacher_outputs());
}

gradient_result gradient(double lambda1, double lambda2, const loss_context & ctx, gradient_mode mode,
                         double fd_step) {
    gradient_result g;
    if (mode == gradient_mode::finite_diff) {
        require(fd_step > 0.0, "finite-difference step must be positive");
        const double h1 = fd_step * std::max(1.0, std::fabs(lambda1));
        const double h2 = fd_step * std::max(1.0, std::fabs(lambda2));
        g.loss = loss_at(lambda1, lambda2, ctx);
        const double a = loss_at(lambda1 + h1, lambda2, ctx);
        const double b = loss_at(lambda1 - h1, lambda2, ctx);
        const double c = loss_at(lambda1, lambda2 + h2, ctx);
        const double d = loss_at(lambda1, lambda2 - h2, ctx);
        g.g1 = (a - b) / (2.0 * h1);
        g.g2 = (c - d) / (2.0 * h2);
    } else {
        const auto s = ctx.build_student(lambda1, lambda2, true);
        const auto j1 = forward_jvp(ctx.model(), s.weights, s.d_lambda1, ctx.inputs());
        const auto j2 = forward_jvp(ctx.model(), s.weights, s.d_lambda2, ctx.inputs());
        const matrix & teacher = ctx.teacher_outputs();
        double loss = 0.0, g1 = 0.0, g2 = 0.0;
        for (size_t k = 0; k < teacher.data.size(); ++k) {
            const double diff = j1.value.data[k] - teacher.data[k];
            loss += diff * diff;
            g1 += diff * j1.tangent.data[k];
            g2 += diff * j2.tangent.data[k];
        }
        const double inv = 1.0 / static_cast<double>(teacher.data.size());
        g.loss = loss * inv;
        g.g1 = 2.0 * g1 * inv;
        g.g2 = 2.0 * g2 * inv;
    }
    if (!std::isfinite(g.loss) || !std::isfinite(g.g1) || !std::isfinite(g.g2)) {
        fail(error_kind::numerical, "non-finite loss or gradient at lambda1=" + std::to_string(lambda1) +
                                        " lambda2=" + std::to_string(lambda2));
    }
    return g;
}

void adam_step(adam_state & state, std::array<double, 2> & params, const std::array<double, 2> & grads) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (size_t k = 0; k < 2; ++k) {
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * grads[k];
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * grads[k] * grads[k];
        const double m_hat = state.m[k] / c1;
        const double v_hat = state.v[k] / c2;
        params[k] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

const char * to_string(init_strategy s) {
    return s == init_strategy::projection ? "projection" : "ones";
}

init_strategy parse_init_strategy(std::string_view s) {
    if (s == "projection") return init_strategy::projection;
    if (s == "ones") return init_strategy::ones;
    fail(error_kind::validation, "unknown init strategy '" + std::string(s) + "' (expected projection|ones)");
}

void validate(const train_config & cfg) {
    require(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0, "sample fraction must be in (0, 1]");
    require(cfg.fd_step > 0.0 && std::isfinite(cfg.fd_step), "finite-difference step must be positive");
    require(cfg.lr > 0.0 && std::isfinite(cfg.lr), "learning rate must be positive");
}

std::string format_trace_csv(std::span<const trace_row> trace) {
    std::string s = "step,lambda1,lambda2,loss,grad1,grad2\n";
    char buf[256];
    for (const auto & r : trace) {
        std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<unsigned long long>(r.step), r.lambda1, r.lambda2, r.loss, r.grad1, r.grad2);
        s += buf;
    }
    return s;
}

std::vector<size_t> sample_rows(size_t rows, double fraction, uint64_t seed) {
    require(fraction > 0.0 && fraction <= 1.0, "sample fraction must be in (0, 1]");
    const size_t k = std::min(rows, static_cast<size_t>(std::ceil(fraction * static_cast<double>(rows) - 1e-9)));
    std::vector<size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), size_t{0});
    rng r(seed);
    for (size_t i = 0; i < k; ++i) {
        const size_t j = i + static_cast<size_t>(r.below(rows - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

train_result train_task(const train_inputs & in, const train_config & cfg) {
    require(in.model && in.pretrained && in.finetuned && in.base && in.pool, "train_task: incomplete inputs");
    validate(cfg);
    const auto rows = sample_rows(in.pool->rows, cfg.sample_fraction, cfg.sample_seed);
    if (rows.empty()) {
        fail(error_kind::validation, "train_task: empty sample for task '" + in.task_id + "'");
    }
    const tensor_map & tau = in.base->decoded;
    const loss_context full(*in.model, *in.pretrained, tau, *in.finetuned, in.codec, in.pool->select(rows));

    std::vector<loss_context> minibatches;
    if (cfg.batch_size != 0 && cfg.batch_size < rows.size()) {
        for (size_t start = 0; start < rows.size(); start += cfg.batch_size) {
            const size_t end = std::min(rows.size(), start + cfg.batch_size);
            std::vector<size_t> sub(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                    rows.begin() + static_cast<std::ptrdiff_t>(end));
            minibatches.emplace_back(*in.model, *in.pretrained, tau, *in.finetuned, in.codec, in.pool->select(sub));
        }
    }

    std::array<double, 2> params{1.0, 1.0};
    if (in.start) {
        params = *in.start;
    } else if (cfg.init == init_strategy::projection) {
        params[0] = init_lambda1_or_zero(*in.finetuned, *in.pretrained, *in.base);
    }

    train_result result;
    result.initial_loss = loss_at(params[0], params[1], full);
    if (!std::isfinite(result.initial_loss)) {
        throw training_aborted("non-finite initial loss for task '" + in.task_id + "'", {});
    }

    adam_state opt;
    opt.lr = cfg.lr;
    result.trace.reserve(cfg.steps);
    for (uint64_t step = 0; step < cfg.steps; ++step) {
        const loss_context & ctx = minibatches.empty() ? full : minibatches[step % minibatches.size()];
        gradient_result g;
        try {
            g = gradient(params[0], params[1], ctx, cfg.mode, cfg.fd_step);
        } catch (const error & e) {
            if (e.kind() != error_kind::numerical) throw;
            throw training_aborted(std::string(e.what()) + " (task '" + in.task_id + "', step " +
                                       std::to_string(step) + ")",
                                   std::move(result.trace));
        }
        result.trace.push_back(trace_row{step, params[0], params[1], g.loss, g.g1, g.g2});
        adam_step(opt, params, {g.g1, g.g2});
    }

    result.final_loss = loss_at(params[0], params[1], full);
    if (!std::isfinite(result.final_loss) || !std::isfinite(params[0]) || !std::isfinite(params[1])) {
        throw training_aborted("non-finite final loss for task '" + in.task_id + "'", std::move(result.trace));
    }
    result.artifact =
        make_artifact(in.task_id, *in.finetuned, *in.pretrained, *in.base, params[0], params[1], in.codec);
    result.artifact.provenance = train_provenance{cfg.steps, result.final_loss};
    return result;
}

} // namespace deltashift
