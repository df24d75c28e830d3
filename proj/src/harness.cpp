#include "deltashift/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "deltashift/io.hpp"
#include "deltashift/random.hpp"

namespace deltashift {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string task_name(size_t t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "task%02zu", t);
    return buf;
}

std::vector<float> gaussian(rng & r, size_t n, double stddev) {
    std::vector<float> v(n);
    for (auto & x : v) x = static_cast<float>(r.normal() * stddev);
    return v;
}

batch gaussian_batch(rng & r, size_t rows, size_t cols) {
    return batch(rows, cols, gaussian(r, rows * cols, 1.0));
}

// x * A^T for A [out, in]
matrix linear_map(const batch & x, const std::vector<float> & a, size_t out_dim) {
    matrix y(x.rows, out_dim);
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t o = 0; o < out_dim; ++o) {
            double z = 0.0;
            for (size_t i = 0; i < x.cols; ++i) z += static_cast<double>(x.inputs[r * x.cols + i]) * a[o * x.cols + i];
            y(r, o) = z;
        }
    }
    return y;
}

// Full-batch gradient descent on 0.5 * mean_samples sum_outputs (f(W; x) - y)^2.
dense_weights finetune(const forward_model & model, dense_weights w, const batch & x, const matrix & y, size_t steps,
                       double lr) {
    const double inv_n = 1.0 / static_cast<double>(x.rows);
    for (size_t step = 0; step < steps; ++step) {
        // forward, keeping every layer input
        std::vector<matrix> acts;
        matrix a(x.rows, x.cols);
        for (size_t k = 0; k < a.data.size(); ++k) a.data[k] = x.inputs[k];
        for (const auto & l : model.layers) {
            acts.push_back(a);
            if (const auto * lin = std::get_if<linear_layer>(&l)) {
                const auto & wt = w.at(lin->weight);
                const size_t out_dim = wt.shape[0], in_dim = wt.shape[1];
                matrix next(a.rows, out_dim);
                for (size_t r = 0; r < a.rows; ++r) {
                    for (size_t o = 0; o < out_dim; ++o) {
                        double z = lin->bias ? w.at(*lin->bias).data[o] : 0.0;
                        for (size_t i = 0; i < in_dim; ++i) z += a(r, i) * wt.data[o * in_dim + i];
                        next(r, o) = z;
                    }
                }
                a = std::move(next);
            } else {
                const auto fn = std::get<activation_layer>(l).fn;
                for (auto & v : a.data) v = fn == activation::tanh ? std::tanh(v) : std::max(0.0, v);
            }
        }
        // backward
        matrix delta(a.rows, a.cols);
        for (size_t k = 0; k < delta.data.size(); ++k) delta.data[k] = (a.data[k] - y.data[k]) * inv_n;
        for (size_t li = model.layers.size(); li-- > 0;) {
            const auto & l = model.layers[li];
            const matrix & in = acts[li];
            if (const auto * lin = std::get_if<linear_layer>(&l)) {
                auto & wt = w.at(lin->weight);
                const size_t out_dim = wt.shape[0], in_dim = wt.shape[1];
                matrix prev(in.rows, in_dim);
                for (size_t r = 0; r < in.rows; ++r) {
                    for (size_t i = 0; i < in_dim; ++i) {
                        double s = 0.0;
                        for (size_t o = 0; o < out_dim; ++o) s += delta(r, o) * wt.data[o * in_dim + i];
                        prev(r, i) = s;
                    }
                }
                for (size_t o = 0; o < out_dim; ++o) {
                    for (size_t i = 0; i < in_dim; ++i) {
                        double g = 0.0;
                        for (size_t r = 0; r < in.rows; ++r) g += delta(r, o) * in(r, i);
                        wt.data[o * in_dim + i] -= lr * g;
                    }
                    if (lin->bias) {
                        double g = 0.0;
                        for (size_t r = 0; r < in.rows; ++r) g += delta(r, o);
                        w.at(*lin->bias).data[o] -= lr * g;
                    }
                }
                delta = std::move(prev);
            } else {
                const auto fn = std::get<activation_layer>(l).fn;
                for (size_t k = 0; k < delta.data.size(); ++k) {
                    const double z = in.data[k];
                    if (fn == activation::tanh) {
                        const double t = std::tanh(z);
                        delta.data[k] *= 1.0 - t * t;
                    } else if (!(z > 0.0)) {
                        delta.data[k] = 0.0;
                    }
                }
            }
        }
    }
    return w;
}

tensor_map to_tensor_map(const dense_weights & w) {
    std::vector<tensor> out;
    for (const auto & [name, t] : w) {
        tensor f{name, t.shape, std::vector<float>(t.data.size())};
        for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = static_cast<float>(t.data[i]);
        out.push_back(std::move(f));
    }
    return tensor_map(std::move(out));
}

tensor batch_tensor(const std::string & name, const batch & b) {
    return tensor{name, {b.rows, b.cols}, b.inputs};
}

batch tensor_batch(const tensor_map & m, const std::string & name) {
    const tensor & t = m.at(name);
    require(t.shape.size() == 2, "suite data tensor '" + name + "' must be rank 2");
    return batch(t.shape[0], t.shape[1], t.data);
}

double l2_distance(const tensor_map & a, const tensor_map & b) {
    require_aligned(a, b, "l2_distance");
    double acc = 0.0;
    for (size_t k = 0; k < a.size(); ++k) {
        const auto & x = a.entries()[k].data;
        const auto & y = b.entries()[k].data;
        for (size_t i = 0; i < x.size(); ++i) {
            const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

std::map<std::string, std::string> parse_kv(const std::string & text, const std::string & where) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, where + ": malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

const std::string & kv_field(const std::map<std::string, std::string> & kv, const std::string & key) {
    auto it = kv.find(key);
    require(it != kv.end(), "suite.cfg: missing key '" + key + "'");
    return it->second;
}

double kv_double(const std::map<std::string, std::string> & kv, const std::string & key) {
    const std::string & s = kv_field(kv, key);
    char * end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    require(!s.empty() && end == s.c_str() + s.size(), "suite.cfg: bad number for '" + key + "'");
    return v;
}

uint64_t kv_u64(const std::map<std::string, std::string> & kv, const std::string & key) {
    const std::string & s = kv_field(kv, key);
    char * end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    require(!s.empty() && s[0] != '-' && end == s.c_str() + s.size(), "suite.cfg: bad integer for '" + key + "'");
    return v;
}

std::string format_suite_config(const suite_config & c) {
    std::string s;
    s += "task_count=" + std::to_string(c.task_count) + "\n";
    s += "input_dim=" + std::to_string(c.input_dim) + "\n";
    s += "hidden_dim=" + std::to_string(c.hidden_dim) + "\n";
    s += "output_dim=" + std::to_string(c.output_dim) + "\n";
    s += std::string("activation=") + (c.act == activation::tanh ? "tanh" : "relu") + "\n";
    s += "weight_scale=" + fmt(c.weight_scale) + "\n";
    s += "shared_strength=" + fmt(c.shared_strength) + "\n";
    s += "shared_spread=" + fmt(c.shared_spread) + "\n";
    s += "task_noise=" + fmt(c.task_noise) + "\n";
    s += "dataset_size=" + std::to_string(c.dataset_size) + "\n";
    s += "eval_size=" + std::to_string(c.eval_size) + "\n";
    s += "finetune_steps=" + std::to_string(c.finetune_steps) + "\n";
    s += "finetune_lr=" + fmt(c.finetune_lr) + "\n";
    s += std::string("identical_task_data=") + (c.identical_task_data ? "1" : "0") + "\n";
    s += "seed=" + std::to_string(c.seed) + "\n";
    return s;
}

std::vector<std::string> split_csv_line(const std::string & line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

} // namespace

void validate(const suite_config & cfg) {
    require(cfg.task_count >= 1, "suite: task_count must be >= 1");
    require(cfg.input_dim >= 1 && cfg.hidden_dim >= 1 && cfg.output_dim >= 1, "suite: dimensions must be >= 1");
    require(cfg.weight_scale > 0.0, "suite: weight_scale must be positive");
    require(cfg.shared_strength >= 0.0 && cfg.task_noise >= 0.0, "suite: strengths must be >= 0");
    require(cfg.shared_spread >= 0.0 && cfg.shared_spread <= 1.0, "suite: shared_spread must be in [0, 1]");
    require(cfg.dataset_size >= 1 && cfg.eval_size >= 1, "suite: dataset sizes must be >= 1");
    require(cfg.finetune_lr > 0.0, "suite: finetune_lr must be positive");
}

const task_data & synthetic_suite::task(const std::string & task_id) const {
    return tasks[task_index(task_id)];
}

size_t synthetic_suite::task_index(const std::string & task_id) const {
    for (size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].task_id == task_id) return t;
    }
    fail(error_kind::validation, "unknown task '" + task_id + "'");
}

std::vector<tensor_map> synthetic_suite::finetuned_models() const {
    std::vector<tensor_map> out;
    out.reserve(tasks.size());
    for (const auto & t : tasks) out.push_back(t.finetuned);
    return out;
}

synthetic_suite generate_suite(const suite_config & cfg) {
    validate(cfg);
    synthetic_suite s;
    s.config = cfg;
    s.model = make_mlp(cfg.input_dim, cfg.hidden_dim, cfg.output_dim, cfg.act);

    rng master(derive_seed(cfg.seed, 0));
    const size_t in = cfg.input_dim, hid = cfg.hidden_dim, out = cfg.output_dim;
    s.pretrained = tensor_map({
        tensor{"fc1.weight", {hid, in}, gaussian(master, hid * in, cfg.weight_scale / std::sqrt(double(in)))},
        tensor{"fc1.bias", {hid}, gaussian(master, hid, 0.1)},
        tensor{"fc2.weight", {out, hid}, gaussian(master, out * hid, cfg.weight_scale / std::sqrt(double(hid)))},
        tensor{"fc2.bias", {out}, gaussian(master, out, 0.1)},
    });
    const auto shared_map = gaussian(master, out * in, 1.0 / std::sqrt(double(in)));
    const dense_weights pre_dense = to_dense(s.pretrained);

    s.tasks.resize(cfg.task_count);
    parallel_for(cfg.task_count, [&](size_t t) {
        rng task_rng(derive_seed(cfg.seed, 1000 + t));
        rng data_rng(derive_seed(cfg.seed, cfg.identical_task_data ? 2000 : 2000 + t));
        const auto task_map = gaussian(task_rng, out * in, 1.0 / std::sqrt(double(in)));
        const double shared_coef = cfg.shared_strength * (1.0 + cfg.shared_spread * (2.0 * task_rng.uniform() - 1.0));
        task_data td;
        td.task_id = task_name(t);
        td.finetune_inputs = gaussian_batch(data_rng, cfg.dataset_size, in);
        td.pool = gaussian_batch(data_rng, cfg.dataset_size, in);
        td.eval_inputs = gaussian_batch(data_rng, cfg.eval_size, in);

        auto targets = [&](const batch & x) {
            matrix y = forward(s.model, pre_dense, x);
            const matrix ys = linear_map(x, shared_map, out);
            const matrix yt = linear_map(x, task_map, out);
            for (size_t k = 0; k < y.data.size(); ++k) {
                const double v = y.data[k] + shared_coef * ys.data[k] + cfg.task_noise * yt.data[k];
                y.data[k] = static_cast<float>(v); // stored as f32 on disk
            }
            return y;
        };
        const matrix train_y = targets(td.finetune_inputs);
        td.eval_targets = targets(td.eval_inputs);
        td.finetuned =
            to_tensor_map(finetune(s.model, pre_dense, td.finetune_inputs, train_y, cfg.finetune_steps, cfg.finetune_lr));
        s.tasks[t] = std::move(td);
    });
    return s;
}

void save_suite(const synthetic_suite & suite, const std::string & dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(error_kind::io, "cannot create directory " + dir + ": " + ec.message());
    write_text_atomic(dir + "/suite.cfg", format_suite_config(suite.config));
    save_checkpoint(suite.pretrained, dir + "/pretrained.dlts");
    for (const auto & t : suite.tasks) {
        save_checkpoint(t.finetuned, dir + "/" + t.task_id + ".finetuned.dlts");
        tensor targets{"eval_targets", {t.eval_targets.rows, t.eval_targets.cols},
                       std::vector<float>(t.eval_targets.data.begin(), t.eval_targets.data.end())};
        save_checkpoint(tensor_map({batch_tensor("finetune_inputs", t.finetune_inputs), batch_tensor("pool", t.pool),
                                    batch_tensor("eval_inputs", t.eval_inputs), std::move(targets)}),
                        dir + "/" + t.task_id + ".data.dlts");
    }
}

synthetic_suite load_suite(const std::string & dir) {
    const auto cfg_bytes = read_file(dir + "/suite.cfg");
    const auto kv = parse_kv(std::string(cfg_bytes.begin(), cfg_bytes.end()), dir + "/suite.cfg");
    suite_config c;
    c.task_count = kv_u64(kv, "task_count");
    c.input_dim = kv_u64(kv, "input_dim");
    c.hidden_dim = kv_u64(kv, "hidden_dim");
    c.output_dim = kv_u64(kv, "output_dim");
    const std::string & act = kv_field(kv, "activation");
    require(act == "tanh" || act == "relu", "suite.cfg: bad activation '" + act + "'");
    c.act = act == "tanh" ? activation::tanh : activation::relu;
    c.weight_scale = kv_double(kv, "weight_scale");
    c.shared_strength = kv_double(kv, "shared_strength");
    c.shared_spread = kv_double(kv, "shared_spread");
    c.task_noise = kv_double(kv, "task_noise");
    c.dataset_size = kv_u64(kv, "dataset_size");
    c.eval_size = kv_u64(kv, "eval_size");
    c.finetune_steps = kv_u64(kv, "finetune_steps");
    c.finetune_lr = kv_double(kv, "finetune_lr");
    c.identical_task_data = kv_u64(kv, "identical_task_data") != 0;
    c.seed = kv_u64(kv, "seed");
    validate(c);

    synthetic_suite s;
    s.config = c;
    s.model = make_mlp(c.input_dim, c.hidden_dim, c.output_dim, c.act);
    s.pretrained = load_checkpoint(dir + "/pretrained.dlts");
    validate_weights(s.model, s.pretrained);
    for (size_t t = 0; t < c.task_count; ++t) {
        task_data td;
        td.task_id = task_name(t);
        td.finetuned = load_checkpoint(dir + "/" + td.task_id + ".finetuned.dlts");
        require_aligned(s.pretrained, td.finetuned, "load_suite");
        const tensor_map data = load_checkpoint(dir + "/" + td.task_id + ".data.dlts");
        td.finetune_inputs = tensor_batch(data, "finetune_inputs");
        td.pool = tensor_batch(data, "pool");
        td.eval_inputs = tensor_batch(data, "eval_inputs");
        const tensor & y = data.at("eval_targets");
        require(y.shape.size() == 2 && y.shape[0] == td.eval_inputs.rows && y.shape[1] == c.output_dim,
                "suite data: eval_targets shape mismatch");
        td.eval_targets = matrix(y.shape[0], y.shape[1]);
        for (size_t k = 0; k < y.data.size(); ++k) td.eval_targets.data[k] = y.data[k];
        s.tasks.push_back(std::move(td));
    }
    return s;
}

eval_metrics evaluate(const tensor_map & weights, const synthetic_suite & suite, const std::string & task_id) {
    const task_data & td = suite.task(task_id);
    const matrix out = forward(suite.model, weights, td.eval_inputs);
    const matrix teacher = forward(suite.model, td.finetuned, td.eval_inputs);
    eval_metrics m;
    m.eval_mse = mean_squared_difference(out, td.eval_targets);
    double num = 0.0, den = 0.0;
    for (size_t k = 0; k < out.data.size(); ++k) {
        const double d = out.data[k] - teacher.data[k];
        num += d * d;
        den += teacher.data[k] * teacher.data[k];
    }
    m.relative_output_error = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
    return m;
}

const char * to_string(method m) {
    switch (m) {
        case method::vanilla:      return "VANILLA";
        case method::dbms_init:    return "DBMS_INIT";
        case method::dbms_trained: return "DBMS_TRAINED";
    }
    return "?";
}

method parse_method(std::string_view s) {
    if (s == "VANILLA" || s == "vanilla") return method::vanilla;
    if (s == "DBMS_INIT" || s == "dbms-init") return method::dbms_init;
    if (s == "DBMS_TRAINED" || s == "dbms-trained") return method::dbms_trained;
    fail(error_kind::validation, "unknown method '" + std::string(s) + "'");
}

codec_spec task_codec(const codec_spec & codec, size_t task_index) {
    codec_spec c = codec;
    if (c.kind == codec_kind::dare) {
        c.seed = derive_seed(codec.seed, task_index);
    } else {
        c.sparse_rate = 0.0;
        c.seed = 0;
    }
    return c;
}

train_config task_train_config(const train_config & train, size_t task_index) {
    train_config c = train;
    c.sample_seed = derive_seed(train.sample_seed, task_index);
    return c;
}

lambda_eval evaluate_lambdas(const synthetic_suite & suite, const base_vector & base, size_t task_index,
                             const codec_spec & codec, double lambda1, double lambda2,
                             const tensor_map * uncompressed_tau) {
    const task_data & td = suite.tasks.at(task_index);
    const tensor_map & tau = uncompressed_tau ? *uncompressed_tau : base.decoded;
    lambda_eval r;
    r.artifact.task_id = td.task_id;
    r.artifact.codec = task_codec(codec, task_index);
    r.artifact.delta = compress_task(td.finetuned, suite.pretrained, tau, lambda1, r.artifact.codec);
    r.artifact.lambda1 = lambda1;
    r.artifact.lambda2 = lambda2;
    r.reconstruction = reconstruct(suite.pretrained, tau, r.artifact);
    r.metrics = evaluate(r.reconstruction, suite, td.task_id);
    return r;
}

pipeline_result run_pipeline(const synthetic_suite & suite, const base_vector & base, const codec_spec & codec,
                             method how, const train_config & train) {
    validate(codec);
    const size_t n = suite.tasks.size();
    pipeline_result res;
    res.rows.resize(n);
    res.artifacts.resize(n);
    if (how == method::dbms_trained) res.traces.resize(n);

    parallel_for(n, [&](size_t t) {
        const task_data & td = suite.tasks[t];
        double l1 = 0.0, l2 = 1.0;
        train_provenance prov;
        if (how == method::dbms_init) {
            l1 = init_lambda1_or_zero(td.finetuned, suite.pretrained, base);
        } else if (how == method::dbms_trained) {
            train_inputs in;
            in.task_id = td.task_id;
            in.model = &suite.model;
            in.pretrained = &suite.pretrained;
            in.finetuned = &td.finetuned;
            in.base = &base;
            in.codec = task_codec(codec, t);
            in.pool = &td.pool;
            train_result tr = train_task(in, task_train_config(train, t));
            l1 = tr.artifact.lambda1;
            l2 = tr.artifact.lambda2;
            prov = tr.artifact.provenance;
            res.traces[t] = std::move(tr.trace);
        }
        lambda_eval ev = evaluate_lambdas(suite, base, t, codec, l1, l2);
        ev.artifact.provenance = prov;
        pipeline_row row;
        row.task_id = td.task_id;
        row.how = how;
        row.codec = codec.kind;
        row.sparse_rate = codec.kind == codec_kind::dare ? codec.sparse_rate : 0.0;
        row.lambda1 = l1;
        row.lambda2 = l2;
        row.recon_l2 = l2_distance(ev.reconstruction, td.finetuned);
        row.eval_mse = ev.metrics.eval_mse;
        row.rel_out_err = ev.metrics.relative_output_error;
        row.bits = storage_bits(ev.artifact.delta);
        res.rows[t] = row;
        res.artifacts[t] = std::move(ev.artifact);
    });
    return res;
}

double grid_axis::value(size_t i) const {
    if (steps == 1) return min;
    const double k = static_cast<double>(steps - 1);
    // endpoint-weighted form keeps symmetric grids exact at the centre
    return (min * (k - static_cast<double>(i)) + max * static_cast<double>(i)) / k;
}

sweep_result sweep_lambda_grid(const synthetic_suite & suite, const base_vector & base, const std::string & task_id,
                               const codec_spec & codec, const grid_axis & lambda1, const grid_axis & lambda2,
                               bool uncompressed_base) {
    require(lambda1.steps >= 1 && lambda2.steps >= 1, "sweep: grid steps must be >= 1");
    require(std::isfinite(lambda1.min) && std::isfinite(lambda1.max) && std::isfinite(lambda2.min) &&
                std::isfinite(lambda2.max),
            "sweep: grid ranges must be finite");
    validate(codec);
    const size_t t = suite.task_index(task_id);
    const task_data & td = suite.tasks[t];

    std::optional<tensor_map> raw_tau;
    if (uncompressed_base) {
        const auto models = suite.finetuned_models();
        raw_tau = map_sub(average_model(models), suite.pretrained);
    }
    const tensor_map & tau = raw_tau ? *raw_tau : base.decoded;

    sweep_result s;
    s.task_id = task_id;
    for (size_t i = 0; i < lambda1.steps; ++i) s.lambda1_values.push_back(lambda1.value(i));
    for (size_t j = 0; j < lambda2.steps; ++j) s.lambda2_values.push_back(lambda2.value(j));
    s.rel_out_err.assign(lambda1.steps * lambda2.steps, 0.0);
    s.pre_codec_residual.assign(lambda1.steps, 0.0);

    parallel_for(lambda1.steps, [&](size_t i) {
        const double l1 = s.lambda1_values[i];
        s.pre_codec_residual[i] = l2_distance(td.finetuned, shifted_base(suite.pretrained, tau, l1));
        for (size_t j = 0; j < lambda2.steps; ++j) {
            const auto ev = evaluate_lambdas(suite, base, t, codec, l1, s.lambda2_values[j], raw_tau ? &tau : nullptr);
            s.rel_out_err[i * lambda2.steps + j] = ev.metrics.relative_output_error;
        }
    });

    double best = s.rel_out_err[0];
    for (size_t i = 0; i < lambda1.steps; ++i) {
        for (size_t j = 0; j < lambda2.steps; ++j) {
            if (s.at(i, j) < best) {
                best = s.at(i, j);
                s.argmin_i1 = i;
                s.argmin_i2 = j;
            }
            if (s.lambda1_values[i] == 0.0 && s.lambda2_values[j] == 1.0) {
                s.vanilla_i1 = static_cast<long>(i);
                s.vanilla_i2 = static_cast<long>(j);
            }
        }
    }
    return s;
}

ablation_result ablation_init(const synthetic_suite & suite, const base_vector & base, const codec_spec & codec,
                              const train_config & train, init_strategy a, init_strategy b) {
    const size_t n = suite.tasks.size();
    ablation_result res;
    res.a = a;
    res.b = b;
    res.rows.resize(n);
    res.traces_a.resize(n);
    res.traces_b.resize(n);
    parallel_for(n, [&](size_t t) {
        const task_data & td = suite.tasks[t];
        train_inputs in;
        in.task_id = td.task_id;
        in.model = &suite.model;
        in.pretrained = &suite.pretrained;
        in.finetuned = &td.finetuned;
        in.base = &base;
        in.codec = task_codec(codec, t);
        in.pool = &td.pool;
        train_config ca = task_train_config(train, t);
        train_config cb = ca;
        ca.init = a;
        cb.init = b;
        const train_result ra = train_task(in, ca);
        const train_result rb = train_task(in, cb);
        res.rows[t] = ablation_row{td.task_id, ra.initial_loss, rb.initial_loss, ra.final_loss, rb.final_loss};
        res.traces_a[t] = ra.trace;
        res.traces_b[t] = rb.trace;
    });
    size_t wins = 0;
    for (const auto & r : res.rows) {
        if (r.loss_a <= r.loss_b) ++wins;
    }
    res.fraction_a_le_b = n ? static_cast<double>(wins) / static_cast<double>(n) : 0.0;
    return res;
}

storage_report_result storage_report(const std::vector<task_artifact> & artifacts,
                                     const std::vector<task_artifact> & vanilla_artifacts, const base_vector & base) {
    require(artifacts.size() == vanilla_artifacts.size(), "storage_report: artifact lists differ in length");
    require(!artifacts.empty(), "storage_report: no artifacts");
    storage_report_result r;
    r.base_bits = storage_bits(base.compressed);
    for (size_t t = 0; t < artifacts.size(); ++t) {
        r.task_ids.push_back(artifacts[t].task_id);
        r.task_bits.push_back(storage_bits(artifacts[t].delta));
        r.vanilla_task_bits.push_back(storage_bits(vanilla_artifacts[t].delta));
        r.dbms_total += r.task_bits.back();
        r.vanilla_total += r.vanilla_task_bits.back();
    }
    const uint64_t n = artifacts.size();
    r.dbms_total += r.base_bits + r.lambda_bits_per_task * n;
    r.overhead_per_task =
        static_cast<double>(r.base_bits) / static_cast<double>(n) + static_cast<double>(r.lambda_bits_per_task);
    r.ratio = r.vanilla_total ? static_cast<double>(r.dbms_total) / static_cast<double>(r.vanilla_total) : 0.0;
    return r;
}

std::string report_header(std::string_view kind, uint64_t seed) {
    return "# deltashift-report v1, kind=" + std::string(kind) + ", seed=" + std::to_string(seed) + "\n";
}

std::string format_pipeline_csv(std::span<const pipeline_row> rows, uint64_t seed) {
    std::string s = report_header("pipeline", seed);
    s += "task_id,method,codec,sparse_rate,lambda1,lambda2,recon_l2,eval_mse,rel_out_err,bits\n";
    for (const auto & r : rows) {
        s += r.task_id + "," + to_string(r.how) + "," + to_string(r.codec) + "," + fmt(r.sparse_rate) + "," +
             fmt(r.lambda1) + "," + fmt(r.lambda2) + "," + fmt(r.recon_l2) + "," + fmt(r.eval_mse) + "," +
             fmt(r.rel_out_err) + "," + std::to_string(r.bits) + "\n";
    }
    return s;
}

std::vector<pipeline_row> parse_pipeline_csv(const std::string & text) {
    std::istringstream in(text);
    std::string line;
    std::vector<pipeline_row> rows;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            require(line.rfind("task_id,method,", 0) == 0, "pipeline CSV: missing column header");
            header_seen = true;
            continue;
        }
        const auto f = split_csv_line(line);
        require(f.size() == 10, "pipeline CSV: expected 10 columns, got " + std::to_string(f.size()));
        pipeline_row r;
        r.task_id = f[0];
        r.how = parse_method(f[1]);
        r.codec = parse_codec_kind(f[2]);
        r.sparse_rate = std::strtod(f[3].c_str(), nullptr);
        r.lambda1 = std::strtod(f[4].c_str(), nullptr);
        r.lambda2 = std::strtod(f[5].c_str(), nullptr);
        r.recon_l2 = std::strtod(f[6].c_str(), nullptr);
        r.eval_mse = std::strtod(f[7].c_str(), nullptr);
        r.rel_out_err = std::strtod(f[8].c_str(), nullptr);
        r.bits = std::strtoull(f[9].c_str(), nullptr, 10);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string format_sweep_csv(const sweep_result & sw, uint64_t seed) {
    std::string s = report_header("sweep", seed);
    s += "# task_id=" + sw.task_id + ", metric=rel_out_err";
    if (sw.vanilla_i1 >= 0) {
        s += ", vanilla_cell=" + std::to_string(sw.vanilla_i1) + ":" + std::to_string(sw.vanilla_i2);
    }
    s += ", argmin_cell=" + std::to_string(sw.argmin_i1) + ":" + std::to_string(sw.argmin_i2) + "\n";
    s += "lambda1\\lambda2";
    for (double v : sw.lambda2_values) s += "," + fmt(v);
    s += "\n";
    for (size_t i = 0; i < sw.lambda1_values.size(); ++i) {
        s += fmt(sw.lambda1_values[i]);
        for (size_t j = 0; j < sw.lambda2_values.size(); ++j) s += "," + fmt(sw.at(i, j));
        s += "\n";
    }
    return s;
}

std::string format_ablation_csv(const ablation_result & ab, uint64_t seed) {
    std::string s = report_header("ablation", seed);
    s += std::string("# strategy_a=") + to_string(ab.a) + ", strategy_b=" + to_string(ab.b) +
         ", fraction_a_le_b=" + fmt(ab.fraction_a_le_b) + "\n";
    s += "task_id,initial_loss_a,initial_loss_b,loss_a,loss_b,a_le_b\n";
    for (const auto & r : ab.rows) {
        s += r.task_id + "," + fmt(r.initial_loss_a) + "," + fmt(r.initial_loss_b) + "," + fmt(r.loss_a) + "," +
             fmt(r.loss_b) + "," + (r.loss_a <= r.loss_b ? "1" : "0") + "\n";
    }
    return s;
}

std::string format_storage_csv(const storage_report_result & r, uint64_t seed) {
    std::string s = report_header("storage", seed);
    s += "task_id,dbms_bits,vanilla_bits\n";
    for (size_t t = 0; t < r.task_ids.size(); ++t) {
        s += r.task_ids[t] + "," + std::to_string(r.task_bits[t]) + "," + std::to_string(r.vanilla_task_bits[t]) + "\n";
    }
    s += "# summary\n";
    s += "base_bits," + std::to_string(r.base_bits) + "\n";
    s += "lambda_bits_per_task," + std::to_string(r.lambda_bits_per_task) + "\n";
    s += "vanilla_total," + std::to_string(r.vanilla_total) + "\n";
    s += "dbms_total," + std::to_string(r.dbms_total) + "\n";
    s += "overhead_per_task," + fmt(r.overhead_per_task) + "\n";
    s += "ratio," + fmt(r.ratio) + "\n";
    return s;
}

void parallel_for(size_t n, const std::function<void(size_t)> & fn) {
    size_t threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char * env = std::getenv("DELTASHIFT_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) threads = static_cast<size_t>(v);
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (size_t i = w; i < n; i += threads) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto & th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace deltashift
