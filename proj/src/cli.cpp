#include "deltashift/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>

#include "deltashift/harness.hpp"
#include "deltashift/io.hpp"

namespace deltashift::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct codec_flags {
    std::string codec = "dare";
    double sparse_rate = 0.99;
    uint64_t seed = 0;

    codec_spec spec() const {
        codec_spec c;
        c.kind = parse_codec_kind(codec);
        if (c.kind == codec_kind::dare) {
            c.sparse_rate = sparse_rate;
            c.seed = seed;
        }
        validate(c);
        return c;
    }
};

void add_codec_flags(CLI::App * app, codec_flags & f) {
    app->add_option("--codec", f.codec, "dare|bitdelta")->capture_default_str();
    app->add_option("--sparse-rate", f.sparse_rate, "DARE drop rate in [0, 1)")->capture_default_str();
    app->add_option("--seed", f.seed, "DARE mask seed")->capture_default_str();
}

struct train_flags {
    uint64_t steps = 500;
    double lr = 1e-4;
    double sample_fraction = 0.1;
    std::string gradient_mode = "finite-diff";
    double fd_step = 1e-4;
    size_t batch_size = 0;
    uint64_t sample_seed = 0;

    train_config config() const {
        train_config c;
        c.steps = steps;
        c.lr = lr;
        c.sample_fraction = sample_fraction;
        c.mode = parse_gradient_mode(gradient_mode);
        c.fd_step = fd_step;
        c.batch_size = batch_size;
        c.sample_seed = sample_seed;
        validate(c);
        return c;
    }
};

void add_train_flags(CLI::App * app, train_flags & f) {
    app->add_option("--steps", f.steps, "optimizer steps per task")->capture_default_str();
    app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--sample-fraction", f.sample_fraction, "fraction of the unlabeled pool used")
        ->capture_default_str();
    app->add_option("--gradient-mode", f.gradient_mode, "finite-diff|analytic")->capture_default_str();
    app->add_option("--fd-step", f.fd_step, "relative finite-difference step")->capture_default_str();
    app->add_option("--batch-size", f.batch_size, "minibatch size (0: whole sample)")->capture_default_str();
    app->add_option("--sample-seed", f.sample_seed, "seed for pool sampling")->capture_default_str();
}

void require_file(const std::string & path) {
    if (!fs::is_regular_file(path)) {
        fail(error_kind::validation, "missing input file: " + path);
    }
}

void require_suite_files(const std::string & dir) {
    require_file(dir + "/suite.cfg");
    require_file(dir + "/pretrained.dlts");
}

// Artifact stems in a directory (every *.manifest except base.manifest), sorted.
std::vector<std::string> artifact_stems(const std::string & dir) {
    if (!fs::is_directory(dir)) {
        fail(error_kind::validation, "not a directory: " + dir);
    }
    std::vector<std::string> stems;
    for (const auto & e : fs::directory_iterator(dir)) {
        const auto p = e.path();
        if (p.extension() == ".manifest" && p.stem() != "base") {
            stems.push_back((p.parent_path() / p.stem()).string());
        }
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) {
        fail(error_kind::validation, "no task artifacts in " + dir);
    }
    return stems;
}

std::string task_id_from_path(const std::string & path) {
    std::string name = fs::path(path).filename().string();
    const auto dot = name.find('.');
    return dot == std::string::npos || dot == 0 ? name : name.substr(0, dot);
}

void write_csv(const std::string & path, const std::string & text, std::ostream & out) {
    write_text_atomic(path, text);
    out << path << "\n";
}

// --- subcommands -----------------------------------------------------------

struct generate_cmd {
    std::string out_dir;
    suite_config cfg;

    void run(std::ostream & out) const {
        const synthetic_suite s = generate_suite(cfg);
        save_suite(s, out_dir);
        out << out_dir << "\n";
    }
};

struct compress_cmd {
    std::string pretrained;
    std::vector<std::string> finetuned;
    std::vector<std::string> task_ids;
    std::string out_dir;
    codec_flags codec;
    bool uncompressed_base = false;

    void run(std::ostream & out, std::ostream & err) const {
        const codec_spec spec = codec.spec();
        require(!finetuned.empty(), "compress: at least one --finetuned checkpoint is required");
        require(task_ids.empty() || task_ids.size() == finetuned.size(),
                "compress: --task-ids must match the number of --finetuned checkpoints");
        std::vector<std::string> ids = task_ids;
        if (ids.empty()) {
            for (const auto & f : finetuned) ids.push_back(task_id_from_path(f));
        }
        for (size_t i = 0; i < ids.size(); ++i) {
            require(!ids[i].empty() && ids[i] != "base", "compress: invalid task id '" + ids[i] + "'");
            for (size_t j = 0; j < i; ++j) require(ids[i] != ids[j], "compress: duplicate task id '" + ids[i] + "'");
        }
        require_file(pretrained);
        for (const auto & f : finetuned) require_file(f);

        const tensor_map pre = load_checkpoint(pretrained);
        std::vector<tensor_map> models;
        for (const auto & f : finetuned) {
            models.push_back(load_checkpoint(f));
            require_aligned(pre, models.back(), "compress (" + f + ")");
        }
        const base_vector base = compute_base_vector(models, pre);
        std::optional<tensor_map> raw_tau;
        if (uncompressed_base) raw_tau = map_sub(average_model(models), pre);
        const tensor_map & tau = raw_tau ? *raw_tau : base.decoded;
        const bool degenerate = dot(flatten_concat(tau), flatten_concat(tau)) == 0.0;
        if (degenerate) {
            err << "WARNING zero base vector; lambda1 falls back to 0\n";
        }

        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) fail(error_kind::io, "cannot create directory " + out_dir + ": " + ec.message());
        save_base_vector(base, out_dir + "/base");
        out << "base=" << out_dir << "/base bits=" << storage_bits(base.compressed) << "\n";

        for (size_t i = 0; i < models.size(); ++i) {
            const double l1 = degenerate ? 0.0 : init_lambda1(models[i], pre, tau);
            task_artifact a;
            a.task_id = ids[i];
            a.codec = task_codec(spec, i);
            a.delta = compress_task(models[i], pre, tau, l1, a.codec);
            a.lambda1 = l1;
            a.lambda2 = 1.0;
            const std::string stem = out_dir + "/" + ids[i];
            save_artifact(a, stem);
            const auto d = residual_diagnostics(models[i], pre, tau, l1);
            out << "task_id=" << ids[i] << " lambda1=" << fmt(l1) << " residual_dot_base=" << fmt(d.residual_dot_base)
                << " norm_ori_sq=" << fmt(d.norm_ori_sq) << " norm_ours_sq=" << fmt(d.norm_ours_sq)
                << " lambda_sq_norm_base_sq=" << fmt(d.lambda_sq_norm_base_sq) << " var_ori=" << fmt(d.var_ori)
                << " var_ours=" << fmt(d.var_ours) << " bits=" << storage_bits(a.delta) << " path=" << stem << "\n";
        }
    }
};

struct train_cmd {
    std::string suite_dir;
    std::string artifacts_dir;
    train_flags flags;

    void run(std::ostream & out) const {
        const train_config cfg = flags.config();
        require_suite_files(suite_dir);
        require_file(artifacts_dir + "/base.manifest");
        require_file(artifacts_dir + "/base.dltc");
        const auto stems = artifact_stems(artifacts_dir);
        std::vector<task_artifact> artifacts;
        for (const auto & stem : stems) {
            artifacts.push_back(load_artifact(stem));
            require_file(suite_dir + "/" + artifacts.back().task_id + ".finetuned.dlts");
            require_file(suite_dir + "/" + artifacts.back().task_id + ".data.dlts");
        }

        const synthetic_suite suite = load_suite(suite_dir);
        const base_vector base = load_base_vector(artifacts_dir + "/base");
        require_aligned(suite.pretrained, base.decoded, "train (base vector)");

        for (size_t k = 0; k < stems.size(); ++k) {
            const std::string & stem = stems[k];
            const task_artifact & current = artifacts[k];
            const size_t t = suite.task_index(current.task_id);
            const task_data & td = suite.tasks[t];
            train_inputs in;
            in.task_id = current.task_id;
            in.model = &suite.model;
            in.pretrained = &suite.pretrained;
            in.finetuned = &td.finetuned;
            in.base = &base;
            in.codec = current.codec;
            in.pool = &td.pool;
            in.start = std::array<double, 2>{current.lambda1, current.lambda2};
            try {
                const train_result r = train_task(in, task_train_config(cfg, t));
                save_artifact(r.artifact, stem);
                write_text_atomic(stem + ".trace.csv", format_trace_csv(r.trace));
                out << "task_id=" << r.artifact.task_id << " lambda1=" << fmt(r.artifact.lambda1)
                    << " lambda2=" << fmt(r.artifact.lambda2) << " initial_loss=" << fmt(r.initial_loss)
                    << " final_loss=" << fmt(r.final_loss) << " path=" << stem << "\n";
            } catch (const training_aborted & e) {
                write_text_atomic(stem + ".trace.csv", format_trace_csv(e.trace()));
                throw;
            }
        }
    }
};

struct reconstruct_cmd {
    std::string pretrained;
    std::string base_stem;
    std::string artifact_stem;
    std::string out_path;
    bool uncompressed_base = false;
    std::vector<std::string> finetuned;

    void run(std::ostream & out) const {
        require(!uncompressed_base || !finetuned.empty(),
                "reconstruct: --uncompressed-base needs the --finetuned checkpoints to average");
        require_file(pretrained);
        require_file(artifact_stem + ".manifest");
        require_file(artifact_stem + ".dltc");
        if (!uncompressed_base) {
            require_file(base_stem + ".manifest");
            require_file(base_stem + ".dltc");
        }
        for (const auto & f : finetuned) require_file(f);

        const tensor_map pre = load_checkpoint(pretrained);
        const task_artifact a = load_artifact(artifact_stem);
        tensor_map w;
        if (uncompressed_base) {
            std::vector<tensor_map> models;
            for (const auto & f : finetuned) models.push_back(load_checkpoint(f));
            w = reconstruct_uncompressed_base(pre, average_model(models), a);
        } else {
            w = reconstruct(pre, load_base_vector(base_stem), a);
        }
        save_checkpoint(w, out_path);
        out << out_path << "\n";
    }
};

struct evaluate_cmd {
    std::string suite_dir;
    std::string weights;
    std::string task_id;

    void run(std::ostream & out) const {
        require_suite_files(suite_dir);
        require_file(weights);
        const synthetic_suite suite = load_suite(suite_dir);
        const tensor_map w = load_checkpoint(weights);
        const eval_metrics m = evaluate(w, suite, task_id);
        out << "task_id=" << task_id << " eval_mse=" << fmt(m.eval_mse) << " rel_out_err="
            << fmt(m.relative_output_error) << "\n";
    }
};

struct pipeline_cmd {
    std::string suite_dir;
    std::string out_path;
    std::string method_name = "all";
    codec_flags codec;
    train_flags flags;

    void run(std::ostream & out) const {
        const codec_spec spec = codec.spec();
        const train_config cfg = flags.config();
        std::vector<method> methods;
        if (method_name == "all") {
            methods = {method::vanilla, method::dbms_init, method::dbms_trained};
        } else {
            methods = {parse_method(method_name)};
        }
        require_suite_files(suite_dir);
        const synthetic_suite suite = load_suite(suite_dir);
        const base_vector base = compute_base_vector(suite.finetuned_models(), suite.pretrained);
        std::vector<pipeline_row> rows;
        for (method m : methods) {
            const auto r = run_pipeline(suite, base, spec, m, cfg);
            rows.insert(rows.end(), r.rows.begin(), r.rows.end());
        }
        write_csv(out_path, format_pipeline_csv(rows, suite.config.seed), out);
    }
};

struct sweep_cmd {
    std::string suite_dir;
    std::string task_id;
    std::string out_path;
    codec_flags codec;
    grid_axis l1{-1.0, 1.0, 21};
    grid_axis l2{0.0, 2.0, 21};
    bool uncompressed_base = false;

    void run(std::ostream & out) const {
        const codec_spec spec = codec.spec();
        require(l1.steps >= 1 && l2.steps >= 1, "sweep: grid steps must be >= 1");
        require_suite_files(suite_dir);
        const synthetic_suite suite = load_suite(suite_dir);
        const base_vector base = compute_base_vector(suite.finetuned_models(), suite.pretrained);
        const auto s = sweep_lambda_grid(suite, base, task_id, spec, l1, l2, uncompressed_base);
        write_csv(out_path, format_sweep_csv(s, suite.config.seed), out);
    }
};

struct ablate_cmd {
    std::string suite_dir;
    std::string out_path;
    std::vector<std::string> strategies{"projection", "ones"};
    codec_flags codec;
    train_flags flags;

    void run(std::ostream & out) const {
        const codec_spec spec = codec.spec();
        const train_config cfg = flags.config();
        require(strategies.size() == 2, "ablate: --strategies takes exactly two entries");
        const init_strategy a = parse_init_strategy(strategies[0]);
        const init_strategy b = parse_init_strategy(strategies[1]);
        require_suite_files(suite_dir);
        const synthetic_suite suite = load_suite(suite_dir);
        const base_vector base = compute_base_vector(suite.finetuned_models(), suite.pretrained);
        const auto r = ablation_init(suite, base, spec, cfg, a, b);
        write_csv(out_path, format_ablation_csv(r, suite.config.seed), out);
    }
};

struct report_cmd {
    std::string suite_dir;
    std::string artifacts_dir;
    std::string out_path;

    void run(std::ostream & out) const {
        require_suite_files(suite_dir);
        require_file(artifacts_dir + "/base.manifest");
        const auto stems = artifact_stems(artifacts_dir);
        const synthetic_suite suite = load_suite(suite_dir);
        const base_vector base = load_base_vector(artifacts_dir + "/base");
        std::vector<task_artifact> artifacts, vanilla;
        for (const auto & stem : stems) {
            task_artifact a = load_artifact(stem);
            const task_data & td = suite.task(a.task_id);
            task_artifact v;
            v.task_id = a.task_id;
            v.codec = a.codec;
            v.delta = compress(map_sub(td.finetuned, suite.pretrained), a.codec);
            artifacts.push_back(std::move(a));
            vanilla.push_back(std::move(v));
        }
        const auto r = storage_report(artifacts, vanilla, base);
        write_csv(out_path, format_storage_csv(r, suite.config.seed), out);
    }
};

} // namespace

int exit_code_for(error_kind kind) {
    switch (kind) {
        case error_kind::validation:
        case error_kind::duplicate_name:
            return usage_error;
        case error_kind::io:
        case error_kind::corrupt_header:
        case error_kind::truncated:
        case error_kind::checksum:
            return io_error;
        case error_kind::numerical:
            return numerical_error;
    }
    return usage_error;
}

int run(int argc, const char * const * argv, std::ostream & out, std::ostream & err) {
    auto error_line = [&](int code, const std::string & msg) {
        std::string one_line = msg;
        std::replace(one_line.begin(), one_line.end(), '\n', ' ');
        err << "ERROR code=" << code << " msg=" << one_line << "\n";
        return code;
    };

    CLI::App app{"deltashift: delta compression against a task-shifted base model"};
    app.require_subcommand(1);

    generate_cmd gen;
    auto * g = app.add_subcommand("generate", "generate a synthetic suite directory");
    g->add_option("--out", gen.out_dir, "output directory")->required();
    g->add_option("--tasks", gen.cfg.task_count)->capture_default_str();
    g->add_option("--seed", gen.cfg.seed)->capture_default_str();
    g->add_option("--input-dim", gen.cfg.input_dim)->capture_default_str();
    g->add_option("--hidden-dim", gen.cfg.hidden_dim)->capture_default_str();
    g->add_option("--output-dim", gen.cfg.output_dim)->capture_default_str();
    g->add_option("--shared-strength", gen.cfg.shared_strength)->capture_default_str();
    g->add_option("--shared-spread", gen.cfg.shared_spread)->capture_default_str();
    g->add_option("--task-noise", gen.cfg.task_noise)->capture_default_str();
    g->add_option("--dataset-size", gen.cfg.dataset_size)->capture_default_str();
    g->add_option("--eval-size", gen.cfg.eval_size)->capture_default_str();
    g->add_option("--finetune-steps", gen.cfg.finetune_steps)->capture_default_str();
    g->add_option("--finetune-lr", gen.cfg.finetune_lr)->capture_default_str();

    compress_cmd comp;
    auto * c = app.add_subcommand("compress", "build the base vector and init-only task artifacts");
    c->add_option("--pretrained", comp.pretrained)->required();
    c->add_option("--finetuned", comp.finetuned)->required();
    c->add_option("--task-ids", comp.task_ids, "task ids (default: file name up to the first '.')");
    c->add_option("--out", comp.out_dir, "artifact directory")->required();
    c->add_flag("--uncompressed-base", comp.uncompressed_base, "shift by the raw average delta");
    add_codec_flags(c, comp.codec);

    train_cmd tr;
    auto * t = app.add_subcommand("train", "train lambda1/lambda2 for every artifact in a directory");
    t->add_option("--suite", tr.suite_dir, "suite directory (models and data pools)")->required();
    t->add_option("--artifacts", tr.artifacts_dir)->required();
    add_train_flags(t, tr.flags);

    reconstruct_cmd rec;
    auto * r = app.add_subcommand("reconstruct", "rebuild task weights from an artifact");
    r->add_option("--pretrained", rec.pretrained)->required();
    r->add_option("--base", rec.base_stem, "base vector stem (without extension)");
    r->add_option("--artifact", rec.artifact_stem, "artifact stem (without extension)")->required();
    r->add_option("--out", rec.out_path)->required();
    r->add_flag("--uncompressed-base", rec.uncompressed_base);
    r->add_option("--finetuned", rec.finetuned, "checkpoints to average for --uncompressed-base");

    evaluate_cmd ev;
    auto * e = app.add_subcommand("evaluate", "evaluate a checkpoint on a suite task");
    e->add_option("--suite", ev.suite_dir)->required();
    e->add_option("--weights", ev.weights)->required();
    e->add_option("--task", ev.task_id)->required();

    pipeline_cmd pipe;
    auto * p = app.add_subcommand("pipeline", "run VANILLA / DBMS_INIT / DBMS_TRAINED over a suite");
    p->add_option("--suite", pipe.suite_dir)->required();
    p->add_option("--out", pipe.out_path)->required();
    p->add_option("--method", pipe.method_name, "vanilla|dbms-init|dbms-trained|all")->capture_default_str();
    add_codec_flags(p, pipe.codec);
    add_train_flags(p, pipe.flags);

    sweep_cmd sw;
    auto * s = app.add_subcommand("sweep", "evaluate a lambda1 x lambda2 grid for one task");
    s->add_option("--suite", sw.suite_dir)->required();
    s->add_option("--task", sw.task_id)->required();
    s->add_option("--out", sw.out_path)->required();
    s->add_option("--l1-min", sw.l1.min)->capture_default_str();
    s->add_option("--l1-max", sw.l1.max)->capture_default_str();
    s->add_option("--l1-steps", sw.l1.steps)->capture_default_str();
    s->add_option("--l2-min", sw.l2.min)->capture_default_str();
    s->add_option("--l2-max", sw.l2.max)->capture_default_str();
    s->add_option("--l2-steps", sw.l2.steps)->capture_default_str();
    s->add_flag("--uncompressed-base", sw.uncompressed_base);
    add_codec_flags(s, sw.codec);

    ablate_cmd ab;
    ab.flags.steps = 100;
    auto * a = app.add_subcommand("ablate", "compare lambda initialisation strategies");
    a->add_option("--suite", ab.suite_dir)->required();
    a->add_option("--out", ab.out_path)->required();
    a->add_option("--strategies", ab.strategies, "two of projection|ones")->delimiter(',')->capture_default_str();
    add_codec_flags(a, ab.codec);
    add_train_flags(a, ab.flags);

    report_cmd rep;
    auto * rp = app.add_subcommand("report", "storage accounting for an artifact directory");
    rp->add_option("--suite", rep.suite_dir)->required();
    rp->add_option("--artifacts", rep.artifacts_dir)->required();
    rp->add_option("--out", rep.out_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::ParseError & pe) {
        return error_line(usage_error, pe.what());
    }

    try {
        if (*g) gen.run(out);
        else if (*c) comp.run(out, err);
        else if (*t) tr.run(out);
        else if (*r) rec.run(out);
        else if (*e) ev.run(out);
        else if (*p) pipe.run(out);
        else if (*s) sw.run(out);
        else if (*a) ab.run(out);
        else if (*rp) rep.run(out);
    } catch (const error & ex) {
        return error_line(exit_code_for(ex.kind()), ex.what());
    } catch (const std::exception & ex) {
        return error_line(io_error, ex.what());
    }
    return ok;
}

} // namespace deltashift::cli
