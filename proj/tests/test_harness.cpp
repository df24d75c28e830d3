#include <doctest.h>

#include <cstdlib>

#include "deltashift/harness.hpp"
#include "deltashift/io.hpp"
#include "test_util.hpp"

using namespace deltashift;

namespace {

suite_config small_config(uint64_t seed = 1) {
    suite_config c;
    c.task_count = 3;
    c.hidden_dim = 8;
    c.dataset_size = 40;
    c.eval_size = 20;
    c.finetune_steps = 30;
    c.seed = seed;
    return c;
}

train_config short_train() {
    train_config t;
    t.steps = 10;
    return t;
}

} // namespace

TEST_CASE("suite generation is deterministic") {
    const auto a = generate_suite(small_config());
    const auto b = generate_suite(small_config());
    CHECK(bitwise_equal(a.pretrained, b.pretrained));
    for (size_t i = 0; i < a.tasks.size(); ++i) {
        CHECK(a.tasks[i].task_id == b.tasks[i].task_id);
        CHECK(bitwise_equal(a.tasks[i].finetuned, b.tasks[i].finetuned));
        CHECK(a.tasks[i].pool.inputs == b.tasks[i].pool.inputs);
    }
    const auto c = generate_suite(small_config(2));
    CHECK(!bitwise_equal(a.pretrained, c.pretrained));
}

TEST_CASE("suite round trips through a directory") {
    test_util::scratch_dir dir("harness_suite");
    const auto a = generate_suite(small_config());
    save_suite(a, dir.path.string());
    const auto b = load_suite(dir.path.string());
    CHECK(b.config.seed == a.config.seed);
    CHECK(b.config.hidden_dim == a.config.hidden_dim);
    CHECK(bitwise_equal(a.pretrained, b.pretrained));
    REQUIRE(b.tasks.size() == a.tasks.size());
    for (size_t i = 0; i < a.tasks.size(); ++i) {
        CHECK(bitwise_equal(a.tasks[i].finetuned, b.tasks[i].finetuned));
        CHECK(a.tasks[i].eval_targets.data == b.tasks[i].eval_targets.data);
    }
}

TEST_CASE("identical data and no task noise give identical tasks") {
    suite_config c = small_config();
    c.task_noise = 0.0;
    c.identical_task_data = true;
    const auto s = generate_suite(c);
    for (const auto & t : s.tasks) CHECK(bitwise_equal(t.finetuned, s.tasks[0].finetuned));
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    for (const auto & t : s.tasks) {
        const double l = init_lambda1(t.finetuned, s.pretrained, base);
        CHECK(l > 0.5);
        CHECK(l < 1.5);
    }
}

TEST_CASE("shared strength controls how much tau explains") {
    suite_config shared = small_config();
    shared.task_count = 6;
    shared.task_noise = 0.3;
    suite_config none = shared;
    none.shared_strength = 0.0;
    auto mean_abs_l1 = [](const synthetic_suite & s) {
        const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
        double m = 0.0;
        for (const auto & t : s.tasks) m += std::abs(init_lambda1(t.finetuned, s.pretrained, base));
        return m / static_cast<double>(s.tasks.size());
    };
    auto mean_cosine = [](const synthetic_suite & s) {
        double m = 0.0;
        size_t n = 0;
        for (size_t i = 0; i < s.tasks.size(); ++i) {
            for (size_t j = i + 1; j < s.tasks.size(); ++j) {
                const auto a = flatten_concat(map_sub(s.tasks[i].finetuned, s.pretrained));
                const auto b = flatten_concat(map_sub(s.tasks[j].finetuned, s.pretrained));
                m += std::abs(dot(a, b)) / (l2_norm(a) * l2_norm(b));
                ++n;
            }
        }
        return m / static_cast<double>(n);
    };
    const auto ss = generate_suite(shared);
    const auto sn = generate_suite(none);
    CHECK(mean_cosine(sn) < mean_cosine(ss));
    // the base vector is built from the task deltas themselves, so the
    // projection stays near 1 in both regimes; only its sign is pinned here
    CHECK(mean_abs_l1(sn) > 0.0);
    CHECK(mean_abs_l1(ss) > 0.0);
}

TEST_CASE("evaluation") {
    const auto s = generate_suite(small_config());
    for (const auto & t : s.tasks) {
        CHECK(evaluate(t.finetuned, s, t.task_id).relative_output_error == 0.0);
        CHECK(evaluate(s.pretrained, s, t.task_id).relative_output_error > 0.0);
    }
    CHECK_THROWS_AS(evaluate(s.pretrained, s, "nope"), error);
}

TEST_CASE("lossless codec makes every method agree with the finetuned model") {
    // float32 deltas round W_t - W_pre, so "lossless" means agreement to float
    // precision; trained lambdas additionally hover within Adam's step size
    const auto s = generate_suite(small_config());
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    const codec_spec lossless{codec_kind::dare, 0.0, 0};
    for (method m : {method::vanilla, method::dbms_init, method::dbms_trained}) {
        const double tol = m == method::dbms_trained ? 1e-4 : 1e-7;
        const auto r = run_pipeline(s, base, lossless, m, short_train());
        for (size_t i = 0; i < r.rows.size(); ++i) {
            const auto truth = evaluate(s.tasks[i].finetuned, s, s.tasks[i].task_id);
            CHECK(r.rows[i].eval_mse == doctest::Approx(truth.eval_mse).epsilon(tol));
            CHECK(r.rows[i].rel_out_err <= tol);
        }
    }
}

TEST_CASE("pipeline CSV round trip") {
    const auto s = generate_suite(small_config());
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    const auto r = run_pipeline(s, base, {codec_kind::dare, 0.9, 4}, method::dbms_init, short_train());
    const std::string csv = format_pipeline_csv(r.rows, 1);
    CHECK(csv.rfind("# deltashift-report v1, kind=pipeline, seed=1\n", 0) == 0);
    const auto back = parse_pipeline_csv(csv);
    REQUIRE(back.size() == r.rows.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].how == method::dbms_init);
        CHECK(back[i].lambda1 == r.rows[i].lambda1);
        CHECK(back[i].bits == r.rows[i].bits);
    }
    CHECK(format_pipeline_csv(back, 1) == csv);
    CHECK(parse_method(to_string(method::dbms_trained)) == method::dbms_trained);
}

TEST_CASE("1x1 sweep at (0, 1) equals the vanilla pipeline") {
    const auto s = generate_suite(small_config());
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    const codec_spec codec{codec_kind::dare, 0.9, 5};
    const auto v = run_pipeline(s, base, codec, method::vanilla, short_train());
    for (size_t i = 0; i < s.tasks.size(); ++i) {
        const auto sw = sweep_lambda_grid(s, base, s.tasks[i].task_id, codec, {0, 0, 1}, {1, 1, 1});
        REQUIRE(sw.rel_out_err.size() == 1);
        CHECK(sw.vanilla_i1 == 0);
        CHECK(sw.vanilla_i2 == 0);
        CHECK(sw.at(0, 0) == v.rows[i].rel_out_err);
    }
}

TEST_CASE("sweep pre-codec residual is minimal at the projection") {
    const auto s = generate_suite(small_config());
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    const auto & task = s.tasks[1];
    const double l = init_lambda1(task.finetuned, s.pretrained, base);
    const grid_axis l1{l - 1.0, l + 1.0, 21}; // cell 10 is the projection
    const auto sw = sweep_lambda_grid(s, base, task.task_id, {codec_kind::dare, 0.0, 0}, l1, {1, 1, 1});
    for (size_t i = 0; i < 21; ++i) {
        if (i != 10) CHECK(sw.pre_codec_residual[10] < sw.pre_codec_residual[i]);
    }
    const std::string csv = format_sweep_csv(sw, 1);
    CHECK(csv.rfind("# deltashift-report v1, kind=sweep, seed=1\n", 0) == 0);
}

TEST_CASE("grid axis endpoints are exact") {
    const grid_axis a{-1.0, 1.0, 21};
    CHECK(a.value(0) == -1.0);
    CHECK(a.value(10) == 0.0);
    CHECK(a.value(20) == 1.0);
    const grid_axis one{0.5, 0.5, 1};
    CHECK(one.value(0) == 0.5);
}

TEST_CASE("ablation with the same strategy twice ties") {
    const auto s = generate_suite(small_config());
    const base_vector base = compute_base_vector(s.finetuned_models(), s.pretrained);
    const auto r = ablation_init(s, base, {codec_kind::dare, 0.9, 1}, short_train(), init_strategy::ones,
                                 init_strategy::ones);
    CHECK(r.fraction_a_le_b == 1.0);
    const auto lossless = ablation_init(s, base, {codec_kind::dare, 0.0, 0}, short_train(),
                                        init_strategy::projection, init_strategy::ones);
    // with lambda2 = 1 and no compression every lambda1 reconstructs exactly
    for (const auto & row : lossless.rows) {
        CHECK(row.initial_loss_a <= 1e-12);
        CHECK(row.initial_loss_b <= 1e-12);
    }
    CHECK(format_ablation_csv(r, 1).rfind("# deltashift-report v1, kind=ablation, seed=1\n", 0) == 0);
}

TEST_CASE("storage accounting") {
    suite_config c = small_config();
    c.task_count = 1;
    const auto s1 = generate_suite(c);
    const base_vector b1 = compute_base_vector(s1.finetuned_models(), s1.pretrained);
    const codec_spec codec{codec_kind::dare, 0.9, 2};
    const auto d1 = run_pipeline(s1, b1, codec, method::dbms_init, short_train());
    const auto v1 = run_pipeline(s1, b1, codec, method::vanilla, short_train());
    const auto r1 = storage_report(d1.artifacts, v1.artifacts, b1);
    CHECK(r1.dbms_total - r1.task_bits[0] == r1.base_bits + 128);
    CHECK(r1.overhead_per_task == double(r1.base_bits + 128));

    const auto s = generate_suite(small_config());
    const base_vector b = compute_base_vector(s.finetuned_models(), s.pretrained);
    const auto d = run_pipeline(s, b, codec, method::dbms_init, short_train());
    const auto v = run_pipeline(s, b, codec, method::vanilla, short_train());
    const auto r = storage_report(d.artifacts, v.artifacts, b);
    uint64_t sum = 0, vsum = 0;
    for (size_t i = 0; i < d.artifacts.size(); ++i) {
        sum += 8 * serialize_compressed(d.artifacts[i].delta).size();
        vsum += 8 * serialize_compressed(v.artifacts[i].delta).size();
    }
    CHECK(r.vanilla_total == vsum);
    CHECK(r.dbms_total == sum + 8 * serialize_compressed(b.compressed).size() + 128 * 3);
    CHECK(r.overhead_per_task == doctest::Approx(double(r.base_bits) / 3.0 + 128.0).epsilon(1e-15));
    CHECK(format_storage_csv(r, 1).rfind("# deltashift-report v1, kind=storage, seed=1\n", 0) == 0);
}

TEST_CASE("parallel_for covers every index once") {
    setenv("DELTASHIFT_THREADS", "3", 1);
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), [&](size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    unsetenv("DELTASHIFT_THREADS");
}
