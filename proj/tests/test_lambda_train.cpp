#include <doctest.h>

#include <cmath>
#include <random>

#include "deltashift/lambda_train.hpp"
#include "test_util.hpp"

using namespace deltashift;
using test_util::t;

namespace {

std::vector<float> gaussian(size_t n, std::mt19937 & gen, float scale) {
    std::normal_distribution<float> nd(0.0f, scale);
    std::vector<float> x(n);
    for (auto & v : x) v = nd(gen);
    return x;
}

tensor_map random_mlp(size_t in, size_t hid, size_t out, std::mt19937 & gen, float scale) {
    return tensor_map({t("fc1.weight", {hid, in}, gaussian(hid * in, gen, scale)),
                       t("fc1.bias", {hid}, gaussian(hid, gen, scale)),
                       t("fc2.weight", {out, hid}, gaussian(out * hid, gen, scale)),
                       t("fc2.bias", {out}, gaussian(out, gen, scale))});
}

forward_model scalar_linear() {
    forward_model m;
    m.layers.push_back(linear_layer{"w", std::nullopt});
    m.input_dim = 1;
    m.output_dim = 1;
    return m;
}

// small task family on a 3-4-2 tanh MLP
struct toy {
    forward_model model = make_mlp(3, 4, 2);
    tensor_map pre, ft, other;
    base_vector base;
    batch pool;

    explicit toy(uint32_t seed) {
        std::mt19937 gen(seed);
        pre = random_mlp(3, 4, 2, gen, 0.5f);
        const tensor_map shared = random_mlp(3, 4, 2, gen, 0.1f);
        ft = map_add(map_add(pre, shared), random_mlp(3, 4, 2, gen, 0.05f));
        other = map_add(map_add(pre, shared), random_mlp(3, 4, 2, gen, 0.05f));
        base = compute_base_vector(std::vector<tensor_map>{ft, other}, pre);
        pool = batch(40, 3, gaussian(120, gen, 1.0f));
    }

    train_inputs inputs(const codec_spec & codec) const {
        train_inputs in;
        in.task_id = "toy";
        in.model = &model;
        in.pretrained = &pre;
        in.finetuned = &ft;
        in.base = &base;
        in.codec = codec;
        in.pool = &pool;
        return in;
    }
};

} // namespace

TEST_CASE("identity linear layer") {
    forward_model m;
    m.layers.push_back(linear_layer{"w", "b"});
    m.input_dim = 2;
    m.output_dim = 2;
    const tensor_map w({t("w", {2, 2}, {1, 0, 0, 1}), t("b", {2}, {0, 0})});
    const batch x(2, 2, {0.5f, -1, 3, 2});
    const matrix y = forward(m, w, x);
    CHECK(y.data == std::vector<double>{0.5, -1, 3, 2});
}

TEST_CASE("relu clamps negative pre-activations") {
    forward_model m;
    m.layers.push_back(linear_layer{"w", std::nullopt});
    m.layers.push_back(activation_layer{activation::relu});
    m.input_dim = 2;
    m.output_dim = 1;
    const tensor_map w({t("w", {1, 2}, {-1, -1})});
    const matrix y = forward(m, w, batch(2, 2, {1, 2, 0.5f, 0.25f}));
    CHECK(y.data == std::vector<double>{0, 0});
}

TEST_CASE("two-layer tanh MLP against scalar arithmetic") {
    const forward_model m = make_mlp(2, 2, 1);
    const float w1[4] = {0.5f, -0.25f, 0.125f, 0.75f};
    const float b1[2] = {0.1f, -0.2f};
    const float w2[2] = {1.5f, -0.5f};
    const float b2 = 0.05f;
    const tensor_map w({t("fc1.weight", {2, 2}, {w1[0], w1[1], w1[2], w1[3]}), t("fc1.bias", {2}, {b1[0], b1[1]}),
                        t("fc2.weight", {1, 2}, {w2[0], w2[1]}), t("fc2.bias", {1}, {b2})});
    const float xs[3][2] = {{1, 2}, {-1, 0.5f}, {0, -3}};
    const batch x(3, 2, {xs[0][0], xs[0][1], xs[1][0], xs[1][1], xs[2][0], xs[2][1]});
    const matrix y = forward(m, w, x);
    for (int s = 0; s < 3; ++s) {
        const double h0 = std::tanh(double(w1[0]) * xs[s][0] + double(w1[1]) * xs[s][1] + double(b1[0]));
        const double h1 = std::tanh(double(w1[2]) * xs[s][0] + double(w1[3]) * xs[s][1] + double(b1[1]));
        const double expect = double(w2[0]) * h0 + double(w2[1]) * h1 + double(b2);
        CHECK(y(s, 0) == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("distillation loss") {
    const forward_model m = scalar_linear();
    const batch x(3, 1, {1, 2, 3});
    const tensor_map teacher({t("w", {1, 1}, {1})});
    const tensor_map student({t("w", {1, 1}, {2})});
    CHECK(distill_loss(m, teacher, student, x) == doctest::Approx(14.0 / 3.0).epsilon(1e-15));
    CHECK(distill_loss(m, teacher, teacher, x) == 0.0);

    forward_model mb;
    mb.layers.push_back(linear_layer{"w", "b"});
    mb.input_dim = 1;
    mb.output_dim = 1;
    const tensor_map a({t("w", {1, 1}, {0.5f}), t("b", {1}, {0})});
    const tensor_map b({t("w", {1, 1}, {0.5f}), t("b", {1}, {0.25f})});
    CHECK(distill_loss(mb, a, b, x) == doctest::Approx(0.0625).epsilon(1e-15));
}

TEST_CASE("loss_at on the scalar model matches the closed form") {
    // pre = 0, finetuned = 1, tau = 0.5, lossless codec:
    //   W'(l1, l2) = 0.5 l1 + l2 (1 - 0.5 l1); loss = (W' - 1)^2 * mean(x^2)
    const forward_model m = scalar_linear();
    const tensor_map pre({t("w", {1, 1}, {0})});
    const tensor_map ft({t("w", {1, 1}, {1})});
    const tensor_map tau({t("w", {1, 1}, {0.5f})});
    const loss_context ctx(m, pre, tau, ft, {codec_kind::dare, 0.0, 0}, batch(3, 1, {1, 2, 3}));
    const double mx2 = 14.0 / 3.0;
    for (double l1 : {0.0, 0.6, 2.0}) {
        for (double l2 : {0.0, 0.5, 1.3}) {
            const double wp = 0.5 * l1 + l2 * (1.0 - 0.5 * l1);
            CHECK(loss_at(l1, l2, ctx) == doctest::Approx((wp - 1) * (wp - 1) * mx2).epsilon(1e-12));
        }
    }
    // d/dl2 at (0, 0.5): 2 (0.5 - 1) * mean(x^2)
    const auto ga = gradient(0.0, 0.5, ctx, gradient_mode::analytic);
    CHECK(ga.g2 == doctest::Approx(-mx2).epsilon(1e-12));
    CHECK(ga.g1 == doctest::Approx(2 * (0.5 - 1) * mx2 * 0.5 * 0.5).epsilon(1e-12));
    const auto gf = gradient(0.0, 0.5, ctx, gradient_mode::finite_diff);
    CHECK(gf.g2 == doctest::Approx(-mx2).epsilon(1e-7));
    CHECK(gf.g1 == doctest::Approx(ga.g1).epsilon(1e-7));
}

TEST_CASE("lossless codec is stationary at lambda2 = 1") {
    const toy tt(3);
    const loss_context ctx(tt.model, tt.pre, tt.base.decoded, tt.ft, {codec_kind::dare, 0.0, 0}, tt.pool);
    const double l1 = init_lambda1(tt.ft, tt.pre, tt.base);
    CHECK(loss_at(l1, 1.0, ctx) <= 1e-12);
    for (auto mode : {gradient_mode::analytic, gradient_mode::finite_diff}) {
        const auto g = gradient(l1, 1.0, ctx, mode);
        CHECK(std::abs(g.g1) <= 1e-8);
        CHECK(std::abs(g.g2) <= 1e-8);
    }
    CHECK(loss_at(l1, 0.0, ctx) != loss_at(l1, 1.0, ctx));
}

TEST_CASE("analytic and finite-difference gradients agree") {
    for (uint32_t seed = 0; seed < 5; ++seed) {
        const toy tt(seed);
        for (const codec_spec & codec :
             {codec_spec{codec_kind::dare, 0.5, seed}, codec_spec{codec_kind::bitdelta, 0.0, 0}}) {
            const loss_context ctx(tt.model, tt.pre, tt.base.decoded, tt.ft, codec, tt.pool);
            const double l1 = init_lambda1(tt.ft, tt.pre, tt.base);
            const auto ga = gradient(l1, 0.9, ctx, gradient_mode::analytic);
            const auto gf = gradient(l1, 0.9, ctx, gradient_mode::finite_diff, 1e-5);
            CHECK(ga.loss == doctest::Approx(gf.loss).epsilon(1e-12));
            CHECK(ga.g1 == doctest::Approx(gf.g1).epsilon(1e-4));
            CHECK(ga.g2 == doctest::Approx(gf.g2).epsilon(1e-4));
        }
    }
}

TEST_CASE("adam") {
    adam_state s;
    std::array<double, 2> p{0.5, 2.0};
    adam_step(s, p, {0.0, 0.0});
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 2.0);
    CHECK(s.step == 1);

    adam_state f;
    std::array<double, 2> q{0.0, 0.0};
    adam_step(f, q, {1.0, -1.0});
    CHECK(q[0] == doctest::Approx(-1e-4 / (1 + 1e-8)).epsilon(1e-15));
    CHECK(q[1] == doctest::Approx(1e-4 / (1 + 1e-8)).epsilon(1e-15));
}

TEST_CASE("row sampling") {
    const auto a = sample_rows(200, 0.1, 7);
    CHECK(a.size() == 20);
    CHECK(a == sample_rows(200, 0.1, 7));
    CHECK(a != sample_rows(200, 0.1, 8));
    std::vector<size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    CHECK(sample_rows(15, 0.1, 0).size() == 2);
    CHECK_THROWS_AS(sample_rows(10, 0.0, 0), error);
}

TEST_CASE("training with a lossless codec") {
    const toy tt(4);
    train_config cfg;
    cfg.steps = 50;
    cfg.sample_fraction = 0.5;
    const double l1 = init_lambda1(tt.ft, tt.pre, tt.base);

    // exact zero gradient: analytic mode stays put
    cfg.mode = gradient_mode::analytic;
    const auto a = train_task(tt.inputs({codec_kind::dare, 0.0, 0}), cfg);
    REQUIRE(a.trace.size() == 50);
    CHECK(a.trace.front().loss <= 1e-12);
    CHECK(std::abs(a.artifact.lambda1 - l1) <= 1e-6);
    CHECK(std::abs(a.artifact.lambda2 - 1.0) <= 1e-6);

    // central differences carry an O(h^2) bias at the optimum which Adam
    // normalises; the drift stays within Adam's lr-per-step bound
    cfg.mode = gradient_mode::finite_diff;
    const auto f = train_task(tt.inputs({codec_kind::dare, 0.0, 0}), cfg);
    CHECK(f.trace.front().loss <= 1e-12);
    CHECK(std::abs(f.trace.front().grad2) <= 1e-8);
    CHECK(std::abs(f.artifact.lambda1 - l1) <= cfg.lr * 50);
    CHECK(std::abs(f.artifact.lambda2 - 1.0) <= cfg.lr * 50);
    CHECK(f.final_loss <= 1e-8);
}

TEST_CASE("training is deterministic and does not increase the loss on a toy task") {
    const toy tt(5);
    train_config cfg;
    cfg.steps = 200;
    cfg.sample_fraction = 0.5;
    cfg.lr = 1e-3;
    const auto in = tt.inputs({codec_kind::dare, 0.9, 3});
    const auto a = train_task(in, cfg);
    const auto b = train_task(in, cfg);
    CHECK(format_trace_csv(a.trace) == format_trace_csv(b.trace));
    CHECK(a.artifact.lambda1 == b.artifact.lambda1);
    CHECK(a.artifact.lambda2 == b.artifact.lambda2);
    CHECK(a.final_loss <= a.initial_loss);
    CHECK(a.artifact.provenance.steps == 200);
    CHECK(a.artifact.provenance.final_loss == a.final_loss);

    train_config none = cfg;
    none.steps = 0;
    const auto z = train_task(in, none);
    CHECK(z.trace.empty());
    CHECK(z.artifact.lambda1 == init_lambda1(tt.ft, tt.pre, tt.base));
    CHECK(z.artifact.lambda2 == 1.0);

    train_inputs resumed = in;
    resumed.start = std::array<double, 2>{0.25, 0.5};
    const auto s = train_task(resumed, none);
    CHECK(s.artifact.lambda1 == 0.25);
    CHECK(s.artifact.lambda2 == 0.5);
}

TEST_CASE("minibatches and analytic mode train") {
    const toy tt(6);
    train_config cfg;
    cfg.steps = 40;
    cfg.sample_fraction = 1.0;
    cfg.batch_size = 8;
    cfg.mode = gradient_mode::analytic;
    const auto r = train_task(tt.inputs({codec_kind::bitdelta, 0.0, 0}), cfg);
    CHECK(r.trace.size() == 40);
    CHECK(std::isfinite(r.final_loss));
}

TEST_CASE("trace CSV header") {
    const std::vector<trace_row> rows{{0, 1, 1, 0.5, 0.25, -0.125}};
    CHECK(format_trace_csv(rows).rfind("step,lambda1,lambda2,loss,grad1,grad2\n", 0) == 0);
}

TEST_CASE("train config validation") {
    train_config c;
    c.sample_fraction = 1.5;
    CHECK_THROWS_AS(validate(c), error);
    CHECK(parse_gradient_mode("finite-diff") == gradient_mode::finite_diff);
    CHECK(parse_gradient_mode("analytic") == gradient_mode::analytic);
    CHECK_THROWS_AS(parse_gradient_mode("newton"), error);
}
