#include <doctest.h>

#include <sstream>

#include "deltashift/cli.hpp"
#include "deltashift/harness.hpp"
#include "deltashift/io.hpp"
#include "test_util.hpp"

using namespace deltashift;

namespace {

struct result {
    int code = 0;
    std::string out;
    std::string err;
};

result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "deltashift");
    std::vector<const char *> argv;
    for (const auto & a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    result r;
    r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

bool one_error_line(const result & r, int code) {
    const std::string prefix = "ERROR code=" + std::to_string(code) + " msg=";
    return r.err.rfind(prefix, 0) == 0 && r.err.find('\n') == r.err.size() - 1;
}

std::string slurp(const std::string & path) {
    const auto b = read_file(path);
    return std::string(b.begin(), b.end());
}

// small suite written once per test through the CLI
struct cli_suite {
    test_util::scratch_dir dir;
    std::string suite;
    std::string art;

    explicit cli_suite(const std::string & label) : dir(label) {
        suite = dir.file("suite");
        art = dir.file("art");
        const auto g = run_cli({"generate", "--out", suite, "--tasks", "3", "--hidden-dim", "8", "--dataset-size",
                                "40", "--eval-size", "20", "--finetune-steps", "30", "--seed", "5"});
        REQUIRE(g.code == 0);
    }

    std::vector<std::string> finetuned() const {
        return {suite + "/task00.finetuned.dlts", suite + "/task01.finetuned.dlts", suite + "/task02.finetuned.dlts"};
    }

    result compress(std::vector<std::string> extra = {}) const {
        std::vector<std::string> a{"compress", "--pretrained", suite + "/pretrained.dlts", "--out", art, "--finetuned"};
        for (const auto & f : finetuned()) a.push_back(f);
        a.push_back("--task-ids");
        for (const char * id : {"task00", "task01", "task02"}) a.push_back(id);
        a.insert(a.end(), extra.begin(), extra.end());
        return run_cli(a);
    }
};

} // namespace

TEST_CASE("usage errors exit 2 with one ERROR line") {
    auto r = run_cli({});
    CHECK(r.code == 2);
    CHECK(one_error_line(r, 2));

    r = run_cli({"compress", "--pretrained", "/nonexistent/p.dlts", "--finetuned", "/nonexistent/f.dlts", "--out",
                 "/tmp/x", "--sparse-rate", "1.5"});
    CHECK(r.code == 2);
    CHECK(one_error_line(r, 2));
    CHECK(r.out.empty());

    r = run_cli({"compress", "--pretrained", "/nonexistent/p.dlts", "--finetuned", "/nonexistent/f.dlts", "--out",
                 "/tmp/x"});
    CHECK(r.code == 2);
    CHECK(r.err.find("missing input file") != std::string::npos);

    r = run_cli({"sweep", "--suite", "/nonexistent", "--task", "task00", "--out", "/tmp/x.csv", "--codec", "zip"});
    CHECK(r.code == 2);

    CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("corrupt inputs exit 3") {
    test_util::scratch_dir dir("cli_corrupt");
    const tensor_map m({tensor{"w", {2}, {1, 2}}});
    save_checkpoint(m, dir.file("p.dlts"));
    auto bytes = read_file(dir.file("p.dlts"));
    bytes[bytes.size() - 9] ^= 0xFF;
    write_file_atomic(dir.file("bad.dlts"), bytes);
    const auto r = run_cli({"compress", "--pretrained", dir.file("p.dlts"), "--finetuned", dir.file("bad.dlts"),
                            "--out", dir.file("art")});
    CHECK(r.code == 3);
    CHECK(one_error_line(r, 3));
}

TEST_CASE("compress warns on a zero base vector") {
    test_util::scratch_dir dir("cli_zero");
    const tensor_map m({tensor{"w", {2}, {1, 2}}});
    save_checkpoint(m, dir.file("p.dlts"));
    save_checkpoint(m, dir.file("t.dlts"));
    const auto r = run_cli({"compress", "--pretrained", dir.file("p.dlts"), "--finetuned", dir.file("t.dlts"),
                            "--out", dir.file("art")});
    CHECK(r.code == 0);
    CHECK(r.err.find("WARNING zero base vector") != std::string::npos);
    CHECK(r.out.find("task_id=t lambda1=0 ") != std::string::npos);
    CHECK(load_artifact(dir.file("art/t")).lambda1 == 0.0);
}

TEST_CASE("compress is idempotent and bits match storage accounting") {
    cli_suite s("cli_compress");
    REQUIRE(s.compress().code == 0);
    const std::string first = slurp(s.art + "/task01.dltc") + slurp(s.art + "/task01.manifest");
    const auto again = s.compress();
    REQUIRE(again.code == 0);
    CHECK(slurp(s.art + "/task01.dltc") + slurp(s.art + "/task01.manifest") == first);
    const auto a = load_artifact(s.art + "/task01");
    CHECK(again.out.find("bits=" + std::to_string(storage_bits(a.delta)) + " path=") != std::string::npos);
    CHECK(storage_bits(a.delta) == 8 * read_file(s.art + "/task01.dltc").size());
}

TEST_CASE("train, reconstruct and evaluate") {
    cli_suite s("cli_train");
    REQUIRE(s.compress().code == 0);
    const auto before = load_artifact(s.art + "/task00");

    auto r = run_cli({"train", "--suite", s.suite, "--artifacts", s.art, "--steps", "0"});
    REQUIRE(r.code == 0);
    const auto zero = load_artifact(s.art + "/task00");
    CHECK(zero.lambda1 == before.lambda1);
    CHECK(zero.lambda2 == before.lambda2);
    CHECK(serialize_compressed(zero.delta) == serialize_compressed(before.delta));

    r = run_cli({"train", "--suite", s.suite, "--artifacts", s.art, "--steps", "20", "--sample-fraction", "0.5"});
    REQUIRE(r.code == 0);
    CHECK(slurp(s.art + "/task00.trace.csv").rfind("step,lambda1", 0) == 0);
    const auto trained = load_artifact(s.art + "/task00");
    CHECK(trained.provenance.steps == 20);

    const std::string out = s.dir.file("w.dlts");
    r = run_cli({"reconstruct", "--pretrained", s.suite + "/pretrained.dlts", "--base", s.art + "/base", "--artifact",
                 s.art + "/task00", "--out", out});
    REQUIRE(r.code == 0);

    const auto suite = load_suite(s.suite);
    const auto expect = evaluate(reconstruct(suite.pretrained, load_base_vector(s.art + "/base"), trained), suite,
                                 "task00");
    r = run_cli({"evaluate", "--suite", s.suite, "--weights", out, "--task", "task00"});
    REQUIRE(r.code == 0);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", expect.relative_output_error);
    CHECK(r.out.find(std::string("rel_out_err=") + buf) != std::string::npos);
}

TEST_CASE("train with a missing data pool exits 2") {
    cli_suite s("cli_missing");
    REQUIRE(s.compress().code == 0);
    std::filesystem::remove(s.suite + "/task01.data.dlts");
    const auto r = run_cli({"train", "--suite", s.suite, "--artifacts", s.art, "--steps", "1"});
    CHECK(r.code == 2);
    CHECK(one_error_line(r, 2));
}

TEST_CASE("lossless reconstruction is bit exact and lambda2 = 0 gives the shifted base") {
    cli_suite s("cli_lossless");
    REQUIRE(s.compress({"--sparse-rate", "0"}).code == 0);
    const std::string out = s.dir.file("w.dlts");
    auto r = run_cli({"reconstruct", "--pretrained", s.suite + "/pretrained.dlts", "--base", s.art + "/base",
                      "--artifact", s.art + "/task02", "--out", out});
    REQUIRE(r.code == 0);
    const auto suite = load_suite(s.suite);
    const tensor_map w = load_checkpoint(out);
    const auto fw = flatten_concat(w), ff = flatten_concat(suite.tasks[2].finetuned);
    REQUIRE(fw.size() == ff.size());
    double worst = 0.0;
    for (size_t i = 0; i < fw.size(); ++i) worst = std::max(worst, std::abs(double(fw[i]) - double(ff[i])));
    CHECK(worst <= 1e-6);

    task_artifact a = load_artifact(s.art + "/task02");
    a.lambda2 = 0.0;
    write_text_atomic(s.art + "/task02.manifest", format_manifest(a));
    r = run_cli({"reconstruct", "--pretrained", s.suite + "/pretrained.dlts", "--base", s.art + "/base", "--artifact",
                 s.art + "/task02", "--out", out});
    REQUIRE(r.code == 0);
    const base_vector base = load_base_vector(s.art + "/base");
    CHECK(bitwise_equal(load_checkpoint(out), shifted_base(suite.pretrained, base, a.lambda1)));
}

TEST_CASE("sweep, ablate, pipeline and report") {
    cli_suite s("cli_reports");
    const std::string sweep = s.dir.file("sweep.csv");
    auto r = run_cli({"sweep", "--suite", s.suite, "--task", "task01", "--out", sweep, "--l1-min", "0", "--l1-max",
                      "0", "--l1-steps", "1", "--l2-min", "1", "--l2-max", "1", "--l2-steps", "1", "--sparse-rate",
                      "0.9"});
    REQUIRE(r.code == 0);
    const std::string pipe = s.dir.file("pipe.csv");
    r = run_cli({"pipeline", "--suite", s.suite, "--out", pipe, "--method", "vanilla", "--sparse-rate", "0.9"});
    REQUIRE(r.code == 0);
    const auto rows = parse_pipeline_csv(slurp(pipe));
    const auto suite = load_suite(s.suite);
    const auto base = compute_base_vector(suite.finetuned_models(), suite.pretrained);
    const auto sw = sweep_lambda_grid(suite, base, "task01", {codec_kind::dare, 0.9, 0}, {0, 0, 1}, {1, 1, 1});
    CHECK(sw.at(0, 0) == rows.at(1).rel_out_err);

    const std::string abl = s.dir.file("abl.csv");
    r = run_cli({"ablate", "--suite", s.suite, "--out", abl, "--strategies", "ones,ones", "--steps", "5"});
    REQUIRE(r.code == 0);
    CHECK(slurp(abl).find("fraction_a_le_b=1") != std::string::npos);

    REQUIRE(s.compress().code == 0);
    const std::string rep = s.dir.file("rep.csv");
    r = run_cli({"report", "--suite", s.suite, "--artifacts", s.art, "--out", rep});
    REQUIRE(r.code == 0);
    uint64_t sum = 8 * read_file(s.art + "/base.dltc").size() + 3 * 128;
    for (const char * id : {"task00", "task01", "task02"}) sum += 8 * read_file(s.art + "/" + id + ".dltc").size();
    CHECK(slurp(rep).find("dbms_total," + std::to_string(sum) + "\n") != std::string::npos);

    // idempotence of CSV outputs
    const std::string first = slurp(pipe);
    REQUIRE(run_cli({"pipeline", "--suite", s.suite, "--out", pipe, "--method", "vanilla", "--sparse-rate", "0.9"})
                .code == 0);
    CHECK(slurp(pipe) == first);
}
