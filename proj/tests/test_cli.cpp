#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "maskvar/schema_check.hpp"

// Drives the installed binary end to end through std::system. The CLI
// path and the schema directory come from the build system.

namespace fs = std::filesystem;
using nlohmann::json;
using maskvar::matches_schema;

namespace {

const std::string cli = MASKVAR_CLI_PATH;
const fs::path schemas_dir = MASKVAR_SCHEMA_DIR;

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "maskvar_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int run(const std::string& args, const std::string& stdout_to = "") {
    std::string cmd = cli + " " + args;
    if (!stdout_to.empty()) cmd += " > " + stdout_to;
    cmd += " 2> " + (work_dir() / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string((std::istreambuf_iterator<char>(is)), {});
}

std::string last_stderr() { return slurp(work_dir() / "stderr.txt"); }

json load_schema(const char* name) { return json::parse(slurp(schemas_dir / name)); }

// tiny but complete run: 6 steps, small model
std::string tiny_overrides(std::uint64_t seed) {
    std::ostringstream os;
    os << " --override hidden=16 --override heads=2 --override layers=1"
       << " --override corpus_sentences=24 --override eval_sentences=8"
       << " --override batch_size=4 --override total_steps=6 --override warmup_steps=2"
       << " --override eval_interval=3 --override explore_end=0.5 --override seed=" << seed;
    return os.str();
}

}  // namespace

TEST_CASE("train with total_steps=0 exits 0 and writes an empty metrics file") {
    const fs::path out = work_dir() / "run_zero";
    const int code = run("train --out " + out.string() + " --override total_steps=0" + tiny_overrides(3));
    CHECK(code == 0);
    CHECK(slurp(out / "metrics.jsonl").empty());
    const json summary = json::parse(slurp(out / "summary.json"));
    CHECK(matches_schema(summary, load_schema("train_summary.schema.json")));
    CHECK(summary["steps_run"] == 0);
    CHECK(fs::exists(out / "checkpoint_final.mvar"));
}

TEST_CASE("identical config and seed give byte-identical metrics files") {
    const fs::path out1 = work_dir() / "run_a";
    const fs::path out2 = work_dir() / "run_b";
    REQUIRE(run("train --out " + out1.string() + tiny_overrides(5)) == 0);
    REQUIRE(run("train --out " + out2.string() + tiny_overrides(5)) == 0);
    const std::string m1 = slurp(out1 / "metrics.jsonl");
    CHECK_FALSE(m1.empty());
    CHECK(m1 == slurp(out2 / "metrics.jsonl"));

    // every metrics line validates against the shipped schema
    const json schema = load_schema("metrics_line.schema.json");
    std::istringstream is(m1);
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        ++lines;
        CHECK(matches_schema(json::parse(line), schema));
    }
    CHECK(lines == 6);
}

TEST_CASE("the baseline-uniform flag matches a pinned exploration schedule bitwise") {
    const fs::path out1 = work_dir() / "run_flag";
    const fs::path out2 = work_dir() / "run_pinned";
    REQUIRE(run("train --baseline-uniform --out " + out1.string() + tiny_overrides(6)) == 0);
    REQUIRE(run("train --out " + out2.string() + tiny_overrides(6) +
                " --override explore_start=1.0 --override explore_end=1.0") == 0);
    CHECK(slurp(out1 / "metrics.jsonl") == slurp(out2 / "metrics.jsonl"));
}

TEST_CASE("MASKVAR_SEED is the fallback seed source") {
    const fs::path out1 = work_dir() / "run_env";
    const fs::path out2 = work_dir() / "run_seedflag";
    std::ostringstream base;
    base << " --override hidden=16 --override heads=2 --override layers=1"
         << " --override corpus_sentences=24 --override eval_sentences=8"
         << " --override batch_size=4 --override total_steps=4 --override warmup_steps=2"
         << " --override eval_interval=2";
    const std::string cmd_env = "MASKVAR_SEED=77 " + cli + " train --out " + out1.string() + base.str() + " 2> " +
                                (work_dir() / "stderr.txt").string();
    REQUIRE(WEXITSTATUS(std::system(cmd_env.c_str())) == 0);
    REQUIRE(run("train --seed 77 --out " + out2.string() + base.str()) == 0);
    CHECK(slurp(out1 / "metrics.jsonl") == slurp(out2 / "metrics.jsonl"));
}

TEST_CASE("unknown config keys exit with code 2 and name the field") {
    const int code = run("train --out " + (work_dir() / "run_bad").string() + " --override totl_steps=2");
    CHECK(code == 2);
    CHECK(last_stderr().find("totl_steps") != std::string::npos);
}

TEST_CASE("invalid config values exit with code 2 and name the field") {
    const int code = run("train --out " + (work_dir() / "run_bad2").string() + " --override peak_lr=banana");
    CHECK(code == 2);
    CHECK(last_stderr().find("peak_lr") != std::string::npos);
}

TEST_CASE("audit-variance exact mode emits a schema-valid report with a tiny residual") {
    const fs::path out = work_dir() / "run_for_audit";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(8) + " --override grammar.min_len=6 --override grammar.max_len=7 --override max_seq_len=16") == 0);
    const fs::path report_path = work_dir() / "audit_exact.json";
    const int code = run("audit-variance --checkpoint " + (out / "checkpoint_final.mvar").string() +
                         " --mode exact --k 2 --sentences 2 --out " + report_path.string() + tiny_overrides(8) +
                         " --override grammar.min_len=6 --override grammar.max_len=7 --override max_seq_len=16");
    REQUIRE(code == 0);
    const json report = json::parse(slurp(report_path));
    CHECK(matches_schema(report, load_schema("audit_report.schema.json")));
    CHECK(report["mode"] == "exact");
    const double total = report["uniform"]["total"].get<double>();
    const double residual = report["uniform"]["residual"].get<double>();
    CHECK(std::abs(residual) <= 1e-10 * total);
    CHECK(report["optimal_mask_term"].is_number());
    CHECK(report["optimal_mask_term"].get<double>() <= report["uniform"]["mask_term"].get<double>() + 1e-8);
}

TEST_CASE("audit-variance exact mode suggests Monte Carlo when the cap is exceeded") {
    const fs::path out = work_dir() / "run_for_audit_cap";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(9)) == 0);
    const int code = run("audit-variance --checkpoint " + (out / "checkpoint_final.mvar").string() +
                         " --mode exact --k 8 --sentences 1" + tiny_overrides(9));
    CHECK(code == 2);
    CHECK(last_stderr().find("mc") != std::string::npos);
}

TEST_CASE("audit-variance mc mode emits stderr fields") {
    const fs::path out = work_dir() / "run_for_audit_mc";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(10)) == 0);
    const fs::path report_path = work_dir() / "audit_mc.json";
    const int code = run("audit-variance --checkpoint " + (out / "checkpoint_final.mvar").string() +
                         " --mode mc --samples 16 --sentences 4 --out " + report_path.string() + tiny_overrides(10));
    REQUIRE(code == 0);
    const json report = json::parse(slurp(report_path));
    CHECK(matches_schema(report, load_schema("audit_report.schema.json")));
    CHECK(report["mapnet"]["monte_carlo"] == true);
    CHECK(report["mapnet"]["mask_term_stderr"].is_number());
    CHECK(report["uniform"]["residual"] == 0.0);
}

TEST_CASE("sample-masks count 0 emits nothing and exits 0") {
    const fs::path out = work_dir() / "run_for_samples";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(11)) == 0);
    const fs::path samples = work_dir() / "samples_empty.jsonl";
    const int code = run("sample-masks --checkpoint " + (out / "checkpoint_final.mvar").string() + " --count 0 --out " +
                         samples.string() + tiny_overrides(11));
    CHECK(code == 0);
    CHECK(slurp(samples).empty());
}

TEST_CASE("sample-masks lines validate and carry difficulty labels for synthetic corpora") {
    const fs::path out = work_dir() / "run_for_samples2";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(12)) == 0);
    const fs::path samples = work_dir() / "samples.jsonl";
    const int code = run("sample-masks --checkpoint " + (out / "checkpoint_final.mvar").string() + " --count 12 --out " +
                         samples.string() + tiny_overrides(12));
    REQUIRE(code == 0);
    const json schema = load_schema("mask_sample.schema.json");
    std::istringstream is(slurp(samples));
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        ++lines;
        const json sample = json::parse(line);
        CHECK(matches_schema(sample, schema));
        CHECK(sample["source"] == "proposal");
        CHECK(sample["difficulty_labels"].is_array());
        CHECK(sample["difficulty_labels"].size() == sample["sentence"].size());
        CHECK(sample["proposal"].size() == sample["sentence"].size());
    }
    CHECK(lines == 12);
}

TEST_CASE("every oracle suite passes and emits schema-valid results") {
    const json schema = load_schema("oracle_results.schema.json");
    for (const char* suite : {"decomposition", "unbiasedness", "optimality", "correlation"}) {
        const fs::path out = work_dir() / (std::string("oracle_") + suite + ".json");
        const int code = run(std::string("oracle ") + suite + " --seed 3 --out " + out.string(),
                             (work_dir() / "oracle_stdout.txt").string());
        CHECK(code == 0);
        const json results = json::parse(slurp(out));
        CHECK(matches_schema(results, schema));
        CHECK(results["passed"] == true);
        const std::string console = slurp(work_dir() / "oracle_stdout.txt");
        CHECK(console.find("[PASS]") != std::string::npos);
    }
    CHECK(run("oracle bogus-suite") == 2);
}

TEST_CASE("eval reports a schema-valid loss for a checkpoint") {
    const fs::path out = work_dir() / "run_for_eval";
    REQUIRE(run("train --out " + out.string() + tiny_overrides(13)) == 0);
    const fs::path got = work_dir() / "eval_out.json";
    const int code = run("eval --checkpoint " + (out / "checkpoint_final.mvar").string() + tiny_overrides(13), got.string());
    REQUIRE(code == 0);
    const json result = json::parse(slurp(got));
    CHECK(matches_schema(result, load_schema("eval_result.schema.json")));
    CHECK(result["eval_loss"].get<double>() > 0.0);
}

TEST_CASE("resume continues from a checkpoint to the full budget") {
    const fs::path full = work_dir() / "run_full";
    const fs::path part = work_dir() / "run_part";
    const fs::path cont = work_dir() / "run_cont";
    const std::string common = tiny_overrides(14) + " --override checkpoint_interval=3";
    REQUIRE(run("train --out " + full.string() + common) == 0);
    REQUIRE(run("train --out " + part.string() + common + " --override max_steps=3") == 0);
    REQUIRE(run("train --out " + cont.string() + common + " --resume " + (part / "checkpoint_final.mvar").string()) == 0);
    // the resumed metrics reproduce the tail of the uninterrupted run
    std::istringstream is(slurp(full / "metrics.jsonl"));
    std::string line, tail;
    int ln = 0;
    while (std::getline(is, line))
        if (++ln > 3) tail += line + "\n";
    CHECK(tail == slurp(cont / "metrics.jsonl"));
}

TEST_CASE("missing config file exits 2") {
    CHECK(run("train --config /nonexistent/path.cfg --out " + (work_dir() / "run_noconf").string()) == 2);
}
