#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dapo/pipeline.hpp"

using namespace dapo;
namespace fs = std::filesystem;

namespace {

#ifndef DAPOCTL_PATH
#define DAPOCTL_PATH ""
#endif
#ifndef DAPO_DATA_DIR
#define DAPO_DATA_DIR ""
#endif

/// Environment override first, then the build-time location.
std::string env_or_skip(const char* name) {
    if (const char* v = std::getenv(name)) return v;
    return std::string(name) == "DAPOCTL" ? DAPOCTL_PATH : DAPO_DATA_DIR;
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("dapo_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct CommandResult {
    int code = -1;
    std::string out;
};

/// Runs the CLI with stderr folded into stdout.
CommandResult dapoctl(const std::string& args) {
    const auto exe = env_or_skip("DAPOCTL");
    CommandResult r;
    FILE* pipe = ::popen(("'" + exe + "' " + args + " 2>&1").c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string data_file(const std::string& name) { return (fs::path(env_or_skip("DAPO_DATA")) / name).string(); }

ExperimentConfig t2_config(const fs::path& out) {
    ExperimentConfig c;
    c.mdp.builtin = "t2";
    c.iterate.dataset.m = 16;
    c.iterate.seed = 7;
    c.output_dir = out.string();
    return c;
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

#define REQUIRE_CLI()                                                      \
    if (env_or_skip("DAPOCTL").empty()) GTEST_SKIP() << "DAPOCTL not set"

}  // namespace

TEST(Sha256, KnownDigests) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(ExperimentConfig, JsonRoundTrip) {
    ExperimentConfig c;
    RandomMdpParams p;
    p.depth = 4;
    p.width = 3;
    c.mdp.random = p;
    c.mdp.random_seed = 11;
    c.ref_policy = "ref.csv";
    c.iterate.iterations = 3;
    c.iterate.source = AdvantageSource::critic;
    c.iterate.coverage = StateCoverage::generated;
    c.iterate.critic.completions = 100;
    c.iterate.dataset.beta = 0.25;
    c.iterate.dataset.gap_filter = false;
    c.iterate.train.batching = Batching::shuffled;
    c.iterate.seed = 99;
    const auto j = to_json(c);
    const auto back = config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.mdp.random->depth, 4);
    EXPECT_EQ(back.iterate.anchor_mode(), AnchorMode::moving);
    EXPECT_EQ(back.iterate.train.seed, rng::stage_seed(99, "train_policy"));
}

TEST(ExperimentConfig, RejectsBadConfigs) {
    auto base = to_json(t2_config("x"));
    auto with = [&](const std::string& key, io::json v) {
        auto j = base;
        j[key] = std::move(v);
        return j;
    };
    EXPECT_THROW(config_from_json(with("iterations", 0)), InvalidInput);
    EXPECT_THROW(config_from_json(with("beta", -1.0)), InvalidInput);
    EXPECT_THROW(config_from_json(with("source", "oracle")), InvalidInput);
    EXPECT_THROW(config_from_json(with("mdp", io::json::object())), InvalidInput);
    EXPECT_THROW(config_from_json(with("mdp", {{"builtin", "t2"}, {"file", "a.json"}})), InvalidInput);
    EXPECT_THROW(config_from_json(with("iterations", "three")), InvalidInput);
    EXPECT_THROW(load_source(MdpSource{std::nullopt, std::nullopt, 0, std::string("t9")}), InvalidInput);
}

TEST(ExperimentConfig, LoadsShippedFile) {
    if (env_or_skip("DAPO_DATA").empty()) GTEST_SKIP() << "DAPO_DATA not set";
    const auto c = load_config(data_file("t2_exact.json"));
    EXPECT_EQ(*c.mdp.builtin, "t2");
    EXPECT_EQ(c.iterate.dataset.m, 16);
    EXPECT_EQ(c.iterate.seed, 7u);
}

TEST(RunPipeline, T2ArtifactsAndImprovement) {
    const auto dir = fresh_dir("t2");
    const auto res = run_pipeline(t2_config(dir));
    std::vector<std::string> names;
    for (const auto& a : res.artifacts) names.push_back(a.name);
    EXPECT_EQ(names, (std::vector<std::string>{"mdp.json", "ref_policy.csv", "dataset_1.csv", "policy_1.csv",
                                               "values_1.csv", "iterations.csv"}));
    for (const auto& n : names) EXPECT_TRUE(fs::exists(dir / n)) << n;
    EXPECT_TRUE(fs::exists(res.manifest_path));
    ASSERT_EQ(res.iterations.size(), 1u);
    EXPECT_GT(res.iterations[0].improvement(), 0.0);
    fs::remove_all(dir);
}

TEST(RunPipeline, HashesReproduce) {
    const auto a = fresh_dir("hash_a"), b = fresh_dir("hash_b");
    auto ca = t2_config(a), cb = t2_config(b);
    ca.iterate.iterations = cb.iterate.iterations = 2;
    const auto ra = run_pipeline(ca), rb = run_pipeline(cb);
    ASSERT_EQ(ra.artifacts.size(), rb.artifacts.size());
    for (std::size_t i = 0; i < ra.artifacts.size(); ++i) {
        EXPECT_EQ(ra.artifacts[i].name, rb.artifacts[i].name);
        EXPECT_EQ(ra.artifacts[i].sha256, rb.artifacts[i].sha256) << ra.artifacts[i].name;
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(RunPipeline, CriticRunWritesCriticArtifacts) {
    const auto dir = fresh_dir("critic");
    auto c = t2_config(dir);
    c.iterate.source = AdvantageSource::critic;
    c.iterate.critic.completions = 256;
    const auto res = run_pipeline(c);
    EXPECT_TRUE(fs::exists(dir / "targets_1.csv"));
    EXPECT_TRUE(fs::exists(dir / "critic_1.csv"));
    EXPECT_EQ(res.artifacts.size(), 8u);
    fs::remove_all(dir);
}

TEST(ReportRun, ExitCodes) {
    const auto dir = fresh_dir("report");
    run_pipeline(t2_config(dir));
    auto rep = report_run(dir.string());
    EXPECT_EQ(rep.exit_code, 0) << rep.text;
    EXPECT_TRUE(fs::exists(dir / "report.csv"));
    EXPECT_NE(rep.text.find("ok"), std::string::npos);

    write(dir / "checks.csv", "check,instances,max_residual,tolerance,passed,failures,detail\nx,1,1,0,false,0:1,\n");
    rep = report_run(dir.string());
    EXPECT_EQ(rep.exit_code, 1);
    EXPECT_EQ(rep.failed_checks, std::vector<std::string>{"x"});
    fs::remove(dir / "checks.csv");

    write(dir / "policy_1.csv", "state,action,logit\n");
    rep = report_run(dir.string());
    EXPECT_EQ(rep.exit_code, 1);
    EXPECT_EQ(rep.missing, std::vector<std::string>{"policy_1.csv (hash mismatch)"});
    fs::remove(dir / "policy_1.csv");
    EXPECT_EQ(report_run(dir.string()).missing, std::vector<std::string>{"policy_1.csv (missing)"});

    fs::remove(dir / "manifest.json");
    EXPECT_EQ(report_run(dir.string()).exit_code, 2);
    fs::remove_all(dir);
}

TEST(ReportRun, FlagsValueDrop) {
    const auto dir = fresh_dir("drop");
    run_pipeline(t2_config(dir));
    auto t = csv::read((dir / "iterations.csv").string());
    t.rows[0][t.column("value_after")] = "0.1";
    csv::Writer w(t.header);
    for (const auto& row : t.rows) w.row(row);
    write(dir / "iterations.csv", w.str());
    const auto rep = report_run(dir.string());
    EXPECT_EQ(rep.monotone_violations, std::vector<int>{1});
    EXPECT_EQ(rep.exit_code, 1);
    EXPECT_NE(rep.text.find("VIOLATION"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Cli, ValidateAcceptsAndRejects) {
    REQUIRE_CLI();
    const auto ok = dapoctl("validate '" + data_file("t2.json") + "'");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_EQ(ok.out, "valid\n");

    const auto dir = fresh_dir("cli_validate");
    write(dir / "cycle.json", R"({"states":[{"id":"a","terminal":false},{"id":"b","terminal":false}],
        "transitions":[{"from":"a","action":"x","to":"b"},{"from":"b","action":"y","to":"a"}],
        "mu":[{"state":"a","prob":1.0}],"horizon_bound":4})");
    const auto bad = dapoctl("validate '" + (dir / "cycle.json").string() + "'");
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.out.find("cycle"), std::string::npos) << bad.out;
    EXPECT_EQ(dapoctl("validate '" + (dir / "absent.json").string() + "'").code, 2);
    fs::remove_all(dir);
}

TEST(Cli, GenMdpIsDeterministicAndValid) {
    REQUIRE_CLI();
    const auto dir = fresh_dir("cli_gen");
    const auto a = (dir / "a.json").string(), b = (dir / "b.json").string();
    ASSERT_EQ(dapoctl("--seed 5 --out '" + a + "' gen-mdp --depth 4 --width 3").code, 0);
    ASSERT_EQ(dapoctl("--seed 5 --out '" + b + "' gen-mdp --depth 4 --width 3").code, 0);
    EXPECT_EQ(csv::read_file(a), csv::read_file(b));
    EXPECT_EQ(dapoctl("validate '" + a + "'").code, 0);
    EXPECT_EQ(dapoctl("gen-mdp --depth 0").code, 2);
    fs::remove_all(dir);
}

TEST(Cli, VerifyAndUsageErrors) {
    REQUIRE_CLI();
    const auto v = dapoctl("verify --suite jensen --instances 10");
    EXPECT_EQ(v.code, 0) << v.out;
    EXPECT_NE(v.out.find("PASS jensen_mass_at_least_one"), std::string::npos);
    EXPECT_EQ(dapoctl("verify --suite nope").code, 2);
    EXPECT_EQ(dapoctl("frobnicate").code, 2);
}

TEST(Cli, RunThenReport) {
    REQUIRE_CLI();
    if (env_or_skip("DAPO_DATA").empty()) GTEST_SKIP() << "DAPO_DATA not set";
    const auto dir = fresh_dir("cli_run");
    const auto run = dapoctl("--config '" + data_file("t2_exact.json") + "' --out '" + dir.string() + "' run");
    EXPECT_EQ(run.code, 0) << run.out;
    EXPECT_NE(run.out.find("manifest"), std::string::npos);
    const auto rep = dapoctl("report '" + dir.string() + "'");
    EXPECT_EQ(rep.code, 0) << rep.out;
    EXPECT_EQ(dapoctl("report '" + (dir / "nowhere").string() + "'").code, 2);

    write(dir / "bad.json", R"({"mdp":{"builtin":"t2"},"iterations":0})");
    EXPECT_EQ(dapoctl("run '" + (dir / "bad.json").string() + "'").code, 2);
    fs::remove_all(dir);
}
