#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "fixture.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

// Runs the CLI through the shell; `env` is prepended verbatim.
Result run_cli(const std::string& args, const std::string& env = {}) {
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" + std::string(KBC_CLI_PATH) + "' " + args + " 2>&1";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = kbc::testing::scratch_dir("cli");
        manifest = kbc::testing::write_fixture(dir / "fixture");
    }
    fs::path dir;
    fs::path manifest;
};

}  // namespace

TEST(CliHelp, EveryFlagNamesItsEnvOverride) {
    const std::regex flag_line(R"(^\s+(-\w,)?--[\w-]+)");
    for (const char* sub : {"", "complete", "simulate", "evaluate", "extract", "rank", "report", "replay"}) {
        const auto r = run_cli(std::string(sub) + " --help");
        EXPECT_EQ(r.code, 0) << sub;
        std::istringstream lines(r.out);
        std::string line;
        int flags = 0;
        while (std::getline(lines, line)) {
            if (!std::regex_search(line, flag_line)) continue;
            if (line.find("--help") != std::string::npos || line.find("--version") != std::string::npos) continue;
            ++flags;
            EXPECT_NE(line.find("(Env:KB_"), std::string::npos) << sub << ": " << line;
        }
        if (*sub) EXPECT_GT(flags, 0) << sub;
    }
}

TEST(CliHelp, CoreOverridesAreListed) {
    const auto r = run_cli("complete --help");
    for (const char* env : {"KB_CHAT_URL", "KB_EMBED_URL", "KB_IMAGE_URL", "KB_API_KEY"})
        EXPECT_NE(r.out.find(env), std::string::npos) << env;
    for (const char* flag : {"--eta", "--candidates", "--object-count", "--graph-mode", "--weights"})
        EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
    EXPECT_EQ(run_cli("simulate --manifest " + q(manifest) + " --eta 2").code, 2);
    EXPECT_EQ(run_cli("simulate --manifest " + q(manifest) + " --bogus").code, 2);
    EXPECT_EQ(run_cli("simulate").code, 2);
    EXPECT_EQ(run_cli("complete --mock --manifest " + q(manifest) + " --weights 1,2").code, 2);
    EXPECT_EQ(run_cli("complete --mock --manifest " + q(manifest) + " --graph-mode other").code, 2);
    EXPECT_EQ(run_cli("simulate --manifest " + q(dir / "absent.json")).code, 2);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
    std::ofstream(dir / "broken.json") << "{ nope";
    EXPECT_EQ(run_cli("simulate --manifest " + q(dir / "broken.json")).code, 1);
}

TEST_F(Cli, SimulateWritesRoundedMask) {
    const auto r = run_cli("simulate --manifest " + q(manifest) + " --eta 0.7 --seed 3 --out " + q(dir / "mask.json"));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto mask = json::parse(slurp(dir / "mask.json"));
    EXPECT_EQ(mask["entries"].size(), 6u);
    const auto again = run_cli("simulate --manifest " + q(manifest) + " --eta 0.7 --seed 3");
    EXPECT_EQ(json::parse(again.out), mask);
}

TEST_F(Cli, EnvironmentOverridesFlagsDefaults) {
    const auto r = run_cli("simulate --manifest " + q(manifest) + " --seed 3", "KB_ETA=0.25");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(json::parse(r.out)["entries"].size(), 2u);
}

TEST_F(Cli, CompleteIsReproducibleAndReplays) {
    const std::string common = "complete --mock --manifest " + q(manifest) + " --eta 0.5 --seed 7 --out " + q(dir / "runs");
    const auto a = run_cli(common + " --run-id a");
    const auto b = run_cli(common + " --run-id b");
    ASSERT_EQ(a.code, 0) << a.out;
    ASSERT_EQ(b.code, 0) << b.out;
    EXPECT_EQ(slurp(dir / "runs/a/scores.csv"), slurp(dir / "runs/b/scores.csv"));
    const auto rep = run_cli("replay --run " + q(dir / "runs/a"));
    EXPECT_EQ(rep.code, 0) << rep.out;

    const auto ranked = run_cli("rank --mock --run " + q(dir / "runs/a"));
    ASSERT_EQ(ranked.code, 0) << ranked.out;
    for (const auto& o : json::parse(ranked.out)) EXPECT_EQ(o["best"], o["stored_best"]) << o["sample_id"];

    // an explicit run id is never rewritten
    const auto c = run_cli(common + " --run-id a");
    EXPECT_EQ(c.code, 1) << c.out;
    EXPECT_NE(c.out.find("RunExists"), std::string::npos);
    EXPECT_EQ(slurp(dir / "runs/a/scores.csv"), slurp(dir / "runs/b/scores.csv"));
}

TEST_F(Cli, UnreachableChatExitsOne) {
    const auto r = run_cli("complete --mock --chat-url http://127.0.0.1:9 --manifest " + q(manifest) +
                       " --eta 0.25 --seed 7 --out " + q(dir / "runs") + " --run-id down");
    EXPECT_EQ(r.code, 1) << r.out;
    EXPECT_NE(r.out.find("completed 0 of"), std::string::npos) << r.out;
}

TEST_F(Cli, EvaluateAndReport) {
    const auto m = kbc::testing::fixture_manifest();
    std::ofstream pred(dir / "pred.csv");
    pred << "sample_id";
    for (const auto& l : m.label_names) pred << "," << l;
    pred << "\n";
    for (const auto& s : m.samples) {
        pred << s.id;
        for (auto v : s.labels) pred << "," << (v ? "0.9" : "0.1");
        pred << "\n";
    }
    pred.close();
    const auto ev = run_cli("evaluate --pred " + q(dir / "pred.csv") + " --manifest " + q(manifest) +
                        " --eta 0.5 --seed 7 --out " + q(dir / "eval.json"));
    ASSERT_EQ(ev.code, 0) << ev.out;
    const auto j = json::parse(slurp(dir / "eval.json"));
    EXPECT_DOUBLE_EQ(j["f1"].get<double>(), 100.0);
    EXPECT_DOUBLE_EQ(j["map"].get<double>(), 100.0);
    const auto rep = run_cli("report " + q(dir / "eval.json"));
    ASSERT_EQ(rep.code, 0) << rep.out;
    EXPECT_NE(rep.out.find("| 7 | 100.00 | 100.00 | - |"), std::string::npos) << rep.out;
}

TEST_F(Cli, ExtractPrintsGraphs) {
    const auto r = run_cli("extract --mock --manifest " + q(manifest) + " --sample s02");
    ASSERT_EQ(r.code, 0) << r.out;
    const auto j = json::parse(r.out);
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0]["sample_id"], "s02");
}
