#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "test_support.hpp"

namespace {

int run(const std::string& args, const std::filesystem::path& log) {
    const std::string cmd = std::string("\"") + AXN_CLI_PATH + "\" " + args + " 2>\"" + log.string() + "\" >/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("pipeline stages, reruns and exit codes") {
    axn::test::TempDir dir("cli");
    write(dir / "cfg.json", R"({"seed": 2, "corpus": {"synthetic": {"n_train": 60, "n_test": 20, "n_items": 200,
                                 "dim": 8, "rank": 4}}, "gbuild": {"kd": 20}, "mf": {"epochs": 3},
                                 "search": {"budget": 30, "k": 5}})");
    const auto log = dir / "log.txt";
    REQUIRE(run("pipeline --config " + (dir / "cfg.json").string() + " --out " + (dir / "out").string(), log) == 0);
    for (const char* f : {"report.csv", "report.json", "results.json", "g.axng", "gold.json"})
        CHECK(std::filesystem::exists(dir / "out" / f));
    CHECK(slurp(log).find("stage=eval status=done") != std::string::npos);

    SUBCASE("rerun skips every stage") {
        REQUIRE(run("pipeline --config " + (dir / "cfg.json").string() + " --out " + (dir / "out").string(), log) == 0);
        const auto text = slurp(log);
        CHECK(text.find("status=done") == std::string::npos);
        CHECK(text.find("stage=eval status=skipped") != std::string::npos);
    }
    SUBCASE("a new seed reruns and changes the config hash") {
        const auto before = slurp(dir / "out" / "report.json");
        REQUIRE(run("pipeline --seed 3 --config " + (dir / "cfg.json").string() + " --out " + (dir / "out").string(),
                    log) == 0);
        CHECK(slurp(log).find("stage=corpus status=done") != std::string::npos);
        CHECK(slurp(dir / "out" / "report.json") != before);
    }
    SUBCASE("--force reruns") {
        REQUIRE(run("pipeline --force --config " + (dir / "cfg.json").string() + " --out " + (dir / "out").string(),
                    log) == 0);
        CHECK(slurp(log).find("stage=corpus status=done") != std::string::npos);
    }
}

TEST_CASE("configuration errors exit with 2 before any work") {
    axn::test::TempDir dir("cli_bad");
    const auto log = dir / "log.txt";
    write(dir / "lambda.json", R"({"search": {"lambda": 1.5}})");
    CHECK(run("pipeline --config " + (dir / "lambda.json").string() + " --out " + (dir / "out").string(), log) == 2);
    CHECK_FALSE(std::filesystem::exists(dir / "out"));
    write(dir / "unknown.json", R"({"gbuild": {"kd": 10, "surprise": true}})");
    CHECK(run("pipeline --config " + (dir / "unknown.json").string() + " --out " + (dir / "out").string(), log) == 2);
    CHECK(run("no-such-command", log) == 2);
    write(dir / "ids.json", "[0]");
    CHECK(run("search --items " + (dir / "ids.json").string() + " --scorer bogus:x --queries " +
                  (dir / "ids.json").string(),
              log) == 2);
}

TEST_CASE("runtime failures exit with 1") {
    axn::test::TempDir dir("cli_fail");
    const auto log = dir / "log.txt";
    write(dir / "not_binary.axne", "hello");
    write(dir / "ids.json", "[0]");
    CHECK(run("search --items " + (dir / "not_binary.axne").string() + " --scorer synth:x --queries " +
                  (dir / "ids.json").string(),
              log) == 1);
}

TEST_CASE("convert round trips a sparse matrix") {
    axn::test::TempDir dir("cli_convert");
    const auto log = dir / "log.txt";
    write(dir / "g.csv", "query_id,item_id,score\n0,1,0.5\n2,0,-1.25\n");
    REQUIRE(run("convert --in " + (dir / "g.csv").string() + " --out " + (dir / "g.axng").string(), log) == 0);
    REQUIRE(run("convert --in " + (dir / "g.axng").string() + " --out " + (dir / "back.csv").string(), log) == 0);
    CHECK(slurp(dir / "back.csv") == slurp(dir / "g.csv"));
}
