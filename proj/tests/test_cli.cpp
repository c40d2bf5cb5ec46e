#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string out;
};

Run run(const std::string &args) {
    const std::string cmd = std::string(LORAMIX_CLI) + " " + args + " 2>/dev/null";
    Run r;
    FILE *p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::array<char, 4096> buf{};
    while (fgets(buf.data(), buf.size(), p)) r.out += buf.data();
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

}  // namespace

TEST_CASE("command line end to end") {
    const fs::path dir = fs::temp_directory_path() / "loramix_test_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto cfg = dir / "config.json";
    {
        std::ofstream f(cfg);
        f << nlohmann::json{{"n_per_domain", 40},
                            {"seed", 3},
                            {"head", {{"steps", 20}}},
                            {"phase1", {{"steps", 6}, {"batch_size", 8}}},
                            {"phase2", {{"steps", 4}, {"batch_size", 8}}}}
                 .dump();
    }
    const std::string c = " --config " + cfg.string();

    CHECK(run("").status != 0);
    CHECK(run("eval").status == 2);
    CHECK(run("gen-data --out " + (dir / "x").string() + " --n-per-domain abc").status == 2);
    CHECK(run("eval --checkpoint " + (dir / "missing").string()).status == 1);

    REQUIRE(run("gen-data" + c + " --out " + (dir / "data").string()).status == 0);
    CHECK(fs::exists(dir / "data" / "train.jsonl"));
    const std::string data = " --data " + (dir / "data").string();

    REQUIRE(run("train-experts" + c + data + " --out " + (dir / "p1").string()).status == 0);
    CHECK(fs::exists(dir / "p1" / "checkpoint" / "manifest.json"));
    CHECK(fs::exists(dir / "p1" / "run.json"));
    CHECK(run("train-router" + c + data + " --experts " + (dir / "p1" / "base").string() + " --out " +
              (dir / "bad").string())
              .status == 1);
    REQUIRE(run("train-router" + c + data + " --experts " + (dir / "p1" / "checkpoint").string() + " --out " +
                (dir / "p2").string())
                .status == 0);

    const std::string ck = " --checkpoint " + (dir / "p2" / "checkpoint").string();
    auto soft = run("eval" + ck + data + " --mode soft");
    auto all = run("eval" + ck + data + " --mode topk --topk 4");
    REQUIRE(soft.status == 0);
    CHECK(soft.out == all.out);
    CHECK(run("eval" + ck + data + " --topk 5").status == 1);
    auto parsed = nlohmann::json::parse(soft.out);
    CHECK(parsed.contains("pooled_accuracy"));

    REQUIRE(run("adapter export" + ck + " --expert 1 --out " + (dir / "b1").string()).status == 0);
    CHECK(fs::exists(dir / "b1" / "manifest"));
    CHECK(run("adapter export" + ck + " --expert 1 --out " + (dir / "b1").string()).status == 1);
    CHECK(run("adapter compose --base " + (dir / "p1" / "base").string() + " --bundle " +
              (dir / "b1").string() + " --out " + (dir / "composed").string())
              .status == 0);
    fs::remove_all(dir);
}
