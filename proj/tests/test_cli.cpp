#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aoar/cli.hpp"
#include "aoar/corpus.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
    int code = -1;
    std::string out;
    std::string err;
};

Invocation lab(std::vector<std::string> args) {
    std::ostringstream out, err;
    Invocation r;
    r.code = aoar::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

struct Workspace {
    fs::path root;
    Workspace() {
        root = fs::temp_directory_path() / ("aoar_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream c(root / "corpus.txt");
        for (int i = 0; i < 400; ++i) {
            c << "the quick brown fox jumps over the lazy dog " << i % 10 << ". ";
        }
    }
    ~Workspace() { fs::remove_all(root); }

    std::string write(const std::string& name, const json& j) const {
        std::ofstream(root / name) << j.dump();
        return (root / name).string();
    }
    std::string out() const { return (root / "runs").string(); }
    fs::path run(const std::string& name) const { return root / "runs" / name; }
};

std::string slurp(const fs::path& p) { return aoar::read_text_file(p); }

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "manifest.json")); }

json train_config(const Workspace& ws) {
    return {{"corpus", (ws.root / "corpus.txt").string()},
            {"model",
             {{"n_layers", 1}, {"d_model", 16}, {"n_heads", 2}, {"d_head", 8}, {"ctx_len", 16}, {"target_pe_dim", 8}}},
            {"train",
             {{"total_steps", 200},
              {"batch_tokens", 128},
              {"eval_interval", 100},
              {"eval_blocks", 4},
              {"learning_rate", 3e-3},
              {"ema_decays", {0.9}}}}};
}

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("help and usage errors") {
        const Invocation h = lab({"--help"});
        CHECK(h.code == aoar::cli::kExitOk);
        for (const char* sub : {"train", "eval", "sample", "bench", "count", "probe"}) {
            CHECK(h.out.find(sub) != std::string::npos);
        }
        CHECK(lab({"train", "--help"}).code == aoar::cli::kExitOk);
        CHECK(lab({}).code == aoar::cli::kExitConfig);
        CHECK(lab({"frobnicate"}).code == aoar::cli::kExitConfig);
        CHECK(lab({"count", "--no-such-flag"}).code == aoar::cli::kExitConfig);
    }

    TEST_CASE("count prints closed forms and the enumeration check") {
        Workspace ws;
        const Invocation r = lab({"count", "--n", "3", "--enumerate", "-o", ws.out(), "--run-name", "c3"});
        REQUIRE(r.code == 0);
        CHECK(r.out.find("order-invariant count     12") != std::string::npos);
        CHECK(r.out.find("order-dependent count     15") != std::string::npos);
        CHECK(r.out.find("oracle                    match") != std::string::npos);
        const json counts = json::parse(slurp(ws.run("c3") / "counts.json"));
        CHECK(counts["order_invariant"] == "12");
        const Invocation big = lab({"count", "--n", "10", "-o", ws.out()});
        CHECK(big.out.find("5120") != std::string::npos);
        CHECK(lab({"count", "--n", "9", "--enumerate", "-o", ws.out()}).code == aoar::cli::kExitConfig);
    }

    TEST_CASE("configuration errors and precedence") {
        Workspace ws;
        CHECK(lab({"count", "-c", ws.write("bad.json", {{"n", 3}, {"bogus", 1}}), "-o", ws.out()}).code ==
              aoar::cli::kExitConfig);
        std::ofstream(ws.root / "broken.json") << "{not json";
        CHECK(lab({"count", "-c", (ws.root / "broken.json").string(), "-o", ws.out()}).code == aoar::cli::kExitConfig);
        CHECK(lab({"count", "-c", (ws.root / "missing.json").string(), "-o", ws.out()}).code == aoar::cli::kExitIo);
        CHECK(lab({"eval", "--checkpoint", (ws.root / "none.ckpt").string(), "--corpus",
                   (ws.root / "corpus.txt").string(), "-o", ws.out()})
                  .code == aoar::cli::kExitIo);

        const std::string cfg = ws.write("n.json", {{"n", 4}});
        REQUIRE(lab({"count", "-c", cfg, "-o", ws.out(), "--run-name", "cfg"}).code == 0);
        REQUIRE(lab({"count", "-c", cfg, "--n", "5", "-o", ws.out(), "--run-name", "flag"}).code == 0);
        REQUIRE(lab({"count", "-o", ws.out(), "--run-name", "default"}).code == 0);
        CHECK(json::parse(slurp(ws.run("cfg") / "config.json"))["n"] == 4);
        CHECK(json::parse(slurp(ws.run("flag") / "config.json"))["n"] == 5);
        CHECK(json::parse(slurp(ws.run("default") / "config.json"))["n"] == 8);

        REQUIRE(lab({"count", "-o", ws.out(), "--run-name", "default"}).code == 0);
        CHECK(fs::exists(ws.run("default-1") / "manifest.json"));
        const json m = manifest(ws.run("default"));
        CHECK(m["status"] == "ok");
        CHECK(m["config_hash"] == manifest(ws.run("default-1"))["config_hash"]);
        CHECK(m["config_hash"].get<std::string>().size() == 16);
    }

    TEST_CASE("output root from the environment") {
        Workspace ws;
        const fs::path env_root = ws.root / "env_runs";
        ::setenv(aoar::cli::kOutputRootEnv, env_root.c_str(), 1);
        const Invocation r = lab({"count", "--n", "2", "--run-name", "e"});
        ::unsetenv(aoar::cli::kOutputRootEnv);
        REQUIRE(r.code == 0);
        CHECK(fs::exists(env_root / "e" / "manifest.json"));
    }

    TEST_CASE("order policy flag") {
        CHECK(aoar::cli::parse_policy_flag("uniform")["kind"] == "uniform");
        CHECK(aoar::cli::parse_policy_flag("hybrid:0.25")["identity_weight"] == 0.25);
        const json b = aoar::cli::parse_policy_flag("blockwise:4:7");
        CHECK(b["block_size"] == 4);
        CHECK(b["seed"] == 7);
        CHECK(aoar::cli::parse_policy_flag("fixed_random:9")["seed"] == 9);
        CHECK_THROWS(aoar::cli::parse_policy_flag("spiral"));
        CHECK_THROWS(aoar::cli::parse_policy_flag("hybrid:abc"));
        CHECK_THROWS(aoar::cli::parse_policy_flag("hybrid:1.5"));
    }

    TEST_CASE("train, eval, sample, bench and probe runs") {
        Workspace ws;
        const std::string cfg = ws.write("train.json", train_config(ws));
        for (const char* name : {"a", "b"}) {
            const Invocation r =
                lab({"train", "-c", cfg, "--deterministic", "true", "--seed", "5", "-o", ws.out(), "--run-name", name});
            REQUIRE_MESSAGE(r.code == 0, r.err);
        }
        const fs::path a = ws.run("a");
        CHECK(slurp(a / "checkpoints/final.ckpt") == slurp(ws.run("b") / "checkpoints/final.ckpt"));
        CHECK(slurp(a / "metrics.jsonl") != "");
        CHECK(fs::exists(a / "checkpoints/final.ema_0.9.ckpt"));
        const json m = manifest(a);
        CHECK(m["status"] == "ok");
        CHECK(m["metrics"]["step"] == 200);
        CHECK(m["metrics"]["val_anyorder_nll"].get<double>() < std::log(27.0));
        int records = 0;
        std::istringstream lines(slurp(a / "metrics.jsonl"));
        for (std::string line; std::getline(lines, line);) {
            ++records;
        }
        CHECK(records == 3);

        const std::string ckpt = (a / "checkpoints/final.ckpt").string();
        const std::string corpus = (ws.root / "corpus.txt").string();
        for (const char* name : {"e1", "e2"}) {
            const Invocation r = lab({"eval", "--checkpoint", ckpt, "--corpus", corpus, "--modes",
                                      "l2r,any_order,ensemble", "--ensemble", "1,4", "--blocks", "3", "-o", ws.out(),
                                      "--run-name", name});
            REQUIRE_MESSAGE(r.code == 0, r.err);
        }
        const std::string csv = slurp(ws.run("e1") / "report.csv");
        CHECK(csv == slurp(ws.run("e2") / "report.csv"));
        CHECK(csv.find("any_order_ensemble(4)") != std::string::npos);
        CHECK(fs::exists(ws.run("e1") / "ensemble.svg"));

        const Invocation s = lab({"sample", "--checkpoint", ckpt, "--n", "16", "--steps", "4", "--num-samples", "2",
                                  "-o", ws.out(), "--run-name", "s"});
        REQUIRE_MESSAGE(s.code == 0, s.err);
        std::istringstream samples(slurp(ws.run("s") / "samples.txt"));
        std::string first;
        std::getline(samples, first);
        CHECK(first.size() == 16);
        CHECK(fs::exists(ws.run("s") / "trace.jsonl"));
        CHECK(lab({"sample", "--checkpoint", ckpt, "--n", "17", "-o", ws.out()}).code == aoar::cli::kExitConfig);

        const Invocation b = lab({"bench", "--checkpoint", ckpt, "--n-grid", "4,8,16", "--repeats", "1", "--warmup",
                                  "0", "-o", ws.out(), "--run-name", "bn"});
        REQUIRE_MESSAGE(b.code == 0, b.err);
        const json summary = json::parse(slurp(ws.run("bn") / "summary.json"));
        CHECK(summary["slopes"].contains("decoder_cached"));
        CHECK(summary["speedup_at_max_n"]["n"] == 16);

        const Invocation p = lab({"probe", "--checkpoint", ckpt, "--block-len", "4", "--budget", "400", "-o",
                                  ws.out(), "--run-name", "p"});
        REQUIRE_MESSAGE(p.code == 0, p.err);
        const json probe = json::parse(slurp(ws.run("p") / "probe.json"));
        CHECK(probe.contains("z_score"));

        json resume = train_config(ws);
        resume["init_checkpoint"] = ckpt;
        resume["train"]["total_steps"] = 10;
        resume["train"]["eval_interval"] = 10;
        const Invocation r = lab({"train", "-c", ws.write("resume.json", resume), "-o", ws.out(), "--run-name", "r"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        CHECK(manifest(ws.run("r"))["parent_manifest"] == fs::absolute(a / "manifest.json").string());
    }

    TEST_CASE("divergence exits with the numerical code") {
        Workspace ws;
        json cfg = train_config(ws);
        cfg["train"]["learning_rate"] = 1e30;
        cfg["train"]["weight_decay"] = 0.0;
        cfg["train"]["warmup_fraction"] = 0.0;
        const Invocation r = lab({"train", "-c", ws.write("t.json", cfg), "-o", ws.out(), "--run-name", "d"});
        CHECK(r.code == aoar::cli::kExitNumerical);
        CHECK(r.err.find("step") != std::string::npos);
        CHECK(manifest(ws.run("d"))["status"] == "failed");
    }
}
