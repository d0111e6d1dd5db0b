#include "support.hpp"

#include "rankcell/cli.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace rankcell;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string p(const fs::path& path) { return path.string(); }

}

TEST_CASE("the pipeline runs end to end and manifests reproduce their artifacts") {
    test::TempDir dir("cli");
    const auto corpus = dir.path() / "corpus";
    const auto medians = dir.path() / "medians.tsv";
    const auto shards = dir.path() / "shards";
    const auto ckpt = dir.path() / "ckpt";

    auto r = cli({"ingest", "--synthetic", "--out", p(corpus), "--synthetic.n_cells", "48", "--synthetic.n_genes", "30", "--seed", "4"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(corpus / "matrix.txt"));
    CHECK(fs::exists(corpus / "manifest.json"));

    r = cli({"build-medians", "--corpus", p(corpus), "--out", p(medians)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(dir.path() / "medians.tsv.manifest.json"));

    r = cli({"tokenize", "--corpus", p(corpus), "--medians", p(medians), "--variant", "g", "--context-len", "16", "--out", p(shards)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(shards / "vocab.tsv"));

    const std::vector<std::string> train_flags{"--preset", "tiny", "--train.total_steps", "6", "--train.warmup_steps", "2",
                                               "--train.batch_size", "8", "--seed", "9"};
    auto args = std::vector<std::string>{"pretrain", "--variant", "g", "--shards", p(shards), "--out", p(ckpt)};
    args.insert(args.end(), train_flags.begin(), train_flags.end());
    r = cli(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(ckpt / "final.ckpt"));
    const auto log = read_file(ckpt / "loss_log.tsv");
    CHECK(log.starts_with("step\ttrain_loss\tval_loss\tlr\n"));
    CHECK(std::count(log.begin(), log.end(), '\n') == 7);

    const auto manifest = nlohmann::json::parse(read_file(ckpt / "manifest.json"));
    CHECK(manifest["seed"] == 9);
    CHECK(manifest["config"]["train"]["total_steps"] == 6);
    CHECK(manifest["inputs"].contains("shards"));

    // The manifest alone is enough to repeat the run.
    r = cli({"pretrain", "--config", p(ckpt / "manifest.json"), "--out", p(dir.path() / "again")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(read_file(dir.path() / "again" / "loss_log.tsv") == log);

    // Thread count does not change results.
    args[6] = p(dir.path() / "threads");
    args.insert(args.begin() + 1, {"--threads", "3"});
    r = cli(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(read_file(dir.path() / "threads" / "loss_log.tsv") == log);

    r = cli({"eval-loss", "--checkpoint", p(ckpt / "final.ckpt"), "--shards", p(shards), "--out", p(dir.path() / "eval.json")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(nlohmann::json::parse(read_file(dir.path() / "eval.json")).contains("total"));

    r = cli({"embed", "--checkpoint", p(ckpt / "final.ckpt"), "--shards", p(shards), "--out", p(dir.path() / "emb.tsv")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto emb = read_file(dir.path() / "emb.tsv");
    CHECK(std::count(emb.begin(), emb.end(), '\n') == 49);

    r = cli({"report", "--scaling", p(ckpt / "final.ckpt"), "--out", p(dir.path() / "reports")});
    CHECK(r.code == 2);
    CHECK(r.err.find("no validation loss") != std::string::npos);
}

TEST_CASE("fit-scaling reads points and writes the fit") {
    test::TempDir dir("cli-fit");
    const std::vector<std::pair<double, double>> pts{{1e5, 14.95 * std::pow(1e5, -0.1)}, {1e6, 14.95 * std::pow(1e6, -0.1)}};
    write_scaling_points(dir.path() / "pts.tsv", pts);
    const auto r = cli({"fit-scaling", "--points", p(dir.path() / "pts.tsv"), "--out", p(dir.path() / "fit.json")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto fit = nlohmann::json::parse(read_file(dir.path() / "fit.json"));
    CHECK(fit["a"].get<double>() == doctest::Approx(14.95));
    CHECK(fit["b"].get<double>() == doctest::Approx(-0.1));
}

TEST_CASE("benchmark baseline on an ingested corpus") {
    test::TempDir dir("cli-bench");
    const auto corpus = dir.path() / "corpus";
    auto r = cli({"ingest", "--synthetic", "--out", p(corpus), "--synthetic.n_cells", "300", "--synthetic.n_donors", "12", "--seed", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = cli({"benchmark", "--task", "diseases", "--mode", "baseline", "--corpus", p(corpus), "--out", p(dir.path() / "rep"),
             "--benchmark.top_genes", "20", "--benchmark.seeds", "1", "--benchmark.probe_steps", "50"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto metrics = read_file(dir.path() / "rep" / "metrics.tsv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 4);
    CHECK(fs::exists(dir.path() / "rep" / "task.tsv"));
}

TEST_CASE("usage and data errors map to exit codes") {
    auto r = cli({"pretrain", "--no-such-flag"});
    CHECK(r.code == 1);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({}).code == 1);

    r = cli({"build-medians", "--corpus", "/nonexistent/rankcell", "--out", "/tmp/x.tsv"});
    CHECK(r.code == 2);

    r = cli({"pretrain", "--train.batch_sise", "3", "--shards", "/tmp"});
    CHECK(r.code == 1);
    CHECK(r.err.find("train.batch_sise") != std::string::npos);

    test::TempDir dir("cli-cfg");
    write_file(dir.path() / "bad.json", R"({"benchmark": {"folds": "three"}})");
    r = cli({"fit-scaling", "--config", p(dir.path() / "bad.json"), "--points", "x"});
    CHECK(r.code == 1);
    CHECK(r.err.find("benchmark.folds") != std::string::npos);

    write_file(dir.path() / "seeded.json", R"({"train": {"seed": 3}})");
    r = cli({"fit-scaling", "--config", p(dir.path() / "seeded.json"), "--points", "x"});
    CHECK(r.code == 1);
    CHECK(r.err.find("train.seed") != std::string::npos);
}

TEST_CASE("configuration JSON round-trips and overrides parse values") {
    PipelineConfig cfg;
    cfg.seed = 5;
    cfg.benchmark.folds = 4;
    cfg.paths.corpus = "c";
    const auto back = pipeline_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));

    auto j = to_json(cfg);
    apply_override(j, "train.max_lr", "2e-3");
    apply_override(j, "paths.corpus", "some/dir");
    apply_override(j, "benchmark.lr_candidates", "[0.1, 0.2]");
    const auto c = pipeline_config_from_json(j);
    CHECK(c.train.max_lr == 2e-3);
    CHECK(c.paths.corpus == "some/dir");
    CHECK(c.benchmark.lr_candidates == std::vector<double>{0.1, 0.2});

    cfg.model = nlohmann::json{{"preset", "tiny"}, {"n_layers", 3}};
    const auto model = resolve_model(cfg, 100);
    CHECK(model.n_layers == 3);
    CHECK(model.d_model == 16);
    CHECK(model.vocab_size == 100);
}
