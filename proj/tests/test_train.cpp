#include "support.hpp"

#include "rankcell/train.hpp"

#include <doctest.h>

#include <cmath>

using namespace rankcell;

namespace {

struct Run {
    test::Encoded enc;
    std::vector<TokenizedCell> train, val;
    ModelConfig model;
    TrainConfig cfg;
};

Run small_run(Variant variant = Variant::g) {
    SyntheticOptions o;
    o.n_cells = 48;
    o.n_genes = 24;
    o.n_donors = 4;
    o.seed = 13;
    Run r{test::encode_synthetic(o, variant, 16), {}, {}, {}, {}};
    r.train.assign(r.enc.cells.begin(), r.enc.cells.begin() + 40);
    r.val.assign(r.enc.cells.begin() + 40, r.enc.cells.end());
    r.model = preset_config("tiny", variant, r.enc.vocab.size(), 16);
    r.cfg.batch_size = 8;
    r.cfg.max_lr = 3e-3;
    r.cfg.warmup_steps = 3;
    r.cfg.total_steps = 12;
    r.cfg.eval_every = 4;
    r.cfg.eval_batch_size = 5;
    r.cfg.seed = 21;
    return r;
}

}

TEST_CASE("learning rate warms up linearly then decays to zero") {
    CHECK(lr_at(0, 100, 2000, 1e-3) == 0.0);
    CHECK(lr_at(50, 100, 2000, 1e-3) == doctest::Approx(5e-4));
    CHECK(lr_at(100, 100, 2000, 1e-3) == 1e-3);
    CHECK(lr_at(1050, 100, 2000, 1e-3) == doctest::Approx(5e-4));
    CHECK(lr_at(2000, 100, 2000, 1e-3) == 0.0);
    CHECK_THROWS_AS(lr_at(2001, 100, 2000, 1e-3), UsageError);
    CHECK(lr_at(7, 10, 10, 2.0) == doctest::Approx(1.4));
    const auto desk = TrainConfig::desk();
    CHECK(desk.warmup_steps == 100);
    CHECK(desk.total_steps == 2000);
    CHECK(desk.batch_size == 32);
}

TEST_CASE("AdamW follows a hand-computed trace") {
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    std::vector<double> p{1.0};
    std::vector<float> m{0.0f}, v{0.0f};

    const std::vector<double> g1{0.5};
    adamw_update<double>(p, g1, m, v, 1, 0.1, cfg, true);
    const double p1 = 0.99 - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p[0] == doctest::Approx(p1).epsilon(1e-12));

    const std::vector<double> g2{-0.25};
    adamw_update<double>(p, g2, m, v, 2, 0.1, cfg, true);
    const double m2 = 0.9 * static_cast<double>(0.05f) - 0.025;
    const double v2 = 0.999 * static_cast<double>(0.00025f) + 0.001 * 0.0625;
    const double step2 = 0.1 * (m2 / 0.19) / (std::sqrt(v2 / (1.0 - 0.999 * 0.999)) + 1e-8);
    CHECK(p[0] == doctest::Approx(p1 * 0.99 - step2).epsilon(1e-9));

    // No decay: the parameter only moves by the Adam step.
    std::vector<double> q{1.0};
    std::vector<float> mq{0.0f}, vq{0.0f};
    adamw_update<double>(q, g1, mq, vq, 1, 0.1, cfg, false);
    CHECK(q[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw_step refuses non-finite gradients") {
    const auto model = preset_config("tiny", Variant::g, 60, 8);
    auto params = init_params<float>(model, 1);
    std::vector<float> grads(params.data.size(), 0.0f);
    grads[3] = std::nanf("");
    AdamState state;
    CHECK_THROWS_AS(adamw_step<float>(params, grads, state, TrainConfig{}, 1e-3), DivergenceError);
}

TEST_CASE("training configs validate and round-trip through JSON") {
    auto cfg = TrainConfig::desk();
    cfg.max_lr = 7e-4;
    CHECK(train_config_from_json(to_json(cfg)) == cfg);
    CHECK_THROWS_WITH_AS(train_config_from_json(nlohmann::json{{"batch", 3}}), doctest::Contains("train.batch"), UsageError);
    cfg.batch_size = 0;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("batch_size"), UsageError);
}

TEST_CASE("loss logs round-trip with NaN validation entries") {
    std::vector<LossRecord> recs{{1, 5.25, std::nan(""), 1e-4}, {2, 4.0, 3.125, 2e-4}};
    const auto back = parse_loss_log(format_loss_log(recs));
    CHECK(back == recs);
}

TEST_CASE("identical seeds give bit-identical runs, and resume matches") {
    auto r = small_run();
    test::TempDir dir("train");
    const auto a = pretrain(r.train, r.val, r.enc.vocab, r.model, r.cfg, {dir.path() / "a", {}, {}, {}});
    const auto b = pretrain(r.train, r.val, r.enc.vocab, r.model, r.cfg);
    CHECK(a.finished);
    CHECK(a.checkpoint.history == b.checkpoint.history);
    CHECK(a.checkpoint.params.data == b.checkpoint.params.data);
    CHECK(read_file(dir.path() / "a" / "loss_log.tsv") == format_loss_log(b.checkpoint.history));
    CHECK(std::isfinite(a.checkpoint.best_val_loss));

    PretrainOptions first;
    first.out_dir = dir.path() / "b";
    first.stop_after = 5;
    const auto half = pretrain(r.train, r.val, r.enc.vocab, r.model, r.cfg, first);
    CHECK_FALSE(half.finished);
    CHECK(half.checkpoint.step == 5);
    PretrainOptions second;
    second.out_dir = dir.path() / "b";
    second.resume = dir.path() / "b" / "step-0000005.ckpt";
    const auto rest = pretrain(r.train, r.val, r.enc.vocab, r.model, r.cfg, second);
    CHECK(rest.finished);
    CHECK(rest.checkpoint.history == a.checkpoint.history);
    CHECK(rest.checkpoint.params.data == a.checkpoint.params.data);
    CHECK(rest.checkpoint.optimizer.m == a.checkpoint.optimizer.m);
    CHECK(read_file(dir.path() / "b" / "final.ckpt") == read_file(dir.path() / "a" / "final.ckpt"));

    auto other = r.cfg;
    other.seed = 22;
    const auto c = pretrain(r.train, r.val, r.enc.vocab, r.model, other);
    CHECK_FALSE(c.checkpoint.history == a.checkpoint.history);

    auto changed = r.cfg;
    changed.max_lr = 1e-3;
    CHECK_THROWS_AS(pretrain(r.train, r.val, r.enc.vocab, r.model, changed, second), UsageError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
    auto r = small_run(Variant::x);
    r.cfg.total_steps = 3;
    test::TempDir dir("ckpt");
    const auto res = pretrain(r.train, r.val, r.enc.vocab, r.model, r.cfg);
    save_checkpoint(dir.path() / "x.ckpt", res.checkpoint);
    const auto back = load_checkpoint(dir.path() / "x.ckpt");
    CHECK(back.params.config == res.checkpoint.params.config);
    CHECK(back.params.data == res.checkpoint.params.data);
    CHECK(back.optimizer.m == res.checkpoint.optimizer.m);
    CHECK(back.optimizer.v == res.checkpoint.optimizer.v);
    CHECK(back.optimizer.step == 3);
    CHECK(back.history == res.checkpoint.history);
    CHECK(back.vocab_genes == r.enc.vocab.gene_ids());
    CHECK(back.train == r.cfg);

    auto bytes = read_file(dir.path() / "x.ckpt");
    write_file(dir.path() / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "cut.ckpt"), DataError);
    bytes[0] = 'X';
    write_file(dir.path() / "magic.ckpt", bytes);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "magic.ckpt"), DataError);
}

TEST_CASE("an absurd learning rate is reported as divergence") {
    auto r = small_run();
    r.cfg.max_lr = 1e12;
    r.cfg.total_steps = 200;
    r.cfg.eval_every = 0;
    CHECK_THROWS_AS(pretrain(r.train, {}, r.enc.vocab, r.model, r.cfg), DivergenceError);
}

TEST_CASE("held-out loss is reproducible") {
    auto r = small_run();
    const auto params = init_params<float>(r.model, 4);
    const auto a = eval_heldout_loss(params, r.val, 99);
    const auto b = eval_heldout_loss(params, r.val, 99);
    CHECK(a.total == b.total);
    CHECK(a.total == doctest::Approx(a.mlm + a.cls));
    CHECK_THROWS_AS(eval_heldout_loss(params, {}, 99), DataError);
}

TEST_CASE("power-law fit recovers noiseless parameters") {
    const PowerLaw truth{14.95, -0.10};
    std::vector<std::pair<double, double>> pts;
    for (double n : {1e5, 5e5, 2e6, 1e7, 7e7}) {
        pts.emplace_back(n, truth(n));
    }
    const auto fit = fit_power_law(pts);
    CHECK(std::abs(fit.a - 14.95) < 1e-6);
    CHECK(std::abs(fit.b + 0.10) < 1e-6);
    CHECK_THROWS_AS(fit_power_law(std::span(pts).first(1)), DataError);
    std::vector<std::pair<double, double>> same{{10.0, 1.0}, {10.0, 2.0}};
    CHECK_THROWS_AS(fit_power_law(same), DataError);
    std::vector<std::pair<double, double>> neg{{10.0, 1.0}, {20.0, -2.0}};
    CHECK_THROWS_AS(fit_power_law(neg), DataError);
}
