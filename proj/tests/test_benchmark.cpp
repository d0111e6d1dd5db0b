#include "oracles.hpp"
#include "support.hpp"

#include "rankcell/benchmark.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace rankcell;

namespace {

// One task over `labels.size()` cells with donor i%n_donors, split into k folds by donor.
EvalTask manual_task(const std::vector<std::uint32_t>& labels, std::size_t n_classes, std::size_t k = 3) {
    EvalTask task;
    for (std::size_t c = 0; c < n_classes; ++c) {
        task.label_names.push_back("c" + std::to_string(c));
    }
    const std::size_t n_donors = 5 * k;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        task.cells.push_back({0, i, "cell" + std::to_string(i), "d" + std::to_string(i % n_donors), labels[i]});
    }
    for (std::size_t f = 0; f < k; ++f) {
        Fold fold;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const auto group = (i % n_donors) % k;
            if (group == f) {
                fold.test.push_back(i);
            } else if (group == (f + 1) % k && (i % n_donors) < k) {
                fold.val.push_back(i);
            } else {
                fold.train.push_back(i);
            }
        }
        task.folds.push_back(std::move(fold));
    }
    check_donor_disjoint(task);
    return task;
}

std::vector<std::uint32_t> balanced_labels(std::size_t n) {
    std::vector<std::uint32_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<std::uint32_t>((i / 15) % 2);
    }
    return y;
}

// Features where column 0 is the label plus noise of the given size and the rest is pure noise.
std::vector<double> noisy_features(const std::vector<std::uint32_t>& y, std::size_t dim, double noise, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(y.size() * dim);
    for (std::size_t i = 0; i < y.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            x[i * dim + j] = (j == 0 ? 2.0 * y[i] - 1.0 : 0.0) + noise * rng.normal();
        }
    }
    return x;
}

}

TEST_CASE("evaluate reproduces the worked example") {
    const std::vector<std::uint32_t> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const auto m = evaluate(pred, truth, 2);
    CHECK(m.accuracy == 0.75);
    CHECK(m.per_class[0].f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.per_class[1].f1 == doctest::Approx(0.8));
    CHECK(m.weighted_f1 == doctest::Approx(0.73333333333));
    const auto perfect = evaluate(truth, truth, 3);
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.weighted_f1 == 1.0);
    CHECK(perfect.per_class[2].f1 == 0.0);
    CHECK(perfect.per_class[2].support == 0);
    CHECK_THROWS_AS(evaluate(std::vector<std::uint32_t>{0}, truth, 2), DataError);
    CHECK_THROWS_AS(evaluate(std::vector<std::uint32_t>{0, 0, 0, 5}, truth, 2), DataError);
}

TEST_CASE("evaluate matches the confusion-matrix oracle exactly") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto k = static_cast<int>(2 + rng.below(6));
        const auto n = static_cast<std::size_t>(1 + rng.below(60));
        std::vector<std::uint32_t> y(n), p(n);
        std::vector<int> yi(n), pi(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(k)));
            p[i] = rng.uniform() < 0.5 ? y[i] : static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(k)));
            yi[i] = static_cast<int>(y[i]);
            pi[i] = static_cast<int>(p[i]);
        }
        const auto m = evaluate(p, y, static_cast<std::size_t>(k));
        const auto o = test::oracle_metrics(yi, pi, k);
        CHECK(m.accuracy == o.accuracy);
        CHECK(m.weighted_f1 == o.weighted_f1);
    }
}

TEST_CASE("summaries use the sample standard deviation") {
    const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    const auto s = summarize(v);
    CHECK(s.mean == 2.5);
    CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(s.n == 4);
    CHECK(summarize(std::vector<double>{0.7}).sd == 0.0);
}

TEST_CASE("disease folds are donor-disjoint, balanced and deterministic") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        SyntheticOptions o;
        o.n_cells = 300 + 20 * seed;
        o.n_donors = 9 + seed;
        o.seed = seed;
        const auto m = gen_synthetic_corpus(o);
        EvalTask task;
        try {
            task = build_disease_folds(m, 3, seed);
        } catch (const DataError&) {
            continue;
        }
        CHECK(task.folds.size() == 3);
        std::set<std::string> tested;
        for (const auto& f : task.folds) {
            for (const auto* split : {&f.train, &f.val, &f.test}) {
                std::size_t diseased = 0;
                for (auto i : *split) {
                    diseased += task.cells[i].label;
                }
                CHECK(2 * diseased == split->size());
            }
            std::set<std::string> here;
            for (auto i : f.test) {
                here.insert(task.cells[i].donor_id);
            }
            for (const auto& d : here) {
                CHECK(tested.insert(d).second);
            }
            CHECK_FALSE(f.test.empty());
        }
        const auto again = build_disease_folds(m, 3, seed);
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(again.folds[f].train == task.folds[f].train);
            CHECK(again.folds[f].test == task.folds[f].test);
        }
    }
}

TEST_CASE("too few donors per class is an error") {
    SyntheticOptions o;
    o.n_cells = 50;
    o.n_donors = 3;
    o.seed = 1;
    CHECK_THROWS_WITH_AS(build_disease_folds(gen_synthetic_corpus(o), 3, 0), doctest::Contains("fewer donors than folds"), DataError);
}

TEST_CASE("the donor task splits 70/30 by donor and rejects overlap") {
    SyntheticOptions o;
    o.n_cells = 1000;
    o.n_donors = 100;
    o.seed = 2;
    const auto m = gen_synthetic_corpus(o);
    o.seed = 3;
    o.n_donors = 20;
    o.n_cells = 200;
    auto held = gen_synthetic_corpus(o);
    // Same generator ids would collide; rename the held-out donors.
    std::vector<CellMeta> metas(held.cells().begin(), held.cells().end());
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (std::size_t i = 0; i < held.n_cells(); ++i) {
        metas[i].donor_id = "H" + metas[i].donor_id;
        metas[i].cell_id = "H" + metas[i].cell_id;
        const auto c = held.cell(i);
        idx.insert(idx.end(), c.genes.begin(), c.genes.end());
        counts.insert(counts.end(), c.counts.begin(), c.counts.end());
        offsets.push_back(idx.size());
    }
    const CountMatrix renamed({held.genes().begin(), held.genes().end()}, metas, offsets, idx, counts);

    const auto task = build_donor_task(m, renamed, 0.70, 5);
    REQUIRE(task.folds.size() == 1);
    std::set<std::string> tr, va, te;
    for (auto i : task.folds[0].train) {
        tr.insert(task.cells[i].donor_id);
    }
    for (auto i : task.folds[0].val) {
        va.insert(task.cells[i].donor_id);
    }
    for (auto i : task.folds[0].test) {
        te.insert(task.cells[i].donor_id);
        CHECK(task.cells[i].source == 1);
    }
    CHECK(tr.size() == 70);
    CHECK(va.size() == 30);
    CHECK(te.size() == 20);
    CHECK_NOTHROW(check_donor_disjoint(task));
    CHECK_THROWS_WITH_AS(build_donor_task(m, held, 0.70, 5), doctest::Contains("appears in both"), DataError);

    EvalTask broken = task;
    broken.folds[0].val.push_back(broken.folds[0].train.front());
    CHECK_THROWS_AS(check_donor_disjoint(broken), DataError);
}

TEST_CASE("task files round-trip") {
    test::TempDir dir("task");
    SyntheticOptions o;
    o.n_cells = 400;
    o.n_donors = 12;
    o.seed = 4;
    const auto task = build_disease_folds(gen_synthetic_corpus(o), 3, 1);
    write_task_file(dir.path() / "task.tsv", task);
    const auto back = read_task_file(dir.path() / "task.tsv", task.kind, task.cells, task.label_names);
    REQUIRE(back.folds.size() == task.folds.size());
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        CHECK(back.folds[f].train == task.folds[f].train);
        CHECK(back.folds[f].val == task.folds[f].val);
        CHECK(back.folds[f].test == task.folds[f].test);
    }
    CHECK(back.labels() == task.labels());
}

TEST_CASE("hvg selection: engineered genes win, constant genes lose") {
    // 400 background genes with mildly noisy counts spread over a wide range of levels. Genes
    // 50..59 alternate between 0 and a level that differs per gene, so each one sits in a
    // different mean bin surrounded by quiet background genes. Gene 399 is constant.
    const std::size_t n_genes = 400, n_cells = 120;
    Rng rng(3);
    std::vector<GeneInfo> genes;
    std::vector<double> level(n_genes);
    for (std::size_t g = 0; g < n_genes; ++g) {
        genes.push_back({"G" + std::to_string(g), "S"});
        level[g] = std::exp(std::log(2.0) + std::log(300.0) * rng.uniform());
    }
    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (std::size_t i = 0; i < n_cells; ++i) {
        cells.push_back({"c" + std::to_string(i), "d", "ds", {}});
        for (std::uint32_t g = 0; g < n_genes; ++g) {
            auto n = static_cast<std::uint32_t>(std::max(1.0, std::round(level[g] * (1.0 + 0.05 * rng.normal()))));
            if (g >= 50 && g < 60) {
                n = (i + g) % 2 == 0 ? 0 : static_cast<std::uint32_t>(std::lround(8.0 * std::pow(2.0, g - 50.0)));
            }
            if (g == 399) {
                n = 7;
            }
            if (n > 0) {
                idx.push_back(g);
                counts.push_back(n);
            }
        }
        offsets.push_back(idx.size());
    }
    const CountMatrix m(genes, cells, offsets, idx, counts);
    auto top = hvg_select(m, 10);
    std::sort(top.begin(), top.end());
    std::vector<std::size_t> expected(10);
    std::iota(expected.begin(), expected.end(), 50);
    CHECK(top == expected);

    auto all = hvg_select(m, n_genes);
    CHECK(all.size() == n_genes);
    std::vector<std::size_t> sorted_all = all;
    std::sort(sorted_all.begin(), sorted_all.end());
    CHECK(std::adjacent_find(sorted_all.begin(), sorted_all.end()) == sorted_all.end());
    CHECK_THROWS_AS(hvg_select(m, n_genes + 1), UsageError);
}

TEST_CASE("hvg selection ignores cell order and count rescaling") {
    SyntheticOptions o;
    o.n_cells = 150;
    o.n_genes = 60;
    o.seed = 8;
    const auto m = gen_synthetic_corpus(o);
    const auto base = hvg_select(m, 20);
    std::vector<std::size_t> order(m.n_cells());
    std::iota(order.rbegin(), order.rend(), 0);
    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (auto i : order) {
        cells.push_back(m.meta(i));
        const auto c = m.cell(i);
        for (std::size_t k = 0; k < c.size(); ++k) {
            idx.push_back(c.genes[k]);
            counts.push_back(c.counts[k] * (1 + static_cast<std::uint32_t>(i % 4)));
        }
        offsets.push_back(idx.size());
    }
    const CountMatrix other({m.genes().begin(), m.genes().end()}, cells, offsets, idx, counts);
    CHECK(hvg_select(other, 20) == base);
}

TEST_CASE("baseline gene selection never sees test cells") {
    SyntheticOptions o;
    o.n_cells = 600;
    o.n_donors = 12;
    o.n_genes = 40;
    o.seed = 6;
    const auto base = gen_synthetic_corpus(o);
    const auto task = build_disease_folds(base, 3, 2);
    // Adversarial gene: expressed only in one test donor of fold 0.
    const auto leak_donor = task.cells[task.folds[0].test.front()].donor_id;
    std::vector<GeneInfo> genes(base.genes().begin(), base.genes().end());
    genes.push_back({"LEAK", "LEAK"});
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (std::size_t i = 0; i < base.n_cells(); ++i) {
        const auto c = base.cell(i);
        idx.insert(idx.end(), c.genes.begin(), c.genes.end());
        counts.insert(counts.end(), c.counts.begin(), c.counts.end());
        if (base.meta(i).donor_id == leak_donor && i % 2 == 0) {
            idx.push_back(static_cast<std::uint32_t>(genes.size() - 1));
            counts.push_back(5000);
        }
        offsets.push_back(idx.size());
    }
    const CountMatrix m(genes, {base.cells().begin(), base.cells().end()}, offsets, idx, counts);

    BaselineOptions opts;
    opts.top_genes = 5;
    opts.seeds = 1;
    opts.l2_candidates = {1e-2};
    const CountMatrix* sources[] = {&m};
    const auto res = train_baseline_logreg(sources, task, opts);
    REQUIRE(res.fold_genes.size() == 3);
    for (std::size_t f = 0; f < 3; ++f) {
        std::vector<std::size_t> fit_rows;
        for (auto i : task.folds[f].train) {
            fit_rows.push_back(task.cells[i].row);
        }
        for (auto i : task.folds[f].val) {
            fit_rows.push_back(task.cells[i].row);
        }
        auto all_rows = fit_rows;
        for (auto i : task.folds[f].test) {
            all_rows.push_back(task.cells[i].row);
        }
        std::sort(fit_rows.begin(), fit_rows.end());
        std::sort(all_rows.begin(), all_rows.end());
        CHECK(res.fold_genes[f] == hvg_select(m, 5, fit_rows));
        if (f == 0) {
            CHECK(std::ranges::find(res.fold_genes[f], genes.size() - 1) == res.fold_genes[f].end());
            // With test rows included the gene would climb the ranking; without them it never varies.
            const auto rank = [&](std::span<const std::size_t> rows) {
                const auto order = hvg_select(m, m.n_genes(), rows);
                return std::ranges::find(order, genes.size() - 1) - order.begin();
            };
            CHECK(rank(fit_rows) == static_cast<std::ptrdiff_t>(m.n_genes() - 1));
            CHECK(rank(all_rows) < rank(fit_rows));
        }
    }
}

TEST_CASE("logistic probe: separable, shuffled and constant features") {
    const auto y = balanced_labels(600);
    const auto task = manual_task(y, 2);
    ProbeOptions opts;
    opts.lr_candidates = {0.05};
    opts.seeds = 3;

    const auto sep = linear_probe(noisy_features(y, 4, 0.1, 1), 4, task, opts);
    CHECK(sep.runs.size() == 9);
    CHECK(sep.accuracy.mean == 1.0);
    for (const auto& r : sep.runs) {
        CHECK(r.selected == 0.05);
    }

    auto shuffled_y = y;
    Rng(9).shuffle(shuffled_y);
    const auto shuf = linear_probe(noisy_features(shuffled_y, 4, 0.1, 1), 4, manual_task(y, 2), opts);
    CHECK(std::abs(shuf.accuracy.mean - 0.5) < 0.08);

    const std::vector<double> constant(600 * 3, 1.5);
    const auto flat = linear_probe(constant, 3, task, opts);
    for (const auto& r : flat.runs) {
        std::size_t ones = 0;
        for (auto i : task.folds[r.fold].test) {
            ones += y[i];
        }
        const double n = static_cast<double>(task.folds[r.fold].test.size());
        const double majority = std::max(static_cast<double>(ones), n - static_cast<double>(ones)) / n;
        CHECK(r.metrics.accuracy <= majority);
        CHECK(r.metrics.accuracy >= 1.0 - majority);
    }
}

TEST_CASE("baseline classifier on precomputed features") {
    const auto y = balanced_labels(600);
    const auto task = manual_task(y, 2);
    BaselineOptions opts;
    opts.seeds = 1;

    std::vector<double> binary(600 * 3, 0.0);
    for (std::size_t i = 0; i < 600; ++i) {
        binary[i * 3 + 1] = y[i];
    }
    CHECK(train_baseline_logreg(binary, 3, task, opts).accuracy.mean == 1.0);

    const std::vector<double> zeros(600 * 3, 0.0);
    const auto flat = train_baseline_logreg(zeros, 3, task, opts);
    for (const auto& r : flat.runs) {
        // Balanced halves of 15-cell label blocks: every prediction is one class.
        std::size_t ones = 0;
        for (auto i : task.folds[r.fold].test) {
            ones += y[i];
        }
        const double n = static_cast<double>(task.folds[r.fold].test.size());
        const double rate = static_cast<double>(ones) / n;
        CHECK((r.metrics.accuracy == doctest::Approx(rate) || r.metrics.accuracy == doctest::Approx(1.0 - rate)));
    }

    const auto weak = train_baseline_logreg(noisy_features(y, 5, 1.5, 2), 5, task, opts);
    const auto strong = train_baseline_logreg(noisy_features(y, 5, 0.3, 2), 5, task, opts);
    CHECK(weak.accuracy.mean < strong.accuracy.mean);
}

TEST_CASE("frozen fine-tuning is a probe on the embeddings") {
    const auto m = test::marker_corpus(240, 12, 24, 3, false);
    const auto medians = build_median_dictionary(m);
    Vocabulary vocab(m.gene_ids());
    CellEncoder enc(vocab, medians, m.gene_ids(), Variant::g, 32);
    const auto cells = parallel::encode_corpus(m, enc, true);
    const auto task = build_disease_folds(m, 3, 0);
    std::vector<TokenizedCell> task_cells;
    for (const auto& c : task.cells) {
        task_cells.push_back(cells[c.row]);
    }
    const auto params = init_params<float>(preset_config("tiny", Variant::g, vocab.size(), 32), 2);
    FinetuneOptions opts;
    opts.freeze_backbone = true;
    opts.lr_candidates = {0.05};
    opts.seeds = 1;
    const auto frozen = finetune(params, task_cells, task, opts);

    std::vector<TokenizedCell> stripped = task_cells;
    for (auto& c : stripped) {
        c.prompts.clear();
    }
    const auto emb = embed_cells(params, std::span<const TokenizedCell>(stripped));
    ProbeOptions probe;
    probe.lr_candidates = {0.05};
    probe.seeds = 1;
    const auto direct = linear_probe(std::vector<double>(emb.begin(), emb.end()), 16, task, probe);
    REQUIRE(frozen.runs.size() == direct.runs.size());
    for (std::size_t i = 0; i < frozen.runs.size(); ++i) {
        CHECK(frozen.runs[i].metrics.accuracy == direct.runs[i].metrics.accuracy);
    }

    const auto x_params = init_params<float>(preset_config("tiny", Variant::x, vocab.size(), 32), 2);
    CHECK_THROWS_AS(finetune(x_params, task_cells, task, opts), UsageError);
}

TEST_CASE("reports: one row per run and per entry") {
    test::TempDir dir("report");
    RunRecord r0{0, 0, 1e-3, {0.5, 0.4, {}}};
    RunRecord r1{1, 0, 1e-3, {0.7, 0.6, {}}};
    const std::vector<ReportEntry> entries{{"small", "diseases", summarize_runs({r0, r1})}, {"big", "diseases", summarize_runs({r1})}};
    write_report(dir.path(), entries);
    const auto summary = read_file(dir.path() / "summary.tsv");
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 3);
    CHECK(summary.find("small\tdiseases\t2\t0.6\t") != std::string::npos);
    const auto back = read_metrics_report(dir.path() / "metrics.tsv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].result.runs.size() == 2);
    CHECK(back[0].result.accuracy.mean == doctest::Approx(0.6));
    CHECK(read_file(dir.path() / "scatter.tsv").starts_with("task\tsmall\tbig\n"));

    test::TempDir empty("report-empty");
    write_report(empty.path(), {});
    CHECK(read_file(empty.path() / "summary.tsv") == "model\ttask\tn\taccuracy_mean\taccuracy_sd\tweighted_f1_mean\tweighted_f1_sd\n");

    const std::vector<std::pair<double, double>> pts{{1e5, 3.0}, {5e5, 2.5}, {2e6, 2.25}};
    write_scaling_points(dir.path() / "scaling.tsv", pts);
    CHECK(read_scaling_points(dir.path() / "scaling.tsv") == pts);
}
