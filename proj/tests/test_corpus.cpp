#include "support.hpp"

#include "rankcell/corpus.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

using namespace rankcell;

namespace {

const std::string kGenes = "gene_id\tgene_symbol\nG1\tA\nG2\tB\nG3\tMT-X\nG4\tD\n";
const std::string kCells =
    "cell_id\tdonor_id\tdataset_id\tdisease\ttissue_type\tcell_type\tsex\n"
    "c1\td1\tds\thealthy\trenal\timmune\tmale\n"
    "c2\td1\tds\tcancer\t\tneural\tfemale\n"
    "c3\td2\tds\t\teye\tunknown\t\n";

struct Files {
    test::TempDir dir{"corpus"};
    std::filesystem::path matrix() const { return dir.path() / "matrix.txt"; }
    std::filesystem::path genes() const { return dir.path() / "genes.tsv"; }
    std::filesystem::path cells() const { return dir.path() / "cells.tsv"; }

    CountMatrix load(const std::string& matrix_text, const std::string& cells_text = kCells) const {
        write_file(matrix(), matrix_text);
        write_file(genes(), kGenes);
        write_file(cells(), cells_text);
        return load_counts(matrix(), genes(), cells());
    }
};

CountMatrix handmade(std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> rows, std::size_t n_genes,
                     std::vector<std::string> donors = {}) {
    std::vector<GeneInfo> genes;
    for (std::size_t g = 0; g < n_genes; ++g) {
        genes.push_back({"G" + std::to_string(g), g == 0 ? "MT-ND1" : "S" + std::to_string(g)});
    }
    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (std::size_t c = 0; c < rows.size(); ++c) {
        cells.push_back({"c" + std::to_string(c), donors.empty() ? "d0" : donors[c], "ds", {}});
        for (auto [g, n] : rows[c]) {
            idx.push_back(g);
            counts.push_back(n);
        }
        offsets.push_back(idx.size());
    }
    return CountMatrix(std::move(genes), std::move(cells), std::move(offsets), std::move(idx), std::move(counts));
}

}

TEST_CASE("load_counts reads triplets into 0-based rows") {
    Files f;
    const auto m = f.load("3 4 5\n1 1 4\n1 3 2\n2 2 7\n3 4 1\n3 1 9\n");
    CHECK(m.n_cells() == 3);
    CHECK(m.n_genes() == 4);
    CHECK(m.n_entries() == 5);
    CHECK(m.cell(0).total() == 6);
    CHECK(m.cell(2).genes[0] == 3);
    CHECK(m.meta(1).labels[index_of(Category::tissue_type)] == std::nullopt);
    CHECK(*m.meta(0).labels[index_of(Category::sex)] == *AnnotationSchema::standard().find(Category::sex, "male"));
}

TEST_CASE("load_counts rejects contract violations with a line number") {
    Files f;
    CHECK_THROWS_WITH_AS(f.load("2 4 1\n3 1 1\n"), doctest::Contains("index out of bounds"), DataError);
    CHECK_THROWS_WITH_AS(f.load("3 4 1\n1 1 0\n"), doctest::Contains("zero count stored explicitly"), DataError);
    CHECK_THROWS_WITH_AS(f.load("3 4 2\n1 1 1\n1 x 1\n"), doctest::Contains(":3:"), DataError);
    CHECK_THROWS_WITH_AS(f.load("3 4 2\n1 1 1\n1 1 2\n"), doctest::Contains("duplicate triplet"), DataError);
    CHECK_THROWS_WITH_AS(f.load("3 4 1\n1 1 1\n", "c1\td\tds\tflu\t\t\t\nc2\td\tds\t\t\t\t\nc3\td\tds\t\t\t\t\n"),
                         doctest::Contains("not in the disease schema"), DataError);
}

TEST_CASE("write and load round-trip a synthetic corpus") {
    test::TempDir dir("roundtrip");
    SyntheticOptions o;
    o.n_cells = 40;
    o.seed = 3;
    const auto m = gen_synthetic_corpus(o);
    write_corpus(m, dir.path());
    CHECK(load_corpus(dir.path()) == m);
}

TEST_CASE("the standard schema holds 43 labels") {
    const auto& s = AnnotationSchema::standard();
    CHECK(s.total() == 43);
    CHECK(s.size(Category::disease) == 10);
    CHECK(s.size(Category::tissue_type) == 17);
    CHECK(s.size(Category::cell_type) == 13);
    CHECK(s.size(Category::sex) == 3);
    CHECK(s.offset(Category::cell_type) == 27);
}

TEST_CASE("qc uses strict thresholds") {
    // Gene 0 is mitochondrial.
    const auto m = handmade({{{1, 224}}, {{1, 225}}, {{0, 30}, {1, 270}}, {{0, 31}, {1, 269}}}, 2);
    QcOptions o;
    o.mito_gene_ids = default_mito_genes(m);
    CHECK(o.mito_gene_ids == std::unordered_set<std::string>{"G0"});
    const auto kept = qc_filter(m, o);
    REQUIRE(kept.n_cells() == 2);
    CHECK(kept.meta(0).cell_id == "c1");
    CHECK(kept.meta(1).cell_id == "c2");
    CHECK(qc_filter(kept, o) == kept);
}

TEST_CASE("qc on a generated corpus removes exactly the failing cells") {
    SyntheticOptions o;
    o.n_cells = 100;
    o.low_quality_fraction = 0.1;
    o.seed = 21;
    const auto m = gen_synthetic_corpus(o);
    QcOptions qc;
    qc.mito_gene_ids = default_mito_genes(m);
    std::size_t expected = 0;
    for (const auto& q : qc_metrics(m, qc.mito_gene_ids)) {
        expected += (q.total >= 225 && q.mito_frac() <= 0.10) ? 1 : 0;
    }
    const auto kept = qc_filter(m, qc);
    CHECK(kept.n_cells() == expected);
    CHECK(expected < 100);
    for (std::size_t i = 0, j = 0; i < m.n_cells(); ++i) {
        if (j < kept.n_cells() && kept.meta(j).cell_id == m.meta(i).cell_id) {
            CHECK(std::ranges::equal(kept.cell(j).counts, m.cell(i).counts));
            ++j;
        }
    }
    CHECK(qc_filter(kept, qc) == kept);
}

TEST_CASE("dataset filters apply before thresholds") {
    const auto m = handmade({{{1, 300}}, {{1, 300}}}, 2);
    QcOptions o;
    o.exclude_datasets = {"ds"};
    CHECK(qc_filter(m, o).n_cells() == 0);
    o.exclude_datasets.clear();
    o.include_datasets = {"other"};
    CHECK(qc_filter(m, o).n_cells() == 0);
}

TEST_CASE("split_by_donors partitions cells") {
    SyntheticOptions o;
    o.n_cells = 200;
    o.n_donors = 10;
    o.seed = 4;
    const auto m = gen_synthetic_corpus(o);
    const auto donors = donors_of(m);
    REQUIRE(donors.size() == 10);

    auto [all, none] = split_by_donors(m, {});
    CHECK(all == m);
    CHECK(none.n_cells() == 0);
    auto [none2, all2] = split_by_donors(m, {donors.begin(), donors.end()});
    CHECK(none2.n_cells() == 0);
    CHECK(all2 == m);

    auto [kept, held] = split_by_donors(m, {donors[1], donors[4], donors[7]});
    CHECK(kept.n_cells() + held.n_cells() == m.n_cells());
    std::set<std::string> a, b, ids;
    for (const auto& c : kept.cells()) {
        a.insert(c.donor_id);
        ids.insert(c.cell_id);
    }
    for (const auto& c : held.cells()) {
        b.insert(c.donor_id);
        ids.insert(c.cell_id);
    }
    CHECK(ids.size() == m.n_cells());
    CHECK(b.size() == 3);
    for (const auto& d : b) {
        CHECK_FALSE(a.contains(d));
    }
}

TEST_CASE("the generator is deterministic and covers every donor") {
    SyntheticOptions o;
    o.n_cells = 256;
    o.n_donors = 8;
    o.n_genes = 50;
    o.seed = 9;
    const auto a = gen_synthetic_corpus(o);
    CHECK(a == gen_synthetic_corpus(o));
    CHECK(a.fingerprint() == gen_synthetic_corpus(o).fingerprint());
    o.seed = 10;
    CHECK_FALSE(a == gen_synthetic_corpus(o));
    CHECK(donors_of(a).size() == 8);
    for (std::size_t i = 0; i < a.n_cells(); ++i) {
        for (auto l : a.meta(i).labels) {
            CHECK(l.has_value());
        }
        for (auto g : a.cell(i).genes) {
            CHECK(g < 50);
        }
    }
}

TEST_CASE("noise-free generation gives one expression profile per donor and cell type") {
    SyntheticOptions o;
    o.poisson = false;
    o.library_size_sdlog = 0.0;
    o.mito_fraction_jitter = 0.0;
    const auto m = gen_synthetic_corpus(o);
    std::map<std::pair<std::string, std::uint16_t>, std::vector<std::uint32_t>> seen;
    for (std::size_t i = 0; i < m.n_cells(); ++i) {
        const auto cell = m.cell(i);
        std::vector<std::uint32_t> row(m.n_genes(), 0);
        for (std::size_t k = 0; k < cell.size(); ++k) {
            row[cell.genes[k]] = cell.counts[k];
        }
        auto [it, fresh] = seen.try_emplace({m.meta(i).donor_id, *m.meta(i).labels[index_of(Category::cell_type)]}, row);
        CHECK(it->second == row);
    }
}

TEST_CASE("fetch copies local files and verifies digests") {
    test::TempDir dir("fetch");
    const auto src = dir.path() / "src.bin";
    write_file(src, "payload");
    const auto dest = dir.path() / "out.bin";
    CHECK(fetch_dataset("file://" + src.string(), dest, sha256_hex("payload")) == dest);
    CHECK(read_file(dest) == "payload");
    CHECK_THROWS_WITH_AS(fetch_dataset("file://" + src.string(), dest, std::string(64, '0')),
                         doctest::Contains("integrity check failed"), DataError);
}

TEST_CASE("an unreachable host fails with a retryable error after bounded attempts") {
    test::TempDir dir("fetch-net");
    FetchOptions o;
    o.max_attempts = 2;
    o.backoff_ms = 1;
    o.timeout_s = 2;
    try {
        fetch_dataset("http://127.0.0.1:1/data.tar", dir.path() / "x", std::nullopt, o);
        FAIL("expected a network error");
    } catch (const NetworkError& e) {
        CHECK(e.retryable());
        CHECK(std::string(e.what()).find("2 attempts") != std::string::npos);
    }
}
