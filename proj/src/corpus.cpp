#include "rankcell/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace rankcell {

std::string_view category_name(Category c) {
    switch (c) {
    case Category::disease:
        return "disease";
    case Category::tissue_type:
        return "tissue_type";
    case Category::cell_type:
        return "cell_type";
    case Category::sex:
        return "sex";
    }
    return "unknown";
}

AnnotationSchema::AnnotationSchema(std::array<std::vector<std::string>, kNumCategories> labels) : labels_(std::move(labels)) {
    for (auto c : kCategories) {
        const auto& l = labels_[index_of(c)];
        if (l.empty()) {
            throw DataError(fmt::format("annotation schema: category {} has no labels", category_name(c)));
        }
        std::unordered_set<std::string> seen(l.begin(), l.end());
        if (seen.size() != l.size()) {
            throw DataError(fmt::format("annotation schema: duplicate label in {}", category_name(c)));
        }
    }
}

const AnnotationSchema& AnnotationSchema::standard() {
    static const AnnotationSchema schema({
        std::vector<std::string>{"brain", "cancer", "cardiovascular", "genetic", "immune", "infectious", "kidney",
                                 "respiratory", "other", "healthy"},
        std::vector<std::string>{"adipose", "cardiovascular", "central nervous", "digestive", "embryonic", "endocrine",
                                 "exocrine", "eye", "hematopoietic", "hepatic", "integumentary", "musculature", "renal",
                                 "reproductive", "respiratory", "sensory", "unknown"},
        std::vector<std::string>{"ciliated", "connective", "contractile", "embryonic", "epithelial", "hematopoietic",
                                 "immune", "neural", "perivascular", "precursor", "secretory", "skeletal", "unknown"},
        std::vector<std::string>{"male", "female", "unknown"},
    });
    return schema;
}

std::size_t AnnotationSchema::total() const {
    std::size_t n = 0;
    for (const auto& l : labels_) {
        n += l.size();
    }
    return n;
}

std::size_t AnnotationSchema::offset(Category c) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < index_of(c); ++i) {
        n += labels_[i].size();
    }
    return n;
}

std::optional<std::uint16_t> AnnotationSchema::find(Category c, std::string_view label) const {
    const auto& l = labels_[index_of(c)];
    for (std::size_t i = 0; i < l.size(); ++i) {
        if (l[i] == label) {
            return static_cast<std::uint16_t>(i);
        }
    }
    return std::nullopt;
}

std::uint64_t SparseCounts::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) {
        t += c;
    }
    return t;
}

CountMatrix::CountMatrix(std::vector<GeneInfo> genes, std::vector<CellMeta> cells, std::vector<std::size_t> offsets,
                         std::vector<std::uint32_t> gene_index, std::vector<std::uint32_t> counts)
    : genes_(std::move(genes)), cells_(std::move(cells)), offsets_(std::move(offsets)), gene_index_(std::move(gene_index)),
      counts_(std::move(counts)) {
    if (offsets_.size() != cells_.size() + 1 || offsets_.front() != 0 || offsets_.back() != counts_.size() ||
        gene_index_.size() != counts_.size()) {
        throw DataError("count matrix: inconsistent row offsets");
    }
    {
        std::unordered_set<std::string> ids;
        for (const auto& g : genes_) {
            if (!ids.insert(g.id).second) {
                throw DataError("count matrix: duplicate gene id " + g.id);
            }
        }
    }
    {
        std::unordered_set<std::string> ids;
        for (const auto& c : cells_) {
            if (!ids.insert(c.cell_id).second) {
                throw DataError("count matrix: duplicate cell id " + c.cell_id);
            }
        }
    }
    std::vector<std::size_t> last_seen(genes_.size(), static_cast<std::size_t>(-1));
    for (std::size_t c = 0; c < cells_.size(); ++c) {
        if (offsets_[c] > offsets_[c + 1]) {
            throw DataError("count matrix: decreasing row offsets");
        }
        for (auto k = offsets_[c]; k < offsets_[c + 1]; ++k) {
            auto g = gene_index_[k];
            if (g >= genes_.size()) {
                throw DataError(fmt::format("count matrix: gene index {} out of bounds", g));
            }
            if (counts_[k] == 0) {
                throw DataError("count matrix: zero count stored explicitly");
            }
            if (last_seen[g] == c) {
                throw DataError(fmt::format("count matrix: duplicate entry for cell {} gene {}", c, g));
            }
            last_seen[g] = c;
        }
    }
}

SparseCounts CountMatrix::cell(std::size_t i) const {
    auto begin = offsets_[i];
    auto len = offsets_[i + 1] - begin;
    return {std::span(gene_index_).subspan(begin, len), std::span(counts_).subspan(begin, len)};
}

std::vector<std::string> CountMatrix::gene_ids() const {
    std::vector<std::string> out;
    out.reserve(genes_.size());
    for (const auto& g : genes_) {
        out.push_back(g.id);
    }
    return out;
}

CountMatrix CountMatrix::subset(std::span<const std::size_t> cell_indices) const {
    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> genes;
    std::vector<std::uint32_t> counts;
    cells.reserve(cell_indices.size());
    for (auto i : cell_indices) {
        cells.push_back(cells_.at(i));
        auto c = cell(i);
        genes.insert(genes.end(), c.genes.begin(), c.genes.end());
        counts.insert(counts.end(), c.counts.begin(), c.counts.end());
        offsets.push_back(counts.size());
    }
    return CountMatrix(genes_, std::move(cells), std::move(offsets), std::move(genes), std::move(counts));
}

std::string CountMatrix::fingerprint() const {
    Sha256 h;
    h.update_u64(genes_.size());
    for (const auto& g : genes_) {
        h.update(g.id);
        h.update(std::string_view("\0", 1));
    }
    h.update_u64(cells_.size());
    std::vector<std::pair<std::uint32_t, std::uint32_t>> entries;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
        h.update(cells_[i].cell_id);
        h.update(std::string_view("\0", 1));
        auto c = cell(i);
        entries.clear();
        for (std::size_t k = 0; k < c.size(); ++k) {
            entries.emplace_back(c.genes[k], c.counts[k]);
        }
        std::sort(entries.begin(), entries.end());
        h.update_u64(entries.size());
        for (auto [g, n] : entries) {
            h.update_u64((static_cast<std::uint64_t>(g) << 32) | n);
        }
    }
    return h.hex_digest();
}

namespace {

class LineReader {
public:
    explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
        if (!in_) {
            throw DataError("cannot open " + path.string());
        }
    }

    bool next(std::string& line) {
        if (!std::getline(in_, line)) {
            return false;
        }
        ++line_no_;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        return true;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError(fmt::format("{}:{}: {}", path_.string(), line_no_, what));
    }

    std::size_t line_no() const { return line_no_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t line_no_ = 0;
};

// Parses whitespace-separated unsigned integers; returns false on any malformed token.
bool parse_uints(std::string_view line, std::uint64_t* out, std::size_t n) {
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (std::size_t i = 0; i < n; ++i) {
        while (p < end && (*p == ' ' || *p == '\t')) {
            ++p;
        }
        auto res = std::from_chars(p, end, out[i]);
        if (res.ec != std::errc() || res.ptr == p) {
            return false;
        }
        p = res.ptr;
        if (p < end && *p != ' ' && *p != '\t') {
            return false;
        }
    }
    while (p < end && (*p == ' ' || *p == '\t')) {
        ++p;
    }
    return p == end;
}

std::vector<GeneInfo> read_genes(const std::filesystem::path& path) {
    LineReader reader(path);
    std::vector<GeneInfo> genes;
    std::string line;
    bool first = true;
    while (reader.next(line)) {
        if (line.empty()) {
            continue;
        }
        auto fields = split(line, '\t');
        if (first && fields.size() >= 1 && fields[0] == "gene_id") {
            first = false;
            continue;
        }
        first = false;
        if (fields.size() != 2 || fields[0].empty()) {
            reader.fail("expected 2 tab-separated columns gene_id, gene_symbol");
        }
        genes.push_back({std::string(fields[0]), std::string(fields[1])});
    }
    return genes;
}

constexpr std::array<std::string_view, 7> kCellColumns{"cell_id", "donor_id", "dataset_id", "disease",
                                                       "tissue_type", "cell_type", "sex"};

std::vector<CellMeta> read_cells(const std::filesystem::path& path, const AnnotationSchema& schema) {
    LineReader reader(path);
    std::vector<CellMeta> cells;
    std::string line;
    bool first = true;
    while (reader.next(line)) {
        if (line.empty()) {
            continue;
        }
        auto fields = split(line, '\t');
        if (first && !fields.empty() && fields[0] == "cell_id") {
            first = false;
            continue;
        }
        first = false;
        if (fields.size() != kCellColumns.size()) {
            reader.fail(fmt::format("expected {} tab-separated columns", kCellColumns.size()));
        }
        if (fields[0].empty()) {
            reader.fail("empty cell_id");
        }
        CellMeta meta{std::string(fields[0]), std::string(fields[1]), std::string(fields[2]), {}};
        for (auto c : kCategories) {
            auto value = fields[3 + index_of(c)];
            if (value.empty()) {
                continue;
            }
            auto idx = schema.find(c, value);
            if (!idx) {
                reader.fail(fmt::format("label '{}' is not in the {} schema", value, category_name(c)));
            }
            meta.labels[index_of(c)] = *idx;
        }
        cells.push_back(std::move(meta));
    }
    return cells;
}

}

CountMatrix load_counts(const std::filesystem::path& matrix_path, const std::filesystem::path& genes_path,
                        const std::filesystem::path& cells_path, const AnnotationSchema& schema) {
    LineReader reader(matrix_path);
    std::string line;
    std::uint64_t header[3];
    bool have_header = false;
    while (reader.next(line)) {
        if (line.empty() || line[0] == '%') {
            continue;
        }
        if (!parse_uints(line, header, 3)) {
            reader.fail("malformed header, expected 'n_cells n_genes n_entries'");
        }
        have_header = true;
        break;
    }
    if (!have_header) {
        reader.fail("missing header");
    }
    const auto n_cells = header[0];
    const auto n_genes = header[1];
    const auto n_entries = header[2];

    struct Triplet {
        std::uint32_t cell, gene, count;
    };
    std::vector<Triplet> triplets;
    triplets.reserve(n_entries);
    std::uint64_t v[3];
    while (reader.next(line)) {
        if (line.empty() || line[0] == '%') {
            continue;
        }
        if (!parse_uints(line, v, 3)) {
            reader.fail("malformed line, expected 'cell_idx gene_idx count'");
        }
        if (v[0] < 1 || v[0] > n_cells || v[1] < 1 || v[1] > n_genes) {
            reader.fail(fmt::format("index out of bounds ({} {}) for declared {}x{}", v[0], v[1], n_cells, n_genes));
        }
        if (v[2] == 0) {
            reader.fail("zero count stored explicitly");
        }
        if (v[2] > std::numeric_limits<std::uint32_t>::max()) {
            reader.fail("count too large");
        }
        if (triplets.size() == n_entries) {
            reader.fail(fmt::format("more entries than the declared {}", n_entries));
        }
        triplets.push_back({static_cast<std::uint32_t>(v[0] - 1), static_cast<std::uint32_t>(v[1] - 1),
                            static_cast<std::uint32_t>(v[2])});
    }
    if (triplets.size() != n_entries) {
        throw DataError(fmt::format("{}: declared {} entries, found {}", matrix_path.string(), n_entries, triplets.size()));
    }

    // Group by cell, keeping file order within a cell.
    std::vector<std::size_t> offsets(n_cells + 1, 0);
    for (const auto& t : triplets) {
        ++offsets[t.cell + 1];
    }
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
    std::vector<std::uint32_t> genes(n_entries), counts(n_entries);
    {
        auto cursor = offsets;
        for (const auto& t : triplets) {
            auto k = cursor[t.cell]++;
            genes[k] = t.gene;
            counts[k] = t.count;
        }
    }
    for (std::size_t c = 0; c < n_cells; ++c) {
        std::vector<std::uint32_t> sorted(genes.begin() + static_cast<std::ptrdiff_t>(offsets[c]),
                                          genes.begin() + static_cast<std::ptrdiff_t>(offsets[c + 1]));
        std::sort(sorted.begin(), sorted.end());
        auto dup = std::adjacent_find(sorted.begin(), sorted.end());
        if (dup != sorted.end()) {
            throw DataError(fmt::format("{}: duplicate triplet for cell {} gene {}", matrix_path.string(), c + 1, *dup + 1));
        }
    }

    auto gene_info = read_genes(genes_path);
    if (gene_info.size() != n_genes) {
        throw DataError(fmt::format("{}: {} genes listed, matrix declares {}", genes_path.string(), gene_info.size(), n_genes));
    }
    auto cells = read_cells(cells_path, schema);
    if (cells.size() != n_cells) {
        throw DataError(fmt::format("{}: {} cells listed, matrix declares {}", cells_path.string(), cells.size(), n_cells));
    }
    return CountMatrix(std::move(gene_info), std::move(cells), std::move(offsets), std::move(genes), std::move(counts));
}

CountMatrix load_corpus(const std::filesystem::path& dir, const AnnotationSchema& schema) {
    return load_counts(dir / "matrix.txt", dir / "genes.tsv", dir / "cells.tsv", schema);
}

void write_counts(const CountMatrix& m, const std::filesystem::path& matrix_path, const std::filesystem::path& genes_path,
                  const std::filesystem::path& cells_path, const AnnotationSchema& schema) {
    std::string out;
    out += fmt::format("{} {} {}\n", m.n_cells(), m.n_genes(), m.n_entries());
    for (std::size_t c = 0; c < m.n_cells(); ++c) {
        auto cell = m.cell(c);
        for (std::size_t k = 0; k < cell.size(); ++k) {
            out += fmt::format("{} {} {}\n", c + 1, cell.genes[k] + 1, cell.counts[k]);
        }
    }
    write_file(matrix_path, out);

    out = "gene_id\tgene_symbol\n";
    for (const auto& g : m.genes()) {
        out += g.id + "\t" + g.symbol + "\n";
    }
    write_file(genes_path, out);

    out.clear();
    for (std::size_t i = 0; i < kCellColumns.size(); ++i) {
        out += std::string(kCellColumns[i]) + (i + 1 < kCellColumns.size() ? "\t" : "\n");
    }
    for (const auto& meta : m.cells()) {
        out += meta.cell_id + "\t" + meta.donor_id + "\t" + meta.dataset_id;
        for (auto c : kCategories) {
            out += "\t";
            if (auto l = meta.labels[index_of(c)]) {
                out += schema.label(c, *l);
            }
        }
        out += "\n";
    }
    write_file(cells_path, out);
}

void write_corpus(const CountMatrix& m, const std::filesystem::path& dir, const AnnotationSchema& schema) {
    std::filesystem::create_directories(dir);
    write_counts(m, dir / "matrix.txt", dir / "genes.tsv", dir / "cells.tsv", schema);
}

std::unordered_set<std::string> default_mito_genes(const CountMatrix& m) {
    std::unordered_set<std::string> out;
    for (const auto& g : m.genes()) {
        if (g.symbol.starts_with("MT-")) {
            out.insert(g.id);
        }
    }
    return out;
}

std::vector<QcMetrics> qc_metrics(const CountMatrix& m, const std::unordered_set<std::string>& mito_gene_ids) {
    std::vector<char> is_mito(m.n_genes(), 0);
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        is_mito[g] = mito_gene_ids.contains(m.genes()[g].id) ? 1 : 0;
    }
    std::vector<QcMetrics> out(m.n_cells());
    const auto n = static_cast<std::ptrdiff_t>(m.n_cells());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto cell = m.cell(static_cast<std::size_t>(i));
        QcMetrics q;
        for (std::size_t k = 0; k < cell.size(); ++k) {
            q.total += cell.counts[k];
            if (is_mito[cell.genes[k]]) {
                q.mito += cell.counts[k];
            }
        }
        out[static_cast<std::size_t>(i)] = q;
    }
    return out;
}

bool passes_qc(const QcMetrics& metrics, const QcOptions& options) {
    if (metrics.total < options.min_counts) {
        return false;
    }
    return !(metrics.mito_frac() > options.max_mito_frac);
}

CountMatrix qc_filter(const CountMatrix& m, const QcOptions& options) {
    auto metrics = qc_metrics(m, options.mito_gene_ids);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < m.n_cells(); ++i) {
        const auto& ds = m.meta(i).dataset_id;
        if (options.exclude_datasets.contains(ds)) {
            continue;
        }
        if (!options.include_datasets.empty() && !options.include_datasets.contains(ds)) {
            continue;
        }
        if (passes_qc(metrics[i], options)) {
            keep.push_back(i);
        }
    }
    return m.subset(keep);
}

std::pair<CountMatrix, CountMatrix> split_by_donors(const CountMatrix& m, const std::unordered_set<std::string>& held_donors) {
    std::vector<std::size_t> kept, held;
    for (std::size_t i = 0; i < m.n_cells(); ++i) {
        (held_donors.contains(m.meta(i).donor_id) ? held : kept).push_back(i);
    }
    return {m.subset(kept), m.subset(held)};
}

std::vector<std::string> donors_of(const CountMatrix& m) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& c : m.cells()) {
        if (seen.insert(c.donor_id).second) {
            out.push_back(c.donor_id);
        }
    }
    return out;
}

CountMatrix gen_synthetic_corpus(const SyntheticOptions& o, const AnnotationSchema& schema) {
    if (o.n_donors == 0 || o.n_donors > o.n_cells) {
        throw UsageError("synthetic corpus: need 1 <= n_donors <= n_cells");
    }
    if (o.n_genes <= o.n_mito_genes + 2) {
        throw UsageError("synthetic corpus: too few genes");
    }
    const std::size_t n_mito = o.n_mito_genes;
    const std::size_t n_body = o.n_genes - n_mito;
    const std::size_t n_types = std::clamp<std::size_t>(o.n_cell_types, 1, schema.size(Category::cell_type));
    const std::size_t n_tissues = std::clamp<std::size_t>(o.n_tissues, 1, schema.size(Category::tissue_type));

    std::vector<GeneInfo> genes;
    for (std::size_t g = 0; g < o.n_genes; ++g) {
        genes.push_back({fmt::format("G{:05d}", g), g < n_mito ? fmt::format("MT-CO{}", g + 1) : fmt::format("GENE{}", g)});
    }

    auto block_of = [&](std::uint64_t stream, std::uint64_t key, std::size_t size) {
        std::vector<std::size_t> idx(n_body);
        std::iota(idx.begin(), idx.end(), n_mito);
        Rng rng(o.seed, stream, key);
        rng.shuffle(idx);
        idx.resize(std::min(size, n_body));
        return idx;
    };

    // Cell-type programs: power-law weights along a random gene permutation.
    const auto n_expressed = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(o.expressed_fraction * static_cast<double>(n_body))));
    std::vector<std::vector<double>> program(n_types, std::vector<double>(o.n_genes, 0.0));
    for (std::size_t t = 0; t < n_types; ++t) {
        auto perm = block_of(1, t, n_expressed);
        for (std::size_t k = 0; k < perm.size(); ++k) {
            program[t][perm[k]] = std::pow(static_cast<double>(k + 1), -o.zipf_exponent);
        }
    }
    const double mid_weight = std::pow(static_cast<double>(n_expressed / 4 + 1), -o.zipf_exponent);
    const std::size_t block = std::max<std::size_t>(1, n_body / 16);

    // Donor-level annotations.
    std::vector<std::uint16_t> disease_labels;
    for (std::uint16_t i = 0; i < schema.size(Category::disease); ++i) {
        if (schema.label(Category::disease, i) != AnnotationSchema::healthy_label) {
            disease_labels.push_back(i);
        }
    }
    const auto healthy = schema.find(Category::disease, AnnotationSchema::healthy_label);
    const auto male = schema.find(Category::sex, "male");
    const auto female = schema.find(Category::sex, "female");

    struct Donor {
        std::string id;
        std::string dataset;
        std::uint16_t disease;
        std::uint16_t tissue;
        std::uint16_t sex;
    };
    std::vector<Donor> donors;
    Rng donor_rng(o.seed, 2);
    for (std::size_t d = 0; d < o.n_donors; ++d) {
        Donor donor;
        donor.id = fmt::format("D{:03d}", d);
        donor.dataset = fmt::format("DS{}", d % std::max<std::size_t>(1, o.n_datasets));
        const bool is_healthy = donor_rng.uniform() < o.healthy_fraction;
        donor.disease = (is_healthy && healthy) || disease_labels.empty()
                            ? healthy.value_or(0)
                            : disease_labels[donor_rng.below(disease_labels.size())];
        donor.tissue = static_cast<std::uint16_t>(donor_rng.below(n_tissues));
        donor.sex = donor_rng.below(2) == 0 ? male.value_or(0) : female.value_or(0);
        donors.push_back(std::move(donor));
    }

    const std::size_t male_marker = o.n_genes - 1;
    const std::size_t female_marker = o.n_genes - 2;

    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> gene_index;
    std::vector<std::uint32_t> counts;
    std::vector<double> weights(o.n_genes);
    for (std::size_t i = 0; i < o.n_cells; ++i) {
        Rng rng(o.seed, 3, i);
        const std::size_t d = i < o.n_donors ? i : static_cast<std::size_t>(rng.below(o.n_donors));
        const auto& donor = donors[d];
        const auto type = static_cast<std::uint16_t>(rng.below(n_types));

        std::copy(program[type].begin(), program[type].end(), weights.begin());
        for (auto g : block_of(4, donor.tissue, block)) {
            weights[g] = 3.0 * weights[g] + mid_weight;
        }
        if (!healthy || donor.disease != *healthy) {
            for (auto g : block_of(5, donor.disease, block)) {
                weights[g] = 4.0 * weights[g] + 2.0 * mid_weight;
            }
        }
        weights[male && donor.sex == *male ? male_marker : female_marker] += 2.0 * mid_weight;
        const double body_total = std::accumulate(weights.begin() + static_cast<std::ptrdiff_t>(n_mito), weights.end(), 0.0);

        double library = o.mean_library_size * std::exp(o.library_size_sdlog * rng.normal());
        double mito_frac = 0.02 + o.mito_fraction_jitter * rng.uniform();
        if (rng.uniform() < o.low_quality_fraction) {
            if (rng.uniform() < 0.5) {
                library *= 0.03;
            } else {
                mito_frac = 0.3;
            }
        }

        CellMeta meta;
        meta.cell_id = fmt::format("C{:05d}", i);
        meta.donor_id = donor.id;
        meta.dataset_id = donor.dataset;
        meta.labels[index_of(Category::disease)] = donor.disease;
        meta.labels[index_of(Category::tissue_type)] = donor.tissue;
        meta.labels[index_of(Category::cell_type)] = type;
        meta.labels[index_of(Category::sex)] = donor.sex;
        cells.push_back(std::move(meta));

        const auto start = counts.size();
        for (std::size_t g = 0; g < o.n_genes; ++g) {
            double mean = g < n_mito ? library * mito_frac / static_cast<double>(std::max<std::size_t>(1, n_mito))
                                     : library * (1.0 - mito_frac) * weights[g] / body_total;
            std::uint64_t n = o.poisson ? rng.poisson(mean) : static_cast<std::uint64_t>(std::llround(mean));
            if (n > 0) {
                gene_index.push_back(static_cast<std::uint32_t>(g));
                counts.push_back(static_cast<std::uint32_t>(n));
            }
        }
        if (counts.size() == start) {
            gene_index.push_back(static_cast<std::uint32_t>(n_mito));
            counts.push_back(1);
        }
        offsets.push_back(counts.size());
    }
    return CountMatrix(std::move(genes), std::move(cells), std::move(offsets), std::move(gene_index), std::move(counts));
}

}
