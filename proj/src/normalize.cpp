#include "rankcell/normalize.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>

namespace rankcell {

SparseValues depth_normalize(const SparseCounts& cell) {
    const auto total = cell.total();
    if (total == 0) {
        throw DataError("depth_normalize: cell has zero total count");
    }
    SparseValues out;
    out.genes.assign(cell.genes.begin(), cell.genes.end());
    out.values.resize(cell.size());
    const double denom = static_cast<double>(total);
    for (std::size_t k = 0; k < cell.size(); ++k) {
        out.values[k] = static_cast<double>(cell.counts[k]) * kTargetDepth / denom;
    }
    return out;
}

GeneMedianDictionary::GeneMedianDictionary(std::map<std::string, double> medians, std::string fingerprint)
    : medians_(std::move(medians)), fingerprint_(std::move(fingerprint)) {
    for (const auto& [id, m] : medians_) {
        if (!(m > 0.0)) {
            throw DataError("median dictionary: non-positive median for " + id);
        }
    }
}

std::vector<double> GeneMedianDictionary::resolve(std::span<const std::string> gene_ids) const {
    std::vector<double> out(gene_ids.size(), 0.0);
    for (std::size_t g = 0; g < gene_ids.size(); ++g) {
        auto it = medians_.find(gene_ids[g]);
        if (it != medians_.end()) {
            out[g] = it->second;
        }
    }
    return out;
}

void GeneMedianDictionary::save(const std::filesystem::path& path) const {
    std::string out = "# rankcell gene medians v1\n";
    out += "# corpus_fingerprint " + fingerprint_ + "\n";
    out += "gene_id\tmedian\n";
    for (const auto& [id, m] : medians_) {
        out += id + "\t" + format_double(m) + "\n";
    }
    write_file(path, out);
}

GeneMedianDictionary GeneMedianDictionary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::map<std::string, double> medians;
    std::string fingerprint;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            constexpr std::string_view key = "# corpus_fingerprint ";
            if (line.starts_with(key)) {
                fingerprint = line.substr(key.size());
            }
            continue;
        }
        auto fields = split(line, '\t');
        if (fields.size() != 2) {
            throw DataError(fmt::format("{}:{}: expected gene_id<TAB>median", path.string(), line_no));
        }
        if (fields[0] == "gene_id") {
            continue;
        }
        auto value = parse_double(fields[1], fmt::format("{}:{}", path.string(), line_no));
        if (!medians.emplace(std::string(fields[0]), value).second) {
            throw DataError(fmt::format("{}:{}: duplicate gene {}", path.string(), line_no, fields[0]));
        }
    }
    return GeneMedianDictionary(std::move(medians), std::move(fingerprint));
}

double exact_median(std::vector<double>& values) {
    if (values.empty()) {
        return 0.0;
    }
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

namespace {

// Gene-major copy of all non-zero depth-normalized values, in cell order.
struct GeneColumns {
    std::vector<std::size_t> offsets;
    std::vector<double> values;
};

GeneColumns collect_columns(const CountMatrix& corpus) {
    GeneColumns cols;
    cols.offsets.assign(corpus.n_genes() + 1, 0);
    for (std::size_t c = 0; c < corpus.n_cells(); ++c) {
        for (auto g : corpus.cell(c).genes) {
            ++cols.offsets[g + 1];
        }
    }
    for (std::size_t g = 0; g < corpus.n_genes(); ++g) {
        cols.offsets[g + 1] += cols.offsets[g];
    }
    cols.values.resize(cols.offsets.back());
    auto cursor = cols.offsets;
    for (std::size_t c = 0; c < corpus.n_cells(); ++c) {
        auto norm = depth_normalize(corpus.cell(c));
        for (std::size_t k = 0; k < norm.size(); ++k) {
            cols.values[cursor[norm.genes[k]]++] = norm.values[k];
        }
    }
    return cols;
}

double column_median(const GeneColumns& cols, std::size_t g) {
    std::vector<double> v(cols.values.begin() + static_cast<std::ptrdiff_t>(cols.offsets[g]),
                          cols.values.begin() + static_cast<std::ptrdiff_t>(cols.offsets[g + 1]));
    return exact_median(v);
}

}

namespace serial {

std::vector<double> gene_medians(const CountMatrix& corpus) {
    auto cols = collect_columns(corpus);
    std::vector<double> out(corpus.n_genes());
    for (std::size_t g = 0; g < corpus.n_genes(); ++g) {
        out[g] = column_median(cols, g);
    }
    return out;
}

}

namespace parallel {

std::vector<double> gene_medians(const CountMatrix& corpus) {
    auto cols = collect_columns(corpus);
    std::vector<double> out(corpus.n_genes());
    const auto n = static_cast<std::ptrdiff_t>(corpus.n_genes());
#pragma omp parallel for schedule(dynamic, 64)
    for (std::ptrdiff_t g = 0; g < n; ++g) {
        out[static_cast<std::size_t>(g)] = column_median(cols, static_cast<std::size_t>(g));
    }
    return out;
}

}

GeneMedianDictionary build_median_dictionary(const CountMatrix& corpus) {
    if (corpus.n_cells() == 0) {
        throw DataError("build_median_dictionary: empty corpus");
    }
    auto medians = parallel::gene_medians(corpus);
    std::map<std::string, double> out;
    for (std::size_t g = 0; g < corpus.n_genes(); ++g) {
        if (medians[g] > 0.0) {
            out.emplace(corpus.genes()[g].id, medians[g]);
        }
    }
    return GeneMedianDictionary(std::move(out), corpus.fingerprint());
}

SparseValues median_scale(const SparseValues& cell, std::span<const double> resolved_medians) {
    SparseValues out;
    out.genes.reserve(cell.size());
    out.values.reserve(cell.size());
    for (std::size_t k = 0; k < cell.size(); ++k) {
        const auto g = cell.genes[k];
        const double m = g < resolved_medians.size() ? resolved_medians[g] : 0.0;
        if (m > 0.0) {
            out.genes.push_back(g);
            out.values.push_back(cell.values[k] / m);
        }
    }
    return out;
}

SparseValues median_scale(const SparseValues& cell, const GeneMedianDictionary& dict, std::span<const std::string> gene_ids) {
    auto resolved = dict.resolve(gene_ids);
    return median_scale(cell, resolved);
}

}
