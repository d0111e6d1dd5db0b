#ifndef RANKCELL_NORMALIZE_HPP
#define RANKCELL_NORMALIZE_HPP

#include "rankcell/corpus.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

/**
 * @file normalize.hpp
 *
 * @brief Depth normalization and the per-gene non-zero median dictionary.
 */

namespace rankcell {

/// Each cell is scaled to this many counts before medians are taken.
inline constexpr double kTargetDepth = 10000.0;

/// Sparse real-valued vector indexed by corpus gene index.
struct SparseValues {
    std::vector<std::uint32_t> genes;
    std::vector<double> values;

    std::size_t size() const { return genes.size(); }
    bool operator==(const SparseValues&) const = default;
};

/**
 * Scales a cell to `kTargetDepth` total counts: `count * 10000 / total` for each stored gene.
 * The numerator and denominator are exact in double, so multiplying all counts of a cell by a
 * constant leaves the output bit-identical. Throws `DataError` for a zero-total cell.
 */
SparseValues depth_normalize(const SparseCounts& cell);

/**
 * @brief Non-zero median of depth-normalized expression for every gene seen in a corpus.
 */
class GeneMedianDictionary {
public:
    GeneMedianDictionary() = default;
    GeneMedianDictionary(std::map<std::string, double> medians, std::string fingerprint);

    const std::map<std::string, double>& medians() const { return medians_; }
    const std::string& fingerprint() const { return fingerprint_; }
    std::size_t size() const { return medians_.size(); }

    /// Median per position of `gene_ids`, or 0 for genes missing from the dictionary.
    std::vector<double> resolve(std::span<const std::string> gene_ids) const;

    void save(const std::filesystem::path& path) const;
    static GeneMedianDictionary load(const std::filesystem::path& path);

    bool operator==(const GeneMedianDictionary&) const = default;

private:
    std::map<std::string, double> medians_;
    std::string fingerprint_;
};

/// Median of an unsorted sample; even sizes average the two central values. Sorts in place.
double exact_median(std::vector<double>& values);

namespace serial {

/// Per-gene non-zero medians (0 when a gene is never expressed), single-threaded reference.
std::vector<double> gene_medians(const CountMatrix& corpus);

}

namespace parallel {

/// Same result as `serial::gene_medians`, with per-gene selection spread over OpenMP threads.
std::vector<double> gene_medians(const CountMatrix& corpus);

}

/// Builds the dictionary over a (quality-controlled) corpus. Throws `DataError` when the corpus is empty.
GeneMedianDictionary build_median_dictionary(const CountMatrix& corpus);

/// Divides each value by its gene's median; genes with a zero entry in `resolved_medians` are dropped.
SparseValues median_scale(const SparseValues& cell, std::span<const double> resolved_medians);

SparseValues median_scale(const SparseValues& cell, const GeneMedianDictionary& dict, std::span<const std::string> gene_ids);

}

#endif
