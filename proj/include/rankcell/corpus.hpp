#ifndef RANKCELL_CORPUS_HPP
#define RANKCELL_CORPUS_HPP

#include "rankcell/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

/**
 * @file corpus.hpp
 *
 * @brief Sparse count matrices with per-cell annotations: loading, quality control, donor holdouts and synthetic corpora.
 */

namespace rankcell {

/// The four annotation categories, in prompt order.
enum class Category : std::uint8_t { disease = 0, tissue_type = 1, cell_type = 2, sex = 3 };

inline constexpr std::size_t kNumCategories = 4;
inline constexpr std::array<Category, kNumCategories> kCategories{
    Category::disease, Category::tissue_type, Category::cell_type, Category::sex};

inline constexpr std::size_t index_of(Category c) { return static_cast<std::size_t>(c); }
std::string_view category_name(Category c);

/**
 * @brief Coarse annotation labels for each category.
 *
 * The standard schema has 10 disease, 17 tissue, 13 cell-type and 3 sex labels (43 in total).
 * Label order within a category is significant: it fixes the label token ids and the
 * class indices of the classification heads.
 */
class AnnotationSchema {
public:
    explicit AnnotationSchema(std::array<std::vector<std::string>, kNumCategories> labels);

    static const AnnotationSchema& standard();

    /// Label considered "normal" when disease labels are grouped into normal vs diseased.
    static constexpr std::string_view healthy_label = "healthy";

    std::span<const std::string> labels(Category c) const { return labels_[index_of(c)]; }
    std::size_t size(Category c) const { return labels_[index_of(c)].size(); }
    std::size_t total() const;

    /// Position of the first label of `c` when all categories are concatenated in prompt order.
    std::size_t offset(Category c) const;

    std::optional<std::uint16_t> find(Category c, std::string_view label) const;
    const std::string& label(Category c, std::uint16_t index) const { return labels_[index_of(c)].at(index); }

private:
    std::array<std::vector<std::string>, kNumCategories> labels_;
};

/// Per-category label index into the schema, or empty when the annotation is absent.
using CellLabels = std::array<std::optional<std::uint16_t>, kNumCategories>;

struct CellMeta {
    std::string cell_id;
    std::string donor_id;
    std::string dataset_id;
    CellLabels labels;
    bool operator==(const CellMeta&) const = default;
};

struct GeneInfo {
    std::string id;
    std::string symbol;
    bool operator==(const GeneInfo&) const = default;
};

/// Non-owning view of one cell's stored entries, in storage order.
struct SparseCounts {
    std::span<const std::uint32_t> genes;
    std::span<const std::uint32_t> counts;

    std::size_t size() const { return genes.size(); }
    std::uint64_t total() const;
};

/**
 * @brief Cell-by-gene raw counts with per-cell metadata.
 *
 * Entries are grouped by cell (compressed rows). Within a cell the stored order is
 * whatever the producer supplied; consumers must not depend on it. Zero counts are never
 * stored. The constructor validates every invariant and throws `DataError` on violation.
 */
class CountMatrix {
public:
    CountMatrix() = default;
    CountMatrix(std::vector<GeneInfo> genes, std::vector<CellMeta> cells, std::vector<std::size_t> offsets,
                std::vector<std::uint32_t> gene_index, std::vector<std::uint32_t> counts);

    std::size_t n_cells() const { return cells_.size(); }
    std::size_t n_genes() const { return genes_.size(); }
    std::size_t n_entries() const { return counts_.size(); }

    SparseCounts cell(std::size_t i) const;
    const CellMeta& meta(std::size_t i) const { return cells_[i]; }
    std::span<const CellMeta> cells() const { return cells_; }
    std::span<const GeneInfo> genes() const { return genes_; }
    std::vector<std::string> gene_ids() const;

    /// New matrix holding the listed cells, in the listed order.
    CountMatrix subset(std::span<const std::size_t> cell_indices) const;

    /// SHA-256 over gene ids, cell ids and per-cell entries sorted by gene.
    std::string fingerprint() const;

    bool operator==(const CountMatrix&) const = default;

private:
    std::vector<GeneInfo> genes_;
    std::vector<CellMeta> cells_;
    std::vector<std::size_t> offsets_{0};
    std::vector<std::uint32_t> gene_index_;
    std::vector<std::uint32_t> counts_;
};

/**
 * Reads a matrix in the triplet text format (header `n_cells n_genes n_entries`, then
 * 1-based `cell gene count` lines), a genes table (`gene_id`, `gene_symbol`) and a cells
 * table (`cell_id`, `donor_id`, `dataset_id`, `disease`, `tissue_type`, `cell_type`, `sex`).
 * Lines starting with `%` in the matrix file are comments. A header row in the tables is optional.
 */
CountMatrix load_counts(const std::filesystem::path& matrix_path, const std::filesystem::path& genes_path,
                        const std::filesystem::path& cells_path, const AnnotationSchema& schema = AnnotationSchema::standard());

/// Loads `matrix.txt`, `genes.tsv` and `cells.tsv` from a corpus directory.
CountMatrix load_corpus(const std::filesystem::path& dir, const AnnotationSchema& schema = AnnotationSchema::standard());

void write_counts(const CountMatrix& m, const std::filesystem::path& matrix_path, const std::filesystem::path& genes_path,
                  const std::filesystem::path& cells_path, const AnnotationSchema& schema = AnnotationSchema::standard());

void write_corpus(const CountMatrix& m, const std::filesystem::path& dir,
                  const AnnotationSchema& schema = AnnotationSchema::standard());

struct QcOptions {
    /// Cells with total count strictly below this are removed.
    std::uint64_t min_counts = 225;
    /// Cells with mitochondrial fraction strictly above this are removed.
    double max_mito_frac = 0.10;
    std::unordered_set<std::string> mito_gene_ids;
    /// Datasets removed wholesale (e.g. unsupported chemistry).
    std::unordered_set<std::string> exclude_datasets;
    /// When non-empty, only these datasets are kept.
    std::unordered_set<std::string> include_datasets;
};

/// Ids of genes whose symbol starts with "MT-".
std::unordered_set<std::string> default_mito_genes(const CountMatrix& m);

struct QcMetrics {
    std::uint64_t total = 0;
    std::uint64_t mito = 0;
    double mito_frac() const { return total == 0 ? 0.0 : static_cast<double>(mito) / static_cast<double>(total); }
};

std::vector<QcMetrics> qc_metrics(const CountMatrix& m, const std::unordered_set<std::string>& mito_gene_ids);

bool passes_qc(const QcMetrics& metrics, const QcOptions& options);

CountMatrix qc_filter(const CountMatrix& m, const QcOptions& options);

/// Returns (cells whose donor is not held, cells whose donor is held).
std::pair<CountMatrix, CountMatrix> split_by_donors(const CountMatrix& m, const std::unordered_set<std::string>& held_donors);

/// Distinct donor ids in order of first appearance.
std::vector<std::string> donors_of(const CountMatrix& m);

struct FetchOptions {
    int max_attempts = 3;
    int backoff_ms = 200;
    int timeout_s = 30;
};

/**
 * Downloads `url` (http, https or file) to `dest`, verifying the SHA-256 digest when given.
 * Transport failures are retried up to `max_attempts` times and then raised as a retryable
 * `NetworkError`. A digest mismatch removes `dest` and raises `DataError("integrity check failed ...")`.
 */
std::filesystem::path fetch_dataset(const std::string& url, const std::filesystem::path& dest,
                                    const std::optional<std::string>& expected_sha256 = std::nullopt,
                                    const FetchOptions& options = {});

/**
 * @brief Parameters of the synthetic corpus generator.
 *
 * Each cell type owns a random permutation of the non-mitochondrial genes; expression
 * means fall off as a power law along that permutation, so counts are heavy-tailed and
 * rank encodings differ between cell types. Diseased donors up-regulate a disease-specific
 * gene block, male donors express a sex marker gene and each tissue up-regulates its own block.
 */
struct SyntheticOptions {
    std::size_t n_cells = 256;
    std::size_t n_genes = 64;
    std::size_t n_donors = 8;
    std::uint64_t seed = 0;
    std::size_t n_mito_genes = 3;
    std::size_t n_cell_types = 4;
    std::size_t n_tissues = 3;
    std::size_t n_datasets = 2;
    /// Fraction of non-mitochondrial genes a cell type expresses.
    double expressed_fraction = 0.6;
    double zipf_exponent = 1.1;
    double mean_library_size = 3000.0;
    double library_size_sdlog = 0.25;
    /// Per-cell mitochondrial fraction is 0.02 plus a uniform draw on [0, jitter).
    double mito_fraction_jitter = 0.02;
    /// Probability that a donor is healthy.
    double healthy_fraction = 0.5;
    /// Fraction of cells made low quality (tiny library or high mitochondrial load).
    double low_quality_fraction = 0.0;
    /// Poisson sampling when true, rounded means otherwise.
    bool poisson = true;
};

CountMatrix gen_synthetic_corpus(const SyntheticOptions& options,
                                 const AnnotationSchema& schema = AnnotationSchema::standard());

}

#endif
