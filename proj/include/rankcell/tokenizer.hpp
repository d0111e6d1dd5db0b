#ifndef RANKCELL_TOKENIZER_HPP
#define RANKCELL_TOKENIZER_HPP

#include "rankcell/corpus.hpp"
#include "rankcell/normalize.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

/**
 * @file tokenizer.hpp
 *
 * @brief Vocabulary, rank-value encodings of cells, annotation prompts, masking and binary shards.
 *
 * A cell becomes a sequence of gene tokens sorted by descending median-scaled expression.
 * The rank variant (`Variant::g`) keeps only the token order; the value variant (`Variant::x`)
 * also carries each gene's rank scaled linearly to [-1, +1]. Annotation prompts are special
 * tokens placed before the genes whose hidden states feed the classification heads.
 */

namespace rankcell {

enum class Variant : std::uint8_t { g = 0, x = 1 };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

namespace special {
inline constexpr std::uint32_t pad = 0;
inline constexpr std::uint32_t mask = 1;
inline constexpr std::uint32_t first_prompt = 2;
inline constexpr std::uint32_t count = 6;
}

/// Target sentinel for prompts whose label is not known.
inline constexpr std::uint32_t kNoTarget = 0xFFFFFFFFu;
/// Gene-to-token sentinel for genes outside the vocabulary.
inline constexpr std::uint32_t kNoToken = 0xFFFFFFFFu;

inline constexpr std::uint32_t prompt_token(Category c) { return special::first_prompt + static_cast<std::uint32_t>(c); }

/**
 * @brief Dense token id assignment.
 *
 * Layout: `<pad>`, `<mask>`, `<disease>`, `<tissue_type>`, `<cell_type>`, `<sex>`, then the
 * schema's label tokens category by category, then one token per gene in the given order.
 */
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> gene_ids, const AnnotationSchema& schema = AnnotationSchema::standard());

    std::size_t size() const { return tokens_.size(); }
    std::size_t n_genes() const { return gene_ids_.size(); }
    std::uint32_t gene_offset() const { return gene_offset_; }

    std::uint32_t label_token(Category c, std::uint16_t label) const;
    /// Class index of a label token within its category.
    std::uint16_t label_class(Category c, std::uint32_t token) const;

    std::optional<std::uint32_t> gene_token(std::string_view gene_id) const;
    bool is_gene_token(std::uint32_t t) const { return t >= gene_offset_ && t < tokens_.size(); }
    const std::string& token_string(std::uint32_t t) const { return tokens_.at(t); }
    const std::vector<std::string>& gene_ids() const { return gene_ids_; }
    const AnnotationSchema& schema() const { return schema_; }

    /// Token of each listed gene, `kNoToken` for genes outside the vocabulary.
    std::vector<std::uint32_t> resolve(std::span<const std::string> gene_ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path, const AnnotationSchema& schema = AnnotationSchema::standard());

private:
    AnnotationSchema schema_ = AnnotationSchema::standard();
    std::vector<std::string> tokens_;
    std::vector<std::string> gene_ids_;
    std::unordered_map<std::string, std::uint32_t> gene_lookup_;
    std::array<std::uint32_t, kNumCategories> label_offset_{};
    std::uint32_t gene_offset_ = 0;
};

struct Prompt {
    Category category;
    /// Label token id, or `kNoTarget`.
    std::uint32_t target = kNoTarget;

    bool operator==(const Prompt&) const = default;
};

struct TokenizedCell {
    std::vector<Prompt> prompts;
    std::vector<std::uint32_t> genes;
    /// Scaled ranks aligned with `genes`; empty for the rank variant.
    std::vector<float> values;

    bool operator==(const TokenizedCell&) const = default;
};

/// Scaled rank of position `k` among `n` retained genes: (n-1-2k)/(n-1), or +1 when n == 1.
double scaled_rank(std::size_t k, std::size_t n);

/// Gene tokens sorted by descending value, ties by ascending token, genes without a token dropped.
std::vector<std::uint32_t> rank_genes(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens,
                                      std::size_t context_len);

/// Rank-variant encoding. Throws `DataError` for an empty cell.
TokenizedCell encode_rank(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens, std::size_t context_len = 2048);

/// Value-variant encoding: same order and truncation, plus scaled ranks.
TokenizedCell encode_value(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens, std::size_t context_len = 2048);

/// Prompts for every category with a known label, in prompt order.
std::vector<Prompt> label_prompts(const CellLabels& labels, const Vocabulary& vocab);

/// Recovers per-category labels from prompts carrying targets.
CellLabels prompt_labels(const TokenizedCell& cell, const Vocabulary& vocab);

/**
 * @brief Raw counts to tokens: depth normalization, median scaling and rank encoding.
 */
class CellEncoder {
public:
    CellEncoder(const Vocabulary& vocab, const GeneMedianDictionary& medians, std::span<const std::string> corpus_gene_ids,
                Variant variant, std::size_t context_len);

    /// Encodes one cell; prompts for all known labels are attached when `meta` is given.
    TokenizedCell encode(const SparseCounts& cell, const CellMeta* meta = nullptr) const;

    Variant variant() const { return variant_; }

private:
    const Vocabulary* vocab_;
    std::vector<double> medians_;
    std::vector<std::uint32_t> tokens_;
    Variant variant_;
    std::size_t context_len_;
};

namespace serial {
std::vector<TokenizedCell> encode_corpus(const CountMatrix& corpus, const CellEncoder& encoder, bool with_labels = true);
}

namespace parallel {
/// Same output as `serial::encode_corpus`; cells are encoded independently across threads.
std::vector<TokenizedCell> encode_corpus(const CountMatrix& corpus, const CellEncoder& encoder, bool with_labels = true);
}

/**
 * Inclusion probability per label, `min_count / count`, so that every label contributes the
 * same expected number of attached prompts. Throws `DataError` on a zero count.
 */
std::map<std::string, double> class_balance_probs(const std::map<std::string, std::size_t>& label_counts);

/// Prompt inclusion probability per category and label index.
struct BalanceTables {
    std::array<std::vector<double>, kNumCategories> q;

    static BalanceTables all_ones(const AnnotationSchema& schema);
    double probability(Category c, std::uint16_t label) const { return q[index_of(c)][label]; }
};

using LabelCounts = std::array<std::vector<std::size_t>, kNumCategories>;

LabelCounts count_labels(std::span<const TokenizedCell> cells, const Vocabulary& vocab);

/**
 * Balance tables from training-set label counts. Disease labels are first grouped into healthy
 * vs diseased with equal expected mass per group, then balanced within the diseased group;
 * other categories are balanced across labels directly. Labels never seen get probability 0.
 */
BalanceTables build_balance_tables(const LabelCounts& counts, const AnnotationSchema& schema);

/**
 * Keeps each labelled prompt of `cell` independently with the label's inclusion probability.
 * One uniform draw is consumed per labelled prompt, in prompt order.
 */
TokenizedCell attach_annotations(const TokenizedCell& cell, const Vocabulary& vocab, const BalanceTables& tables, Rng& rng);

/// Same, starting from raw labels instead of a fully prompted cell.
TokenizedCell attach_annotations(const TokenizedCell& cell, const CellLabels& labels, const Vocabulary& vocab,
                                 const BalanceTables& tables, Rng& rng);

/**
 * Indices (into the gene sequence) selected for masking: each position independently with
 * probability `rate`; when none is drawn the last position is selected.
 */
std::vector<std::uint32_t> draw_mask(std::size_t n_genes, double rate, Rng& rng);

struct MaskedSlot {
    std::uint32_t cell;
    /// Column in the batch row.
    std::uint32_t position;
    std::uint32_t target_token;
    float target_value;
};

struct PromptSlot {
    std::uint32_t cell;
    std::uint32_t position;
    Category category;
    /// Class index within the category, or -1 when unknown.
    std::int32_t target_class;
};

/// Positions 0..3 are reserved for prompts by category; gene k sits at position 4 + k.
inline constexpr std::uint32_t kPromptPositions = 4;

/**
 * @brief Padded model input for a batch of cells.
 *
 * Row `b` holds the attached prompts followed by the gene tokens, then `<pad>` up to the
 * longest row. All matrices are row-major `batch x length`.
 */
struct MaskedBatch {
    Variant variant = Variant::g;
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint32_t> positions;
    std::vector<float> values;
    std::vector<std::uint8_t> value_masked;
    std::vector<std::uint8_t> attention;
    /// Index of the first gene column in each row.
    std::vector<std::uint32_t> gene_start;
    std::vector<std::uint32_t> n_genes;
    std::vector<MaskedSlot> masked;
    std::vector<PromptSlot> prompts;

    std::size_t at(std::size_t b, std::size_t i) const { return b * length + i; }
    /// True when at least one prompt of the category carries a known target.
    bool head_active(Category c) const;
};

/// Assembles a batch; `mask_positions[b]` lists masked gene indices of cell `b` (may be empty).
MaskedBatch assemble_batch(std::span<const TokenizedCell> cells, Variant variant,
                           std::span<const std::vector<std::uint32_t>> mask_positions,
                           const AnnotationSchema& schema = AnnotationSchema::standard());

/// Batch without any masking, for embedding extraction and fine-tuning.
MaskedBatch unmasked_batch(std::span<const TokenizedCell> cells, Variant variant,
                           const AnnotationSchema& schema = AnnotationSchema::standard());

/// Masks each cell with its own stream `Rng(seed, stream, ordinal)`, ordinal = position in `cells`.
MaskedBatch mask_batch(std::span<const TokenizedCell> cells, Variant variant, double rate, std::uint64_t seed,
                       std::uint64_t stream = 0, const AnnotationSchema& schema = AnnotationSchema::standard());

inline constexpr std::uint32_t kShardVersion = 1;

std::string encode_record(const TokenizedCell& cell);

void write_shard(const std::filesystem::path& file, std::span<const TokenizedCell> cells);
std::vector<TokenizedCell> read_shard(const std::filesystem::path& file);

/// Writes `shard-NNNNN.bin` files of at most `cells_per_shard` records; an empty input yields one empty shard.
void write_shards(const std::filesystem::path& dir, std::span<const TokenizedCell> cells, std::size_t cells_per_shard = 65536);
std::vector<TokenizedCell> read_shards(const std::filesystem::path& dir);

}

#endif
