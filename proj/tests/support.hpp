#ifndef RANKCELL_TESTS_SUPPORT_HPP
#define RANKCELL_TESTS_SUPPORT_HPP

#include "rankcell/corpus.hpp"
#include "rankcell/normalize.hpp"
#include "rankcell/tokenizer.hpp"

#include <filesystem>
#include <unistd.h>
#include <string>
#include <vector>

namespace rankcell::test {

struct Encoded {
    CountMatrix corpus;
    GeneMedianDictionary medians;
    Vocabulary vocab;
    std::vector<TokenizedCell> cells;
};

/// Synthetic corpus run through medians, vocabulary and encoding, all prompts attached.
inline Encoded encode_synthetic(const SyntheticOptions& options, Variant variant, std::size_t context_len) {
    Encoded e{gen_synthetic_corpus(options), {}, {}, {}};
    e.medians = build_median_dictionary(e.corpus);
    e.vocab = Vocabulary(e.corpus.gene_ids());
    CellEncoder encoder(e.vocab, e.medians, e.corpus.gene_ids(), variant, context_len);
    e.cells = parallel::encode_corpus(e.corpus, encoder, true);
    return e;
}

/**
 * Corpus whose disease label is carried by a single gene: every cell is generated healthy and from
 * one tissue, then cells of odd-numbered donors become diseased and gain a
 * `MARKER` gene. With `shuffle_labels`, disease labels are permuted across cells afterwards, so
 * expression no longer predicts them.
 */
inline CountMatrix marker_corpus(std::size_t n_cells, std::size_t n_donors, std::size_t n_genes, std::uint64_t seed,
                                 bool shuffle_labels) {
    SyntheticOptions o;
    o.n_cells = n_cells;
    o.n_donors = n_donors;
    o.n_genes = n_genes;
    o.seed = seed;
    o.healthy_fraction = 1.0;
    o.n_tissues = 1;
    const auto base = gen_synthetic_corpus(o);
    const auto& schema = AnnotationSchema::standard();
    const auto healthy = *schema.find(Category::disease, AnnotationSchema::healthy_label);
    const auto sick = *schema.find(Category::disease, "immune");

    std::vector<GeneInfo> genes(base.genes().begin(), base.genes().end());
    const auto marker = static_cast<std::uint32_t>(genes.size());
    genes.push_back({"MARKER", "MARKER"});
    std::vector<CellMeta> cells;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> idx, counts;
    for (std::size_t i = 0; i < base.n_cells(); ++i) {
        auto meta = base.meta(i);
        const bool diseased = std::stoul(meta.donor_id.substr(1)) % 2 == 1;
        meta.labels[index_of(Category::disease)] = diseased ? sick : healthy;
        const auto c = base.cell(i);
        idx.insert(idx.end(), c.genes.begin(), c.genes.end());
        counts.insert(counts.end(), c.counts.begin(), c.counts.end());
        if (diseased) {
            idx.push_back(marker);
            counts.push_back(static_cast<std::uint32_t>(c.total() / 4 + 1));
        }
        offsets.push_back(idx.size());
        cells.push_back(std::move(meta));
    }
    if (shuffle_labels) {
        std::vector<CellLabels> labels;
        for (const auto& c : cells) {
            labels.push_back(c.labels);
        }
        Rng(seed, 0x5bf).shuffle(labels);
        for (std::size_t i = 0; i < cells.size(); ++i) {
            cells[i].labels[index_of(Category::disease)] = labels[i][index_of(Category::disease)];
        }
    }
    return CountMatrix(std::move(genes), std::move(cells), std::move(offsets), std::move(idx), std::move(counts));
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() / ("rankcell-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::filesystem::path path_;
};

}

#endif
