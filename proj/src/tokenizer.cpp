#include "rankcell/tokenizer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>

namespace rankcell {

std::string_view variant_name(Variant v) {
    return v == Variant::g ? "g" : "x";
}

Variant parse_variant(std::string_view name) {
    if (name == "g" || name == "G") {
        return Variant::g;
    }
    if (name == "x" || name == "X") {
        return Variant::x;
    }
    throw UsageError("unknown variant '" + std::string(name) + "', expected g or x");
}

Vocabulary::Vocabulary(std::vector<std::string> gene_ids, const AnnotationSchema& schema)
    : schema_(schema), gene_ids_(std::move(gene_ids)) {
    tokens_ = {"<pad>", "<mask>", "<disease>", "<tissue_type>", "<cell_type>", "<sex>"};
    for (auto c : kCategories) {
        label_offset_[index_of(c)] = static_cast<std::uint32_t>(tokens_.size());
        for (const auto& l : schema_.labels(c)) {
            tokens_.push_back(fmt::format("<{}:{}>", category_name(c), l));
        }
    }
    gene_offset_ = static_cast<std::uint32_t>(tokens_.size());
    for (const auto& id : gene_ids_) {
        if (!gene_lookup_.emplace(id, static_cast<std::uint32_t>(tokens_.size())).second) {
            throw DataError("vocabulary: duplicate gene id " + id);
        }
        tokens_.push_back(id);
    }
}

std::uint32_t Vocabulary::label_token(Category c, std::uint16_t label) const {
    if (label >= schema_.size(c)) {
        throw DataError(fmt::format("vocabulary: label index {} out of range for {}", label, category_name(c)));
    }
    return label_offset_[index_of(c)] + label;
}

std::uint16_t Vocabulary::label_class(Category c, std::uint32_t token) const {
    const auto first = label_offset_[index_of(c)];
    if (token < first || token >= first + schema_.size(c)) {
        throw DataError(fmt::format("token {} is not a {} label", token, category_name(c)));
    }
    return static_cast<std::uint16_t>(token - first);
}

std::optional<std::uint32_t> Vocabulary::gene_token(std::string_view gene_id) const {
    auto it = gene_lookup_.find(std::string(gene_id));
    if (it == gene_lookup_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<std::uint32_t> Vocabulary::resolve(std::span<const std::string> gene_ids) const {
    std::vector<std::uint32_t> out(gene_ids.size(), kNoToken);
    for (std::size_t g = 0; g < gene_ids.size(); ++g) {
        if (auto t = gene_token(gene_ids[g])) {
            out[g] = *t;
        }
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::string out;
    for (std::size_t t = 0; t < tokens_.size(); ++t) {
        out += fmt::format("{}\t{}\n", t, tokens_[t]);
    }
    write_file(path, out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path, const AnnotationSchema& schema) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto fields = split(line, '\t');
        if (fields.size() != 2 || parse_uint(fields[0], path.string()) != tokens.size()) {
            throw DataError(fmt::format("{}:{}: expected '<id>\\t<token>' with dense ids", path.string(), tokens.size() + 1));
        }
        tokens.emplace_back(fields[1]);
    }
    const std::size_t gene_offset = special::count + schema.total();
    if (tokens.size() < gene_offset) {
        throw DataError(path.string() + ": vocabulary shorter than its special and label tokens");
    }
    Vocabulary vocab(std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(gene_offset), tokens.end()), schema);
    if (vocab.tokens_ != tokens) {
        throw DataError(path.string() + ": special or label tokens do not match the annotation schema");
    }
    return vocab;
}

double scaled_rank(std::size_t k, std::size_t n) {
    if (n <= 1) {
        return 1.0;
    }
    // Integer numerator keeps r(k) == -r(n-1-k) exactly.
    const double span = static_cast<double>(n - 1);
    return (span - 2.0 * static_cast<double>(k)) / span;
}

std::vector<std::uint32_t> rank_genes(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens,
                                      std::size_t context_len) {
    std::vector<std::pair<double, std::uint32_t>> items;
    items.reserve(scaled.size());
    for (std::size_t k = 0; k < scaled.size(); ++k) {
        const auto g = scaled.genes[k];
        const auto t = g < gene_tokens.size() ? gene_tokens[g] : kNoToken;
        if (t != kNoToken && scaled.values[k] > 0.0) {
            items.emplace_back(scaled.values[k], t);
        }
    }
    auto before = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
    const auto keep = std::min(context_len, items.size());
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(keep), items.end(), before);
    std::vector<std::uint32_t> out(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        out[i] = items[i].second;
    }
    return out;
}

TokenizedCell encode_rank(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens, std::size_t context_len) {
    TokenizedCell out;
    out.genes = rank_genes(scaled, gene_tokens, context_len);
    if (out.genes.empty()) {
        throw DataError("encode: cell has no expressed genes in the vocabulary");
    }
    return out;
}

TokenizedCell encode_value(const SparseValues& scaled, std::span<const std::uint32_t> gene_tokens, std::size_t context_len) {
    auto out = encode_rank(scaled, gene_tokens, context_len);
    const auto n = out.genes.size();
    out.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = static_cast<float>(scaled_rank(k, n));
    }
    return out;
}

std::vector<Prompt> label_prompts(const CellLabels& labels, const Vocabulary& vocab) {
    std::vector<Prompt> out;
    for (auto c : kCategories) {
        if (auto l = labels[index_of(c)]) {
            out.push_back({c, vocab.label_token(c, *l)});
        }
    }
    return out;
}

CellLabels prompt_labels(const TokenizedCell& cell, const Vocabulary& vocab) {
    CellLabels out;
    for (const auto& p : cell.prompts) {
        if (p.target != kNoTarget) {
            out[index_of(p.category)] = vocab.label_class(p.category, p.target);
        }
    }
    return out;
}

CellEncoder::CellEncoder(const Vocabulary& vocab, const GeneMedianDictionary& medians,
                         std::span<const std::string> corpus_gene_ids, Variant variant, std::size_t context_len)
    : vocab_(&vocab), medians_(medians.resolve(corpus_gene_ids)), tokens_(vocab.resolve(corpus_gene_ids)), variant_(variant),
      context_len_(context_len) {
    if (context_len == 0) {
        throw UsageError("context length must be positive");
    }
}

TokenizedCell CellEncoder::encode(const SparseCounts& cell, const CellMeta* meta) const {
    auto scaled = median_scale(depth_normalize(cell), medians_);
    auto out = variant_ == Variant::g ? encode_rank(scaled, tokens_, context_len_) : encode_value(scaled, tokens_, context_len_);
    if (meta) {
        out.prompts = label_prompts(meta->labels, *vocab_);
    }
    return out;
}

namespace serial {

std::vector<TokenizedCell> encode_corpus(const CountMatrix& corpus, const CellEncoder& encoder, bool with_labels) {
    std::vector<TokenizedCell> out(corpus.n_cells());
    for (std::size_t i = 0; i < corpus.n_cells(); ++i) {
        out[i] = encoder.encode(corpus.cell(i), with_labels ? &corpus.meta(i) : nullptr);
    }
    return out;
}

}

namespace parallel {

std::vector<TokenizedCell> encode_corpus(const CountMatrix& corpus, const CellEncoder& encoder, bool with_labels) {
    std::vector<TokenizedCell> out(corpus.n_cells());
    const auto n = static_cast<std::ptrdiff_t>(corpus.n_cells());
    std::string error;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(i);
        try {
            out[c] = encoder.encode(corpus.cell(c), with_labels ? &corpus.meta(c) : nullptr);
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) {
                error = fmt::format("cell {}: {}", corpus.meta(c).cell_id, e.what());
            }
        }
    }
    if (!error.empty()) {
        throw DataError(error);
    }
    return out;
}

}

std::map<std::string, double> class_balance_probs(const std::map<std::string, std::size_t>& label_counts) {
    std::map<std::string, double> out;
    if (label_counts.empty()) {
        return out;
    }
    std::size_t min_count = std::numeric_limits<std::size_t>::max();
    for (const auto& [label, n] : label_counts) {
        if (n == 0) {
            throw DataError("class_balance_probs: label '" + label + "' has zero count");
        }
        min_count = std::min(min_count, n);
    }
    for (const auto& [label, n] : label_counts) {
        out[label] = static_cast<double>(min_count) / static_cast<double>(n);
    }
    return out;
}

BalanceTables BalanceTables::all_ones(const AnnotationSchema& schema) {
    BalanceTables t;
    for (auto c : kCategories) {
        t.q[index_of(c)].assign(schema.size(c), 1.0);
    }
    return t;
}

LabelCounts count_labels(std::span<const TokenizedCell> cells, const Vocabulary& vocab) {
    LabelCounts counts;
    for (auto c : kCategories) {
        counts[index_of(c)].assign(vocab.schema().size(c), 0);
    }
    for (const auto& cell : cells) {
        for (const auto& p : cell.prompts) {
            if (p.target != kNoTarget) {
                ++counts[index_of(p.category)][vocab.label_class(p.category, p.target)];
            }
        }
    }
    return counts;
}

namespace {

// Balances the labels in `members` against each other; returns probabilities and the expected attached mass.
std::pair<std::map<std::string, double>, double> balance_group(const std::vector<std::size_t>& counts,
                                                               const std::vector<std::uint16_t>& members) {
    std::map<std::string, std::size_t> present;
    for (auto l : members) {
        if (counts[l] > 0) {
            present[std::to_string(l)] = counts[l];
        }
    }
    auto probs = class_balance_probs(present);
    double mass = 0.0;
    for (const auto& [key, q] : probs) {
        mass += q * static_cast<double>(present[key]);
    }
    return {probs, mass};
}

}

BalanceTables build_balance_tables(const LabelCounts& counts, const AnnotationSchema& schema) {
    BalanceTables t;
    for (auto c : kCategories) {
        const auto& n = counts[index_of(c)];
        if (n.size() != schema.size(c)) {
            throw DataError(fmt::format("label counts for {} do not match the schema", category_name(c)));
        }
        auto& q = t.q[index_of(c)];
        q.assign(n.size(), 0.0);

        std::vector<std::vector<std::uint16_t>> groups;
        const auto healthy = c == Category::disease ? schema.find(c, AnnotationSchema::healthy_label) : std::nullopt;
        if (healthy) {
            std::vector<std::uint16_t> diseased;
            for (std::uint16_t l = 0; l < n.size(); ++l) {
                if (l != *healthy) {
                    diseased.push_back(l);
                }
            }
            groups = {{*healthy}, diseased};
        } else {
            std::vector<std::uint16_t> all(n.size());
            std::iota(all.begin(), all.end(), std::uint16_t{0});
            groups = {all};
        }

        std::vector<std::pair<std::map<std::string, double>, double>> balanced;
        double min_mass = std::numeric_limits<double>::infinity();
        for (const auto& g : groups) {
            balanced.push_back(balance_group(n, g));
            if (balanced.back().second > 0.0) {
                min_mass = std::min(min_mass, balanced.back().second);
            }
        }
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const auto& [probs, mass] = balanced[gi];
            if (mass <= 0.0) {
                continue;
            }
            const double group_scale = min_mass / mass;
            for (const auto& [key, p] : probs) {
                q[static_cast<std::size_t>(std::stoul(key))] = p * group_scale;
            }
        }
    }
    return t;
}

TokenizedCell attach_annotations(const TokenizedCell& cell, const Vocabulary& vocab, const BalanceTables& tables, Rng& rng) {
    TokenizedCell out;
    out.genes = cell.genes;
    out.values = cell.values;
    for (const auto& p : cell.prompts) {
        if (p.target == kNoTarget) {
            continue;
        }
        const double q = tables.probability(p.category, vocab.label_class(p.category, p.target));
        if (rng.uniform() < q) {
            out.prompts.push_back(p);
        }
    }
    return out;
}

TokenizedCell attach_annotations(const TokenizedCell& cell, const CellLabels& labels, const Vocabulary& vocab,
                                 const BalanceTables& tables, Rng& rng) {
    TokenizedCell full = cell;
    full.prompts = label_prompts(labels, vocab);
    return attach_annotations(full, vocab, tables, rng);
}

std::vector<std::uint32_t> draw_mask(std::size_t n_genes, double rate, Rng& rng) {
    if (!(rate > 0.0 && rate < 1.0)) {
        throw UsageError("mask rate must lie in (0, 1)");
    }
    std::vector<std::uint32_t> out;
    for (std::size_t k = 0; k < n_genes; ++k) {
        if (rng.uniform() < rate) {
            out.push_back(static_cast<std::uint32_t>(k));
        }
    }
    if (out.empty() && n_genes > 0) {
        out.push_back(static_cast<std::uint32_t>(n_genes - 1));
    }
    return out;
}

bool MaskedBatch::head_active(Category c) const {
    return std::any_of(prompts.begin(), prompts.end(), [c](const PromptSlot& p) { return p.category == c && p.target_class >= 0; });
}

MaskedBatch assemble_batch(std::span<const TokenizedCell> cells, Variant variant,
                           std::span<const std::vector<std::uint32_t>> mask_positions, const AnnotationSchema& schema) {
    if (!mask_positions.empty() && mask_positions.size() != cells.size()) {
        throw DataError("assemble_batch: one mask list per cell required");
    }
    MaskedBatch b;
    b.variant = variant;
    b.batch = cells.size();
    for (const auto& c : cells) {
        if (variant == Variant::x && c.values.size() != c.genes.size()) {
            throw DataError("assemble_batch: value-variant cell without scaled ranks");
        }
        b.length = std::max(b.length, c.prompts.size() + c.genes.size());
    }
    const auto total = b.batch * b.length;
    b.tokens.assign(total, special::pad);
    b.positions.assign(total, 0);
    b.values.assign(total, 0.0f);
    b.value_masked.assign(total, 0);
    b.attention.assign(total, 0);
    b.gene_start.resize(b.batch);
    b.n_genes.resize(b.batch);

    std::array<std::uint32_t, kNumCategories> label_first{};
    {
        std::uint32_t off = special::count;
        for (auto c : kCategories) {
            label_first[index_of(c)] = off;
            off += static_cast<std::uint32_t>(schema.size(c));
        }
    }

    for (std::size_t row = 0; row < cells.size(); ++row) {
        const auto& c = cells[row];
        std::size_t col = 0;
        for (const auto& p : c.prompts) {
            const auto i = b.at(row, col);
            b.tokens[i] = prompt_token(p.category);
            b.positions[i] = static_cast<std::uint32_t>(index_of(p.category));
            b.attention[i] = 1;
            std::int32_t cls = -1;
            if (p.target != kNoTarget) {
                cls = static_cast<std::int32_t>(p.target) - static_cast<std::int32_t>(label_first[index_of(p.category)]);
                if (cls < 0 || cls >= static_cast<std::int32_t>(schema.size(p.category))) {
                    throw DataError("assemble_batch: prompt target is not a label of its category");
                }
            }
            b.prompts.push_back({static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col), p.category, cls});
            ++col;
        }
        b.gene_start[row] = static_cast<std::uint32_t>(col);
        b.n_genes[row] = static_cast<std::uint32_t>(c.genes.size());
        for (std::size_t k = 0; k < c.genes.size(); ++k, ++col) {
            const auto i = b.at(row, col);
            b.tokens[i] = c.genes[k];
            b.positions[i] = kPromptPositions + static_cast<std::uint32_t>(k);
            b.attention[i] = 1;
            if (variant == Variant::x) {
                b.values[i] = c.values[k];
            }
        }
        if (mask_positions.empty()) {
            continue;
        }
        for (auto k : mask_positions[row]) {
            if (k >= c.genes.size()) {
                throw DataError("assemble_batch: mask position beyond the gene sequence");
            }
            const auto col_k = b.gene_start[row] + k;
            const auto i = b.at(row, col_k);
            b.masked.push_back({static_cast<std::uint32_t>(row), col_k, c.genes[k], variant == Variant::x ? c.values[k] : 0.0f});
            if (variant == Variant::g) {
                b.tokens[i] = special::mask;
            } else {
                b.values[i] = 0.0f;
                b.value_masked[i] = 1;
            }
        }
    }
    return b;
}

MaskedBatch unmasked_batch(std::span<const TokenizedCell> cells, Variant variant, const AnnotationSchema& schema) {
    return assemble_batch(cells, variant, {}, schema);
}

MaskedBatch mask_batch(std::span<const TokenizedCell> cells, Variant variant, double rate, std::uint64_t seed, std::uint64_t stream,
                       const AnnotationSchema& schema) {
    std::vector<std::vector<std::uint32_t>> masks(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        Rng rng(seed, stream, i);
        masks[i] = draw_mask(cells[i].genes.size(), rate, rng);
    }
    return assemble_batch(cells, variant, masks, schema);
}

namespace {

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

class ByteReader {
public:
    ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t pos() const { return pos_; }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(data_[pos_]) | (static_cast<std::uint16_t>(static_cast<std::uint8_t>(data_[pos_ + 1])) << 8);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    [[noreturn]] void fail(const std::string& what) const { throw DataError(context_ + ": " + what); }

private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            fail("truncated record");
        }
    }

    std::string_view data_;
    std::string context_;
    std::size_t pos_ = 0;
};

TokenizedCell decode_record(ByteReader& r) {
    const auto version = r.u32();
    if (version != kShardVersion) {
        r.fail(fmt::format("version mismatch (found {}, expected {})", version, kShardVersion));
    }
    TokenizedCell cell;
    const auto n_prompts = r.u16();
    for (std::uint16_t i = 0; i < n_prompts; ++i) {
        const auto tok = r.u32();
        const auto target = r.u32();
        if (tok < special::first_prompt || tok >= special::first_prompt + kNumCategories) {
            r.fail(fmt::format("invalid prompt token {}", tok));
        }
        cell.prompts.push_back({static_cast<Category>(tok - special::first_prompt), target});
    }
    const auto n = r.u32();
    if (static_cast<std::size_t>(n) * 4 > r.remaining()) {
        r.fail("truncated record");
    }
    cell.genes.resize(n);
    for (auto& g : cell.genes) {
        g = r.u32();
    }
    if (r.u8() != 0) {
        cell.values.resize(n);
        for (auto& v : cell.values) {
            v = r.f32();
        }
    }
    return cell;
}

}

std::string encode_record(const TokenizedCell& cell) {
    std::string body;
    put_u32(body, kShardVersion);
    put_u16(body, static_cast<std::uint16_t>(cell.prompts.size()));
    for (const auto& p : cell.prompts) {
        put_u32(body, prompt_token(p.category));
        put_u32(body, p.target);
    }
    put_u32(body, static_cast<std::uint32_t>(cell.genes.size()));
    for (auto g : cell.genes) {
        put_u32(body, g);
    }
    body.push_back(cell.values.empty() ? 0 : 1);
    for (auto v : cell.values) {
        put_u32(body, std::bit_cast<std::uint32_t>(v));
    }
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(body.size()));
    return out + body;
}

void write_shard(const std::filesystem::path& file, std::span<const TokenizedCell> cells) {
    std::string out;
    for (const auto& c : cells) {
        out += encode_record(c);
    }
    write_file(file, out);
}

std::vector<TokenizedCell> read_shard(const std::filesystem::path& file) {
    const auto data = read_file(file);
    std::vector<TokenizedCell> out;
    std::size_t pos = 0;
    while (pos < data.size()) {
        const auto ordinal = out.size();
        const auto context = fmt::format("{}: record {}", file.string(), ordinal);
        ByteReader prefix(std::string_view(data).substr(pos), context);
        const auto len = prefix.u32();
        if (len > prefix.remaining()) {
            prefix.fail(fmt::format("length prefix {} exceeds the {} bytes left (truncated or corrupt)", len, prefix.remaining()));
        }
        ByteReader body(std::string_view(data).substr(pos + 4, len), context);
        out.push_back(decode_record(body));
        if (body.remaining() != 0) {
            body.fail(fmt::format("length prefix {} disagrees with record contents", len));
        }
        pos += 4 + len;
    }
    return out;
}

void write_shards(const std::filesystem::path& dir, std::span<const TokenizedCell> cells, std::size_t cells_per_shard) {
    std::filesystem::create_directories(dir);
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name.starts_with("shard-") && name.ends_with(".bin")) {
            std::filesystem::remove(entry.path());
        }
    }
    cells_per_shard = std::max<std::size_t>(1, cells_per_shard);
    std::size_t index = 0;
    std::size_t start = 0;
    do {
        const auto n = std::min(cells_per_shard, cells.size() - start);
        write_shard(dir / fmt::format("shard-{:05d}.bin", index++), cells.subspan(start, n));
        start += n;
    } while (start < cells.size());
}

std::vector<TokenizedCell> read_shards(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw DataError("shard directory not found: " + dir.string());
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name.starts_with("shard-") && name.ends_with(".bin")) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<TokenizedCell> out;
    for (const auto& f : files) {
        auto cells = read_shard(f);
        std::move(cells.begin(), cells.end(), std::back_inserter(out));
    }
    return out;
}

}
