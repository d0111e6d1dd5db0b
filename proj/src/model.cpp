#include "rankcell/model.hpp"

#include "rankcell/kernels.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace rankcell {

namespace K = kernels::parallel;

void ModelConfig::validate() const {
    auto fail = [](std::string_view field, std::string_view why) {
        throw UsageError(fmt::format("model.{}: {}", field, why));
    };
    if (n_layers == 0) {
        fail("n_layers", "must be positive");
    }
    if (d_model == 0) {
        fail("d_model", "must be positive");
    }
    if (n_heads == 0 || d_model % n_heads != 0) {
        fail("n_heads", fmt::format("must divide d_model ({})", d_model));
    }
    if (d_ff == 0) {
        fail("d_ff", "must be positive");
    }
    if (context_len == 0) {
        fail("context_len", "must be positive");
    }
    if (vocab_size <= special::count) {
        fail("vocab_size", "must exceed the special tokens");
    }
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        if (head_sizes[c] == 0) {
            fail("head_sizes", "every head needs at least one class");
        }
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        fail("dropout", "must lie in [0, 1)");
    }
    if (!(layer_norm_eps > 0.0)) {
        fail("layer_norm_eps", "must be positive");
    }
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {
        {"variant", std::string(variant_name(cfg.variant))},
        {"n_layers", cfg.n_layers},
        {"d_model", cfg.d_model},
        {"n_heads", cfg.n_heads},
        {"d_ff", cfg.d_ff},
        {"context_len", cfg.context_len},
        {"vocab_size", cfg.vocab_size},
        {"head_sizes", cfg.head_sizes},
        {"dropout", cfg.dropout},
        {"layer_norm_eps", cfg.layer_norm_eps},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j, std::string_view path) {
    if (!j.is_object()) {
        throw UsageError(fmt::format("{}: expected an object", path));
    }
    ModelConfig cfg;
    for (const auto& [key, value] : j.items()) {
        const auto field = fmt::format("{}.{}", path, key);
        try {
            if (key == "variant") {
                cfg.variant = parse_variant(value.get<std::string>());
            } else if (key == "n_layers") {
                cfg.n_layers = value.get<std::size_t>();
            } else if (key == "d_model") {
                cfg.d_model = value.get<std::size_t>();
            } else if (key == "n_heads") {
                cfg.n_heads = value.get<std::size_t>();
            } else if (key == "d_ff") {
                cfg.d_ff = value.get<std::size_t>();
            } else if (key == "context_len") {
                cfg.context_len = value.get<std::size_t>();
            } else if (key == "vocab_size") {
                cfg.vocab_size = value.get<std::size_t>();
            } else if (key == "head_sizes") {
                cfg.head_sizes = value.get<std::array<std::size_t, kNumCategories>>();
            } else if (key == "dropout") {
                cfg.dropout = value.get<double>();
            } else if (key == "layer_norm_eps") {
                cfg.layer_norm_eps = value.get<double>();
            } else {
                throw UsageError(fmt::format("{}: unknown field", field));
            }
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(fmt::format("{}: {}", field, e.what()));
        } catch (const UsageError&) {
            throw;
        } catch (const Error& e) {
            throw UsageError(fmt::format("{}: {}", field, e.what()));
        }
    }
    return cfg;
}

namespace {

struct Preset {
    std::string_view name;
    std::size_t layers, d_model, heads, d_ff;
};

constexpr std::array<Preset, 10> kPresets{{
    {"tiny", 2, 16, 4, 64},
    {"overfit", 3, 64, 4, 256},
    {"0.1M", 2, 64, 4, 256},
    {"0.5M", 2, 128, 4, 512},
    {"2M", 4, 192, 6, 768},
    {"10M", 3, 128, 4, 512},
    {"30M", 6, 256, 8, 1024},
    {"70M", 12, 512, 8, 640},
    {"160M", 12, 768, 12, 3072},
    {"400M", 24, 1024, 16, 4096},
}};

}

std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const auto& p : kPresets) {
        out.emplace_back(p.name);
    }
    return out;
}

ModelConfig preset_config(std::string_view name, Variant variant, std::size_t vocab_size, std::size_t context_len) {
    for (const auto& p : kPresets) {
        if (p.name == name) {
            ModelConfig cfg;
            cfg.variant = variant;
            cfg.n_layers = p.layers;
            cfg.d_model = p.d_model;
            cfg.n_heads = p.heads;
            cfg.d_ff = p.d_ff;
            cfg.vocab_size = vocab_size;
            cfg.context_len = context_len;
            return cfg;
        }
    }
    throw UsageError(fmt::format("unknown model preset '{}'", name));
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
    const auto d = cfg.d_model;
    const auto v = cfg.vocab_size;
    add("tok_emb", {v, d}, false);
    add("pos_emb", {cfg.max_positions(), d}, false);
    if (cfg.variant == Variant::x) {
        add("val_w", {d}, true);
        add("val_b", {d}, false);
        add("mask_emb", {d}, false);
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto p = fmt::format("layers.{}.", l);
        add(p + "ln1.g", {d}, false);
        add(p + "ln1.b", {d}, false);
        add(p + "attn.qkv.w", {d, 3 * d}, true);
        add(p + "attn.qkv.b", {3 * d}, false);
        add(p + "attn.out.w", {d, d}, true);
        add(p + "attn.out.b", {d}, false);
        add(p + "ln2.g", {d}, false);
        add(p + "ln2.b", {d}, false);
        add(p + "ffn.up.w", {d, cfg.d_ff}, true);
        add(p + "ffn.up.b", {cfg.d_ff}, false);
        add(p + "ffn.down.w", {cfg.d_ff, d}, true);
        add(p + "ffn.down.b", {d}, false);
    }
    add("ln_f.g", {d}, false);
    add("ln_f.b", {d}, false);
    const std::size_t out = cfg.variant == Variant::g ? v : 1;
    add("mlm.w", {d, out}, true);
    add("mlm.b", {out}, false);
    for (auto c : kCategories) {
        const auto name = std::string(category_name(c));
        add("cls." + name + ".w", {d, cfg.head_sizes[index_of(c)]}, true);
        add("cls." + name + ".b", {cfg.head_sizes[index_of(c)]}, false);
    }
}

void ParamLayout::add(std::string name, std::vector<std::size_t> shape, bool decay) {
    TensorInfo t;
    t.size = 1;
    for (auto s : shape) {
        t.size *= s;
    }
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.offset = total_;
    t.decay = decay;
    total_ += t.size;
    tensors_.push_back(std::move(t));
}

const TensorInfo* ParamLayout::find(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

const TensorInfo& ParamLayout::at(std::string_view name) const {
    if (const auto* t = find(name)) {
        return *t;
    }
    throw DataError(fmt::format("no parameter tensor named '{}'", name));
}

std::size_t parameter_count(const ModelConfig& cfg) { return ParamLayout(cfg).total(); }

template<typename T>
ModelParams<T>::ModelParams(const ModelConfig& cfg) : config(cfg), layout(cfg), data(layout.total(), T(0)) {}

template<typename T>
std::span<T> ModelParams<T>::tensor(std::string_view name) {
    const auto& t = layout.at(name);
    return std::span<T>(data).subspan(t.offset, t.size);
}

template<typename T>
std::span<const T> ModelParams<T>::tensor(std::string_view name) const {
    const auto& t = layout.at(name);
    return std::span<const T>(data).subspan(t.offset, t.size);
}

template<typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams<T> p(cfg);
    const double d = static_cast<double>(cfg.d_model);
    const auto& tensors = p.layout.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = tensors[i];
        auto out = std::span<T>(p.data).subspan(t.offset, t.size);
        if (t.name.ends_with(".g")) {
            std::fill(out.begin(), out.end(), T(1));
        } else if (t.name.ends_with(".b") || t.name == "val_b") {
            std::fill(out.begin(), out.end(), T(0));
        } else {
            const bool head = t.name.starts_with("mlm.") || t.name.starts_with("cls.");
            const double sd = head ? 1.0 / d : 1.0 / std::sqrt(d);
            Rng rng(seed, 0x1417, i);
            for (auto& v : out) {
                v = static_cast<T>(sd * rng.normal());
            }
        }
    }
    return p;
}

namespace {

template<typename T>
struct Access {
    const ModelParams<T>& p;
    std::span<const T> operator()(std::string_view name) const { return p.tensor(name); }
};

template<typename T>
std::span<T> grad_of(const ModelParams<T>& p, std::span<T> grads, std::string_view name) {
    const auto& t = p.layout.at(name);
    return grads.subspan(t.offset, t.size);
}

template<typename T>
std::vector<T> dropout_mask(std::uint64_t seed, std::size_t layer, std::size_t branch, std::size_t n, double rate) {
    std::vector<T> mask(n);
    Rng rng(seed, 2 * layer + branch, 0xd50);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask) {
        m = rng.uniform() < rate ? T(0) : keep;
    }
    return mask;
}

bool is_gene_column(const MaskedBatch& b, std::size_t row, std::size_t col) {
    return col >= b.gene_start[row] && col < b.gene_start[row] + b.n_genes[row];
}

template<typename T>
void embed_inputs(const ModelParams<T>& p, const MaskedBatch& b, std::span<T> x) {
    const auto& cfg = p.config;
    const auto d = cfg.d_model;
    const auto tok = p.tensor("tok_emb");
    const auto pos = p.tensor("pos_emb");
    std::span<const T> val_w, val_b, mask_emb;
    if (cfg.variant == Variant::x) {
        val_w = p.tensor("val_w");
        val_b = p.tensor("val_b");
        mask_emb = p.tensor("mask_emb");
    }
    for (std::size_t row = 0; row < b.batch; ++row) {
        for (std::size_t col = 0; col < b.length; ++col) {
            const auto i = b.at(row, col);
            const auto t = b.tokens[i];
            const auto q = b.positions[i];
            if (t >= cfg.vocab_size) {
                throw DataError(fmt::format("forward: token id {} outside vocabulary of {}", t, cfg.vocab_size));
            }
            if (q >= cfg.max_positions()) {
                throw DataError(fmt::format("forward: position {} beyond max_positions {}", q, cfg.max_positions()));
            }
            T* xi = x.data() + i * d;
            const T* te = tok.data() + static_cast<std::size_t>(t) * d;
            const T* pe = pos.data() + static_cast<std::size_t>(q) * d;
            for (std::size_t e = 0; e < d; ++e) {
                xi[e] = te[e] + pe[e];
            }
            if (cfg.variant == Variant::x && is_gene_column(b, row, col)) {
                if (b.value_masked[i]) {
                    for (std::size_t e = 0; e < d; ++e) {
                        xi[e] += mask_emb[e];
                    }
                } else {
                    const T v = static_cast<T>(b.values[i]);
                    for (std::size_t e = 0; e < d; ++e) {
                        xi[e] += v * val_w[e] + val_b[e];
                    }
                }
            }
        }
    }
}

template<typename T>
void layer_forward(const ModelParams<T>& p, std::size_t l, const MaskedBatch& b, std::vector<T>& x, LayerCache<T>& c,
                   const DropoutSpec& dropout) {
    const auto& cfg = p.config;
    const std::size_t d = cfg.d_model, f = cfg.d_ff, m = b.batch * b.length;
    const T eps = static_cast<T>(cfg.layer_norm_eps);
    const auto pre = fmt::format("layers.{}.", l);
    Access<T> w{p};

    c.x_in = x;
    c.h1.resize(m * d);
    c.ln1_mean.resize(m);
    c.ln1_rstd.resize(m);
    K::layernorm<T>(x, w(pre + "ln1.g"), w(pre + "ln1.b"), c.h1, c.ln1_mean, c.ln1_rstd, m, d, eps);
    c.qkv.resize(m * 3 * d);
    K::matmul<T>(c.h1, w(pre + "attn.qkv.w"), c.qkv, m, d, 3 * d);
    K::add_row_vector<T>(c.qkv, w(pre + "attn.qkv.b"), m, 3 * d);
    c.probs.resize(b.batch * cfg.n_heads * b.length * b.length);
    c.ctx.resize(m * d);
    K::attention<T>(c.qkv, b.attention, c.probs, c.ctx, b.batch, b.length, d, cfg.n_heads);
    std::vector<T> branch(m * d);
    K::matmul<T>(c.ctx, w(pre + "attn.out.w"), branch, m, d, d);
    K::add_row_vector<T>(branch, w(pre + "attn.out.b"), m, d);
    const bool drop = dropout.seed && cfg.dropout > 0.0;
    if (drop) {
        c.attn_mask = dropout_mask<T>(*dropout.seed, l, 0, m * d, cfg.dropout);
        for (std::size_t i = 0; i < m * d; ++i) {
            branch[i] *= c.attn_mask[i];
        }
    } else {
        c.attn_mask.clear();
    }
    for (std::size_t i = 0; i < m * d; ++i) {
        x[i] += branch[i];
    }

    c.x_mid = x;
    c.h2.resize(m * d);
    c.ln2_mean.resize(m);
    c.ln2_rstd.resize(m);
    K::layernorm<T>(x, w(pre + "ln2.g"), w(pre + "ln2.b"), c.h2, c.ln2_mean, c.ln2_rstd, m, d, eps);
    c.up.resize(m * f);
    K::matmul<T>(c.h2, w(pre + "ffn.up.w"), c.up, m, d, f);
    K::add_row_vector<T>(c.up, w(pre + "ffn.up.b"), m, f);
    c.act.resize(m * f);
    K::gelu<T>(c.up, c.act);
    K::matmul<T>(c.act, w(pre + "ffn.down.w"), branch, m, f, d);
    K::add_row_vector<T>(branch, w(pre + "ffn.down.b"), m, d);
    if (drop) {
        c.ffn_mask = dropout_mask<T>(*dropout.seed, l, 1, m * d, cfg.dropout);
        for (std::size_t i = 0; i < m * d; ++i) {
            branch[i] *= c.ffn_mask[i];
        }
    } else {
        c.ffn_mask.clear();
    }
    for (std::size_t i = 0; i < m * d; ++i) {
        x[i] += branch[i];
    }
}

template<typename T>
std::vector<T> gather_rows(std::span<const T> hidden, std::size_t d, std::span<const std::size_t> rows) {
    std::vector<T> out(rows.size() * d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(hidden.data() + rows[r] * d, d, out.data() + r * d);
    }
    return out;
}

template<typename T>
void scatter_add_rows(std::span<T> hidden, std::size_t d, std::span<const std::size_t> rows, std::span<const T> src) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
        T* dst = hidden.data() + rows[r] * d;
        const T* s = src.data() + r * d;
        for (std::size_t e = 0; e < d; ++e) {
            dst[e] += s[e];
        }
    }
}

std::vector<std::size_t> masked_rows(const MaskedBatch& b) {
    std::vector<std::size_t> rows;
    rows.reserve(b.masked.size());
    for (const auto& s : b.masked) {
        rows.push_back(b.at(s.cell, s.position));
    }
    return rows;
}

std::vector<std::size_t> prompt_rows(const MaskedBatch& b, std::span<const std::size_t> slots) {
    std::vector<std::size_t> rows;
    rows.reserve(slots.size());
    for (auto s : slots) {
        rows.push_back(b.at(b.prompts[s].cell, b.prompts[s].position));
    }
    return rows;
}

/// Per-slot weight 1 / (masked slots in the cell * cells with a masked slot).
std::vector<double> mlm_slot_weights(const MaskedBatch& b) {
    std::vector<std::size_t> per_cell(b.batch, 0);
    for (const auto& s : b.masked) {
        ++per_cell[s.cell];
    }
    const auto cells = static_cast<double>(std::count_if(per_cell.begin(), per_cell.end(), [](auto n) { return n > 0; }));
    std::vector<double> w;
    w.reserve(b.masked.size());
    for (const auto& s : b.masked) {
        w.push_back(1.0 / (static_cast<double>(per_cell[s.cell]) * cells));
    }
    return w;
}

template<typename T>
double log_sum_exp(const T* z, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        mx = std::max(mx, static_cast<double>(z[j]));
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        s += std::exp(static_cast<double>(z[j]) - mx);
    }
    return mx + std::log(s);
}

template<typename T>
std::size_t arg_max(const T* z, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(z, z + n) - z);
}

/// Gradient of a linear head `y = h W + bias` given dy; accumulates weight grads and dh rows.
template<typename T>
void linear_head_backward(std::span<const T> h, std::span<const T> w, std::span<const T> dy, std::span<T> gw, std::span<T> gb,
                          std::span<T> dh, std::size_t n, std::size_t d, std::size_t out) {
    K::matmul_at<T>(h, dy, gw, n, d, out, true);
    K::add_column_sums<T>(dy, gb, n, out);
    K::matmul_bt<T>(dy, w, dh, n, out, d);
}

template<typename T>
void layer_backward(const ModelParams<T>& p, std::size_t l, const MaskedBatch& b, const LayerCache<T>& c, std::vector<T>& dx,
                    std::span<T> grads) {
    const auto& cfg = p.config;
    const std::size_t d = cfg.d_model, f = cfg.d_ff, m = b.batch * b.length;
    const auto pre = fmt::format("layers.{}.", l);
    Access<T> w{p};
    auto g = [&](const std::string& name) { return grad_of<T>(p, grads, name); };

    std::vector<T> branch(dx);
    if (!c.ffn_mask.empty()) {
        for (std::size_t i = 0; i < m * d; ++i) {
            branch[i] *= c.ffn_mask[i];
        }
    }
    K::matmul_at<T>(c.act, branch, g(pre + "ffn.down.w"), m, f, d, true);
    K::add_column_sums<T>(branch, g(pre + "ffn.down.b"), m, d);
    std::vector<T> d_act(m * f);
    K::matmul_bt<T>(branch, w(pre + "ffn.down.w"), d_act, m, d, f);
    std::vector<T> d_up(m * f);
    K::gelu_backward<T>(c.up, d_act, d_up);
    K::matmul_at<T>(c.h2, d_up, g(pre + "ffn.up.w"), m, d, f, true);
    K::add_column_sums<T>(d_up, g(pre + "ffn.up.b"), m, f);
    std::vector<T> d_h(m * d);
    K::matmul_bt<T>(d_up, w(pre + "ffn.up.w"), d_h, m, f, d);
    K::layernorm_backward<T>(d_h, c.x_mid, w(pre + "ln2.g"), c.ln2_mean, c.ln2_rstd, dx, g(pre + "ln2.g"), g(pre + "ln2.b"), m, d);

    branch = dx;
    if (!c.attn_mask.empty()) {
        for (std::size_t i = 0; i < m * d; ++i) {
            branch[i] *= c.attn_mask[i];
        }
    }
    K::matmul_at<T>(c.ctx, branch, g(pre + "attn.out.w"), m, d, d, true);
    K::add_column_sums<T>(branch, g(pre + "attn.out.b"), m, d);
    std::vector<T> d_ctx(m * d);
    K::matmul_bt<T>(branch, w(pre + "attn.out.w"), d_ctx, m, d, d);
    std::vector<T> d_qkv(m * 3 * d, T(0));
    K::attention_backward<T>(c.qkv, b.attention, c.probs, d_ctx, d_qkv, b.batch, b.length, d, cfg.n_heads);
    K::matmul_at<T>(c.h1, d_qkv, g(pre + "attn.qkv.w"), m, d, 3 * d, true);
    K::add_column_sums<T>(d_qkv, g(pre + "attn.qkv.b"), m, 3 * d);
    K::matmul_bt<T>(d_qkv, w(pre + "attn.qkv.w"), d_h, m, 3 * d, d);
    K::layernorm_backward<T>(d_h, c.x_in, w(pre + "ln1.g"), c.ln1_mean, c.ln1_rstd, dx, g(pre + "ln1.g"), g(pre + "ln1.b"), m, d);
}

template<typename T>
void embed_backward(const ModelParams<T>& p, const MaskedBatch& b, std::span<const T> dx, std::span<T> grads) {
    const auto& cfg = p.config;
    const auto d = cfg.d_model;
    auto g_tok = grad_of<T>(p, grads, "tok_emb");
    auto g_pos = grad_of<T>(p, grads, "pos_emb");
    std::span<T> g_val_w, g_val_b, g_mask;
    if (cfg.variant == Variant::x) {
        g_val_w = grad_of<T>(p, grads, "val_w");
        g_val_b = grad_of<T>(p, grads, "val_b");
        g_mask = grad_of<T>(p, grads, "mask_emb");
    }
    for (std::size_t row = 0; row < b.batch; ++row) {
        for (std::size_t col = 0; col < b.length; ++col) {
            const auto i = b.at(row, col);
            const T* di = dx.data() + i * d;
            T* gt = g_tok.data() + static_cast<std::size_t>(b.tokens[i]) * d;
            T* gp = g_pos.data() + static_cast<std::size_t>(b.positions[i]) * d;
            for (std::size_t e = 0; e < d; ++e) {
                gt[e] += di[e];
                gp[e] += di[e];
            }
            if (cfg.variant == Variant::x && is_gene_column(b, row, col)) {
                if (b.value_masked[i]) {
                    for (std::size_t e = 0; e < d; ++e) {
                        g_mask[e] += di[e];
                    }
                } else {
                    const T v = static_cast<T>(b.values[i]);
                    for (std::size_t e = 0; e < d; ++e) {
                        g_val_w[e] += di[e] * v;
                        g_val_b[e] += di[e];
                    }
                }
            }
        }
    }
}

}

template<typename T>
ModelOutputs<T> forward(const ModelParams<T>& params, const MaskedBatch& batch, const DropoutSpec& dropout) {
    const auto& cfg = params.config;
    if (batch.variant != cfg.variant) {
        throw DataError("forward: batch variant does not match the model");
    }
    const std::size_t d = cfg.d_model, m = batch.batch * batch.length;
    if (batch.tokens.size() != m || batch.positions.size() != m || batch.attention.size() != m || batch.values.size() != m ||
        batch.value_masked.size() != m || batch.gene_start.size() != batch.batch || batch.n_genes.size() != batch.batch) {
        throw DataError("forward: batch arrays disagree with batch x length");
    }
    ModelOutputs<T> out;
    out.rows = m;
    out.d_model = d;
    std::vector<T> x(m * d);
    embed_inputs<T>(params, batch, x);
    out.cache.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        layer_forward<T>(params, l, batch, x, out.cache.layers[l], dropout);
    }
    out.hidden.resize(m * d);
    out.cache.lnf_mean.resize(m);
    out.cache.lnf_rstd.resize(m);
    K::layernorm<T>(x, params.tensor("ln_f.g"), params.tensor("ln_f.b"), out.hidden, out.cache.lnf_mean, out.cache.lnf_rstd, m, d,
                    static_cast<T>(cfg.layer_norm_eps));
    out.cache.x_final = std::move(x);

    const auto rows = masked_rows(batch);
    const auto hm = gather_rows<T>(out.hidden, d, rows);
    const std::size_t width = cfg.variant == Variant::g ? cfg.vocab_size : 1;
    out.mlm.resize(rows.size() * width);
    K::matmul<T>(hm, params.tensor("mlm.w"), out.mlm, rows.size(), d, width);
    K::add_row_vector<T>(out.mlm, params.tensor("mlm.b"), rows.size(), width);

    for (std::size_t s = 0; s < batch.prompts.size(); ++s) {
        out.cls_slot[index_of(batch.prompts[s].category)].push_back(s);
    }
    for (auto c : kCategories) {
        const auto ci = index_of(c);
        const auto name = std::string(category_name(c));
        const auto pr = prompt_rows(batch, out.cls_slot[ci]);
        const auto hp = gather_rows<T>(out.hidden, d, pr);
        const auto n_cls = cfg.head_sizes[ci];
        out.cls[ci].resize(pr.size() * n_cls);
        K::matmul<T>(hp, params.tensor("cls." + name + ".w"), out.cls[ci], pr.size(), d, n_cls);
        K::add_row_vector<T>(out.cls[ci], params.tensor("cls." + name + ".b"), pr.size(), n_cls);
    }
    return out;
}

template<typename T>
double mlm_g_loss(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    if (batch.masked.empty()) {
        return 0.0;
    }
    const std::size_t v = out.mlm.size() / batch.masked.size();
    const auto w = mlm_slot_weights(batch);
    double loss = 0.0;
    for (std::size_t s = 0; s < batch.masked.size(); ++s) {
        const T* z = out.mlm.data() + s * v;
        loss += w[s] * (log_sum_exp(z, v) - static_cast<double>(z[batch.masked[s].target_token]));
    }
    return loss;
}

template<typename T>
double mlm_x_loss(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    if (batch.masked.empty()) {
        return 0.0;
    }
    const auto w = mlm_slot_weights(batch);
    double loss = 0.0;
    for (std::size_t s = 0; s < batch.masked.size(); ++s) {
        const double diff = static_cast<double>(out.mlm[s]) - static_cast<double>(batch.masked[s].target_value);
        loss += w[s] * 0.5 * diff * diff;
    }
    return loss;
}

template<typename T>
double cls_loss(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    double total = 0.0;
    for (std::size_t ci = 0; ci < kNumCategories; ++ci) {
        const auto& slots = out.cls_slot[ci];
        if (slots.empty()) {
            continue;
        }
        const std::size_t n_cls = out.cls[ci].size() / slots.size();
        double sum = 0.0;
        std::size_t known = 0;
        for (std::size_t r = 0; r < slots.size(); ++r) {
            const auto target = batch.prompts[slots[r]].target_class;
            if (target < 0) {
                continue;
            }
            const T* z = out.cls[ci].data() + r * n_cls;
            sum += log_sum_exp(z, n_cls) - static_cast<double>(z[target]);
            ++known;
        }
        if (known > 0) {
            total += sum / static_cast<double>(known);
        }
    }
    return total;
}

template<typename T>
LossBreakdown pretrain_loss(const ModelOutputs<T>& out, const MaskedBatch& batch, const LossWeights& weights) {
    LossBreakdown l;
    l.mlm = batch.variant == Variant::g ? mlm_g_loss(out, batch) : mlm_x_loss(out, batch);
    l.cls = cls_loss(out, batch);
    l.total = weights.mlm * l.mlm + weights.cls * l.cls;
    return l;
}

template<typename T>
double masked_accuracy(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    if (batch.masked.empty() || batch.variant != Variant::g) {
        return 0.0;
    }
    const std::size_t v = out.mlm.size() / batch.masked.size();
    std::size_t hits = 0;
    for (std::size_t s = 0; s < batch.masked.size(); ++s) {
        if (arg_max(out.mlm.data() + s * v, v) == batch.masked[s].target_token) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(batch.masked.size());
}

template<typename T>
std::pair<std::size_t, std::size_t> annotation_hits(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    std::size_t hits = 0, total = 0;
    for (std::size_t ci = 0; ci < kNumCategories; ++ci) {
        const auto& slots = out.cls_slot[ci];
        if (slots.empty()) {
            continue;
        }
        const std::size_t n_cls = out.cls[ci].size() / slots.size();
        for (std::size_t r = 0; r < slots.size(); ++r) {
            const auto target = batch.prompts[slots[r]].target_class;
            if (target < 0) {
                continue;
            }
            ++total;
            if (arg_max(out.cls[ci].data() + r * n_cls, n_cls) == static_cast<std::size_t>(target)) {
                ++hits;
            }
        }
    }
    return {hits, total};
}

template<typename T>
void backward_from_hidden(const ModelParams<T>& params, const MaskedBatch& batch, const ModelOutputs<T>& out,
                          std::span<const T> d_hidden, std::span<T> grads) {
    const auto& cfg = params.config;
    const std::size_t d = cfg.d_model, m = batch.batch * batch.length;
    std::vector<T> dx(m * d, T(0));
    K::layernorm_backward<T>(d_hidden, out.cache.x_final, params.tensor("ln_f.g"), out.cache.lnf_mean, out.cache.lnf_rstd, dx,
                             grad_of<T>(params, grads, "ln_f.g"), grad_of<T>(params, grads, "ln_f.b"), m, d);
    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        layer_backward<T>(params, l, batch, out.cache.layers[l], dx, grads);
    }
    embed_backward<T>(params, batch, dx, grads);
}

template<typename T>
LossBreakdown backward(const ModelParams<T>& params, const MaskedBatch& batch, std::vector<T>& grads, const LossWeights& weights,
                       const DropoutSpec& dropout) {
    const auto& cfg = params.config;
    const std::size_t d = cfg.d_model;
    auto out = forward(params, batch, dropout);
    const auto loss = pretrain_loss(out, batch, weights);
    if (!std::isfinite(loss.total)) {
        throw DivergenceError(fmt::format("non-finite loss (mlm {}, cls {})", loss.mlm, loss.cls));
    }
    grads.assign(params.data.size(), T(0));
    std::span<T> g(grads);
    std::vector<T> d_hidden(out.rows * d, T(0));

    if (!batch.masked.empty()) {
        const auto rows = masked_rows(batch);
        const auto hm = gather_rows<T>(out.hidden, d, rows);
        const auto w = mlm_slot_weights(batch);
        const std::size_t n = rows.size();
        const std::size_t width = cfg.variant == Variant::g ? cfg.vocab_size : 1;
        std::vector<T> dz(n * width);
        for (std::size_t s = 0; s < n; ++s) {
            const T* z = out.mlm.data() + s * width;
            T* dzs = dz.data() + s * width;
            const double scale = w[s] * weights.mlm;
            if (cfg.variant == Variant::g) {
                const double lse = log_sum_exp(z, width);
                for (std::size_t j = 0; j < width; ++j) {
                    dzs[j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - lse) * scale);
                }
                dzs[batch.masked[s].target_token] -= static_cast<T>(scale);
            } else {
                dzs[0] = static_cast<T>((static_cast<double>(z[0]) - batch.masked[s].target_value) * scale);
            }
        }
        std::vector<T> dh(n * d);
        linear_head_backward<T>(hm, params.tensor("mlm.w"), dz, grad_of<T>(params, g, "mlm.w"), grad_of<T>(params, g, "mlm.b"), dh,
                                n, d, width);
        scatter_add_rows<T>(d_hidden, d, rows, dh);
    }

    for (auto c : kCategories) {
        const auto ci = index_of(c);
        const auto& slots = out.cls_slot[ci];
        std::size_t known = 0;
        for (auto s : slots) {
            known += batch.prompts[s].target_class >= 0 ? 1 : 0;
        }
        if (known == 0) {
            continue;
        }
        const auto name = std::string(category_name(c));
        const auto n_cls = cfg.head_sizes[ci];
        const auto rows = prompt_rows(batch, slots);
        const auto hp = gather_rows<T>(out.hidden, d, rows);
        std::vector<T> dz(rows.size() * n_cls, T(0));
        const double scale = weights.cls / static_cast<double>(known);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto target = batch.prompts[slots[r]].target_class;
            if (target < 0) {
                continue;
            }
            const T* z = out.cls[ci].data() + r * n_cls;
            const double lse = log_sum_exp(z, n_cls);
            for (std::size_t j = 0; j < n_cls; ++j) {
                dz[r * n_cls + j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - lse) * scale);
            }
            dz[r * n_cls + static_cast<std::size_t>(target)] -= static_cast<T>(scale);
        }
        std::vector<T> dh(rows.size() * d);
        linear_head_backward<T>(hp, params.tensor("cls." + name + ".w"), dz, grad_of<T>(params, g, "cls." + name + ".w"),
                                grad_of<T>(params, g, "cls." + name + ".b"), dh, rows.size(), d, n_cls);
        scatter_add_rows<T>(d_hidden, d, rows, dh);
    }

    backward_from_hidden<T>(params, batch, out, d_hidden, g);

    for (const auto& t : params.layout.tensors()) {
        for (std::size_t i = 0; i < t.size; ++i) {
            if (!std::isfinite(grads[t.offset + i])) {
                throw DivergenceError(fmt::format("non-finite gradient in tensor '{}'", t.name));
            }
        }
    }
    return loss;
}

template<typename T>
std::vector<T> mean_pool_genes(const ModelOutputs<T>& out, const MaskedBatch& batch) {
    const std::size_t d = out.d_model;
    std::vector<T> pooled(batch.batch * d, T(0));
    for (std::size_t row = 0; row < batch.batch; ++row) {
        const auto n = batch.n_genes[row];
        if (n == 0) {
            throw DataError("mean_pool_genes: cell without genes");
        }
        T* dst = pooled.data() + row * d;
        for (std::size_t k = 0; k < n; ++k) {
            const T* h = out.hidden.data() + batch.at(row, batch.gene_start[row] + k) * d;
            for (std::size_t e = 0; e < d; ++e) {
                dst[e] += h[e];
            }
        }
        const T inv = T(1) / static_cast<T>(n);
        for (std::size_t e = 0; e < d; ++e) {
            dst[e] *= inv;
        }
    }
    return pooled;
}

template<typename T>
std::vector<T> mean_pool_genes_backward(std::span<const T> d_pooled, const MaskedBatch& batch, std::size_t d_model) {
    std::vector<T> dh(batch.batch * batch.length * d_model, T(0));
    for (std::size_t row = 0; row < batch.batch; ++row) {
        const auto n = batch.n_genes[row];
        const T inv = T(1) / static_cast<T>(n);
        const T* src = d_pooled.data() + row * d_model;
        for (std::size_t k = 0; k < n; ++k) {
            T* dst = dh.data() + batch.at(row, batch.gene_start[row] + k) * d_model;
            for (std::size_t e = 0; e < d_model; ++e) {
                dst[e] = src[e] * inv;
            }
        }
    }
    return dh;
}

template<typename T>
std::vector<T> embed_cells(const ModelParams<T>& params, std::span<const TokenizedCell> cells, std::size_t batch_size) {
    const auto d = params.config.d_model;
    std::vector<T> out(cells.size() * d);
    batch_size = std::max<std::size_t>(1, batch_size);
    for (std::size_t start = 0; start < cells.size(); start += batch_size) {
        const auto n = std::min(batch_size, cells.size() - start);
        const auto batch = unmasked_batch(cells.subspan(start, n), params.config.variant);
        const auto fwd = forward(params, batch);
        const auto pooled = mean_pool_genes(fwd, batch);
        std::copy(pooled.begin(), pooled.end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
    }
    return out;
}

template<typename T>
std::vector<T> embed_cell(const ModelParams<T>& params, const TokenizedCell& cell) {
    if (cell.genes.empty()) {
        throw DataError("embed_cell: empty cell");
    }
    return embed_cells(params, std::span<const TokenizedCell>(&cell, 1), 1);
}

#define RANKCELL_INSTANTIATE(T)                                                                                               \
    template struct ModelParams<T>;                                                                                           \
    template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                                                \
    template ModelOutputs<T> forward<T>(const ModelParams<T>&, const MaskedBatch&, const DropoutSpec&);                      \
    template double mlm_g_loss<T>(const ModelOutputs<T>&, const MaskedBatch&);                                                \
    template double mlm_x_loss<T>(const ModelOutputs<T>&, const MaskedBatch&);                                                \
    template double cls_loss<T>(const ModelOutputs<T>&, const MaskedBatch&);                                                  \
    template LossBreakdown pretrain_loss<T>(const ModelOutputs<T>&, const MaskedBatch&, const LossWeights&);                  \
    template double masked_accuracy<T>(const ModelOutputs<T>&, const MaskedBatch&);                                           \
    template std::pair<std::size_t, std::size_t> annotation_hits<T>(const ModelOutputs<T>&, const MaskedBatch&);              \
    template LossBreakdown backward<T>(const ModelParams<T>&, const MaskedBatch&, std::vector<T>&, const LossWeights&,        \
                                       const DropoutSpec&);                                                                   \
    template void backward_from_hidden<T>(const ModelParams<T>&, const MaskedBatch&, const ModelOutputs<T>&,                 \
                                          std::span<const T>, std::span<T>);                              \
    template std::vector<T> mean_pool_genes<T>(const ModelOutputs<T>&, const MaskedBatch&);                                   \
    template std::vector<T> mean_pool_genes_backward<T>(std::span<const T>, const MaskedBatch&, std::size_t);                \
    template std::vector<T> embed_cells<T>(const ModelParams<T>&, std::span<const TokenizedCell>, std::size_t);              \
    template std::vector<T> embed_cell<T>(const ModelParams<T>&, const TokenizedCell&);

RANKCELL_INSTANTIATE(float)
RANKCELL_INSTANTIATE(double)

#undef RANKCELL_INSTANTIATE

}
