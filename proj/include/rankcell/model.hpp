#ifndef RANKCELL_MODEL_HPP
#define RANKCELL_MODEL_HPP

#include "rankcell/tokenizer.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

/**
 * @file model.hpp
 *
 * @brief Bidirectional transformer encoder with a masked-gene head and four annotation heads.
 *
 * Blocks are pre-norm (LayerNorm, attention, residual; LayerNorm, GELU feed-forward, residual)
 * followed by a final LayerNorm. Input embeddings are token + learned absolute position; the
 * value variant adds `value * val_w + val_b` at gene positions, or `mask_emb` where the value is
 * masked. Gradients are computed by hand-written reverse passes over cached activations.
 *
 * Everything is templated on the scalar type: training and checkpoints use `float`, gradient
 * checks use `double`.
 */

namespace rankcell {

struct ModelConfig {
    Variant variant = Variant::g;
    std::size_t n_layers = 3;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t context_len = 2048;
    std::size_t vocab_size = 0;
    std::array<std::size_t, kNumCategories> head_sizes{10, 17, 13, 3};
    double dropout = 0.0;
    double layer_norm_eps = 1e-5;

    /// Prompt slots plus the gene context.
    std::size_t max_positions() const { return context_len + kPromptPositions; }
    std::size_t head_dim() const { return d_model / n_heads; }

    /// Throws `UsageError` naming the offending field.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected with the field path.
ModelConfig model_config_from_json(const nlohmann::json& j, std::string_view path = "model");

/// Names accepted by `preset_config`, smallest first.
std::vector<std::string> preset_names();

/**
 * Architecture presets. Full-size: "10M" (3 x 128), "30M" (6 x 256), "70M" (12 x 512, d_ff 640),
 * "160M" (12 x 768), "400M" (24 x 1024). Desk-size: "0.1M", "0.5M", "2M", "overfit" (3 x 64)
 * and "tiny" (2 x 16, 4 heads).
 */
ModelConfig preset_config(std::string_view name, Variant variant, std::size_t vocab_size, std::size_t context_len);

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    /// Receives decoupled weight decay.
    bool decay = false;
};

/**
 * @brief Named tensors packed into one flat buffer.
 */
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& cfg);
    ParamLayout() = default;

    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    std::size_t total() const { return total_; }
    const TensorInfo& at(std::string_view name) const;
    const TensorInfo* find(std::string_view name) const;

private:
    void add(std::string name, std::vector<std::size_t> shape, bool decay);

    std::vector<TensorInfo> tensors_;
    std::size_t total_ = 0;
};

/// Parameter count of a configuration.
std::size_t parameter_count(const ModelConfig& cfg);

template<typename T>
struct ModelParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<T> data;

    ModelParams() = default;
    /// All-zero parameters.
    explicit ModelParams(const ModelConfig& cfg);

    std::span<T> tensor(std::string_view name);
    std::span<const T> tensor(std::string_view name) const;

    template<typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out(config);
        for (std::size_t i = 0; i < data.size(); ++i) {
            out.data[i] = static_cast<U>(data[i]);
        }
        return out;
    }
};

/**
 * Normal initialization, variance `1/d_model` for embeddings and projections and `1/d_model^2`
 * for the output heads (so an untrained model predicts close to uniform), unit LayerNorm gains,
 * zero biases. Deterministic in `seed`.
 */
template<typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Optional dropout on the two residual branches of each block; off when `seed` is empty.
struct DropoutSpec {
    std::optional<std::uint64_t> seed;
};

template<typename T>
struct LayerCache {
    std::vector<T> x_in, ln1_mean, ln1_rstd, h1, qkv, probs, ctx, attn_mask;
    std::vector<T> x_mid, ln2_mean, ln2_rstd, h2, up, act, ffn_mask;
};

template<typename T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_final, lnf_mean, lnf_rstd;
};

/**
 * @brief Outputs of one forward pass.
 *
 * `hidden` is the final normalized hidden state for every (row, position). `mlm` holds one
 * logit row of width `vocab_size` per masked slot (rank variant) or one predicted value per
 * masked slot (value variant), in `batch.masked` order. `cls[c]` holds one logit row per
 * attached prompt of category `c`; `cls_slot[c]` indexes those prompts in `batch.prompts`.
 */
template<typename T>
struct ModelOutputs {
    std::size_t rows = 0;
    std::size_t d_model = 0;
    std::vector<T> hidden;
    std::vector<T> mlm;
    std::array<std::vector<T>, kNumCategories> cls;
    std::array<std::vector<std::size_t>, kNumCategories> cls_slot;
    ForwardCache<T> cache;
};

/// Throws `DataError` for token ids outside the vocabulary or positions beyond `max_positions`.
template<typename T>
ModelOutputs<T> forward(const ModelParams<T>& params, const MaskedBatch& batch, const DropoutSpec& dropout = {});

struct LossWeights {
    double mlm = 1.0;
    double cls = 1.0;
};

struct LossBreakdown {
    double mlm = 0.0;
    double cls = 0.0;
    double total = 0.0;
};

/// Cross-entropy at masked slots, averaged within each cell and then across cells.
template<typename T>
double mlm_g_loss(const ModelOutputs<T>& out, const MaskedBatch& batch);

/// Half squared error at masked slots, averaged within each cell and then across cells.
template<typename T>
double mlm_x_loss(const ModelOutputs<T>& out, const MaskedBatch& batch);

/// Sum over categories of the mean cross-entropy over prompts with a known target; 0 when none.
template<typename T>
double cls_loss(const ModelOutputs<T>& out, const MaskedBatch& batch);

template<typename T>
LossBreakdown pretrain_loss(const ModelOutputs<T>& out, const MaskedBatch& batch, const LossWeights& weights = {});

/// Fraction of masked slots whose arg-max logit is the target token (rank variant).
template<typename T>
double masked_accuracy(const ModelOutputs<T>& out, const MaskedBatch& batch);

/// Correct and total prompt predictions with known targets, over all categories.
template<typename T>
std::pair<std::size_t, std::size_t> annotation_hits(const ModelOutputs<T>& out, const MaskedBatch& batch);

/**
 * Forward, loss and reverse pass. `grads` is resized to the layout and overwritten. Throws
 * `DivergenceError` naming the loss or the first tensor whose gradient is not finite.
 */
template<typename T>
LossBreakdown backward(const ModelParams<T>& params, const MaskedBatch& batch, std::vector<T>& grads,
                       const LossWeights& weights = {}, const DropoutSpec& dropout = {});

/**
 * Reverse pass from a gradient on `out.hidden` through the encoder into `grads` (accumulated).
 * Used by heads that live outside the model, such as fine-tuning classifiers.
 */
template<typename T>
void backward_from_hidden(const ModelParams<T>& params, const MaskedBatch& batch, const ModelOutputs<T>& out,
                          std::span<const T> d_hidden, std::span<T> grads);

/// Mean of final hidden states over the gene positions of each row: `batch x d_model`.
template<typename T>
std::vector<T> mean_pool_genes(const ModelOutputs<T>& out, const MaskedBatch& batch);

/// Spreads a gradient on pooled embeddings back over the gene positions of `hidden`.
template<typename T>
std::vector<T> mean_pool_genes_backward(std::span<const T> d_pooled, const MaskedBatch& batch, std::size_t d_model);

/// Mean-pooled embedding of each cell, computed without masking, `batch_size` cells per pass.
template<typename T>
std::vector<T> embed_cells(const ModelParams<T>& params, std::span<const TokenizedCell> cells, std::size_t batch_size = 64);

template<typename T>
std::vector<T> embed_cell(const ModelParams<T>& params, const TokenizedCell& cell);

}

#endif
