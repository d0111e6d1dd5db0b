#ifndef RANKCELL_TRAIN_HPP
#define RANKCELL_TRAIN_HPP

#include "rankcell/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

/**
 * @file train.hpp
 *
 * @brief Pre-training loop: AdamW, warmup/decay schedule, checkpoints, held-out loss and
 * power-law fitting of loss against model size.
 *
 * All randomness in a run is derived from `(seed, step, cell ordinal)`, so a run resumed from
 * a checkpoint replays exactly the batches, prompts and masks of an uninterrupted one.
 */

namespace rankcell {

struct TrainConfig {
    std::size_t batch_size = 256;
    double max_lr = 1e-4;
    std::size_t warmup_steps = 10000;
    /// 0 means `epochs` full passes over the training cells.
    std::size_t total_steps = 0;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    std::size_t epochs = 1;
    double mask_rate = 0.15;
    LossWeights loss_weights;
    /// Draw annotation prompts with class-balancing probabilities; otherwise attach every known label.
    bool balance_prompts = true;
    /// Save a checkpoint every this many steps (0: only the final one).
    std::size_t checkpoint_every = 0;
    /// Evaluate held-out loss every this many steps (0: only after the last step).
    std::size_t eval_every = 0;
    std::size_t eval_batch_size = 64;
    std::uint64_t eval_seed = 1234;

    /// Warmup 100, total 2,000, batch 32.
    static TrainConfig desk();

    /// Steps actually run for a training set of `n_cells`.
    std::size_t resolved_total_steps(std::size_t n_cells) const;
    std::size_t batches_per_epoch(std::size_t n_cells) const;

    /// Throws `UsageError` naming the offending field.
    void validate() const;

    bool operator==(const TrainConfig&) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, std::string_view path = "train");

/**
 * Learning rate after `step` updates: linear from 0 to `max_lr` over the warmup, then linear
 * down to 0 at `total_steps`. Throws `UsageError` outside [0, total_steps].
 */
double lr_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double max_lr);
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamState {
    std::size_t step = 0;
    std::vector<float> m;
    std::vector<float> v;
};

/**
 * One AdamW update of a flat tensor: decoupled decay `p *= 1 - lr*wd` (when `decay`), then the
 * bias-corrected Adam step for update number `t` (1-based).
 */
template<typename T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<float> m, std::span<float> v, std::size_t t, double lr,
                  const TrainConfig& cfg, bool decay);

/**
 * AdamW over every tensor of `params`; weight decay only on tensors flagged `decay` (projection
 * matrices). Advances `state.step`. Throws `DivergenceError` naming a tensor with a non-finite gradient.
 */
template<typename T>
void adamw_step(ModelParams<T>& params, std::span<const T> grads, AdamState& state, const TrainConfig& cfg, double lr);

struct LossRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    /// NaN when not evaluated at this step.
    double val_loss = 0.0;
    double lr = 0.0;

    bool operator==(const LossRecord& o) const;
};

/// Tab-separated `step train_loss val_loss lr` with a header line.
std::string format_loss_log(std::span<const LossRecord> records);
std::vector<LossRecord> parse_loss_log(std::string_view text);

struct Checkpoint {
    ModelParams<float> params;
    AdamState optimizer;
    TrainConfig train;
    std::size_t step = 0;
    double best_val_loss = 0.0;
    std::vector<LossRecord> history;
    /// Gene ids of the vocabulary the model was trained on, in token order.
    std::vector<std::string> vocab_genes;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "RCKP", version, JSON header, then named little-endian f32 tensors (parameters, then Adam moments).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/**
 * Mean pretraining loss over the held-out cells, with every known prompt attached and masks
 * drawn from `masking_seed`, so the number is comparable across checkpoints. Throws `DataError`
 * on an empty set.
 */
LossBreakdown eval_heldout_loss(const ModelParams<float>& params, std::span<const TokenizedCell> cells, std::uint64_t masking_seed,
                                double mask_rate = 0.15, std::size_t batch_size = 64, const LossWeights& weights = {});

struct PretrainOptions {
    /// Where checkpoints and `loss_log.tsv` go; nothing is written when empty.
    std::filesystem::path out_dir;
    /// Continue from this checkpoint.
    std::optional<std::filesystem::path> resume;
    /// Stop once this many steps are complete (a later resume finishes the run).
    std::optional<std::size_t> stop_after;
    /// Called after each step with its record.
    std::function<void(const LossRecord&)> on_step;
};

struct PretrainResult {
    Checkpoint checkpoint;
    bool finished = false;
};

/**
 * Trains from a fresh initialization (seeded by `train.seed`) or from `options.resume`.
 * Each step re-draws annotation prompts and masks for its batch. Throws `DivergenceError` when
 * the loss is non-finite or stays above 10x its initial value for 100 consecutive steps.
 */
PretrainResult pretrain(std::span<const TokenizedCell> train_cells, std::span<const TokenizedCell> val_cells,
                        const Vocabulary& vocab, const ModelConfig& model, const TrainConfig& train,
                        const PretrainOptions& options = {});

struct PowerLaw {
    double a = 0.0;
    double b = 0.0;

    double operator()(double n) const;
};

/// Least squares on (ln n, ln L). Throws `DataError` for fewer than two points, non-positive values or a single distinct n.
PowerLaw fit_power_law(std::span<const std::pair<double, double>> points);

}

#endif
