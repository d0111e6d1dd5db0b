#ifndef RANKCELL_BENCHMARK_HPP
#define RANKCELL_BENCHMARK_HPP

#include "rankcell/train.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

/**
 * @file benchmark.hpp
 *
 * @brief Donor-disjoint evaluation tasks and the classifiers run on them.
 *
 * A task holds a flat list of cells (each pointing back into one of up to two source matrices)
 * with integer labels, plus folds of train/val/test index lists into that list. Every runner
 * follows the same protocol per fold and seed: fit each candidate on `train`, keep the one with
 * the best validation accuracy (earliest on ties), refit it on `train + val`, score `test`.
 */

namespace rankcell {

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct Metrics {
    double accuracy = 0.0;
    /// Support-weighted mean of per-class F1.
    double weighted_f1 = 0.0;
    std::vector<ClassScores> per_class;
};

/**
 * Accuracy and per-class scores over `n_classes` labels; a ratio with a zero denominator counts
 * as 0. Throws `DataError` on a length mismatch or a label outside the label space.
 */
Metrics evaluate(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels, std::size_t n_classes);

/// Mean and sample standard deviation (0 for a single value).
struct Summary {
    double mean = 0.0;
    double sd = 0.0;
    std::size_t n = 0;
};

Summary summarize(std::span<const double> values);

enum class TaskKind : std::uint8_t { held_out_diseases, held_out_donors };

std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Index lists into `EvalTask::cells`.
struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

struct TaskCell {
    /// 0 for the first (training) matrix, 1 for the held-out matrix of a donor task.
    std::uint8_t source = 0;
    std::size_t row = 0;
    std::string cell_id;
    std::string donor_id;
    std::uint32_t label = 0;
};

struct EvalTask {
    TaskKind kind = TaskKind::held_out_diseases;
    std::vector<std::string> label_names;
    std::vector<TaskCell> cells;
    std::vector<Fold> folds;

    std::size_t n_classes() const { return label_names.size(); }
    std::vector<std::uint32_t> labels() const;
    /// Rows of `source` that belong to the task, in task order.
    std::vector<std::size_t> rows_of(std::uint8_t source) const;
};

inline constexpr std::string_view kNormalLabel = "normal";
inline constexpr std::string_view kDiseasedLabel = "diseased";

/**
 * Binary diseased/normal task with `k` donor-disjoint folds. Donors are assigned greedily to
 * balance each group's diseased and normal cell counts; each fold tests on one group and trains on
 * the rest, with the training donors split 80/20 into train and val. Within every split the
 * majority class is subsampled to the minority count. Cells without a disease label are skipped.
 * Throws `DataError` when either class has fewer than `k` donors.
 */
EvalTask build_disease_folds(const CountMatrix& data, std::size_t k = 3, std::uint64_t seed = 0);

/**
 * Disease-condition task over every disease label present: a donor-level `train_frac` split of
 * `train` into train and val, tested on `held_out`. Throws `DataError` when the two matrices
 * share a donor.
 */
EvalTask build_donor_task(const CountMatrix& train, const CountMatrix& held_out, double train_frac = 0.70,
                          std::uint64_t seed = 0);

/// Throws `DataError` naming the fold and splits that share a donor or a cell.
void check_donor_disjoint(const EvalTask& task);

/// Tab-separated `cell_id fold split label`, one row per (fold, cell).
void write_task_file(const std::filesystem::path& path, const EvalTask& task);

/// Rebuilds folds against `cells` (matched by cell id); fold indices refer to positions in `cells`. Label names come from `label_names` when given, else from the file in first-seen order.
EvalTask read_task_file(const std::filesystem::path& path, TaskKind kind, std::span<const TaskCell> cells,
                        std::span<const std::string> label_names = {});

/**
 * @brief Multinomial logistic regression fitted by full-batch Adam on standardized features.
 *
 * Standardization statistics come from the fitting data only.
 */
class LogisticRegression {
public:
    struct Options {
        double lr = 0.05;
        std::size_t steps = 300;
        /// L2 penalty on the weights (not the bias), scaled by 1/2.
        double l2 = 0.0;
        std::uint64_t seed = 0;
    };

    void fit(std::span<const double> x, std::size_t n, std::size_t dim, std::span<const std::uint32_t> labels,
             std::size_t n_classes, const Options& options);
    std::vector<std::uint32_t> predict(std::span<const double> x, std::size_t n) const;

    std::size_t dim() const { return dim_; }
    std::size_t n_classes() const { return n_classes_; }

private:
    std::size_t dim_ = 0;
    std::size_t n_classes_ = 0;
    std::vector<double> mean_, scale_, w_, b_;
};

/// One (fold, seed) run: the chosen hyperparameter and the test metrics after refitting.
struct RunRecord {
    std::size_t fold = 0;
    std::size_t seed = 0;
    double selected = 0.0;
    Metrics metrics;
};

struct BenchmarkResult {
    std::vector<RunRecord> runs;
    Summary accuracy;
    Summary weighted_f1;
};

BenchmarkResult summarize_runs(std::vector<RunRecord> runs);

inline const std::vector<double> kFinetuneLrs{1e-3, 1e-4, 2e-4, 2e-5, 5e-4, 5e-5};

struct ProbeOptions {
    std::vector<double> lr_candidates = kFinetuneLrs;
    std::size_t seeds = 3;
    std::size_t steps = 300;
};

/**
 * Logistic regression on fixed features (`task.cells.size() x dim`, task order). Seeds only
 * change the weight initialization.
 */
BenchmarkResult linear_probe(std::span<const double> features, std::size_t dim, const EvalTask& task,
                             const ProbeOptions& options = {});

/**
 * Normalized-dispersion gene selection on log1p depth-normalized counts of `cells` (all cells
 * when empty): per gene variance/mean, 20 equal-width mean bins, dispersions z-scored within each
 * bin. Genes with zero variance rank last. Returns `top_k` gene indices by descending score, ties
 * by ascending index. Throws `UsageError` when `top_k` exceeds the gene count.
 */
std::vector<std::size_t> hvg_select(const CountMatrix& counts, std::size_t top_k, std::span<const std::size_t> cells = {});

/// log1p depth-normalized counts of `rows` restricted to `genes`, row-major.
std::vector<double> log1p_features(const CountMatrix& counts, std::span<const std::size_t> rows, std::span<const std::size_t> genes);

struct BaselineOptions {
    std::size_t top_genes = 2000;
    std::vector<double> l2_candidates{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
    std::size_t seeds = 3;
    std::size_t steps = 300;
    double lr = 0.05;
};

struct BaselineResult {
    BenchmarkResult result;
    /// Genes selected for each fold, from that fold's train and val cells only.
    std::vector<std::vector<std::size_t>> fold_genes;
};

/**
 * L2-regularized logistic regression on HVG features. `sources[s]` is the matrix for task cells
 * with `source == s`; gene sets must match. HVGs are chosen per fold from its train and val cells.
 */
BaselineResult train_baseline_logreg(std::span<const CountMatrix* const> sources, const EvalTask& task,
                                     const BaselineOptions& options = {});

/// Baseline on precomputed features (`task.cells.size() x dim`), same L2 sweep.
BenchmarkResult train_baseline_logreg(std::span<const double> features, std::size_t dim, const EvalTask& task,
                                      const BaselineOptions& options = {});

struct FinetuneOptions {
    std::vector<double> lr_candidates = kFinetuneLrs;
    std::size_t seeds = 3;
    std::size_t epochs = 3;
    std::size_t batch_size = 32;
    double weight_decay = 0.0;
    /// Train only the head on frozen embeddings (the linear-probe path).
    bool freeze_backbone = false;
    std::size_t probe_steps = 300;
};

/**
 * Fine-tunes `params` with a fresh linear head over mean-pooled gene embeddings. `cells` are the
 * task cells in task order; their prompts are dropped so labels cannot leak. Throws `DataError`
 * on an empty split and `UsageError` when the cells do not match the model variant.
 */
BenchmarkResult finetune(const ModelParams<float>& params, std::span<const TokenizedCell> cells, const EvalTask& task,
                         const FinetuneOptions& options = {});

struct ReportEntry {
    std::string model;
    std::string task;
    BenchmarkResult result;
};

/**
 * Writes `metrics.tsv` (one row per run: `model task fold seed accuracy weighted_f1`),
 * `summary.tsv` (one row per entry with mean and sd) and `scatter.tsv` (mean accuracy and F1 per
 * model and task) into `dir`.
 */
void write_report(const std::filesystem::path& dir, std::span<const ReportEntry> entries);

/// Entries from a `metrics.tsv`, grouped by (model, task) in first-seen order.
std::vector<ReportEntry> read_metrics_report(const std::filesystem::path& path);

/// `n_params val_loss` rows, the input format of `read_scaling_points`.
void write_scaling_points(const std::filesystem::path& path, std::span<const std::pair<double, double>> points);
std::vector<std::pair<double, double>> read_scaling_points(const std::filesystem::path& path);

}

#endif
