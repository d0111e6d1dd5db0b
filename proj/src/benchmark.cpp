#include "rankcell/benchmark.hpp"

#include "rankcell/normalize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

namespace rankcell {

Metrics evaluate(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels, std::size_t n_classes) {
    if (predictions.size() != labels.size()) {
        throw DataError(fmt::format("evaluate: {} predictions for {} labels", predictions.size(), labels.size()));
    }
    std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = labels[i];
        const auto p = predictions[i];
        if (y >= n_classes || p >= n_classes) {
            throw DataError(fmt::format("evaluate: label {} outside {} classes at index {}", std::max(y, p), n_classes, i));
        }
        if (y == p) {
            ++tp[y];
            ++correct;
        } else {
            ++fp[p];
            ++fn[y];
        }
    }
    auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
    Metrics m;
    const double n = static_cast<double>(labels.size());
    m.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / n;
    m.per_class.resize(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        auto& s = m.per_class[c];
        s.support = tp[c] + fn[c];
        s.precision = ratio(tp[c], tp[c] + fp[c]);
        s.recall = ratio(tp[c], s.support);
        const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
        s.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
        m.weighted_f1 += labels.empty() ? 0.0 : static_cast<double>(s.support) / n * s.f1;
    }
    return m;
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.n = values.size();
    if (values.empty()) {
        return s;
    }
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) {
            ss += (v - s.mean) * (v - s.mean);
        }
        s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

std::string_view task_kind_name(TaskKind kind) {
    return kind == TaskKind::held_out_diseases ? "diseases" : "donors";
}

TaskKind parse_task_kind(std::string_view name) {
    if (name == "diseases") {
        return TaskKind::held_out_diseases;
    }
    if (name == "donors") {
        return TaskKind::held_out_donors;
    }
    throw UsageError(fmt::format("unknown task '{}' (expected diseases or donors)", name));
}

std::vector<std::uint32_t> EvalTask::labels() const {
    std::vector<std::uint32_t> out;
    out.reserve(cells.size());
    for (const auto& c : cells) {
        out.push_back(c.label);
    }
    return out;
}

std::vector<std::size_t> EvalTask::rows_of(std::uint8_t source) const {
    std::vector<std::size_t> out;
    for (const auto& c : cells) {
        if (c.source == source) {
            out.push_back(c.row);
        }
    }
    return out;
}

namespace {

constexpr std::size_t kBins = 20;

/// Keeps `keep` cells of `pool`, chosen uniformly with `rng`; the result is sorted.
std::vector<std::size_t> subsample(std::vector<std::size_t> pool, std::size_t keep, Rng& rng) {
    if (pool.size() > keep) {
        rng.shuffle(pool);
        pool.resize(keep);
    }
    std::sort(pool.begin(), pool.end());
    return pool;
}

/// Cells of `donors` from `by_donor`, majority class cut down to the minority count.
std::vector<std::size_t> balanced_split(const std::vector<std::string>& donors,
                                        const std::map<std::string, std::array<std::vector<std::size_t>, 2>>& by_donor, Rng& rng) {
    std::array<std::vector<std::size_t>, 2> pool;
    for (const auto& d : donors) {
        const auto& cls = by_donor.at(d);
        for (std::size_t c = 0; c < 2; ++c) {
            pool[c].insert(pool[c].end(), cls[c].begin(), cls[c].end());
        }
    }
    const std::size_t keep = std::min(pool[0].size(), pool[1].size());
    auto normal = subsample(std::move(pool[0]), keep, rng);
    auto diseased = subsample(std::move(pool[1]), keep, rng);
    std::vector<std::size_t> out;
    std::merge(normal.begin(), normal.end(), diseased.begin(), diseased.end(), std::back_inserter(out));
    return out;
}

std::vector<std::size_t> concat(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::vector<std::size_t> out(a);
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

}

EvalTask build_disease_folds(const CountMatrix& data, std::size_t k, std::uint64_t seed) {
    if (k < 2) {
        throw UsageError("build_disease_folds: need at least 2 folds");
    }
    const auto& schema = AnnotationSchema::standard();
    const auto healthy = schema.find(Category::disease, AnnotationSchema::healthy_label);

    EvalTask task;
    task.kind = TaskKind::held_out_diseases;
    task.label_names = {std::string(kNormalLabel), std::string(kDiseasedLabel)};

    std::map<std::string, std::array<std::vector<std::size_t>, 2>> by_donor;
    for (std::size_t i = 0; i < data.n_cells(); ++i) {
        const auto& meta = data.meta(i);
        const auto& label = meta.labels[index_of(Category::disease)];
        if (!label) {
            continue;
        }
        const std::uint32_t y = healthy && *label == *healthy ? 0 : 1;
        by_donor[meta.donor_id][y].push_back(task.cells.size());
        task.cells.push_back({0, i, meta.cell_id, meta.donor_id, y});
    }

    // Seeded order, largest donors first, then each donor joins the group with the fewest cells of
    // its majority class so every group holds both classes.
    std::vector<std::string> donors;
    for (const auto& [d, _] : by_donor) {
        donors.push_back(d);
    }
    Rng(seed, 0xf01d).shuffle(donors);
    auto size_of = [&](const std::string& d) { return by_donor[d][0].size() + by_donor[d][1].size(); };
    std::stable_sort(donors.begin(), donors.end(), [&](const auto& a, const auto& b) { return size_of(a) > size_of(b); });
    auto majority = [&](const std::string& d) -> std::size_t { return by_donor[d][1].size() > by_donor[d][0].size() ? 1 : 0; };

    std::array<std::size_t, 2> per_class{0, 0};
    for (const auto& d : donors) {
        ++per_class[majority(d)];
    }
    if (per_class[0] < k || per_class[1] < k) {
        throw DataError(fmt::format("build_disease_folds: fewer donors than folds ({} normal and {} diseased donors for {} folds)",
                                    per_class[0], per_class[1], k));
    }

    std::vector<std::array<std::size_t, 2>> group_counts(k, {0, 0});
    std::vector<std::vector<std::string>> groups(k);
    for (const auto& d : donors) {
        const std::size_t c = majority(d);
        std::size_t best = 0;
        for (std::size_t g = 1; g < k; ++g) {
            const auto key = std::pair(group_counts[g][c], group_counts[g][0] + group_counts[g][1]);
            const auto best_key = std::pair(group_counts[best][c], group_counts[best][0] + group_counts[best][1]);
            if (key < best_key) {
                best = g;
            }
        }
        groups[best].push_back(d);
        group_counts[best][0] += by_donor[d][0].size();
        group_counts[best][1] += by_donor[d][1].size();
    }

    for (std::size_t f = 0; f < k; ++f) {
        std::array<std::vector<std::string>, 2> training;
        for (std::size_t g = 0; g < k; ++g) {
            if (g == f) {
                continue;
            }
            for (const auto& d : groups[g]) {
                training[majority(d)].push_back(d);
            }
        }
        std::vector<std::string> train_donors, val_donors;
        Rng split_rng(seed, 0x5a1, f);
        for (auto& list : training) {
            std::sort(list.begin(), list.end());
            split_rng.shuffle(list);
            std::size_t n_val = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(list.size())));
            if (list.size() >= 2) {
                n_val = std::clamp<std::size_t>(n_val, 1, list.size() - 1);
            }
            val_donors.insert(val_donors.end(), list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n_val));
            train_donors.insert(train_donors.end(), list.begin() + static_cast<std::ptrdiff_t>(n_val), list.end());
        }
        Rng balance_rng(seed, 0xba1, f);
        Fold fold;
        fold.train = balanced_split(train_donors, by_donor, balance_rng);
        fold.val = balanced_split(val_donors, by_donor, balance_rng);
        fold.test = balanced_split(groups[f], by_donor, balance_rng);
        task.folds.push_back(std::move(fold));
    }
    check_donor_disjoint(task);
    return task;
}

EvalTask build_donor_task(const CountMatrix& train, const CountMatrix& held_out, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw UsageError("build_donor_task: train_frac must lie in (0, 1)");
    }
    const auto train_donors = donors_of(train);
    const std::unordered_set<std::string> train_set(train_donors.begin(), train_donors.end());
    for (const auto& d : donors_of(held_out)) {
        if (train_set.contains(d)) {
            throw DataError(fmt::format("build_donor_task: donor '{}' appears in both the training and held-out corpora", d));
        }
    }

    const auto& schema = AnnotationSchema::standard();
    std::set<std::uint16_t> present;
    for (const auto* m : {&train, &held_out}) {
        for (const auto& meta : m->cells()) {
            if (const auto& l = meta.labels[index_of(Category::disease)]) {
                present.insert(*l);
            }
        }
    }
    std::map<std::uint16_t, std::uint32_t> class_of;
    EvalTask task;
    task.kind = TaskKind::held_out_donors;
    for (auto l : present) {
        class_of[l] = static_cast<std::uint32_t>(task.label_names.size());
        task.label_names.push_back(schema.label(Category::disease, l));
    }

    std::vector<std::string> order = train_donors;
    std::sort(order.begin(), order.end());
    Rng(seed, 0xd0).shuffle(order);
    std::size_t n_train = static_cast<std::size_t>(std::lround(train_frac * static_cast<double>(order.size())));
    if (order.size() >= 2) {
        n_train = std::clamp<std::size_t>(n_train, 1, order.size() - 1);
    }
    const std::unordered_set<std::string> fit_donors(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));

    Fold fold;
    const std::array<const CountMatrix*, 2> sources{&train, &held_out};
    for (std::uint8_t s = 0; s < 2; ++s) {
        const auto& m = *sources[s];
        for (std::size_t i = 0; i < m.n_cells(); ++i) {
            const auto& meta = m.meta(i);
            const auto& l = meta.labels[index_of(Category::disease)];
            if (!l) {
                continue;
            }
            const std::size_t idx = task.cells.size();
            task.cells.push_back({s, i, meta.cell_id, meta.donor_id, class_of.at(*l)});
            if (s == 1) {
                fold.test.push_back(idx);
            } else if (fit_donors.contains(meta.donor_id)) {
                fold.train.push_back(idx);
            } else {
                fold.val.push_back(idx);
            }
        }
    }
    task.folds.push_back(std::move(fold));
    check_donor_disjoint(task);
    return task;
}

void check_donor_disjoint(const EvalTask& task) {
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        const auto& fold = task.folds[f];
        const std::array<const std::vector<std::size_t>*, 3> splits{&fold.train, &fold.val, &fold.test};
        constexpr std::array<std::string_view, 3> names{"train", "val", "test"};
        std::array<std::unordered_set<std::string>, 3> donors;
        std::unordered_map<std::size_t, std::size_t> seen;
        for (std::size_t s = 0; s < 3; ++s) {
            for (auto i : *splits[s]) {
                if (i >= task.cells.size()) {
                    throw DataError(fmt::format("fold {}: {} index {} outside the task", f, names[s], i));
                }
                if (auto [it, fresh] = seen.emplace(i, s); !fresh) {
                    throw DataError(fmt::format("fold {}: cell '{}' in both {} and {}", f, task.cells[i].cell_id, names[it->second], names[s]));
                }
                donors[s].insert(task.cells[i].donor_id);
            }
        }
        for (std::size_t a = 0; a < 3; ++a) {
            for (std::size_t b = a + 1; b < 3; ++b) {
                for (const auto& d : donors[a]) {
                    if (donors[b].contains(d)) {
                        throw DataError(fmt::format("fold {}: donor '{}' in both {} and {}", f, d, names[a], names[b]));
                    }
                }
            }
        }
    }
}

void write_task_file(const std::filesystem::path& path, const EvalTask& task) {
    std::string out = "cell_id\tfold\tsplit\tlabel\n";
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        const auto& fold = task.folds[f];
        for (auto [name, list] : {std::pair{"train", &fold.train}, std::pair{"val", &fold.val}, std::pair{"test", &fold.test}}) {
            for (auto i : *list) {
                const auto& c = task.cells[i];
                out += fmt::format("{}\t{}\t{}\t{}\n", c.cell_id, f, name, task.label_names.at(c.label));
            }
        }
    }
    write_file(path, out);
}

EvalTask read_task_file(const std::filesystem::path& path, TaskKind kind, std::span<const TaskCell> cells,
                        std::span<const std::string> label_names) {
    const auto text = read_file(path);
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        by_id.emplace(cells[i].cell_id, i);
    }
    EvalTask task;
    task.kind = kind;
    task.label_names.assign(label_names.begin(), label_names.end());
    auto label_index = [&](std::string_view name, std::size_t line) -> std::uint32_t {
        auto it = std::find(task.label_names.begin(), task.label_names.end(), name);
        if (it != task.label_names.end()) {
            return static_cast<std::uint32_t>(it - task.label_names.begin());
        }
        if (!label_names.empty()) {
            throw DataError(fmt::format("{}:{}: label '{}' not in the label space", path.string(), line, name));
        }
        task.label_names.emplace_back(name);
        return static_cast<std::uint32_t>(task.label_names.size() - 1);
    };

    struct Row {
        std::size_t cell, fold, split;
    };
    std::vector<Row> rows;
    std::unordered_map<std::size_t, std::uint32_t> label_of;
    std::size_t line_no = 0, start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string_view line(text.data() + start, end - start);
        start = end + 1;
        ++line_no;
        if (line_no == 1 || line.empty()) {
            continue;
        }
        const auto f = split(line, '\t');
        if (f.size() != 4) {
            throw DataError(fmt::format("{}:{}: expected 4 columns", path.string(), line_no));
        }
        auto it = by_id.find(std::string(f[0]));
        if (it == by_id.end()) {
            throw DataError(fmt::format("{}:{}: unknown cell '{}'", path.string(), line_no, f[0]));
        }
        const auto fold = static_cast<std::size_t>(parse_uint(f[1], "fold"));
        std::size_t s = 0;
        if (f[2] == "train") {
            s = 0;
        } else if (f[2] == "val") {
            s = 1;
        } else if (f[2] == "test") {
            s = 2;
        } else {
            throw DataError(fmt::format("{}:{}: unknown split '{}'", path.string(), line_no, f[2]));
        }
        const auto y = label_index(f[3], line_no);
        if (auto [pos, fresh] = label_of.emplace(it->second, y); !fresh && pos->second != y) {
            throw DataError(fmt::format("{}:{}: cell '{}' has conflicting labels", path.string(), line_no, f[0]));
        }
        rows.push_back({it->second, fold, s});
    }

    task.cells.assign(cells.begin(), cells.end());
    for (const auto& [i, y] : label_of) {
        task.cells[i].label = y;
    }
    for (const auto& r : rows) {
        if (task.folds.size() <= r.fold) {
            task.folds.resize(r.fold + 1);
        }
        auto& fold = task.folds[r.fold];
        (r.split == 0 ? fold.train : r.split == 1 ? fold.val : fold.test).push_back(r.cell);
    }
    check_donor_disjoint(task);
    return task;
}

void LogisticRegression::fit(std::span<const double> x, std::size_t n, std::size_t dim, std::span<const std::uint32_t> labels,
                             std::size_t n_classes, const Options& options) {
    if (n == 0) {
        throw DataError("logistic regression: empty split");
    }
    if (x.size() != n * dim || labels.size() != n) {
        throw DataError("logistic regression: feature and label sizes disagree");
    }
    dim_ = dim;
    n_classes_ = n_classes;
    mean_.assign(dim, 0.0);
    scale_.assign(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            mean_[j] += x[i * dim + j];
        }
    }
    for (auto& m : mean_) {
        m /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = x[i * dim + j] - mean_[j];
            scale_[j] += d * d;
        }
    }
    for (auto& s : scale_) {
        const double sd = std::sqrt(s / static_cast<double>(n));
        s = sd > 1e-12 ? 1.0 / sd : 0.0;
    }
    std::vector<double> z(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            z[i * dim + j] = (x[i * dim + j] - mean_[j]) * scale_[j];
        }
    }

    const std::size_t C = n_classes;
    w_.assign(dim * C, 0.0);
    b_.assign(C, 0.0);
    Rng rng(options.seed, 0x109);
    for (auto& w : w_) {
        w = 0.01 * rng.normal();
    }
    std::vector<double> gw(w_.size()), gb(C), mw(w_.size(), 0.0), vw(w_.size(), 0.0), mb(C, 0.0), vb(C, 0.0), logits(C);
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t t = 1; t <= options.steps; ++t) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* zi = z.data() + i * dim;
            std::copy(b_.begin(), b_.end(), logits.begin());
            for (std::size_t j = 0; j < dim; ++j) {
                const double v = zi[j];
                const double* wj = w_.data() + j * C;
                for (std::size_t c = 0; c < C; ++c) {
                    logits[c] += v * wj[c];
                }
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double total = 0.0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                total += l;
            }
            for (std::size_t c = 0; c < C; ++c) {
                logits[c] = (logits[c] / total - (labels[i] == c ? 1.0 : 0.0)) * inv_n;
                gb[c] += logits[c];
            }
            for (std::size_t j = 0; j < dim; ++j) {
                const double v = zi[j];
                double* gj = gw.data() + j * C;
                for (std::size_t c = 0; c < C; ++c) {
                    gj[c] += v * logits[c];
                }
            }
        }
        for (std::size_t k = 0; k < w_.size(); ++k) {
            gw[k] += options.l2 * w_[k];
        }
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        auto adam = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m, std::vector<double>& v) {
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= options.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
            }
        };
        adam(w_, gw, mw, vw);
        adam(b_, gb, mb, vb);
    }
}

std::vector<std::uint32_t> LogisticRegression::predict(std::span<const double> x, std::size_t n) const {
    if (x.size() != n * dim_) {
        throw DataError("logistic regression: feature width differs from the fitted model");
    }
    std::vector<std::uint32_t> out(n);
    std::vector<double> logits(n_classes_);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(b_.begin(), b_.end(), logits.begin());
        for (std::size_t j = 0; j < dim_; ++j) {
            const double v = (x[i * dim_ + j] - mean_[j]) * scale_[j];
            for (std::size_t c = 0; c < n_classes_; ++c) {
                logits[c] += v * w_[j * n_classes_ + c];
            }
        }
        out[i] = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    return out;
}

BenchmarkResult summarize_runs(std::vector<RunRecord> runs) {
    BenchmarkResult r;
    std::vector<double> acc, f1;
    for (const auto& run : runs) {
        acc.push_back(run.metrics.accuracy);
        f1.push_back(run.metrics.weighted_f1);
    }
    r.accuracy = summarize(acc);
    r.weighted_f1 = summarize(f1);
    r.runs = std::move(runs);
    return r;
}

namespace {

std::vector<double> gather_rows(std::span<const double> x, std::size_t dim, std::span<const std::size_t> rows) {
    std::vector<double> out(rows.size() * dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[r] * dim), dim, out.begin() + static_cast<std::ptrdiff_t>(r * dim));
    }
    return out;
}

std::vector<std::uint32_t> gather_labels(std::span<const std::uint32_t> labels, std::span<const std::size_t> rows) {
    std::vector<std::uint32_t> out;
    out.reserve(rows.size());
    for (auto r : rows) {
        out.push_back(labels[r]);
    }
    return out;
}

void require_splits(const Fold& fold, std::size_t f) {
    if (fold.train.empty() || fold.val.empty() || fold.test.empty()) {
        throw DataError(fmt::format("fold {}: empty split (train {}, val {}, test {})", f, fold.train.size(), fold.val.size(), fold.test.size()));
    }
}

/**
 * Candidate sweep for one fold and seed. `fit_predict(fit_rows, candidate, predict_rows)` trains
 * on the first list and predicts the second.
 */
template<typename FitPredict>
RunRecord sweep_fold(const EvalTask& task, std::span<const std::uint32_t> labels, std::size_t f, std::size_t seed,
                     std::span<const double> candidates, FitPredict&& fit_predict) {
    const auto& fold = task.folds[f];
    require_splits(fold, f);
    if (candidates.empty()) {
        throw UsageError("benchmark: no hyperparameter candidates");
    }
    const auto val_labels = gather_labels(labels, fold.val);
    double best_acc = -1.0;
    double best = candidates.front();
    for (double c : candidates) {
        const auto pred = fit_predict(std::span<const std::size_t>(fold.train), c, std::span<const std::size_t>(fold.val));
        const double acc = evaluate(pred, val_labels, task.n_classes()).accuracy;
        if (acc > best_acc) {
            best_acc = acc;
            best = c;
        }
    }
    const auto full = concat(fold.train, fold.val);
    const auto pred = fit_predict(std::span<const std::size_t>(full), best, std::span<const std::size_t>(fold.test));
    RunRecord run;
    run.fold = f;
    run.seed = seed;
    run.selected = best;
    run.metrics = evaluate(pred, gather_labels(labels, fold.test), task.n_classes());
    return run;
}

RunRecord logreg_fold(std::span<const double> x, std::size_t dim, const EvalTask& task, std::span<const std::uint32_t> labels,
                      std::size_t f, std::size_t seed, std::span<const double> candidates,
                      const std::function<LogisticRegression::Options(double)>& options_for) {
    return sweep_fold(task, labels, f, seed, candidates, [&](std::span<const std::size_t> fit_rows, double c, std::span<const std::size_t> rows) {
        LogisticRegression model;
        auto opts = options_for(c);
        opts.seed = mix64(seed + 1);
        model.fit(gather_rows(x, dim, fit_rows), fit_rows.size(), dim, gather_labels(labels, fit_rows), task.n_classes(), opts);
        return model.predict(gather_rows(x, dim, rows), rows.size());
    });
}

void check_features(std::span<const double> x, std::size_t dim, const EvalTask& task) {
    if (x.size() != task.cells.size() * dim) {
        throw DataError(fmt::format("benchmark: {} feature values for {} cells of width {}", x.size(), task.cells.size(), dim));
    }
}

}

BenchmarkResult linear_probe(std::span<const double> features, std::size_t dim, const EvalTask& task, const ProbeOptions& options) {
    check_features(features, dim, task);
    const auto labels = task.labels();
    std::vector<RunRecord> runs;
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        for (std::size_t s = 0; s < options.seeds; ++s) {
            runs.push_back(logreg_fold(features, dim, task, labels, f, s, options.lr_candidates, [&](double lr) {
                LogisticRegression::Options o;
                o.lr = lr;
                o.steps = options.steps;
                return o;
            }));
        }
    }
    return summarize_runs(std::move(runs));
}

std::vector<std::size_t> hvg_select(const CountMatrix& counts, std::size_t top_k, std::span<const std::size_t> cells) {
    const std::size_t G = counts.n_genes();
    if (top_k > G) {
        throw UsageError(fmt::format("hvg_select: top_k {} exceeds the {} genes", top_k, G));
    }
    std::vector<std::size_t> all;
    if (cells.empty()) {
        all.resize(counts.n_cells());
        std::iota(all.begin(), all.end(), std::size_t{0});
        cells = all;
    }
    if (cells.empty()) {
        throw DataError("hvg_select: no cells");
    }
    std::vector<std::vector<double>> values(G);
    for (auto c : cells) {
        const auto norm = depth_normalize(counts.cell(c));
        for (std::size_t k = 0; k < norm.size(); ++k) {
            values[norm.genes[k]].push_back(std::log1p(norm.values[k]));
        }
    }
    // Sorting each gene's values makes the sums independent of cell order.
    const double n = static_cast<double>(cells.size());
    std::vector<double> mean(G, 0.0), disp(G, 0.0);
    std::vector<bool> varies(G, false);
    for (std::size_t g = 0; g < G; ++g) {
        auto& v = values[g];
        std::sort(v.begin(), v.end());
        double sum = 0.0;
        for (double x : v) {
            sum += x;
        }
        mean[g] = sum / n;
        double ss = static_cast<double>(cells.size() - v.size()) * mean[g] * mean[g];
        for (double x : v) {
            ss += (x - mean[g]) * (x - mean[g]);
        }
        const double var = cells.size() > 1 ? ss / (n - 1.0) : 0.0;
        // Exact test: a constant column can still leave rounding residue in `var`.
        varies[g] = !v.empty() && (v.size() < cells.size() || v.front() != v.back());
        disp[g] = mean[g] > 0.0 ? var / mean[g] : 0.0;
    }

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t g = 0; g < G; ++g) {
        if (varies[g]) {
            lo = std::min(lo, mean[g]);
            hi = std::max(hi, mean[g]);
        }
    }
    std::vector<std::size_t> bin(G, 0);
    std::array<std::vector<std::size_t>, kBins> members;
    for (std::size_t g = 0; g < G; ++g) {
        if (!varies[g]) {
            continue;
        }
        std::size_t b = 0;
        if (hi > lo) {
            b = std::min(kBins - 1, static_cast<std::size_t>((mean[g] - lo) / (hi - lo) * static_cast<double>(kBins)));
        }
        bin[g] = b;
        members[b].push_back(g);
    }
    std::vector<double> score(G, -std::numeric_limits<double>::infinity());
    for (const auto& m : members) {
        if (m.empty()) {
            continue;
        }
        double mu = 0.0;
        for (auto g : m) {
            mu += disp[g];
        }
        mu /= static_cast<double>(m.size());
        double ss = 0.0;
        for (auto g : m) {
            ss += (disp[g] - mu) * (disp[g] - mu);
        }
        const double sd = m.size() > 1 ? std::sqrt(ss / static_cast<double>(m.size() - 1)) : 0.0;
        for (auto g : m) {
            score[g] = sd > 0.0 ? (disp[g] - mu) / sd : 0.0;
        }
    }
    std::vector<std::size_t> order(G);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    order.resize(top_k);
    return order;
}

std::vector<double> log1p_features(const CountMatrix& counts, std::span<const std::size_t> rows, std::span<const std::size_t> genes) {
    std::vector<std::size_t> column(counts.n_genes(), std::numeric_limits<std::size_t>::max());
    for (std::size_t j = 0; j < genes.size(); ++j) {
        column.at(genes[j]) = j;
    }
    std::vector<double> out(rows.size() * genes.size(), 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto norm = depth_normalize(counts.cell(rows[r]));
        for (std::size_t k = 0; k < norm.size(); ++k) {
            if (const auto j = column[norm.genes[k]]; j != std::numeric_limits<std::size_t>::max()) {
                out[r * genes.size() + j] = std::log1p(norm.values[k]);
            }
        }
    }
    return out;
}

namespace {

std::function<LogisticRegression::Options(double)> baseline_options(const BaselineOptions& options) {
    return [options](double l2) {
        LogisticRegression::Options o;
        o.lr = options.lr;
        o.steps = options.steps;
        o.l2 = l2;
        return o;
    };
}

}

BenchmarkResult train_baseline_logreg(std::span<const double> features, std::size_t dim, const EvalTask& task,
                                      const BaselineOptions& options) {
    check_features(features, dim, task);
    const auto labels = task.labels();
    std::vector<RunRecord> runs;
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        for (std::size_t s = 0; s < options.seeds; ++s) {
            runs.push_back(logreg_fold(features, dim, task, labels, f, s, options.l2_candidates, baseline_options(options)));
        }
    }
    return summarize_runs(std::move(runs));
}

BaselineResult train_baseline_logreg(std::span<const CountMatrix* const> sources, const EvalTask& task, const BaselineOptions& options) {
    if (sources.empty()) {
        throw UsageError("baseline: no count matrices");
    }
    for (const auto& c : task.cells) {
        if (c.source >= sources.size()) {
            throw UsageError(fmt::format("baseline: cell '{}' refers to missing matrix {}", c.cell_id, c.source));
        }
    }
    const auto gene_ids = sources[0]->gene_ids();
    for (const auto* m : sources) {
        if (m->gene_ids() != gene_ids) {
            throw DataError("baseline: count matrices have different genes");
        }
    }
    const auto labels = task.labels();
    BaselineResult out;
    std::vector<RunRecord> runs;
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        const auto& fold = task.folds[f];
        require_splits(fold, f);
        const std::uint8_t src = task.cells[fold.train.front()].source;
        std::vector<std::size_t> fit_rows;
        for (auto i : concat(fold.train, fold.val)) {
            if (task.cells[i].source != src) {
                throw UsageError(fmt::format("baseline: fold {} trains on cells from two matrices", f));
            }
            fit_rows.push_back(task.cells[i].row);
        }
        const auto genes = hvg_select(*sources[src], std::min(options.top_genes, gene_ids.size()), fit_rows);
        const std::size_t dim = genes.size();
        std::vector<double> x(task.cells.size() * dim);
        for (std::uint8_t s = 0; s < sources.size(); ++s) {
            std::vector<std::size_t> idx, rows;
            for (std::size_t i = 0; i < task.cells.size(); ++i) {
                if (task.cells[i].source == s) {
                    idx.push_back(i);
                    rows.push_back(task.cells[i].row);
                }
            }
            const auto part = log1p_features(*sources[s], rows, genes);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                std::copy_n(part.begin() + static_cast<std::ptrdiff_t>(r * dim), dim, x.begin() + static_cast<std::ptrdiff_t>(idx[r] * dim));
            }
        }
        for (std::size_t s = 0; s < options.seeds; ++s) {
            runs.push_back(logreg_fold(x, dim, task, labels, f, s, options.l2_candidates, baseline_options(options)));
        }
        out.fold_genes.push_back(genes);
    }
    out.result = summarize_runs(std::move(runs));
    return out;
}

namespace {

std::vector<std::uint32_t> argmax_rows(std::span<const float> emb, std::size_t d, std::span<const float> w, std::span<const float> b,
                                       std::size_t C) {
    const std::size_t n = emb.size() / d;
    std::vector<std::uint32_t> out(n);
    std::vector<double> logits(C);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            logits[c] = b[c];
        }
        for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t c = 0; c < C; ++c) {
                logits[c] += static_cast<double>(emb[i * d + k]) * w[k * C + c];
            }
        }
        out[i] = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    return out;
}

/// Full fine-tuning of a copy of `base` plus a linear head; returns test-row predictions.
std::vector<std::uint32_t> finetune_fit_predict(const ModelParams<float>& base, std::span<const TokenizedCell> cells,
                                                std::span<const std::uint32_t> labels, std::size_t n_classes,
                                                std::span<const std::size_t> fit_rows, std::span<const std::size_t> rows, double lr,
                                                std::size_t seed, const FinetuneOptions& options) {
    ModelParams<float> params = base;
    const std::size_t d = params.config.d_model;
    const std::size_t C = n_classes;
    std::vector<float> w(d * C), b(C, 0.0f), gw(d * C), gb(C);
    std::vector<float> mw(d * C, 0.0f), vw(d * C, 0.0f), mb(C, 0.0f), vb(C, 0.0f);
    Rng init(seed, 0xf1e);
    for (auto& x : w) {
        x = static_cast<float>(init.normal() / static_cast<double>(d));
    }
    TrainConfig tc;
    tc.weight_decay = options.weight_decay;
    AdamState state;
    std::vector<float> grads;
    std::vector<std::size_t> order(fit_rows.begin(), fit_rows.end());
    std::vector<TokenizedCell> batch_cells;
    std::vector<double> probs(C);
    const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        order.assign(fit_rows.begin(), fit_rows.end());
        Rng(seed, 0xf7, epoch).shuffle(order);
        for (std::size_t first = 0; first < order.size(); first += bs) {
            const std::size_t last = std::min(order.size(), first + bs);
            batch_cells.clear();
            for (std::size_t k = first; k < last; ++k) {
                batch_cells.push_back(cells[order[k]]);
            }
            const auto batch = unmasked_batch(batch_cells, params.config.variant);
            const auto out = forward(params, batch);
            const auto pooled = mean_pool_genes(out, batch);
            const std::size_t B = batch_cells.size();
            std::fill(gw.begin(), gw.end(), 0.0f);
            std::fill(gb.begin(), gb.end(), 0.0f);
            std::vector<float> d_pooled(B * d, 0.0f);
            for (std::size_t r = 0; r < B; ++r) {
                for (std::size_t c = 0; c < C; ++c) {
                    double z = b[c];
                    for (std::size_t k = 0; k < d; ++k) {
                        z += static_cast<double>(pooled[r * d + k]) * w[k * C + c];
                    }
                    probs[c] = z;
                }
                const double mx = *std::max_element(probs.begin(), probs.end());
                double total = 0.0;
                for (auto& p : probs) {
                    p = std::exp(p - mx);
                    total += p;
                }
                const auto y = labels[order[first + r]];
                for (std::size_t c = 0; c < C; ++c) {
                    const auto g = static_cast<float>((probs[c] / total - (y == c ? 1.0 : 0.0)) / static_cast<double>(B));
                    gb[c] += g;
                    for (std::size_t k = 0; k < d; ++k) {
                        gw[k * C + c] += pooled[r * d + k] * g;
                        d_pooled[r * d + k] += g * w[k * C + c];
                    }
                }
            }
            const auto d_hidden = mean_pool_genes_backward<float>(d_pooled, batch, d);
            grads.assign(params.data.size(), 0.0f);
            backward_from_hidden<float>(params, batch, out, d_hidden, grads);
            adamw_step<float>(params, grads, state, tc, lr);
            adamw_update<float>(w, gw, mw, vw, state.step, lr, tc, false);
            adamw_update<float>(b, gb, mb, vb, state.step, lr, tc, false);
        }
    }
    std::vector<TokenizedCell> eval_cells;
    for (auto r : rows) {
        eval_cells.push_back(cells[r]);
    }
    const auto emb = embed_cells(params, std::span<const TokenizedCell>(eval_cells));
    return argmax_rows(emb, d, w, b, C);
}

}

BenchmarkResult finetune(const ModelParams<float>& params, std::span<const TokenizedCell> cells, const EvalTask& task,
                         const FinetuneOptions& options) {
    if (cells.size() != task.cells.size()) {
        throw DataError(fmt::format("finetune: {} tokenized cells for a task of {}", cells.size(), task.cells.size()));
    }
    std::vector<TokenizedCell> stripped(cells.begin(), cells.end());
    for (auto& c : stripped) {
        c.prompts.clear();
        if (params.config.variant == Variant::x && c.values.size() != c.genes.size()) {
            throw UsageError("finetune: value-variant model given rank-variant cells");
        }
        if (params.config.variant == Variant::g && !c.values.empty()) {
            throw UsageError("finetune: rank-variant model given value-variant cells");
        }
    }
    if (options.freeze_backbone) {
        const auto emb = embed_cells(params, std::span<const TokenizedCell>(stripped));
        const std::vector<double> features(emb.begin(), emb.end());
        ProbeOptions probe;
        probe.lr_candidates = options.lr_candidates;
        probe.seeds = options.seeds;
        probe.steps = options.probe_steps;
        return linear_probe(features, params.config.d_model, task, probe);
    }
    const auto labels = task.labels();
    std::vector<RunRecord> runs;
    for (std::size_t f = 0; f < task.folds.size(); ++f) {
        for (std::size_t s = 0; s < options.seeds; ++s) {
            runs.push_back(sweep_fold(task, labels, f, s, options.lr_candidates,
                                      [&](std::span<const std::size_t> fit_rows, double lr, std::span<const std::size_t> rows) {
                                          return finetune_fit_predict(params, stripped, labels, task.n_classes(), fit_rows, rows, lr,
                                                                      mix64(s + 1), options);
                                      }));
        }
    }
    return summarize_runs(std::move(runs));
}

void write_report(const std::filesystem::path& dir, std::span<const ReportEntry> entries) {
    std::filesystem::create_directories(dir);
    std::string metrics = "model\ttask\tfold\tseed\taccuracy\tweighted_f1\n";
    std::string summary = "model\ttask\tn\taccuracy_mean\taccuracy_sd\tweighted_f1_mean\tweighted_f1_sd\n";
    std::vector<std::string> models, tasks;
    std::map<std::pair<std::string, std::string>, double> mean_acc;
    for (const auto& e : entries) {
        for (const auto& r : e.result.runs) {
            metrics += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\n", e.model, e.task, r.fold, r.seed, format_double(r.metrics.accuracy),
                                   format_double(r.metrics.weighted_f1));
        }
        summary += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", e.model, e.task, e.result.accuracy.n, format_double(e.result.accuracy.mean),
                               format_double(e.result.accuracy.sd), format_double(e.result.weighted_f1.mean),
                               format_double(e.result.weighted_f1.sd));
        if (std::find(models.begin(), models.end(), e.model) == models.end()) {
            models.push_back(e.model);
        }
        if (std::find(tasks.begin(), tasks.end(), e.task) == tasks.end()) {
            tasks.push_back(e.task);
        }
        mean_acc[{e.task, e.model}] = e.result.accuracy.mean;
    }
    // One row per task and one column per model: the shape of a model-vs-model accuracy scatter.
    std::string scatter = "task";
    for (const auto& m : models) {
        scatter += "\t" + m;
    }
    scatter += "\n";
    for (const auto& t : tasks) {
        scatter += t;
        for (const auto& m : models) {
            auto it = mean_acc.find({t, m});
            scatter += "\t" + format_double(it == mean_acc.end() ? std::numeric_limits<double>::quiet_NaN() : it->second);
        }
        scatter += "\n";
    }
    write_file(dir / "metrics.tsv", metrics);
    write_file(dir / "summary.tsv", summary);
    write_file(dir / "scatter.tsv", scatter);
}

namespace {

/// Data lines of a tab-separated file with a header, with their 1-based line numbers.
std::vector<std::pair<std::size_t, std::vector<std::string_view>>> table_rows(std::string_view text, std::size_t columns,
                                                                               const std::filesystem::path& path) {
    std::vector<std::pair<std::size_t, std::vector<std::string_view>>> rows;
    std::size_t line_no = 0, start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const auto line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line_no == 1 || line.empty()) {
            continue;
        }
        auto f = split(line, '\t');
        if (f.size() != columns) {
            throw DataError(fmt::format("{}:{}: expected {} columns", path.string(), line_no, columns));
        }
        rows.emplace_back(line_no, std::move(f));
    }
    return rows;
}

}

std::vector<ReportEntry> read_metrics_report(const std::filesystem::path& path) {
    const auto text = read_file(path);
    std::vector<ReportEntry> entries;
    std::vector<std::vector<RunRecord>> runs;
    for (const auto& [line, f] : table_rows(text, 6, path)) {
        auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.model == f[0] && e.task == f[1]; });
        std::size_t k = static_cast<std::size_t>(it - entries.begin());
        if (it == entries.end()) {
            entries.push_back({std::string(f[0]), std::string(f[1]), {}});
            runs.emplace_back();
        }
        RunRecord r;
        r.fold = static_cast<std::size_t>(parse_uint(f[2], "fold"));
        r.seed = static_cast<std::size_t>(parse_uint(f[3], "seed"));
        r.metrics.accuracy = parse_double(f[4], "accuracy");
        r.metrics.weighted_f1 = parse_double(f[5], "weighted_f1");
        runs[k].push_back(std::move(r));
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        entries[k].result = summarize_runs(std::move(runs[k]));
    }
    return entries;
}

void write_scaling_points(const std::filesystem::path& path, std::span<const std::pair<double, double>> points) {
    std::string out = "n_params\tval_loss\n";
    for (const auto& [n, l] : points) {
        out += fmt::format("{}\t{}\n", format_double(n), format_double(l));
    }
    write_file(path, out);
}

std::vector<std::pair<double, double>> read_scaling_points(const std::filesystem::path& path) {
    const auto text = read_file(path);
    std::vector<std::pair<double, double>> out;
    for (const auto& [line, f] : table_rows(text, 2, path)) {
        out.emplace_back(parse_double(f[0], "n_params"), parse_double(f[1], "val_loss"));
    }
    return out;
}

}
