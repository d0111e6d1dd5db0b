#include "rankcell/train.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace rankcell {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    cfg.warmup_steps = 100;
    cfg.total_steps = 2000;
    cfg.batch_size = 32;
    return cfg;
}

std::size_t TrainConfig::batches_per_epoch(std::size_t n_cells) const { return (n_cells + batch_size - 1) / batch_size; }

std::size_t TrainConfig::resolved_total_steps(std::size_t n_cells) const {
    return total_steps > 0 ? total_steps : epochs * batches_per_epoch(n_cells);
}

void TrainConfig::validate() const {
    auto fail = [](std::string_view field, std::string_view why) {
        throw UsageError(fmt::format("train.{}: {}", field, why));
    };
    if (batch_size == 0) {
        fail("batch_size", "must be positive");
    }
    if (!(max_lr > 0.0)) {
        fail("max_lr", "must be positive");
    }
    if (total_steps > 0 && warmup_steps > total_steps) {
        fail("warmup_steps", "must not exceed total_steps");
    }
    if (!(weight_decay >= 0.0)) {
        fail("weight_decay", "must be non-negative");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0)) {
        fail("beta1", "must lie in [0, 1)");
    }
    if (!(beta2 >= 0.0 && beta2 < 1.0)) {
        fail("beta2", "must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) {
        fail("epsilon", "must be positive");
    }
    if (epochs == 0) {
        fail("epochs", "must be positive");
    }
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
        fail("mask_rate", "must lie in (0, 1)");
    }
    if (!(loss_weights.mlm >= 0.0) || !(loss_weights.cls >= 0.0)) {
        fail("loss_weights", "must be non-negative");
    }
    if (eval_batch_size == 0) {
        fail("eval_batch_size", "must be positive");
    }
}

bool TrainConfig::operator==(const TrainConfig& o) const {
    return to_json(*this) == to_json(o);
}

nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"batch_size", c.batch_size},
        {"max_lr", c.max_lr},
        {"warmup_steps", c.warmup_steps},
        {"total_steps", c.total_steps},
        {"weight_decay", c.weight_decay},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"epsilon", c.epsilon},
        {"seed", c.seed},
        {"epochs", c.epochs},
        {"mask_rate", c.mask_rate},
        {"loss_weights", {{"mlm", c.loss_weights.mlm}, {"cls", c.loss_weights.cls}}},
        {"balance_prompts", c.balance_prompts},
        {"checkpoint_every", c.checkpoint_every},
        {"eval_every", c.eval_every},
        {"eval_batch_size", c.eval_batch_size},
        {"eval_seed", c.eval_seed},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j, std::string_view path) {
    if (!j.is_object()) {
        throw UsageError(fmt::format("{}: expected an object", path));
    }
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        const auto field = fmt::format("{}.{}", path, key);
        try {
            if (key == "batch_size") {
                c.batch_size = value.get<std::size_t>();
            } else if (key == "max_lr") {
                c.max_lr = value.get<double>();
            } else if (key == "warmup_steps") {
                c.warmup_steps = value.get<std::size_t>();
            } else if (key == "total_steps") {
                c.total_steps = value.get<std::size_t>();
            } else if (key == "weight_decay") {
                c.weight_decay = value.get<double>();
            } else if (key == "beta1") {
                c.beta1 = value.get<double>();
            } else if (key == "beta2") {
                c.beta2 = value.get<double>();
            } else if (key == "epsilon") {
                c.epsilon = value.get<double>();
            } else if (key == "seed") {
                c.seed = value.get<std::uint64_t>();
            } else if (key == "epochs") {
                c.epochs = value.get<std::size_t>();
            } else if (key == "mask_rate") {
                c.mask_rate = value.get<double>();
            } else if (key == "loss_weights") {
                if (!value.is_object()) {
                    throw UsageError(fmt::format("{}: expected an object", field));
                }
                for (const auto& [k, v] : value.items()) {
                    if (k == "mlm") {
                        c.loss_weights.mlm = v.get<double>();
                    } else if (k == "cls") {
                        c.loss_weights.cls = v.get<double>();
                    } else {
                        throw UsageError(fmt::format("{}.{}: unknown field", field, k));
                    }
                }
            } else if (key == "balance_prompts") {
                c.balance_prompts = value.get<bool>();
            } else if (key == "checkpoint_every") {
                c.checkpoint_every = value.get<std::size_t>();
            } else if (key == "eval_every") {
                c.eval_every = value.get<std::size_t>();
            } else if (key == "eval_batch_size") {
                c.eval_batch_size = value.get<std::size_t>();
            } else if (key == "eval_seed") {
                c.eval_seed = value.get<std::uint64_t>();
            } else {
                throw UsageError(fmt::format("{}: unknown field", field));
            }
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(fmt::format("{}: {}", field, e.what()));
        }
    }
    return c;
}

double lr_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double max_lr) {
    if (step > total_steps) {
        throw UsageError(fmt::format("lr_at: step {} outside [0, {}]", step, total_steps));
    }
    if (step < warmup_steps) {
        return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps == warmup_steps) {
        return max_lr;
    }
    return max_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    return lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr);
}

template<typename T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<float> m, std::span<float> v, std::size_t t, double lr,
                  const TrainConfig& cfg, bool decay) {
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const double shrink = decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        double pi = static_cast<double>(p[i]) * shrink;
        pi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon);
        p[i] = static_cast<T>(pi);
    }
}

template<typename T>
void adamw_step(ModelParams<T>& params, std::span<const T> grads, AdamState& state, const TrainConfig& cfg, double lr) {
    if (grads.size() != params.data.size()) {
        throw DataError("adamw_step: gradient size does not match parameters");
    }
    if (state.m.size() != params.data.size()) {
        state.m.assign(params.data.size(), 0.0f);
        state.v.assign(params.data.size(), 0.0f);
    }
    for (const auto& t : params.layout.tensors()) {
        for (std::size_t i = 0; i < t.size; ++i) {
            if (!std::isfinite(grads[t.offset + i])) {
                throw DivergenceError(fmt::format("non-finite gradient in tensor '{}'", t.name));
            }
        }
    }
    ++state.step;
    for (const auto& t : params.layout.tensors()) {
        adamw_update<T>(std::span<T>(params.data).subspan(t.offset, t.size), grads.subspan(t.offset, t.size),
                        std::span<float>(state.m).subspan(t.offset, t.size), std::span<float>(state.v).subspan(t.offset, t.size),
                        state.step, lr, cfg, t.decay);
    }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>, std::size_t,
                                  double, const TrainConfig&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<float>, std::span<float>, std::size_t,
                                   double, const TrainConfig&, bool);
template void adamw_step<float>(ModelParams<float>&, std::span<const float>, AdamState&, const TrainConfig&, double);
template void adamw_step<double>(ModelParams<double>&, std::span<const double>, AdamState&, const TrainConfig&, double);

bool LossRecord::operator==(const LossRecord& o) const {
    auto same = [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); };
    return step == o.step && same(train_loss, o.train_loss) && same(val_loss, o.val_loss) && same(lr, o.lr);
}

std::string format_loss_log(std::span<const LossRecord> records) {
    std::string out = "step\ttrain_loss\tval_loss\tlr\n";
    for (const auto& r : records) {
        out += fmt::format("{}\t{}\t{}\t{}\n", r.step, format_double(r.train_loss), format_double(r.val_loss), format_double(r.lr));
    }
    return out;
}

std::vector<LossRecord> parse_loss_log(std::string_view text) {
    std::vector<LossRecord> out;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        const auto line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty() || line.starts_with("step")) {
            continue;
        }
        const auto f = split(line, '\t');
        const auto where = fmt::format("loss log line {}", line_no);
        if (f.size() != 4) {
            throw DataError(where + ": expected 4 columns");
        }
        out.push_back({parse_uint(f[0], where), parse_double(f[1], where), parse_double(f[2], where), parse_double(f[3], where)});
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'R', 'C', 'K', 'P'};

template<typename U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

void put_tensor(std::string& out, const std::string& name, const std::vector<std::size_t>& shape, const float* data,
                std::size_t n) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (auto s : shape) {
        put<std::uint64_t>(out, s);
    }
    out.append(reinterpret_cast<const char*>(data), n * sizeof(float));
}

class Reader {
public:
    Reader(std::string_view bytes, std::string where) : bytes_(bytes), where_(std::move(where)) {}

    template<typename U>
    U get() {
        U v;
        std::memcpy(&v, take(sizeof(U)).data(), sizeof(U));
        return v;
    }

    std::string_view take(std::size_t n) {
        if (bytes_.size() - pos_ < n) {
            throw DataError(where_ + ": truncated checkpoint");
        }
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    const std::string& where() const { return where_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::string where_;
};

void read_tensor(Reader& r, const TensorInfo& expect, const std::string& name, float* dst) {
    const auto len = r.get<std::uint16_t>();
    const auto got = std::string(r.take(len));
    if (got != name) {
        throw DataError(fmt::format("{}: expected tensor '{}', found '{}'", r.where(), name, got));
    }
    const auto ndim = r.get<std::uint8_t>();
    std::vector<std::size_t> shape(ndim);
    for (auto& s : shape) {
        s = r.get<std::uint64_t>();
    }
    if (shape != expect.shape) {
        throw DataError(fmt::format("{}: tensor '{}' has the wrong shape", r.where(), name));
    }
    const auto bytes = r.take(expect.size * sizeof(float));
    std::memcpy(dst, bytes.data(), bytes.size());
}

nlohmann::json history_json(std::span<const LossRecord> history) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    auto arr = nlohmann::json::array();
    for (const auto& r : history) {
        arr.push_back({r.step, num(r.train_loss), num(r.val_loss), num(r.lr)});
    }
    return arr;
}

std::vector<LossRecord> history_from_json(const nlohmann::json& arr) {
    auto num = [](const nlohmann::json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); };
    std::vector<LossRecord> out;
    for (const auto& r : arr) {
        out.push_back({r.at(0).get<std::size_t>(), num(r.at(1)), num(r.at(2)), num(r.at(3))});
    }
    return out;
}

}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const auto& p = ck.params;
    nlohmann::json header = {
        {"version", kCheckpointVersion},
        {"model", to_json(p.config)},
        {"train", to_json(ck.train)},
        {"step", ck.step},
        {"rng", {{"seed", ck.train.seed}, {"step", ck.step}}},
        {"best_val_loss", std::isfinite(ck.best_val_loss) ? nlohmann::json(ck.best_val_loss) : nlohmann::json(nullptr)},
        {"history", history_json(ck.history)},
        {"vocab_genes", ck.vocab_genes},
        {"optimizer_step", ck.optimizer.step},
        {"has_moments", !ck.optimizer.m.empty()},
    };
    const auto text = header.dump();
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    const auto& tensors = p.layout.tensors();
    for (const auto& t : tensors) {
        put_tensor(out, t.name, t.shape, p.data.data() + t.offset, t.size);
    }
    if (!ck.optimizer.m.empty()) {
        for (const auto& t : tensors) {
            put_tensor(out, "adam.m." + t.name, t.shape, ck.optimizer.m.data() + t.offset, t.size);
        }
        for (const auto& t : tensors) {
            put_tensor(out, "adam.v." + t.name, t.shape, ck.optimizer.v.data() + t.offset, t.size);
        }
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    write_file(tmp, out);
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    Reader r(bytes, path.string());
    if (r.take(4) != std::string_view(kMagic, 4)) {
        throw DataError(path.string() + ": not a checkpoint file");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError(fmt::format("{}: checkpoint version {} (expected {})", path.string(), version, kCheckpointVersion));
    }
    const auto len = r.get<std::uint64_t>();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.take(len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("{}: bad header: {}", path.string(), e.what()));
    }
    Checkpoint ck;
    try {
        const auto cfg = model_config_from_json(header.at("model"));
        cfg.validate();
        ck.params = ModelParams<float>(cfg);
        ck.train = train_config_from_json(header.at("train"));
        ck.step = header.at("step").get<std::size_t>();
        const auto& best = header.at("best_val_loss");
        ck.best_val_loss = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
        ck.history = history_from_json(header.at("history"));
        ck.vocab_genes = header.at("vocab_genes").get<std::vector<std::string>>();
        ck.optimizer.step = header.at("optimizer_step").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("{}: bad header: {}", path.string(), e.what()));
    }
    const auto& tensors = ck.params.layout.tensors();
    for (const auto& t : tensors) {
        read_tensor(r, t, t.name, ck.params.data.data() + t.offset);
    }
    if (header.value("has_moments", false)) {
        ck.optimizer.m.assign(ck.params.data.size(), 0.0f);
        ck.optimizer.v.assign(ck.params.data.size(), 0.0f);
        for (const auto& t : tensors) {
            read_tensor(r, t, "adam.m." + t.name, ck.optimizer.m.data() + t.offset);
        }
        for (const auto& t : tensors) {
            read_tensor(r, t, "adam.v." + t.name, ck.optimizer.v.data() + t.offset);
        }
    }
    return ck;
}

LossBreakdown eval_heldout_loss(const ModelParams<float>& params, std::span<const TokenizedCell> cells, std::uint64_t masking_seed,
                                double mask_rate, std::size_t batch_size, const LossWeights& weights) {
    if (cells.empty()) {
        throw DataError("eval_heldout_loss: empty validation set");
    }
    batch_size = std::max<std::size_t>(1, batch_size);
    LossBreakdown sum;
    for (std::size_t start = 0, chunk = 0; start < cells.size(); start += batch_size, ++chunk) {
        const auto n = std::min(batch_size, cells.size() - start);
        const auto batch = mask_batch(cells.subspan(start, n), params.config.variant, mask_rate, masking_seed, chunk);
        const auto l = pretrain_loss(forward(params, batch), batch, weights);
        const auto w = static_cast<double>(n);
        sum.mlm += w * l.mlm;
        sum.cls += w * l.cls;
        sum.total += w * l.total;
    }
    const auto n = static_cast<double>(cells.size());
    return {sum.mlm / n, sum.cls / n, sum.total / n};
}

namespace {

std::uint64_t step_seed(std::uint64_t seed, std::size_t step) { return mix64(seed ^ mix64(static_cast<std::uint64_t>(step) + 1)); }

std::filesystem::path step_checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
    return dir / fmt::format("step-{:07d}.ckpt", step);
}

}

PretrainResult pretrain(std::span<const TokenizedCell> train_cells, std::span<const TokenizedCell> val_cells,
                        const Vocabulary& vocab, const ModelConfig& model, const TrainConfig& train,
                        const PretrainOptions& options) {
    train.validate();
    model.validate();
    if (train_cells.empty()) {
        throw DataError("pretrain: no training cells");
    }
    if (model.vocab_size != vocab.size()) {
        throw DataError(fmt::format("pretrain: model vocab_size {} but vocabulary has {} tokens", model.vocab_size, vocab.size()));
    }
    for (const auto& c : train_cells) {
        if (model.variant == Variant::x && c.values.size() != c.genes.size()) {
            throw DataError("pretrain: value-variant model given rank-variant cells");
        }
        if (c.genes.size() > model.context_len) {
            throw DataError("pretrain: cell longer than the model context");
        }
    }
    const std::size_t n = train_cells.size();
    const std::size_t total = train.resolved_total_steps(n);
    if (train.warmup_steps > total) {
        throw UsageError("train.warmup_steps: must not exceed the number of steps");
    }
    TrainConfig cfg = train;
    cfg.total_steps = total;

    const auto tables = cfg.balance_prompts ? build_balance_tables(count_labels(train_cells, vocab), vocab.schema())
                                            : BalanceTables::all_ones(vocab.schema());

    PretrainResult result;
    Checkpoint& ck = result.checkpoint;
    if (options.resume) {
        ck = load_checkpoint(*options.resume);
        if (!(ck.params.config == model)) {
            throw UsageError("resume: model configuration differs from the checkpoint");
        }
        if (!(ck.train == cfg)) {
            throw UsageError("resume: training configuration differs from the checkpoint");
        }
        if (ck.vocab_genes != vocab.gene_ids()) {
            throw UsageError("resume: vocabulary differs from the checkpoint");
        }
    } else {
        ck.params = init_params<float>(model, cfg.seed);
        ck.train = cfg;
        ck.best_val_loss = std::numeric_limits<double>::infinity();
        ck.vocab_genes = vocab.gene_ids();
    }

    const bool writes = !options.out_dir.empty();
    auto save = [&] {
        if (!writes) {
            return;
        }
        std::filesystem::create_directories(options.out_dir);
        save_checkpoint(step_checkpoint_path(options.out_dir, ck.step), ck);
        write_file(options.out_dir / "loss_log.tsv", format_loss_log(ck.history));
    };

    double first_loss = ck.history.empty() ? std::numeric_limits<double>::quiet_NaN() : ck.history.front().train_loss;
    std::size_t above = 0;
    for (auto it = ck.history.rbegin(); it != ck.history.rend() && it->train_loss > 10.0 * first_loss; ++it) {
        ++above;
    }

    const std::size_t per_epoch = cfg.batches_per_epoch(n);
    std::size_t order_epoch = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> order(n);
    std::vector<float> grads;
    std::vector<TokenizedCell> batch_cells;

    while (ck.step < total) {
        if (options.stop_after && ck.step >= *options.stop_after) {
            break;
        }
        const std::size_t step = ck.step;
        const std::size_t epoch = step / per_epoch;
        if (epoch != order_epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng(cfg.seed, 0x0e70c, epoch).shuffle(order);
            order_epoch = epoch;
        }
        const std::size_t first = (step % per_epoch) * cfg.batch_size;
        const std::size_t last = std::min(n, first + cfg.batch_size);
        const auto seed = step_seed(cfg.seed, step);
        batch_cells.clear();
        for (std::size_t k = first; k < last; ++k) {
            Rng rng(seed, 1, order[k]);
            batch_cells.push_back(attach_annotations(train_cells[order[k]], vocab, tables, rng));
        }
        const auto batch = mask_batch(batch_cells, model.variant, cfg.mask_rate, seed, 2, vocab.schema());
        DropoutSpec dropout;
        if (model.dropout > 0.0) {
            dropout.seed = mix64(seed ^ 3);
        }
        const auto loss = backward(ck.params, batch, grads, cfg.loss_weights, dropout);
        const double lr = lr_at(step + 1, cfg);
        adamw_step<float>(ck.params, grads, ck.optimizer, cfg, lr);
        ck.step = step + 1;

        LossRecord rec{ck.step, loss.total, std::numeric_limits<double>::quiet_NaN(), lr};
        const bool eval_now = (cfg.eval_every > 0 && ck.step % cfg.eval_every == 0) || ck.step == total;
        if (eval_now && !val_cells.empty()) {
            rec.val_loss = eval_heldout_loss(ck.params, val_cells, cfg.eval_seed, cfg.mask_rate, cfg.eval_batch_size, cfg.loss_weights).total;
            ck.best_val_loss = std::min(ck.best_val_loss, rec.val_loss);
        }
        ck.history.push_back(rec);

        if (std::isnan(first_loss)) {
            first_loss = loss.total;
        }
        above = loss.total > 10.0 * first_loss ? above + 1 : 0;
        if (above >= 100) {
            save();
            throw DivergenceError(fmt::format("loss above 10x its initial value ({}) for 100 consecutive steps at step {}",
                                              format_double(first_loss), ck.step));
        }
        if (options.on_step) {
            options.on_step(rec);
        }
        if (cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every == 0 && ck.step < total) {
            save();
        }
    }
    result.finished = ck.step == total;
    save();
    if (writes && result.finished) {
        std::filesystem::copy_file(step_checkpoint_path(options.out_dir, ck.step), options.out_dir / "final.ckpt",
                                   std::filesystem::copy_options::overwrite_existing);
    }
    return result;
}

double PowerLaw::operator()(double n) const { return a * std::pow(n, b); }

PowerLaw fit_power_law(std::span<const std::pair<double, double>> points) {
    if (points.size() < 2) {
        throw DataError("fit_power_law: need at least two points");
    }
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : points) {
        if (!(x > 0.0) || !(y > 0.0)) {
            throw DataError("fit_power_law: parameter counts and losses must be positive");
        }
        mx += std::log(x);
        my += std::log(y);
    }
    const auto n = static_cast<double>(points.size());
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        const double dx = std::log(x) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(y) - my);
    }
    if (sxx == 0.0) {
        throw DataError("fit_power_law: all points share one parameter count");
    }
    PowerLaw p;
    p.b = sxy / sxx;
    p.a = std::exp(my - p.b * mx);
    return p;
}

}
