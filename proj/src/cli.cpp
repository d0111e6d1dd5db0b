#include "rankcell/cli.hpp"

#include "rankcell/normalize.hpp"
#include "rankcell/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <omp.h>

namespace rankcell {

namespace {

constexpr std::string_view kVersion = "rankcell 0.1.0";

using nlohmann::json;

template<typename T>
T get_field(const json& value, const std::string& field) {
    try {
        return value.get<T>();
    } catch (const json::exception&) {
        throw UsageError(fmt::format("{}: wrong type ({})", field, value.type_name()));
    }
}

void require_object(const json& j, std::string_view path) {
    if (!j.is_object()) {
        throw UsageError(fmt::format("{}: expected an object", path));
    }
}

/// Calls `handle(key, value, field)` for every key and rejects keys it does not claim.
template<typename Handler>
void read_section(const json& j, std::string_view path, Handler&& handle) {
    require_object(j, path);
    for (const auto& [key, value] : j.items()) {
        const auto field = fmt::format("{}.{}", path, key);
        if (!handle(key, value, field)) {
            throw UsageError(fmt::format("{}: unknown field", field));
        }
    }
}

json synthetic_to_json(const SyntheticOptions& o) {
    return {{"n_cells", o.n_cells},
            {"n_genes", o.n_genes},
            {"n_donors", o.n_donors},
            {"n_mito_genes", o.n_mito_genes},
            {"n_cell_types", o.n_cell_types},
            {"n_tissues", o.n_tissues},
            {"n_datasets", o.n_datasets},
            {"expressed_fraction", o.expressed_fraction},
            {"zipf_exponent", o.zipf_exponent},
            {"mean_library_size", o.mean_library_size},
            {"library_size_sdlog", o.library_size_sdlog},
            {"mito_fraction_jitter", o.mito_fraction_jitter},
            {"healthy_fraction", o.healthy_fraction},
            {"low_quality_fraction", o.low_quality_fraction},
            {"poisson", o.poisson}};
}

}

json to_json(const PipelineConfig& c) {
    const auto& b = c.benchmark;
    return {
        {"paths",
         {{"corpus", c.paths.corpus},
          {"held_out", c.paths.held_out},
          {"medians", c.paths.medians},
          {"shards", c.paths.shards},
          {"val_shards", c.paths.val_shards},
          {"checkpoints", c.paths.checkpoints},
          {"reports", c.paths.reports}}},
        {"variant", std::string(variant_name(c.variant))},
        {"seed", c.seed},
        {"model", c.model},
        {"train", [&] {
             auto t = to_json(c.train);
             t.erase("seed");
             return t;
         }()},
        {"qc",
         {{"enabled", c.qc.enabled},
          {"min_counts", c.qc.min_counts},
          {"max_mito_frac", c.qc.max_mito_frac},
          {"mito_genes", c.qc.mito_genes},
          {"include_datasets", c.qc.include_datasets},
          {"exclude_datasets", c.qc.exclude_datasets}}},
        {"tokenize", {{"context_len", c.tokenize.context_len}, {"cells_per_shard", c.tokenize.cells_per_shard}}},
        {"benchmark",
         {{"task", std::string(task_kind_name(b.task))},
          {"mode", b.mode},
          {"folds", b.folds},
          {"train_frac", b.train_frac},
          {"seeds", b.seeds},
          {"lr_candidates", b.lr_candidates},
          {"epochs", b.epochs},
          {"batch_size", b.batch_size},
          {"probe_steps", b.probe_steps},
          {"top_genes", b.top_genes},
          {"l2_candidates", b.l2_candidates},
          {"model_name", b.model_name}}},
        {"synthetic", synthetic_to_json(c.synthetic)},
    };
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    read_section(j, "config", [&](const std::string& key, const json& v, const std::string& field) {
        if (key == "paths") {
            read_section(v, field, [&](const std::string& k, const json& p, const std::string& f) {
                std::string* target = k == "corpus"        ? &c.paths.corpus
                                      : k == "held_out"    ? &c.paths.held_out
                                      : k == "medians"     ? &c.paths.medians
                                      : k == "shards"      ? &c.paths.shards
                                      : k == "val_shards"  ? &c.paths.val_shards
                                      : k == "checkpoints" ? &c.paths.checkpoints
                                      : k == "reports"     ? &c.paths.reports
                                                           : nullptr;
                if (target != nullptr) {
                    *target = get_field<std::string>(p, f);
                }
                return target != nullptr;
            });
        } else if (key == "variant") {
            try {
                c.variant = parse_variant(get_field<std::string>(v, field));
            } catch (const Error& e) {
                throw UsageError(fmt::format("{}: {}", field, e.what()));
            }
        } else if (key == "seed") {
            c.seed = get_field<std::uint64_t>(v, field);
        } else if (key == "model") {
            require_object(v, field);
            json fields = v;
            if (fields.contains("preset")) {
                const auto preset = get_field<std::string>(fields["preset"], field + ".preset");
                const auto names = preset_names();
                if (std::find(names.begin(), names.end(), preset) == names.end()) {
                    throw UsageError(fmt::format("{}.preset: unknown preset '{}'", field, preset));
                }
                fields.erase("preset");
            }
            model_config_from_json(fields, field);
            c.model = v;
        } else if (key == "train") {
            require_object(v, field);
            if (v.contains("seed")) {
                throw UsageError(fmt::format("{}.seed: set the top-level seed instead", field));
            }
            c.train = train_config_from_json(v, field);
        } else if (key == "qc") {
            read_section(v, field, [&](const std::string& k, const json& x, const std::string& f) {
                if (k == "enabled") {
                    c.qc.enabled = get_field<bool>(x, f);
                } else if (k == "min_counts") {
                    c.qc.min_counts = get_field<std::uint64_t>(x, f);
                } else if (k == "max_mito_frac") {
                    c.qc.max_mito_frac = get_field<double>(x, f);
                } else if (k == "mito_genes") {
                    c.qc.mito_genes = get_field<std::vector<std::string>>(x, f);
                } else if (k == "include_datasets") {
                    c.qc.include_datasets = get_field<std::vector<std::string>>(x, f);
                } else if (k == "exclude_datasets") {
                    c.qc.exclude_datasets = get_field<std::vector<std::string>>(x, f);
                } else {
                    return false;
                }
                return true;
            });
        } else if (key == "tokenize") {
            read_section(v, field, [&](const std::string& k, const json& x, const std::string& f) {
                if (k == "context_len") {
                    c.tokenize.context_len = get_field<std::size_t>(x, f);
                } else if (k == "cells_per_shard") {
                    c.tokenize.cells_per_shard = get_field<std::size_t>(x, f);
                } else {
                    return false;
                }
                return true;
            });
        } else if (key == "benchmark") {
            auto& b = c.benchmark;
            read_section(v, field, [&](const std::string& k, const json& x, const std::string& f) {
                if (k == "task") {
                    b.task = parse_task_kind(get_field<std::string>(x, f));
                } else if (k == "mode") {
                    b.mode = get_field<std::string>(x, f);
                    if (b.mode != "finetune" && b.mode != "probe" && b.mode != "baseline") {
                        throw UsageError(fmt::format("{}: expected finetune, probe or baseline", f));
                    }
                } else if (k == "folds") {
                    b.folds = get_field<std::size_t>(x, f);
                } else if (k == "train_frac") {
                    b.train_frac = get_field<double>(x, f);
                } else if (k == "seeds") {
                    b.seeds = get_field<std::size_t>(x, f);
                } else if (k == "lr_candidates") {
                    b.lr_candidates = get_field<std::vector<double>>(x, f);
                } else if (k == "epochs") {
                    b.epochs = get_field<std::size_t>(x, f);
                } else if (k == "batch_size") {
                    b.batch_size = get_field<std::size_t>(x, f);
                } else if (k == "probe_steps") {
                    b.probe_steps = get_field<std::size_t>(x, f);
                } else if (k == "top_genes") {
                    b.top_genes = get_field<std::size_t>(x, f);
                } else if (k == "l2_candidates") {
                    b.l2_candidates = get_field<std::vector<double>>(x, f);
                } else if (k == "model_name") {
                    b.model_name = get_field<std::string>(x, f);
                } else {
                    return false;
                }
                return true;
            });
        } else if (key == "synthetic") {
            auto& s = c.synthetic;
            read_section(v, field, [&](const std::string& k, const json& x, const std::string& f) {
                std::size_t* count = k == "n_cells"        ? &s.n_cells
                                     : k == "n_genes"      ? &s.n_genes
                                     : k == "n_donors"     ? &s.n_donors
                                     : k == "n_mito_genes" ? &s.n_mito_genes
                                     : k == "n_cell_types" ? &s.n_cell_types
                                     : k == "n_tissues"    ? &s.n_tissues
                                     : k == "n_datasets"   ? &s.n_datasets
                                                           : nullptr;
                double* real = k == "expressed_fraction"     ? &s.expressed_fraction
                               : k == "zipf_exponent"        ? &s.zipf_exponent
                               : k == "mean_library_size"    ? &s.mean_library_size
                               : k == "library_size_sdlog"   ? &s.library_size_sdlog
                               : k == "mito_fraction_jitter" ? &s.mito_fraction_jitter
                               : k == "healthy_fraction"     ? &s.healthy_fraction
                               : k == "low_quality_fraction" ? &s.low_quality_fraction
                                                             : nullptr;
                if (count != nullptr) {
                    *count = get_field<std::size_t>(x, f);
                } else if (real != nullptr) {
                    *real = get_field<double>(x, f);
                } else if (k == "poisson") {
                    s.poisson = get_field<bool>(x, f);
                } else {
                    return false;
                }
                return true;
            });
        } else {
            return false;
        }
        return true;
    });
    c.train.seed = c.seed;
    c.synthetic.seed = c.seed;
    c.train.validate();
    return c;
}

void apply_override(json& j, std::string_view path, std::string_view value) {
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = std::string(value);
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (key.empty()) {
            throw UsageError(fmt::format("--{}: empty path component", path));
        }
        if (!node->is_object()) {
            throw UsageError(fmt::format("--{}: '{}' is not a section", path, key));
        }
        if (dot == std::string_view::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) {
            *node = json::object();
        }
        start = dot + 1;
    }
}

ModelConfig resolve_model(const PipelineConfig& cfg, std::size_t vocab_size) {
    json fields = cfg.model;
    const std::string preset = fields.value("preset", std::string("2M"));
    fields.erase("preset");
    auto merged = to_json(preset_config(preset, cfg.variant, vocab_size, cfg.tokenize.context_len));
    merged.update(fields);
    merged["vocab_size"] = vocab_size;
    merged["variant"] = std::string(variant_name(cfg.variant));
    auto model = model_config_from_json(merged, "model");
    model.validate();
    return model;
}

json fingerprint_path(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        std::map<std::string, std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(path)) {
            if (e.is_regular_file() && e.path().filename() != "manifest.json") {
                files[fs::relative(e.path(), path).generic_string()] = sha256_file(e.path());
            }
        }
        return files;
    }
    if (!fs::exists(path)) {
        throw DataError(fmt::format("{}: no such file or directory", path.string()));
    }
    return sha256_file(path);
}

namespace {

namespace fs = std::filesystem;

/// A command-line flag; `config_path` names the configuration value it sets, if any.
struct Flag {
    std::string name;
    std::string config_path;
    std::string help;
    bool is_switch = false;
};

struct Command {
    std::string name;
    std::string help;
    std::vector<Flag> flags;
};

const std::vector<Command>& commands() {
    static const std::vector<Command> list{
        {"fetch", "Download a dataset archive", {{"url", "", "Source URL"}, {"dest", "", "Destination file"}, {"sha256", "", "Expected SHA-256"}}},
        {"ingest",
         "Load, quality-filter and write a corpus directory",
         {{"corpus", "paths.corpus", "Input corpus directory"},
          {"matrix", "", "Sparse triplet matrix file"},
          {"genes", "", "Genes table"},
          {"cells", "", "Cells table"},
          {"synthetic", "", "Generate a synthetic corpus from the synthetic section", true},
          {"split-donors", "", "Comma-separated donors to move into --held-out"},
          {"held-out", "paths.held_out", "Directory for the held-out donors"},
          {"out", "", "Output corpus directory"}}},
        {"build-medians",
         "Build the per-gene non-zero median dictionary",
         {{"corpus", "paths.corpus", "Corpus directory"}, {"out", "paths.medians", "Output dictionary file"}}},
        {"tokenize",
         "Encode a corpus into shards",
         {{"corpus", "paths.corpus", "Corpus directory"},
          {"medians", "paths.medians", "Median dictionary"},
          {"variant", "variant", "g or x"},
          {"context-len", "tokenize.context_len", "Genes kept per cell"},
          {"out", "paths.shards", "Output shard directory"}}},
        {"pretrain",
         "Pre-train a model on shards",
         {{"variant", "variant", "g or x"},
          {"shards", "paths.shards", "Training shard directory"},
          {"val-shards", "paths.val_shards", "Validation shard directory"},
          {"preset", "model.preset", "Architecture preset"},
          {"out", "paths.checkpoints", "Checkpoint directory"},
          {"resume", "", "Checkpoint to resume from"},
          {"stop-after", "", "Stop after this many steps"}}},
        {"eval-loss",
         "Held-out pre-training loss of a checkpoint",
         {{"checkpoint", "", "Checkpoint file"}, {"shards", "paths.shards", "Shard directory"}, {"out", "", "Write the result as JSON"}}},
        {"fit-scaling",
         "Fit L = a * N^b to (parameters, loss) points",
         {{"points", "", "Scaling points file"}, {"out", "", "Write the fit as JSON"}}},
        {"embed",
         "Mean-pooled cell embeddings",
         {{"checkpoint", "", "Checkpoint file"}, {"shards", "paths.shards", "Shard directory"}, {"out", "", "Output table"}}},
        {"benchmark",
         "Run a donor-disjoint benchmark task",
         {{"task", "benchmark.task", "diseases or donors"},
          {"mode", "benchmark.mode", "finetune, probe or baseline"},
          {"checkpoint", "", "Checkpoint file (finetune and probe)"},
          {"corpus", "paths.corpus", "Corpus directory"},
          {"held-out", "paths.held_out", "Held-out corpus directory (donors task)"},
          {"medians", "paths.medians", "Median dictionary (finetune and probe)"},
          {"out", "paths.reports", "Report directory"}}},
        {"report",
         "Merge benchmark metrics and scaling points into report tables",
         {{"inputs", "", "Comma-separated metrics.tsv files"},
          {"scaling", "", "Comma-separated checkpoints for scaling.tsv"},
          {"out", "paths.reports", "Report directory"}}},
    };
    return list;
}

struct Invocation {
    std::string command;
    std::map<std::string, std::string> values;
    PipelineConfig cfg;
    json cfg_json;
    std::vector<std::string> args;

    bool has(const std::string& flag) const { return values.contains(flag); }
    const std::string& value(const std::string& flag) const {
        auto it = values.find(flag);
        if (it == values.end() || it->second.empty()) {
            throw UsageError(fmt::format("{}: --{} is required", command, flag));
        }
        return it->second;
    }
};

std::string require_path(const std::string& value, std::string_view what) {
    if (value.empty()) {
        throw UsageError(fmt::format("{} is not set", what));
    }
    return value;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    for (auto part : split(text, ',')) {
        if (!part.empty()) {
            out.emplace_back(part);
        }
    }
    return out;
}

json load_config_json(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw UsageError(fmt::format("{}: not valid JSON: {}", path, e.what()));
    } catch (const DataError& e) {
        throw UsageError(e.what());
    }
    // A manifest carries the configuration that produced its artifact.
    if (j.is_object() && j.contains("command") && j.contains("config")) {
        return j["config"];
    }
    return j;
}

/// Writes `<dir>/manifest.json` for a directory artifact, `<file>.manifest.json` otherwise.
void write_manifest(const Invocation& inv, const fs::path& artifact, const std::map<std::string, fs::path>& inputs) {
    json in = json::object();
    for (const auto& [name, path] : inputs) {
        in[name] = {{"path", path.string()}, {"sha256", fingerprint_path(path)}};
    }
    json manifest{{"command", inv.command}, {"args", inv.args},        {"config", inv.cfg_json},
                  {"inputs", in},           {"seed", inv.cfg.seed},   {"version", std::string(kVersion)}};
    const fs::path target = fs::is_directory(artifact) ? artifact / "manifest.json" : fs::path(artifact.string() + ".manifest.json");
    write_file(target, manifest.dump(2) + "\n");
}

std::vector<TokenizedCell> load_shards_with_vocab(const fs::path& dir, Vocabulary& vocab) {
    vocab = Vocabulary::load(dir / "vocab.tsv");
    return read_shards(dir);
}

void require_same_vocab(const Checkpoint& ck, const Vocabulary& vocab, const fs::path& shards) {
    if (ck.vocab_genes != vocab.gene_ids()) {
        throw DataError(fmt::format("{}: vocabulary differs from the checkpoint's", shards.string()));
    }
}

int cmd_fetch(const Invocation& inv, std::ostream& out) {
    std::optional<std::string> digest;
    if (inv.has("sha256")) {
        digest = inv.value("sha256");
    }
    const auto path = fetch_dataset(inv.value("url"), inv.value("dest"), digest);
    write_manifest(inv, path, {});
    out << path.string() << "\n";
    return 0;
}

int cmd_ingest(const Invocation& inv, std::ostream& out) {
    const auto& cfg = inv.cfg;
    std::map<std::string, fs::path> inputs;
    CountMatrix m;
    if (inv.has("synthetic")) {
        m = gen_synthetic_corpus(cfg.synthetic);
    } else if (inv.has("matrix")) {
        m = load_counts(inv.value("matrix"), inv.value("genes"), inv.value("cells"));
        inputs = {{"matrix", inv.value("matrix")}, {"genes", inv.value("genes")}, {"cells", inv.value("cells")}};
    } else {
        const auto dir = require_path(cfg.paths.corpus, "paths.corpus");
        m = load_corpus(dir);
        inputs = {{"corpus", dir}};
    }
    const auto n_in = m.n_cells();
    if (cfg.qc.enabled) {
        QcOptions qc;
        qc.min_counts = cfg.qc.min_counts;
        qc.max_mito_frac = cfg.qc.max_mito_frac;
        qc.mito_gene_ids = cfg.qc.mito_genes.empty() ? default_mito_genes(m)
                                                     : std::unordered_set<std::string>(cfg.qc.mito_genes.begin(), cfg.qc.mito_genes.end());
        qc.include_datasets.insert(cfg.qc.include_datasets.begin(), cfg.qc.include_datasets.end());
        qc.exclude_datasets.insert(cfg.qc.exclude_datasets.begin(), cfg.qc.exclude_datasets.end());
        m = qc_filter(m, qc);
    }
    const fs::path dest = inv.value("out");
    out << fmt::format("{} cells, {} passed QC\n", n_in, m.n_cells());
    if (inv.has("split-donors")) {
        const auto held = split_list(inv.value("split-donors"));
        auto [kept, moved] = split_by_donors(m, std::unordered_set<std::string>(held.begin(), held.end()));
        const fs::path held_dir = require_path(cfg.paths.held_out, "paths.held_out");
        write_corpus(moved, held_dir);
        write_manifest(inv, held_dir, inputs);
        out << fmt::format("held-out: {} cells -> {}\n", moved.n_cells(), held_dir.string());
        m = std::move(kept);
    }
    write_corpus(m, dest);
    write_manifest(inv, dest, inputs);
    out << fmt::format("{} cells -> {}\n", m.n_cells(), dest.string());
    return 0;
}

int cmd_build_medians(const Invocation& inv, std::ostream& out) {
    const auto corpus = require_path(inv.cfg.paths.corpus, "paths.corpus");
    const fs::path dest = require_path(inv.cfg.paths.medians, "paths.medians");
    const auto m = load_corpus(corpus);
    const auto dict = build_median_dictionary(m);
    if (dest.has_parent_path()) {
        fs::create_directories(dest.parent_path());
    }
    dict.save(dest);
    write_manifest(inv, dest, {{"corpus", corpus}});
    out << fmt::format("{} gene medians from {} cells -> {}\n", dict.size(), m.n_cells(), dest.string());
    return 0;
}

int cmd_tokenize(const Invocation& inv, std::ostream& out) {
    const auto& cfg = inv.cfg;
    const auto corpus = require_path(cfg.paths.corpus, "paths.corpus");
    const auto medians = require_path(cfg.paths.medians, "paths.medians");
    const fs::path dest = require_path(cfg.paths.shards, "paths.shards");
    const auto m = load_corpus(corpus);
    const auto dict = GeneMedianDictionary::load(medians);
    std::vector<std::string> genes;
    for (const auto& [id, _] : dict.medians()) {
        genes.push_back(id);
    }
    const Vocabulary vocab(genes);
    const CellEncoder encoder(vocab, dict, m.gene_ids(), cfg.variant, cfg.tokenize.context_len);
    const auto cells = parallel::encode_corpus(m, encoder, true);
    fs::create_directories(dest);
    write_shards(dest, cells, cfg.tokenize.cells_per_shard);
    vocab.save(dest / "vocab.tsv");
    std::string ids = "cell_id\tdonor_id\n";
    for (const auto& meta : m.cells()) {
        ids += fmt::format("{}\t{}\n", meta.cell_id, meta.donor_id);
    }
    write_file(dest / "cells.tsv", ids);
    write_manifest(inv, dest, {{"corpus", corpus}, {"medians", medians}});
    out << fmt::format("{} cells, vocabulary {} -> {}\n", cells.size(), vocab.size(), dest.string());
    return 0;
}

int cmd_pretrain(const Invocation& inv, std::ostream& out) {
    const auto& cfg = inv.cfg;
    const fs::path shards = require_path(cfg.paths.shards, "paths.shards");
    Vocabulary vocab;
    const auto cells = load_shards_with_vocab(shards, vocab);
    std::vector<TokenizedCell> val;
    std::map<std::string, fs::path> inputs{{"shards", shards}};
    if (!cfg.paths.val_shards.empty()) {
        Vocabulary val_vocab;
        val = load_shards_with_vocab(cfg.paths.val_shards, val_vocab);
        if (val_vocab.gene_ids() != vocab.gene_ids()) {
            throw DataError("paths.val_shards: vocabulary differs from the training shards");
        }
        inputs["val_shards"] = cfg.paths.val_shards;
    }
    const auto model = resolve_model(cfg, vocab.size());
    PretrainOptions options;
    options.out_dir = require_path(cfg.paths.checkpoints, "paths.checkpoints");
    if (inv.has("resume")) {
        options.resume = inv.value("resume");
        inputs["resume"] = *options.resume;
    }
    if (inv.has("stop-after")) {
        options.stop_after = static_cast<std::size_t>(parse_uint(inv.value("stop-after"), "--stop-after"));
    }
    const std::size_t total = cfg.train.resolved_total_steps(cells.size());
    const std::size_t every = std::max<std::size_t>(1, total / 20);
    options.on_step = [&](const LossRecord& r) {
        if (r.step % every == 0 || r.step == total) {
            out << fmt::format("step {}/{} loss {:.4f} val {} lr {:.3g}\n", r.step, total, r.train_loss, format_double(r.val_loss), r.lr);
            out.flush();
        }
    };
    out << fmt::format("{} parameters, {} cells, {} steps\n", parameter_count(model), cells.size(), total);
    const auto result = pretrain(cells, val, vocab, model, cfg.train, options);
    write_manifest(inv, options.out_dir, inputs);
    out << fmt::format("{} at step {} -> {}\n", result.finished ? "finished" : "stopped", result.checkpoint.step,
                       options.out_dir.string());
    return 0;
}

int cmd_eval_loss(const Invocation& inv, std::ostream& out) {
    const fs::path ckpt = inv.value("checkpoint");
    const fs::path shards = require_path(inv.cfg.paths.shards, "paths.shards");
    const auto ck = load_checkpoint(ckpt);
    Vocabulary vocab;
    const auto cells = load_shards_with_vocab(shards, vocab);
    require_same_vocab(ck, vocab, shards);
    const auto& t = ck.train;
    const auto loss = eval_heldout_loss(ck.params, cells, t.eval_seed, t.mask_rate, t.eval_batch_size, t.loss_weights);
    const json result{{"mlm", loss.mlm}, {"cls", loss.cls}, {"total", loss.total}, {"cells", cells.size()}, {"step", ck.step}};
    if (inv.has("out")) {
        write_file(inv.value("out"), result.dump(2) + "\n");
        write_manifest(inv, inv.value("out"), {{"checkpoint", ckpt}, {"shards", shards}});
    }
    out << result.dump() << "\n";
    return 0;
}

int cmd_fit_scaling(const Invocation& inv, std::ostream& out) {
    const fs::path points_path = inv.value("points");
    const auto points = read_scaling_points(points_path);
    const auto fit = fit_power_law(points);
    const json result{{"a", fit.a}, {"b", fit.b}, {"points", points.size()}};
    if (inv.has("out")) {
        write_file(inv.value("out"), result.dump(2) + "\n");
        write_manifest(inv, inv.value("out"), {{"points", points_path}});
    }
    out << result.dump() << "\n";
    return 0;
}

int cmd_embed(const Invocation& inv, std::ostream& out) {
    const fs::path ckpt = inv.value("checkpoint");
    const fs::path shards = require_path(inv.cfg.paths.shards, "paths.shards");
    const fs::path dest = inv.value("out");
    const auto ck = load_checkpoint(ckpt);
    Vocabulary vocab;
    auto cells = load_shards_with_vocab(shards, vocab);
    require_same_vocab(ck, vocab, shards);
    for (auto& c : cells) {
        c.prompts.clear();
    }
    std::vector<std::string> ids;
    if (fs::exists(shards / "cells.tsv")) {
        const auto text = read_file(shards / "cells.tsv");
        std::istringstream lines(text);
        std::string line;
        std::getline(lines, line);
        while (std::getline(lines, line)) {
            if (!line.empty()) {
                ids.emplace_back(split(line, '\t').front());
            }
        }
    }
    const auto emb = embed_cells(ck.params, std::span<const TokenizedCell>(cells));
    const std::size_t d = ck.params.config.d_model;
    std::string text = "cell";
    for (std::size_t k = 0; k < d; ++k) {
        text += fmt::format("\te{}", k);
    }
    text += "\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        text += ids.size() == cells.size() ? ids[i] : std::to_string(i);
        for (std::size_t k = 0; k < d; ++k) {
            text += "\t" + format_double(emb[i * d + k]);
        }
        text += "\n";
    }
    write_file(dest, text);
    write_manifest(inv, dest, {{"checkpoint", ckpt}, {"shards", shards}});
    out << fmt::format("{} embeddings of width {} -> {}\n", cells.size(), d, dest.string());
    return 0;
}

int cmd_benchmark(const Invocation& inv, std::ostream& out) {
    const auto& cfg = inv.cfg;
    const auto& b = cfg.benchmark;
    const auto corpus_dir = require_path(cfg.paths.corpus, "paths.corpus");
    const fs::path reports = require_path(cfg.paths.reports, "paths.reports");
    std::map<std::string, fs::path> inputs{{"corpus", corpus_dir}};
    const auto corpus = load_corpus(corpus_dir);
    CountMatrix held;
    EvalTask task;
    if (b.task == TaskKind::held_out_diseases) {
        task = build_disease_folds(corpus, b.folds, cfg.seed);
    } else {
        const auto held_dir = require_path(cfg.paths.held_out, "paths.held_out");
        held = load_corpus(held_dir);
        inputs["held_out"] = held_dir;
        task = build_donor_task(corpus, held, b.train_frac, cfg.seed);
    }
    fs::create_directories(reports);
    write_task_file(reports / "task.tsv", task);

    BenchmarkResult result;
    std::string model_name = b.model_name;
    if (b.mode == "baseline") {
        std::vector<const CountMatrix*> sources{&corpus};
        if (b.task == TaskKind::held_out_donors) {
            sources.push_back(&held);
        }
        BaselineOptions opts;
        opts.top_genes = b.top_genes;
        opts.l2_candidates = b.l2_candidates;
        opts.seeds = b.seeds;
        opts.steps = b.probe_steps;
        result = train_baseline_logreg(sources, task, opts).result;
        if (model_name.empty()) {
            model_name = "baseline";
        }
    } else {
        const fs::path ckpt = inv.value("checkpoint");
        const auto medians = require_path(cfg.paths.medians, "paths.medians");
        inputs["checkpoint"] = ckpt;
        inputs["medians"] = medians;
        const auto ck = load_checkpoint(ckpt);
        const Vocabulary vocab(ck.vocab_genes);
        const auto dict = GeneMedianDictionary::load(medians);
        const auto& mc = ck.params.config;
        const std::array<const CountMatrix*, 2> sources{&corpus, &held};
        std::vector<std::optional<CellEncoder>> encoders;
        for (const auto* m : sources) {
            encoders.emplace_back(std::in_place, vocab, dict, m->gene_ids(), mc.variant, mc.context_len);
        }
        std::vector<TokenizedCell> cells;
        cells.reserve(task.cells.size());
        for (const auto& c : task.cells) {
            cells.push_back(encoders[c.source]->encode(sources[c.source]->cell(c.row)));
        }
        FinetuneOptions opts;
        opts.lr_candidates = b.lr_candidates;
        opts.seeds = b.seeds;
        opts.epochs = b.epochs;
        opts.batch_size = b.batch_size;
        opts.probe_steps = b.probe_steps;
        opts.freeze_backbone = b.mode == "probe";
        result = finetune(ck.params, cells, task, opts);
        if (model_name.empty()) {
            model_name = ckpt.stem().string() + (b.mode == "probe" ? "-probe" : "");
        }
    }
    const std::vector<ReportEntry> entries{{model_name, std::string(task_kind_name(b.task)), result}};
    write_report(reports, entries);
    write_manifest(inv, reports, inputs);
    out << fmt::format("{} {}: accuracy {:.4f} +- {:.4f}, weighted F1 {:.4f} +- {:.4f} over {} runs -> {}\n", model_name,
                       task_kind_name(b.task), result.accuracy.mean, result.accuracy.sd, result.weighted_f1.mean,
                       result.weighted_f1.sd, result.runs.size(), reports.string());
    return 0;
}

int cmd_report(const Invocation& inv, std::ostream& out) {
    const fs::path reports = require_path(inv.cfg.paths.reports, "paths.reports");
    std::map<std::string, fs::path> inputs;
    std::vector<ReportEntry> entries;
    if (inv.has("inputs")) {
        std::size_t k = 0;
        for (const auto& p : split_list(inv.value("inputs"))) {
            auto more = read_metrics_report(p);
            entries.insert(entries.end(), more.begin(), more.end());
            inputs[fmt::format("metrics{}", k++)] = p;
        }
    }
    fs::create_directories(reports);
    write_report(reports, entries);
    if (inv.has("scaling")) {
        std::vector<std::pair<double, double>> points;
        std::size_t k = 0;
        for (const auto& p : split_list(inv.value("scaling"))) {
            const auto ck = load_checkpoint(p);
            if (!std::isfinite(ck.best_val_loss)) {
                throw DataError(fmt::format("{}: checkpoint has no validation loss", p));
            }
            points.emplace_back(static_cast<double>(parameter_count(ck.params.config)), ck.best_val_loss);
            inputs[fmt::format("checkpoint{}", k++)] = p;
        }
        std::sort(points.begin(), points.end());
        write_scaling_points(reports / "scaling.tsv", points);
    }
    write_manifest(inv, reports, inputs);
    out << fmt::format("{} report rows -> {}\n", entries.size(), reports.string());
    return 0;
}

int dispatch(const Invocation& inv, std::ostream& out) {
    const auto& c = inv.command;
    if (c == "fetch") {
        return cmd_fetch(inv, out);
    }
    if (c == "ingest") {
        return cmd_ingest(inv, out);
    }
    if (c == "build-medians") {
        return cmd_build_medians(inv, out);
    }
    if (c == "tokenize") {
        return cmd_tokenize(inv, out);
    }
    if (c == "pretrain") {
        return cmd_pretrain(inv, out);
    }
    if (c == "eval-loss") {
        return cmd_eval_loss(inv, out);
    }
    if (c == "fit-scaling") {
        return cmd_fit_scaling(inv, out);
    }
    if (c == "embed") {
        return cmd_embed(inv, out);
    }
    if (c == "benchmark") {
        return cmd_benchmark(inv, out);
    }
    return cmd_report(inv, out);
}

/// Moves `--section.key value` (or `--section.key=value`) pairs out of `args`.
std::vector<std::pair<std::string, std::string>> take_overrides(std::vector<std::string>& args) {
    std::vector<std::pair<std::string, std::string>> overrides;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a.rfind("--", 0) == 0) {
            const auto eq = a.find('=');
            const auto name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
            if (name.find('.') != std::string::npos) {
                if (eq != std::string::npos) {
                    overrides.emplace_back(name, a.substr(eq + 1));
                } else if (i + 1 < args.size()) {
                    overrides.emplace_back(name, args[++i]);
                } else {
                    throw UsageError(fmt::format("--{}: missing value", name));
                }
                continue;
            }
        }
        rest.push_back(a);
    }
    args = std::move(rest);
    return overrides;
}

}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rank-value single-cell foundation model pipeline", "rankcell"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    int threads = 0;
    std::string seed;
    app.add_option("--config", config_path, "JSON configuration or manifest (default: $" + std::string(kConfigEnvVar) + ")");
    app.add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
    app.add_option("--seed", seed, "Seed for training, folds and synthetic corpora");
    app.footer("Any configuration value can be set with --section.key value, e.g. --train.max_lr 3e-4.");

    std::map<std::string, std::string> values;
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const auto& cmd : commands()) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        for (const auto& f : cmd.flags) {
            const std::string key = cmd.name + "/" + f.name;
            if (f.is_switch) {
                sub->add_flag_callback("--" + f.name, [&values, key] { values[key] = "true"; }, f.help);
            } else {
                sub->add_option_function<std::string>("--" + f.name, [&values, key](const std::string& v) { values[key] = v; }, f.help);
            }
        }
        subs.emplace_back(sub, &cmd);
    }

    try {
        std::vector<std::string> rest = args;
        const auto overrides = take_overrides(rest);
        std::vector<std::string> reversed(rest.rbegin(), rest.rend());
        try {
            app.parse(reversed);
        } catch (const CLI::CallForHelp& e) {
            out << app.help();
            return 0;
        } catch (const CLI::ParseError& e) {
            err << "error: " << e.what() << "\n\n" << app.help();
            return 1;
        }

        Invocation inv;
        inv.args = args;
        const Command* cmd = nullptr;
        for (const auto& [sub, c] : subs) {
            if (sub->parsed()) {
                cmd = c;
            }
        }
        inv.command = cmd->name;

        json cfg_json = to_json(PipelineConfig{});
        if (config_path.empty()) {
            if (const char* env = std::getenv(kConfigEnvVar); env != nullptr && *env != '\0') {
                config_path = env;
            }
        }
        if (!config_path.empty()) {
            cfg_json = to_json(pipeline_config_from_json(load_config_json(config_path)));
        }
        for (const auto& f : cmd->flags) {
            auto it = values.find(cmd->name + "/" + f.name);
            if (it == values.end()) {
                continue;
            }
            inv.values[f.name] = it->second;
            if (!f.config_path.empty()) {
                // Paths and names stay strings; only numeric flags go through JSON parsing.
                if (f.config_path.rfind("paths.", 0) == 0 || f.config_path == "variant" || f.config_path.rfind("benchmark.", 0) == 0 ||
                    f.config_path == "model.preset") {
                    apply_override(cfg_json, f.config_path, json(it->second).dump());
                } else {
                    apply_override(cfg_json, f.config_path, it->second);
                }
            }
        }
        if (!seed.empty()) {
            apply_override(cfg_json, "seed", seed);
        }
        for (const auto& [path, value] : overrides) {
            apply_override(cfg_json, path, value);
        }
        inv.cfg = pipeline_config_from_json(cfg_json);
        inv.cfg_json = to_json(inv.cfg);
        if (threads > 0) {
            omp_set_num_threads(threads);
        }
        return dispatch(inv, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DivergenceError& e) {
        err << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const NetworkError& e) {
        err << "network error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}
