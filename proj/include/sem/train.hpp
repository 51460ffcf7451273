#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"

#include "backbone.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "optim.hpp"

namespace sem {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string dataset = "synthetic";  // cifar10 | cifar100 | synthetic
    std::string data_dir;               // empty: $SEM_DATA_DIR
    int depth = 20;
    std::string attention = "sem";
    std::string operator_set = "fc,cnn,ie";
    bool decision_removal = false;
    std::string switch_activation = "sigmoid";
    int reduction = 16;
    int epochs = 164;
    int batch_size = 128;
    int eval_batch_size = 256;
    double lr = 0.1;
    std::string lr_milestones = "auto";  // "auto": 81/164 and 122/164 of the run, or a comma list
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool augment = true;
    int crop_pad = 4;
    double flip_prob = 0.5;
    std::uint64_t seed = 0;
    std::int64_t assignment_seed = -1;  // -1: same as seed
    int train_limit = 0;                // 0: whole split
    int test_limit = 0;
    int synthetic_train = 512;
    int synthetic_test = 256;
    int num_classes = 10;               // synthetic only; CIFAR variants fix it
    int decision_sample = 64;           // test images used for per-epoch decision summaries
    double stop_at_train_top1 = 0.0;    // > 0: stop once an epoch reaches this train accuracy
    std::string output_dir = "runs/default";
    bool verbose = false;

    int resolved_classes() const {
        if (dataset == "cifar10") return 10;
        if (dataset == "cifar100") return 100;
        return num_classes;
    }

    std::vector<int> milestones() const {
        std::vector<int> out;
        if (lr_milestones == "auto") {
            for (double frac : {81.0 / 164.0, 122.0 / 164.0}) {
                const int m = static_cast<int>(std::lround(frac * epochs));
                // short runs can round both fractions onto the same epoch
                if (m > 0 && m < epochs && (out.empty() || m > out.back())) out.push_back(m);
            }
            return out;
        }
        if (lr_milestones.empty() || lr_milestones == "none") return out;
        std::stringstream ss(lr_milestones);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
        return out;
    }

    StepSchedule schedule() const { return {lr, 10.0, milestones()}; }

    NetworkConfig network() const {
        NetworkConfig n;
        n.depth = depth;
        n.num_classes = resolved_classes();
        n.attention = parse_attention_mode(attention);
        n.operator_set = OperatorSet::parse(operator_set);
        n.switch_activation = parse_activation(switch_activation);
        n.reduction = static_cast<std::size_t>(reduction);
        n.decision_removal = decision_removal;
        n.assignment_seed = assignment_seed < 0 ? seed : static_cast<std::uint64_t>(assignment_seed);
        return n;
    }

    AugmentConfig augmentation() const { return {crop_pad, flip_prob, augment}; }

    void validate() const {
        if (dataset != "cifar10" && dataset != "cifar100" && dataset != "synthetic") {
            throw UsageError("dataset must be cifar10, cifar100 or synthetic");
        }
        if (epochs < 0) throw UsageError("epochs must be >= 0");
        if (batch_size < 1 || eval_batch_size < 1) throw UsageError("batch sizes must be >= 1");
        int previous = 0;
        for (int m : milestones()) {
            if (m <= previous || m >= epochs) {
                throw UsageError("lr milestones must be increasing, positive and below epochs (" + std::to_string(epochs) + ")");
            }
            previous = m;
        }
        try {
            network().validate();
            augmentation().validate();
        } catch (const DomainError& e) {
            throw UsageError(e.what());
        }
    }
};

namespace detail {

template <typename V>
void parse_value(const std::string& key, const std::string& text, V& out) {
    std::istringstream in(text);
    if constexpr (std::is_same_v<V, bool>) {
        if (text == "true" || text == "1" || text == "on" || text == "yes") out = true;
        else if (text == "false" || text == "0" || text == "off" || text == "no") out = false;
        else throw UsageError("config: " + key + " expects a boolean, got '" + text + "'");
        return;
    } else if constexpr (std::is_same_v<V, std::string>) {
        out = text;
        return;
    } else {
        V value{};
        in >> value;
        if (in.fail() || !in.eof()) throw UsageError("config: " + key + " cannot parse '" + text + "'");
        out = value;
    }
}

/// Visit every config field as (key, reference). Order defines the resolved-config layout.
template <typename F>
void visit_fields(RunConfig& c, F&& f) {
    f("dataset", c.dataset);
    f("data_dir", c.data_dir);
    f("depth", c.depth);
    f("attention", c.attention);
    f("operator_set", c.operator_set);
    f("decision_removal", c.decision_removal);
    f("switch_activation", c.switch_activation);
    f("reduction", c.reduction);
    f("epochs", c.epochs);
    f("batch_size", c.batch_size);
    f("eval_batch_size", c.eval_batch_size);
    f("lr", c.lr);
    f("lr_milestones", c.lr_milestones);
    f("momentum", c.momentum);
    f("weight_decay", c.weight_decay);
    f("augment", c.augment);
    f("crop_pad", c.crop_pad);
    f("flip_prob", c.flip_prob);
    f("seed", c.seed);
    f("assignment_seed", c.assignment_seed);
    f("train_limit", c.train_limit);
    f("test_limit", c.test_limit);
    f("synthetic_train", c.synthetic_train);
    f("synthetic_test", c.synthetic_test);
    f("num_classes", c.num_classes);
    f("decision_sample", c.decision_sample);
    f("stop_at_train_top1", c.stop_at_train_top1);
    f("output_dir", c.output_dir);
    f("verbose", c.verbose);
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    bool found = false;
    detail::visit_fields(cfg, [&](const char* name, auto& field) {
        if (key == name) {
            detail::parse_value(key, value, field);
            found = true;
        }
    });
    if (!found) throw UsageError("config: unknown key '" + key + "'");
}

/// Apply "key=value" lines; blank lines and '#' comments are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
        set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(base, ss.str());
    return base;
}

/// Fully-resolved key=value text, one field per line.
inline std::string config_text(RunConfig cfg) {
    std::ostringstream out;
    out << std::setprecision(17);
    detail::visit_fields(cfg, [&](const char* name, auto& field) {
        out << name << "=";
        if constexpr (std::is_same_v<std::decay_t<decltype(field)>, bool>) out << (field ? "true" : "false");
        else out << field;
        out << "\n";
    });
    return out.str();
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Datasets {
    std::vector<DatasetRecord> train;
    std::vector<DatasetRecord> test;
};

inline std::filesystem::path resolve_data_dir(const RunConfig& cfg) {
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    if (const char* env = std::getenv("SEM_DATA_DIR")) return env;
    return "data";
}

inline Datasets load_datasets(const RunConfig& cfg) {
    Datasets d;
    if (cfg.dataset == "synthetic") {
        const auto n_train = static_cast<std::size_t>(cfg.synthetic_train);
        const auto n_test = static_cast<std::size_t>(cfg.synthetic_test);
        auto all = synthetic_dataset(n_train + n_test, cfg.num_classes, cfg.seed);
        d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
        d.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    } else {
        auto variant = cfg.dataset == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
        auto splits = load_cifar(resolve_data_dir(cfg), variant);
        d.train = std::move(splits.train);
        d.test = std::move(splits.test);
    }
    if (cfg.train_limit > 0 && d.train.size() > static_cast<std::size_t>(cfg.train_limit)) d.train.resize(cfg.train_limit);
    if (cfg.test_limit > 0 && d.test.size() > static_cast<std::size_t>(cfg.test_limit)) d.test.resize(cfg.test_limit);
    return d;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean and population std of each operator's decision weight for one attention layer.
struct DecisionSummary {
    std::size_t layer = 0;
    int stage = 0;
    std::size_t channels = 0;
    std::array<std::optional<double>, 3> mean{};  // indexed by Operator; empty when disabled
    std::array<std::optional<double>, 3> std{};
};

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_top1 = 0.0;
    double test_top1 = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
    std::vector<DecisionSummary> decisions;
};

/// JSON line for metrics.jsonl. Wall-clock time is logged separately so the metrics log
/// stays byte-identical across reruns.
inline std::string metrics_json(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["train_top1"] = r.train_top1;
    j["test_top1"] = r.test_top1;
    j["lr"] = r.lr;
    auto layers = nlohmann::ordered_json::array();
    for (const auto& d : r.decisions) {
        nlohmann::ordered_json row;
        row["layer"] = d.layer;
        row["stage"] = d.stage;
        row["channels"] = d.channels;
        for (int op = 0; op < 3; ++op) {
            const std::string name(to_string(static_cast<Operator>(op)));
            if (d.mean[op]) {
                row["w_" + name + "_mean"] = *d.mean[op];
                row["w_" + name + "_std"] = *d.std[op];
            }
        }
        layers.push_back(std::move(row));
    }
    j["decisions"] = std::move(layers);
    return j.dump();
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

template <typename T>
double evaluate_top1(Model<T>& model, std::span<const DatasetRecord> records, std::size_t batch_size,
                     const ChannelStats& norm) {
    if (records.empty()) return 0.0;
    NoGradGuard no_grad;
    BatchOptions opts;
    opts.shuffle = false;
    opts.normalization = norm;
    BatchIterator<T> it(records, batch_size, 0, 0, opts);
    std::size_t correct = 0;
    while (auto batch = it.next()) {
        auto logits = model.forward(batch->images, Mode::eval);
        const std::size_t classes = logits.dim(1);
        for (std::size_t b = 0; b < batch->labels.size(); ++b) {
            auto row = logits.data().subspan(b * classes, classes);
            const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += pred == batch->labels[b];
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(records.size());
}

/// Per-layer decision statistics over `records` (eval mode).
template <typename T>
std::vector<DecisionSummary> decision_summaries(Model<T>& model, std::span<const DatasetRecord> records,
                                                const ChannelStats& norm) {
    std::vector<DecisionSummary> out;
    if (records.empty()) return out;
    NoGradGuard no_grad;
    BatchOptions opts;
    opts.shuffle = false;
    opts.normalization = norm;
    BatchIterator<T> it(records, records.size(), 0, 0, opts);
    auto batch = it.next();
    std::vector<SemTrace<T>> traces;
    model.forward(batch->images, Mode::eval, &traces);
    std::size_t layer = 0;
    for (std::size_t i = 0; i < model.blocks().size(); ++i) {
        const auto& blk = model.blocks()[i];
        if (!blk.attention) continue;
        if (blk.attention->mode != AttentionMode::sem && blk.attention->mode != AttentionMode::random_single &&
            blk.attention->mode != AttentionMode::random_double) {
            ++layer;
            continue;
        }
        const auto& trace = traces.at(layer);
        DecisionSummary s;
        s.layer = layer;
        s.stage = blk.stage;
        s.channels = blk.out_channels;
        const auto& ops = blk.attention->params.ops;
        const std::size_t rows = trace.w.dim(0), n = trace.w.dim(1);
        for (auto op : ops.members()) {
            const auto col = static_cast<std::size_t>(ops.index_of(op));
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += trace.w.data()[r * n + col];
            const double mu = acc / static_cast<double>(rows);
            double sq = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double d = trace.w.data()[r * n + col] - mu;
                sq += d * d;
            }
            s.mean[static_cast<int>(op)] = mu;
            s.std[static_cast<int>(op)] = std::sqrt(sq / static_cast<double>(rows));
        }
        out.push_back(s);
        ++layer;
    }
    return out;
}

/// CSV: layer_index,stage,channels,w_fc_mean,w_cnn_mean,w_ie_mean,w_fc_std,w_cnn_std,w_ie_std.
/// Disabled operators leave their fields empty.
inline std::string decisions_csv(const std::vector<DecisionSummary>& rows) {
    std::ostringstream out;
    out << "layer_index,stage,channels,w_fc_mean,w_cnn_mean,w_ie_mean,w_fc_std,w_cnn_std,w_ie_std\n";
    out << std::setprecision(9);
    auto field = [&out](const std::optional<double>& v) {
        out << ",";
        if (v) out << *v;
    };
    for (const auto& r : rows) {
        out << r.layer << "," << r.stage << "," << r.channels;
        for (int op = 0; op < 3; ++op) field(r.mean[op]);
        for (int op = 0; op < 3; ++op) field(r.std[op]);
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoints with run metadata
// ---------------------------------------------------------------------------

inline std::string assignment_text(const AttentionAssignment& a) {
    std::string out;
    for (std::size_t i = 0; i < a.size(); ++i) out += std::to_string(i) + "=" + (a[i].empty() ? "none" : a[i].str()) + "\n";
    return out;
}

template <typename T>
void save_run_checkpoint(const std::filesystem::path& path, Model<T>& model, const RunConfig& cfg,
                         const ChannelStats& norm) {
    auto records = model_records(model);
    records.push_back(make_text_record("meta.config", config_text(cfg)));
    records.push_back(make_text_record("meta.assignment", assignment_text(model.assignment())));
    records.push_back(make_record<double>("meta.norm_mean", {3}, norm.mean));
    records.push_back(make_record<double>("meta.norm_std", {3}, norm.std));
    write_checkpoint(path, records);
}

template <typename T>
struct LoadedRun {
    RunConfig config;
    ChannelStats norm;
    Model<T> model;
};

template <typename T>
LoadedRun<T> load_run_checkpoint(const std::filesystem::path& path) {
    auto records = read_checkpoint(path);
    const CheckpointRecord* cfg_rec = nullptr;
    const CheckpointRecord* mean_rec = nullptr;
    const CheckpointRecord* std_rec = nullptr;
    for (const auto& r : records) {
        if (r.name == "meta.config") cfg_rec = &r;
        if (r.name == "meta.norm_mean") mean_rec = &r;
        if (r.name == "meta.norm_std") std_rec = &r;
    }
    if (!cfg_rec || !mean_rec || !std_rec) throw IntegrityError("checkpoint lacks run metadata: " + path.string());
    RunConfig cfg;
    apply_config_text(cfg, record_text(*cfg_rec));
    ChannelStats norm;
    auto mean = record_values<double>(*mean_rec);
    auto sd = record_values<double>(*std_rec);
    if (mean.size() != 3 || sd.size() != 3) throw IntegrityError("checkpoint: malformed normalization records");
    std::copy(mean.begin(), mean.end(), norm.mean.begin());
    std::copy(sd.begin(), sd.end(), norm.std.begin());
    auto model = build_network<T>(cfg.network(), RngState(cfg.seed));
    load_model_records(model, records);
    return {cfg, norm, std::move(model)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<MetricsRecord> metrics;
    double final_test_top1 = 0.0;
    double best_test_top1 = 0.0;
    std::size_t steps = 0;
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
};

/// Every step allocates and frees many activation-sized buffers. glibc would otherwise serve
/// them with fresh mmaps and pay the page faults on every step.
inline void tune_allocator() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)done;
#endif
}

/// Train per `cfg`, writing config.txt, metrics.jsonl, timing.jsonl, final.ckpt and
/// best.ckpt into cfg.output_dir. Throws NumericalError on a non-finite loss.
inline TrainResult train_run(const RunConfig& cfg, const Datasets& data) {
    tune_allocator();
    using T = float;
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    {
        std::ofstream(dir / "config.txt") << config_text(cfg);
    }

    const ChannelStats norm = compute_channel_stats(data.train);
    auto model = build_network<T>(cfg.network(), RngState(cfg.seed));
    {
        std::ofstream(dir / "assignment.txt") << assignment_text(model.assignment());
    }
    Sgd<T> opt(model.parameters(), {cfg.lr, cfg.momentum, cfg.weight_decay});
    const auto schedule = cfg.schedule();
    const auto augmentation = cfg.augmentation();
    const auto eval_bs = static_cast<std::size_t>(cfg.eval_batch_size);
    const std::size_t sample = std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.decision_sample, 0)), data.test.size());
    const std::span<const DatasetRecord> decision_records(data.test.data(), sample);

    TrainResult result;
    result.final_checkpoint = dir / "final.ckpt";
    result.best_checkpoint = dir / "best.ckpt";
    std::ofstream metrics_log(dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream timing_log(dir / "timing.jsonl", std::ios::trunc);
    bool have_best = false;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double lr = schedule.at(epoch);
        opt.set_lr(lr);
        BatchOptions opts;
        opts.augment = augmentation;
        opts.normalization = norm;
        BatchIterator<T> it(data.train, static_cast<std::size_t>(cfg.batch_size), cfg.seed, static_cast<std::uint64_t>(epoch), opts);
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        while (auto batch = it.next()) {
            auto logits = model.forward(batch->images, Mode::train);
            auto loss = softmax_cross_entropy(logits, std::span<const int>(batch->labels));
            if (!std::isfinite(loss.item())) {
                const auto layer = model.first_nonfinite_layer(batch->images, Mode::train);
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                         std::to_string(result.steps),
                                     layer.empty() ? "loss" : layer);
            }
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++result.steps;
            const std::size_t classes = logits.dim(1);
            for (std::size_t b = 0; b < batch->labels.size(); ++b) {
                auto row = logits.data().subspan(b * classes, classes);
                correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == batch->labels[b];
            }
            loss_sum += loss.item() * static_cast<double>(batch->labels.size());
            seen += batch->labels.size();
        }

        MetricsRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
        rec.train_top1 = 100.0 * static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(seen, 1));
        rec.test_top1 = evaluate_top1(model, data.test, eval_bs, norm);
        rec.decisions = decision_summaries(model, decision_records, norm);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        metrics_log << metrics_json(rec) << "\n" << std::flush;
        timing_log << "{\"epoch\":" << rec.epoch << ",\"wall_seconds\":" << rec.wall_seconds << "}\n" << std::flush;
        if (cfg.verbose) {
            std::cerr << "epoch " << rec.epoch << "/" << cfg.epochs << " lr=" << lr << " loss=" << rec.train_loss
                      << " train_top1=" << rec.train_top1 << " test_top1=" << rec.test_top1 << " (" << rec.wall_seconds
                      << "s)\n";
        }
        if (!have_best || rec.test_top1 > result.best_test_top1) {
            have_best = true;
            result.best_test_top1 = rec.test_top1;
            save_run_checkpoint(result.best_checkpoint, model, cfg, norm);
        }
        result.final_test_top1 = rec.test_top1;
        result.metrics.push_back(std::move(rec));
        if (cfg.stop_at_train_top1 > 0.0 && result.metrics.back().train_top1 >= cfg.stop_at_train_top1) break;
    }
    save_run_checkpoint(result.final_checkpoint, model, cfg, norm);
    if (!have_best) save_run_checkpoint(result.best_checkpoint, model, cfg, norm);
    return result;
}

inline TrainResult train_run(const RunConfig& cfg) { return train_run(cfg, load_datasets(cfg)); }

}  // namespace sem
