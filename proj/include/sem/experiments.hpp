#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "train.hpp"

namespace sem {

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::string split = "test";  // test | train
    std::size_t batch_size = 256;
    std::string data_dir;        // overrides the directory stored in the checkpoint
};

struct EvalResult {
    double top1 = 0.0;
    std::size_t count = 0;
};

/// Rebuilds the split recorded in the checkpoint's config and reports top-1 accuracy.
inline EvalResult cmd_eval(const std::filesystem::path& checkpoint, const EvalOptions& options = {}) {
    if (options.split != "test" && options.split != "train") throw UsageError("eval: split must be 'test' or 'train'");
    if (options.batch_size < 1) throw UsageError("eval: batch size must be >= 1");
    auto run = load_run_checkpoint<float>(checkpoint);
    if (!options.data_dir.empty()) run.config.data_dir = options.data_dir;
    const auto data = load_datasets(run.config);
    const auto& records = options.split == "test" ? data.test : data.train;
    return {evaluate_top1(run.model, records, options.batch_size, run.norm), records.size()};
}

// ---------------------------------------------------------------------------
// random-ops
// ---------------------------------------------------------------------------

struct TrialResult {
    int trial = 0;
    std::uint64_t assignment_seed = 0;
    AttentionAssignment assignment;
    double final_test_top1 = 0.0;
    double best_test_top1 = 0.0;
};

struct RandomOpsReport {
    int arity = 1;
    std::vector<TrialResult> trials;

    double mean() const {
        double s = 0.0;
        for (const auto& t : trials) s += t.final_test_top1;
        return trials.empty() ? 0.0 : s / static_cast<double>(trials.size());
    }
    double min() const {
        double m = trials.empty() ? 0.0 : trials.front().final_test_top1;
        for (const auto& t : trials) m = std::min(m, t.final_test_top1);
        return m;
    }
    double max() const {
        double m = trials.empty() ? 0.0 : trials.front().final_test_top1;
        for (const auto& t : trials) m = std::max(m, t.final_test_top1);
        return m;
    }

    std::string csv() const {
        std::ostringstream out;
        out << std::setprecision(9);
        out << "trial,assignment_seed,final_test_top1,best_test_top1,assignment\n";
        for (const auto& t : trials) {
            std::string ops;
            for (std::size_t i = 0; i < t.assignment.size(); ++i) ops += (i ? " " : "") + t.assignment[i].str();
            out << t.trial << "," << t.assignment_seed << "," << t.final_test_top1 << "," << t.best_test_top1 << ","
                << ops << "\n";
        }
        out << "mean,," << mean() << ",,\n";
        out << "min,," << min() << ",,\n";
        out << "max,," << max() << ",,\n";
        return out.str();
    }
};

/// `trials` trainings that share the base seed (same backbone initialization and batch
/// order) but draw fresh operator assignments from seeds base+0, base+1, ...
inline RandomOpsReport cmd_random_ops(int arity, int trials, const RunConfig& base, const Datasets& data) {
    if (arity != 1 && arity != 2) throw UsageError("random-ops: arity must be 1 or 2");
    if (trials < 1) throw UsageError("random-ops: trials must be >= 1");
    namespace fs = std::filesystem;
    const std::uint64_t first = base.assignment_seed < 0 ? base.seed : static_cast<std::uint64_t>(base.assignment_seed);
    RandomOpsReport report;
    report.arity = arity;
    for (int t = 0; t < trials; ++t) {
        RunConfig cfg = base;
        cfg.attention = arity == 1 ? "random_single" : "random_double";
        cfg.assignment_seed = static_cast<std::int64_t>(first + static_cast<std::uint64_t>(t));
        cfg.output_dir = (fs::path(base.output_dir) / ("trial_" + std::to_string(t))).string();
        auto result = train_run(cfg, data);
        report.trials.push_back({t, first + static_cast<std::uint64_t>(t), resolve_assignment(cfg.network()),
                                 result.final_test_top1, result.best_test_top1});
    }
    fs::create_directories(base.output_dir);
    std::ofstream(fs::path(base.output_dir) / "random_ops.csv") << report.csv();
    return report;
}

inline RandomOpsReport cmd_random_ops(int arity, int trials, const RunConfig& base) {
    return cmd_random_ops(arity, trials, base, load_datasets(base));
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    RunConfig config;
};

inline std::vector<std::string> ablation_names() { return {"size_of_eo", "decision_removal", "activation", "no_augment"}; }

/// The matched variant grid; every variant keeps the base seed.
inline std::vector<AblationVariant> ablation_grid(const std::string& which, const RunConfig& base) {
    std::vector<AblationVariant> out;
    auto variant = [&](std::string name, auto&& edit) {
        RunConfig cfg = base;
        edit(cfg);
        cfg.output_dir = (std::filesystem::path(base.output_dir) / which / name).string();
        out.push_back({std::move(name), std::move(cfg)});
    };
    if (which == "size_of_eo") {
        for (const char* ops : {"fc", "cnn", "ie", "fc,cnn", "fc,ie", "cnn,ie", "fc,cnn,ie"}) {
            std::string name(ops);
            std::replace(name.begin(), name.end(), ',', '+');
            variant(name, [&](RunConfig& c) {
                c.attention = "sem";
                c.operator_set = ops;
            });
        }
    } else if (which == "decision_removal") {
        variant("learned_w", [](RunConfig& c) {
            c.attention = "sem";
            c.decision_removal = false;
        });
        variant("w_equals_1", [](RunConfig& c) {
            c.attention = "sem";
            c.decision_removal = true;
        });
    } else if (which == "activation") {
        for (const char* act : {"tanh", "relu", "leaky_relu", "sigmoid"}) {
            variant(act, [&](RunConfig& c) {
                c.attention = "sem";
                c.switch_activation = act;
            });
        }
    } else if (which == "no_augment") {
        for (const char* mode : {"none", "se", "sem"}) {
            variant(mode, [&](RunConfig& c) {
                c.attention = mode;
                c.augment = false;
            });
        }
    } else {
        throw UsageError("ablate: unknown grid '" + which + "' (expected size_of_eo, decision_removal, activation or no_augment)");
    }
    return out;
}

struct AblationRow {
    std::string variant;
    std::string status = "ok";  // ok | diverged
    std::string detail;
    std::optional<MetricsRecord> last;
    double best_test_top1 = 0.0;
};

struct AblationReport {
    std::string which;
    std::vector<AblationRow> rows;

    bool any_diverged() const {
        return std::any_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.status != "ok"; });
    }

    std::string csv() const {
        std::ostringstream out;
        out << std::setprecision(9);
        out << "variant,status,epochs,train_loss,train_top1,final_test_top1,best_test_top1\n";
        for (const auto& r : rows) {
            out << r.variant << "," << r.status << ",";
            if (r.last) {
                out << r.last->epoch << "," << r.last->train_loss << "," << r.last->train_top1 << "," << r.last->test_top1
                    << "," << r.best_test_top1;
            } else {
                out << ",,,,";
            }
            out << "\n";
        }
        return out.str();
    }

    /// One metrics-format JSON line per variant, tagged with the variant name.
    std::string jsonl() const {
        std::string out;
        for (const auto& r : rows) {
            nlohmann::ordered_json j;
            j["variant"] = r.variant;
            j["status"] = r.status;
            if (!r.detail.empty()) j["detail"] = r.detail;
            if (r.last) {
                auto metrics = nlohmann::ordered_json::parse(metrics_json(*r.last));
                for (auto it = metrics.begin(); it != metrics.end(); ++it) j[it.key()] = it.value();
                j["best_test_top1"] = r.best_test_top1;
            }
            out += j.dump() + "\n";
        }
        return out;
    }
};

/// Runs every variant of the grid. A variant that diverges is recorded and the grid continues.
inline AblationReport cmd_ablate(const std::string& which, const RunConfig& base, const Datasets& data) {
    AblationReport report;
    report.which = which;
    for (auto& v : ablation_grid(which, base)) {
        AblationRow row;
        row.variant = v.name;
        try {
            auto result = train_run(v.config, data);
            if (!result.metrics.empty()) row.last = result.metrics.back();
            row.best_test_top1 = result.best_test_top1;
        } catch (const NumericalError& e) {
            row.status = "diverged";
            row.detail = e.what();
        }
        report.rows.push_back(std::move(row));
    }
    const auto dir = std::filesystem::path(base.output_dir) / which;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "ablation.csv") << report.csv();
    std::ofstream(dir / "ablation.jsonl") << report.jsonl();
    return report;
}

inline AblationReport cmd_ablate(const std::string& which, const RunConfig& base) {
    ablation_grid(which, base);  // reject unknown grids before loading data
    return cmd_ablate(which, base, load_datasets(base));
}

// ---------------------------------------------------------------------------
// export-decisions
// ---------------------------------------------------------------------------

struct ExportOptions {
    std::size_t sample = 256;
    std::string split = "test";
    std::string data_dir;
};

/// Per-layer decision CSV over the first `sample` records of the split.
inline std::string cmd_export_decisions(const std::filesystem::path& checkpoint, const ExportOptions& options = {}) {
    auto run = load_run_checkpoint<float>(checkpoint);
    if (parse_attention_mode(run.config.attention) != AttentionMode::sem) {
        throw UsageError("export-decisions: checkpoint was trained with attention=" + run.config.attention +
                         ", decision weights exist only for sem");
    }
    if (options.split != "test" && options.split != "train") throw UsageError("export-decisions: split must be 'test' or 'train'");
    if (options.sample < 1) throw UsageError("export-decisions: sample must be >= 1");
    if (!options.data_dir.empty()) run.config.data_dir = options.data_dir;
    const auto data = load_datasets(run.config);
    const auto& records = options.split == "test" ? data.test : data.train;
    const std::size_t n = std::min(options.sample, records.size());
    return decisions_csv(decision_summaries(run.model, std::span<const DatasetRecord>(records.data(), n), run.norm));
}

}  // namespace sem
