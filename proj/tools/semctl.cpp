// semctl: train, evaluate and inspect switchable-excitation networks.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "sem/sem.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kIngestion = 3, kNumerical = 4 };

struct ConfigArgs {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string output_dir;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config_file, "key=value config file");
        cmd->add_option("-s,--set", overrides, "override one config key (key=value); repeatable");
        cmd->add_option("-o,--output-dir", output_dir, "run directory (same as --set output_dir=...)");
    }

    sem::RunConfig resolve() const {
        sem::RunConfig cfg;
        if (!config_file.empty()) cfg = sem::load_config_file(config_file);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw sem::UsageError("--set expects key=value, got '" + kv + "'");
            sem::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!output_dir.empty()) cfg.output_dir = output_dir;
        cfg.validate();
        return cfg;
    }
};

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw sem::UsageError("cannot write " + path);
    out << text;
}

int run_gradcheck(const std::string& scope, std::uint64_t seed, std::size_t channels) {
    std::vector<std::string> scopes = scope == "all" ? sem::gradcheck_scopes() : std::vector<std::string>{scope};
    bool ok = true;
    std::cout << std::left << std::setw(24) << "scope" << std::setw(28) << "group" << "max_rel_error\n";
    for (const auto& s : scopes) {
        auto report = sem::run_gradcheck(s, seed, channels);
        for (const auto& g : report.groups) {
            std::cout << std::setw(24) << s << std::setw(28) << g.name << std::scientific << std::setprecision(3)
                      << g.max_rel_error << (g.max_rel_error <= 1e-4 ? "" : "  FAIL") << "\n"
                      << std::defaultfloat;
        }
        ok = ok && report.passed();
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance 1e-4)\n";
    return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Switchable excitation networks: training and experiment harness"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    auto* train = app.add_subcommand("train", "train one network and write metrics and checkpoints");
    train_args.attach(train);

    std::string eval_ckpt;
    sem::EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a dataset split");
    eval->add_option("checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--split", eval_opts.split, "test or train")->capture_default_str();
    eval->add_option("--batch-size", eval_opts.batch_size, "evaluation batch size")->capture_default_str();
    eval->add_option("--data-dir", eval_opts.data_dir, "dataset root (default: value stored in the checkpoint)");

    std::string gc_scope = "all";
    std::uint64_t gc_seed = 0;
    std::size_t gc_channels = 8;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check (f64)");
    gradcheck->add_option("scope", gc_scope, "operation name, sem-layer, full-block or all")->capture_default_str();
    gradcheck->add_option("--seed", gc_seed, "random seed")->capture_default_str();
    gradcheck->add_option("--channels", gc_channels, "channel count for attention scopes")->capture_default_str();
    gradcheck->add_flag_callback("--list", [] {
        for (const auto& s : sem::gradcheck_scopes()) std::cout << s << "\n";
        std::exit(kOk);
    }, "list scopes and exit");

    ConfigArgs rand_args;
    int arity = 1, trials = 5;
    auto* random_ops = app.add_subcommand("random-ops", "train with random per-layer operator assignments");
    rand_args.attach(random_ops);
    random_ops->add_option("--arity", arity, "1: single operators, 2: operator pairs")->capture_default_str();
    random_ops->add_option("--trials", trials, "number of assignments to train")->capture_default_str();

    ConfigArgs ablate_args;
    std::string which;
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid with a shared seed");
    ablate_args.attach(ablate);
    ablate->add_option("grid", which, "size_of_eo, decision_removal, activation or no_augment")->required();

    std::string export_ckpt, export_out;
    sem::ExportOptions export_opts;
    auto* export_cmd = app.add_subcommand("export-decisions", "per-layer decision-weight statistics as CSV");
    export_cmd->add_option("checkpoint", export_ckpt, "checkpoint of a sem run")->required();
    export_cmd->add_option("--sample", export_opts.sample, "number of records to pass through")->capture_default_str();
    export_cmd->add_option("--split", export_opts.split, "test or train")->capture_default_str();
    export_cmd->add_option("--data-dir", export_opts.data_dir, "dataset root");
    export_cmd->add_option("-o,--output", export_out, "output file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (train->parsed()) {
            auto cfg = train_args.resolve();
            auto result = sem::train_run(cfg);
            std::cout << "epochs=" << result.metrics.size() << " steps=" << result.steps
                      << " final_test_top1=" << result.final_test_top1 << " best_test_top1=" << result.best_test_top1
                      << "\nrun directory: " << cfg.output_dir << "\n";
        } else if (eval->parsed()) {
            auto r = sem::cmd_eval(eval_ckpt, eval_opts);
            std::cout << std::setprecision(9) << "top1=" << r.top1 << " records=" << r.count << "\n";
        } else if (gradcheck->parsed()) {
            return run_gradcheck(gc_scope, gc_seed, gc_channels);
        } else if (random_ops->parsed()) {
            auto cfg = rand_args.resolve();
            auto report = sem::cmd_random_ops(arity, trials, cfg);
            std::cout << report.csv();
        } else if (ablate->parsed()) {
            auto cfg = ablate_args.resolve();
            auto report = sem::cmd_ablate(which, cfg);
            std::cout << report.csv();
            if (report.any_diverged()) {
                std::cerr << "semctl: at least one variant diverged\n";
                return kNumerical;
            }
        } else if (export_cmd->parsed()) {
            write_text(export_out, sem::cmd_export_decisions(export_ckpt, export_opts));
        }
    } catch (const sem::UsageError& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kUsage;
    } catch (const sem::DomainError& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kUsage;
    } catch (const sem::IngestionError& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kIngestion;
    } catch (const sem::IntegrityError& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kIngestion;
    } catch (const sem::NumericalError& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "semctl: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
