// Command-line front end: train / eval / flops-report / export-gates / sweep
// over the synthetic multi-scale detection task.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynhead/harness.hpp"

namespace {

using namespace dynhead;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
    std::string checkpoint;
    int scene = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_checkpoint) {
    cmd->add_option("--config", args.config_path, "UTF-8 config file of 'key = value' lines");
    cmd->add_option("--set", args.sets, "Override one config key, e.g. --set loss.lambda=0.4")
        ->take_all();
    cmd->add_option("--out", args.out_dir,
                    "Output root (same as --set out.dir=...; defaults to $DYNHEAD_OUTPUT_ROOT "
                    "or ./runs)");
    if (with_checkpoint)
        cmd->add_option("--checkpoint", args.checkpoint,
                        "Checkpoint file (default: <out>/checkpoint.bin)");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : RunConfig::from_file(args.config_path);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    for (const std::string& kv : args.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

Model load_model(const RunConfig& cfg, const std::string& checkpoint_arg) {
    const std::string path =
        checkpoint_arg.empty() ? cfg.resolved_out_dir() + "/checkpoint.bin" : checkpoint_arg;
    Model model = build_model(cfg);
    checkpoint::restore_into(model.params, checkpoint::load(path));
    return model;
}

int run_train(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    TrainResult tr = train(cfg);
    if (!tr.history.empty()) {
        const IterationRecord& last = tr.history.back();
        std::printf("train: %d iterations, final l_cls=%.6f l_reg=%.6f l_budget=%.6f "
                    "head FLOPs avg=%.0f (2x MACs)\n",
                    static_cast<int>(tr.history.size()), last.l_cls, last.l_reg, last.l_budget,
                    2.0 * last.head_macs_avg);
    }
    std::printf("train: checkpoint -> %s\n", tr.checkpoint_path.c_str());
    std::printf("train: metrics   -> %s\n", tr.metrics_path.c_str());
    return 0;
}

int run_eval(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    Model model = load_model(cfg, args.checkpoint);
    EvalMetrics em = eval_model(model, cfg);
    const std::string out = cfg.resolved_out_dir();
    std::filesystem::create_directories(out);
    write_eval_csv(out + "/eval_metrics.csv", em);
    write_budget_csv(out + "/budget_report.csv", em.report);
    std::printf("eval: accuracy_all=%.4f accuracy_fg=%.4f reg_error=%.4f proxy=%.4f\n",
                em.accuracy_all, em.accuracy_fg, em.reg_error, em.proxy);
    std::printf("eval: head FLOPs avg=%.0f max=%lld min=%lld (2x MACs)\n",
                2.0 * em.report.macs_avg(), 2LL * em.report.macs_max(),
                2LL * em.report.macs_min());
    std::printf("eval: reports -> %s\n", out.c_str());
    return 0;
}

int run_flops_report(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    Model model = load_model(cfg, args.checkpoint);
    const std::string out = cfg.resolved_out_dir();
    std::filesystem::create_directories(out);
    BudgetReport report = flops_report(model, cfg, out + "/budget_report.csv");
    std::printf("flops-report: samples=%zu FLOPs avg=%.0f max=%lld min=%lld (2x MACs)\n",
                report.per_sample_macs.size(), 2.0 * report.macs_avg(), 2LL * report.macs_max(),
                2LL * report.macs_min());
    std::printf("flops-report: mask components mean=%.2f mean area=%.2f\n",
                report.components_mean, report.component_area_mean);
    std::printf("flops-report: csv -> %s/budget_report.csv\n", out.c_str());
    return 0;
}

int run_export_gates(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    Model model = load_model(cfg, args.checkpoint);
    const std::string dir = cfg.resolved_out_dir() + "/heatmaps";
    auto entries = export_gate_heatmaps(model, cfg, args.scene, dir);
    std::printf("export-gates: wrote %zu heatmaps for scene %d -> %s\n", entries.size(),
                args.scene, dir.c_str());
    return 0;
}

int run_sweep(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    std::vector<SweepRow> rows = sweep(cfg);
    std::printf("%-8s %-6s %-12s %-12s %-10s %-10s\n", "lambda", "tau", "flops_avg", "l_budget",
                "proxy", "acc_fg");
    for (const SweepRow& r : rows)
        std::printf("%-8g %-6g %-12.0f %-12.6f %-10.4f %-10.4f\n", r.lambda, r.tau, r.flops_avg,
                    r.l_budget, r.proxy, r.accuracy_fg);
    std::printf("sweep: summary -> %s/sweep_summary.csv\n", cfg.resolved_out_dir().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fine-grained dynamic detection head with spatial gates, sparse convolution "
                 "paths and a computational-budget loss, on a synthetic multi-scale task"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, flops_args, gates_args, sweep_args;
    add_common(app.add_subcommand("train", "Train a model and save a checkpoint"), train_args,
               false);
    add_common(app.add_subcommand("eval", "Evaluate a checkpoint on the eval split"), eval_args,
               true);
    add_common(app.add_subcommand("flops-report",
                                  "Per-sample realized FLOPs/MACs report for a checkpoint"),
               flops_args, true);
    CLI::App* gates_cmd = app.add_subcommand("export-gates", "Export gate heatmaps for one scene");
    add_common(gates_cmd, gates_args, true);
    gates_cmd->add_option("--scene", gates_args.scene, "Eval scene index (default 0)");
    add_common(app.add_subcommand("sweep", "Cartesian sweep over loss.lambda and gate.tau"),
               sweep_args, false);

    try {
        app.parse(argc, argv);
        if (app.got_subcommand("train")) return run_train(train_args);
        if (app.got_subcommand("eval")) return run_eval(eval_args);
        if (app.got_subcommand("flops-report")) return run_flops_report(flops_args);
        if (app.got_subcommand("export-gates")) return run_export_gates(gates_args);
        if (app.got_subcommand("sweep")) return run_sweep(sweep_args);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const dynhead::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const dynhead::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
