#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "damp/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Domain-agnostic mutual prompting on synthetic domain-shifted data"};
    app.require_subcommand(1);

    std::string config_file, out_root, out_dir, run_id, resume_from, checkpoint, dataset, out_path;
    std::vector<std::string> overrides;
    double tolerance = 1e-4;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("config", config_file, "run configuration file (json)")->required();
        cmd->add_option("--set", overrides, "override config values as dotted.path=value");
    };

    CLI::App* gen = app.add_subcommand("generate-data", "synthesize the configured domain datasets");
    add_config(gen);
    gen->add_option("--out", out_dir, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "run the configured training mode");
    add_config(train);
    train->add_option("--out-root", out_root, "root directory for run outputs");
    train->add_option("--run-id", run_id, "run directory name (defaults to mode+seed)");
    train->add_option("--resume", resume_from, "checkpoint to resume from");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint and emit a confusion matrix");
    eval->add_option("checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--dataset", dataset, "dataset container (defaults to the run's own target)");
    eval->add_option("--out", out_dir, "output directory")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "run the component ladder and prompting-strategy sweep");
    add_config(ablate);
    ablate->add_option("--out-root", out_root, "root directory for the report tables");

    CLI::App* dump = app.add_subcommand("dump-embeddings", "export pre/post-prompting embeddings");
    dump->add_option("checkpoint", checkpoint, "checkpoint file")->required();
    dump->add_option("--out", out_path, "archive path to write")->required();

    CLI::App* gc = app.add_subcommand("grad-check", "compare analytic gradients with finite differences");
    add_config(gc);
    gc->add_option("--tolerance", tolerance, "max relative error allowed for loss gradients");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return damp::cmd_generate_data(config_file, out_dir, overrides);
        if (train->parsed()) return damp::cmd_train(config_file, overrides, out_root, run_id, resume_from);
        if (eval->parsed()) return damp::cmd_eval(checkpoint, dataset, out_dir);
        if (ablate->parsed()) return damp::cmd_ablate(config_file, overrides, out_root);
        if (dump->parsed()) return damp::cmd_dump_embeddings(checkpoint, out_path);
        if (gc->parsed()) return damp::cmd_grad_check(config_file, overrides, tolerance);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
