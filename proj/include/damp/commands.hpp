#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "damp/config.hpp"
#include "damp/trainer.hpp"

namespace damp {

inline constexpr const char* kVersionStamp = "damp 0.1.0";

namespace fs = std::filesystem;

// Output root: explicit argument wins, then DAMP_OUT_ROOT, then ./runs.
inline std::string resolve_out_root(const std::string& explicit_root) {
    if (!explicit_root.empty()) return explicit_root;
    if (const char* env = std::getenv("DAMP_OUT_ROOT")) return env;
    return "runs";
}

// ---- generate-data ----

inline int cmd_generate_data(const std::string& spec_file, const std::string& out_dir,
                             const std::vector<std::string>& overrides = {}) {
    RunConfig cfg = load_run_config(spec_file, overrides);
    fs::create_directories(out_dir);
    DomainDatasetSpec spec = cfg.data.base_spec();
    GeneratedData data = generate(spec);
    std::string path = (fs::path(out_dir) / "dataset.dampbin").string();
    save_dataset(path, spec, data);
    std::ofstream snap(fs::path(out_dir) / "dataset_spec.json");
    snap << to_json(cfg)["dataset"].dump(2) << "\n";
    std::cout << "wrote " << path << " (" << data.source.x.size() << " source, " << data.target.x.size()
              << " target samples)\n";
    return 0;
}

// ---- train ----

struct TrainOutcome {
    std::string run_dir;
    double final_target_accuracy = 0.0;
    int epochs_run = 0;
};

inline TrainOutcome run_training(const RunConfig& cfg, const std::string& run_dir,
                                 const std::string& resume_from = "") {
    fs::create_directories(run_dir);
    std::ofstream config_snap(fs::path(run_dir) / "config.json");
    config_snap << to_json(cfg).dump(2) << "\n";
    config_snap.close();

    json manifest;
    manifest["run_id"] = fs::path(run_dir).filename().string();
    manifest["version"] = kVersionStamp;
    manifest["seed"] = cfg.seed;
    manifest["sweep_seeds"] = cfg.sweep_seeds;
    manifest["layout"] = {{"config", "config.json"},
                          {"metrics", "metrics.jsonl"},
                          {"checkpoint", "checkpoint.dampbin"},
                          {"final_checkpoint", "checkpoint_final.dampbin"}};
    std::ofstream mf(fs::path(run_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    mf.close();

    Trainer trainer(cfg);
    if (!resume_from.empty()) trainer.load_checkpoint(resume_from);

    std::string metrics_path = (fs::path(run_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open metrics log " + metrics_path);

    std::string ckpt = (fs::path(run_dir) / "checkpoint.dampbin").string();
    trainer.train(
        [&](const MetricsRecord& rec) {
            metrics << rec.to_json().dump() << "\n";
            metrics.flush();
            if (!metrics) throw std::runtime_error("metrics log write failure on " + metrics_path);
        },
        ckpt);
    trainer.save_checkpoint((fs::path(run_dir) / "checkpoint_final.dampbin").string());

    TrainOutcome out;
    out.run_dir = run_dir;
    out.epochs_run = trainer.epoch();
    if (trainer.has_target())
        out.final_target_accuracy = trainer.history().empty()
                                        ? 0.0
                                        : trainer.history().back().target_accuracy.value_or(0.0);
    else if (cfg.mode == RunMode::dg)
        out.final_target_accuracy = trainer.evaluate_holdout().accuracy;
    return out;
}

inline int cmd_train(const std::string& config_file, const std::vector<std::string>& overrides,
                     const std::string& out_root, std::string run_id = "", const std::string& resume_from = "") {
    RunConfig cfg = load_run_config(config_file, overrides);
    if (run_id.empty())
        run_id = "run_" + to_string(cfg.mode) + "_seed" + std::to_string(cfg.seed);
    std::string run_dir = (fs::path(resolve_out_root(out_root)) / run_id).string();
    TrainOutcome out = run_training(cfg, run_dir, resume_from);
    std::cout << "run " << out.run_dir << " complete: " << out.epochs_run << " epochs, final accuracy "
              << out.final_target_accuracy << "\n";
    return 0;
}

// ---- eval ----

inline RunConfig config_from_checkpoint(const std::string& checkpoint_path) {
    BinReader r(checkpoint_path);
    r.expect_kind(ContainerKind::checkpoint, 1, "checkpoint");
    return run_config_from_json(json::parse(r.str()));
}

inline void write_eval_outputs(const std::string& out_dir, const EvalResult& res) {
    std::ofstream csv(fs::path(out_dir) / "confusion.csv");
    for (int i = 0; i < res.confusion.rows; ++i) {
        for (int j = 0; j < res.confusion.cols; ++j)
            csv << static_cast<long long>(res.confusion(i, j)) << (j + 1 < res.confusion.cols ? "," : "");
        csv << "\n";
    }
    json metrics;
    metrics["accuracy"] = res.accuracy;
    metrics["total"] = res.total;
    metrics["per_class_accuracy"] = res.per_class_accuracy;
    std::ofstream mj(fs::path(out_dir) / "metrics.json");
    mj << metrics.dump(2) << "\n";
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                    const std::string& out_dir) {
    RunConfig cfg = config_from_checkpoint(checkpoint_path);
    Trainer trainer(cfg);
    trainer.load_checkpoint(checkpoint_path);

    std::vector<Image> xs;
    std::vector<int> ys;
    if (!dataset_path.empty()) {
        GeneratedData data = load_dataset(dataset_path);
        xs = data.target.x;
        ys = data.target.eval_labels();
    } else if (cfg.mode == RunMode::dg) {
        EvalResult hold = trainer.evaluate_holdout();
        xs.clear();  // holdout evaluated in place below via result
        fs::create_directories(out_dir);
        write_eval_outputs(out_dir, hold);
        std::cout << "holdout accuracy " << hold.accuracy << "\n";
        return 0;
    } else {
        xs = trainer.target().x;
        ys = trainer.target().eval_labels();
    }
    EvalResult res = evaluate_classifier(trainer.bank(), trainer.text_encoder(), trainer.image_encoder(),
                                         trainer.prompter(), xs, ys, cfg.weights.tau, trainer.visual_on(),
                                         trainer.textual_on());
    fs::create_directories(out_dir);
    write_eval_outputs(out_dir, res);
    std::cout << "accuracy " << res.accuracy << " on " << res.total << " samples\n";
    return 0;
}

// ---- ablate ----

struct AblationRow {
    std::string label;
    AblationToggles toggles;
    PromptStrategy strategy = PromptStrategy::cross_attention;
};

// The toggle ladder: baseline, each prompting branch, then the loss terms.
inline std::vector<AblationRow> ablation_ladder() {
    return {
        {"baseline", {false, false, false, false, false}},
        {"vp_only", {false, true, false, false, false}},
        {"itp_only", {true, false, false, false, false}},
        {"mutual_prompting", {true, true, false, false, false}},
        {"mp_sc", {true, true, true, false, false}},
        {"mp_sc_idc", {true, true, true, true, false}},
        {"full", {true, true, true, true, true}},
    };
}

// Prompting-strategy comparison rows: supervised loss only, both branches on.
inline std::vector<AblationRow> strategy_rows() {
    AblationToggles sup_only{true, true, false, false, false};
    return {
        {"none", sup_only, PromptStrategy::none},
        {"independent", sup_only, PromptStrategy::independent},
        {"simple_synergy", sup_only, PromptStrategy::simple_synergy},
        {"cross_attention", sup_only, PromptStrategy::cross_attention},
    };
}

struct SweepCell {
    std::string label;
    double mean = 0.0;
    double spread = 0.0;  // sample standard deviation
    std::vector<double> per_seed;
};

inline SweepCell run_sweep_row(const RunConfig& base, const AblationRow& row) {
    SweepCell cell;
    cell.label = row.label;
    for (uint64_t seed : base.sweep_seeds) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.ablation = row.toggles;
        cfg.prompter.strategy = row.strategy;
        Trainer trainer(cfg);
        trainer.train();
        double acc = cfg.mode == RunMode::dg ? trainer.evaluate_holdout().accuracy
                                             : trainer.evaluate_target().accuracy;
        cell.per_seed.push_back(acc);
    }
    for (double a : cell.per_seed) cell.mean += a / cell.per_seed.size();
    if (cell.per_seed.size() > 1) {
        double var = 0.0;
        for (double a : cell.per_seed) var += (a - cell.mean) * (a - cell.mean);
        cell.spread = std::sqrt(var / (cell.per_seed.size() - 1));
    }
    return cell;
}

inline void write_sweep_table(const std::string& path, const std::vector<SweepCell>& cells) {
    std::ofstream out(path);
    out << "row\tmean_accuracy\tspread";
    size_t seeds = cells.empty() ? 0 : cells[0].per_seed.size();
    for (size_t i = 0; i < seeds; ++i) out << "\tseed" << i;
    out << "\n";
    for (const SweepCell& c : cells) {
        out << c.label << "\t" << c.mean << "\t" << c.spread;
        for (double a : c.per_seed) out << "\t" << a;
        out << "\n";
    }
}

inline int cmd_ablate(const std::string& config_file, const std::vector<std::string>& overrides,
                      const std::string& out_root) {
    RunConfig base = load_run_config(config_file, overrides);
    std::string out_dir = (fs::path(resolve_out_root(out_root)) / "ablation").string();
    fs::create_directories(out_dir);

    std::vector<SweepCell> ladder;
    for (const AblationRow& row : ablation_ladder()) {
        ladder.push_back(run_sweep_row(base, row));
        std::cout << "ladder " << ladder.back().label << ": mean " << ladder.back().mean << " +- "
                  << ladder.back().spread << "\n";
    }
    write_sweep_table((fs::path(out_dir) / "toggles_ladder.tsv").string(), ladder);

    std::vector<SweepCell> strategies;
    for (const AblationRow& row : strategy_rows()) {
        strategies.push_back(run_sweep_row(base, row));
        std::cout << "strategy " << strategies.back().label << ": mean " << strategies.back().mean << " +- "
                  << strategies.back().spread << "\n";
    }
    write_sweep_table((fs::path(out_dir) / "strategies.tsv").string(), strategies);
    std::cout << "ablation tables in " << out_dir << "\n";
    return 0;
}

// ---- dump-embeddings ----

inline int cmd_dump_embeddings(const std::string& checkpoint_path, const std::string& out_path) {
    RunConfig cfg = config_from_checkpoint(checkpoint_path);
    Trainer trainer(cfg);
    trainer.load_checkpoint(checkpoint_path);
    const LabeledSet& src = trainer.sources()[0];
    EmbeddingArchive archive = build_embedding_archive(
        trainer.text_encoder(), trainer.image_encoder(), trainer.bank(), src.x, src.y, trainer.target().x,
        &trainer.prompter(), trainer.visual_on(), trainer.textual_on());
    fs::create_directories(fs::path(out_path).parent_path().empty() ? "." : fs::path(out_path).parent_path());
    archive.save(out_path);
    std::cout << "wrote " << archive.records.size() << " embedding records to " << out_path << "\n";
    return 0;
}

// ---- grad-check ----

inline int cmd_grad_check(const std::string& config_file, const std::vector<std::string>& overrides,
                          double tolerance = 1e-4) {
    RunConfig cfg = load_run_config(config_file, overrides);
    Trainer trainer(cfg);
    bool ok = true;

    auto print_report = [&](const std::string& name, const GradCheckReport& rep, double tol) {
        std::cout << "loss " << name << ": max rel err " << rep.worst() << " over " << rep.groups.size()
                  << " groups (tolerance " << tol << ")\n";
        for (const GradCheckGroup& g : rep.groups)
            std::cout << "  " << g.name << "\t" << g.max_rel_err << "\t(" << g.coords << " coords)\n";
        if (rep.worst() >= tol) ok = false;
    };

    print_report("probe", trainer.grad_check(LossSelector::probe, 4, 1e-3, cfg.seed), 1e-9);
    for (auto [name, sel] : std::initializer_list<std::pair<const char*, LossSelector>>{
             {"sup", LossSelector::sup},
             {"sc", LossSelector::sc},
             {"idc", LossSelector::idc},
             {"im", LossSelector::im},
             {"all", LossSelector::all}}) {
        print_report(name, trainer.grad_check(sel, 3, 1e-5, cfg.seed, 3), tolerance);
    }
    std::cout << (ok ? "grad-check PASS\n" : "grad-check FAIL\n");
    return ok ? 0 : 1;
}

}  // namespace damp
