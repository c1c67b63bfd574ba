#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "damp/commands.hpp"

using namespace damp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string smoke_config() {
    // resolves whether tests run from the build tree or the repo root
    for (const char* p : {"configs/smoke.json", "../configs/smoke.json", "../../configs/smoke.json"})
        if (fs::exists(p)) return p;
    throw std::runtime_error("smoke config not found from " + fs::current_path().string());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate-data writes a reloadable container, identically per seed") {
    TempDir dir("damp_cmd_gen");
    CHECK(cmd_generate_data(smoke_config(), dir.str()) == 0);
    fs::path dataset = dir.path / "dataset.dampbin";
    REQUIRE(fs::exists(dataset));
    GeneratedData data = load_dataset(dataset.string());
    CHECK(data.source.x.size() == 24);
    CHECK(data.target.x.size() == 24);

    TempDir dir2("damp_cmd_gen2");
    CHECK(cmd_generate_data(smoke_config(), dir2.str()) == 0);
    CHECK(slurp(dataset) == slurp(dir2.path / "dataset.dampbin"));
}

TEST_CASE("generate-data rejects bad specs with nonzero status") {
    TempDir dir("damp_cmd_badspec");
    CHECK_THROWS(cmd_generate_data(smoke_config(), dir.str(), {"dataset.classes=1"}));
}

TEST_CASE("train produces the documented run directory layout") {
    TempDir dir("damp_cmd_train");
    CHECK(cmd_train(smoke_config(), {}, dir.str(), "smoke_run") == 0);
    fs::path run = dir.path / "smoke_run";
    for (const char* f : {"config.json", "manifest.json", "metrics.jsonl", "checkpoint.dampbin",
                          "checkpoint_final.dampbin"})
        CHECK(fs::exists(run / f));

    // one metrics line per epoch
    std::ifstream metrics(run / "metrics.jsonl");
    int lines = 0;
    std::string line;
    std::vector<json> records;
    while (std::getline(metrics, line)) {
        records.push_back(json::parse(line));
        ++lines;
    }
    CHECK(lines == 3);
    CHECK(records.back()["epoch"] == 3);
    CHECK(records.back().contains("target_accuracy"));
    CHECK(records.back()["loss"].contains("idc"));
}

TEST_CASE("config overrides take precedence over the file") {
    TempDir dir("damp_cmd_override");
    CHECK(cmd_train(smoke_config(), {"epochs=1", "seed=9"}, dir.str(), "override_run") == 0);
    json snap = json::parse(slurp(dir.path / "override_run" / "config.json"));
    CHECK(snap["epochs"] == 1);
    CHECK(snap["seed"] == 9);
}

TEST_CASE("dg mode via override forbids a target spec") {
    TempDir dir("damp_cmd_dg");
    CHECK_THROWS_WITH(cmd_train(smoke_config(), {"mode=dg"}, dir.str(), "dg_run"),
                      Catch::Matchers::ContainsSubstring("forbids"));
}

TEST_CASE("a resumed run extends the same metrics log deterministically") {
    TempDir dir("damp_cmd_resume");
    RunConfig cfg = load_run_config(smoke_config());

    // full three-epoch reference
    std::string full_dir = (dir.path / "full").string();
    run_training(cfg, full_dir);

    // two epochs, then resume for the third into the same run directory
    std::string part_dir = (dir.path / "part").string();
    {
        fs::create_directories(part_dir);
        Trainer tr(cfg);
        std::ofstream metrics(fs::path(part_dir) / "metrics.jsonl");
        tr.train([&](const MetricsRecord& r) { metrics << r.to_json().dump() << "\n"; }, "", 2);
        tr.save_checkpoint((fs::path(part_dir) / "checkpoint.dampbin").string());
    }
    {
        Trainer tr(cfg);
        tr.load_checkpoint((fs::path(part_dir) / "checkpoint.dampbin").string());
        std::ofstream metrics(fs::path(part_dir) / "metrics.jsonl", std::ios::app);
        tr.train([&](const MetricsRecord& r) { metrics << r.to_json().dump() << "\n"; });
    }
    CHECK(slurp(fs::path(full_dir) / "metrics.jsonl") == slurp(fs::path(part_dir) / "metrics.jsonl"));
}

TEST_CASE("eval emits a consistent confusion matrix") {
    TempDir dir("damp_cmd_eval");
    CHECK(cmd_train(smoke_config(), {"epochs=2"}, dir.str(), "eval_run") == 0);
    std::string ckpt = (dir.path / "eval_run" / "checkpoint_final.dampbin").string();
    std::string eval_dir = (dir.path / "eval_out").string();
    CHECK(cmd_eval(ckpt, "", eval_dir) == 0);

    json metrics = json::parse(slurp(fs::path(eval_dir) / "metrics.json"));
    std::ifstream csv(fs::path(eval_dir) / "confusion.csv");
    std::string line;
    long long total = 0;
    long long diag = 0;
    int row = 0;
    while (std::getline(csv, line)) {
        std::stringstream ss(line);
        std::string cell;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            long long v = std::stoll(cell);
            total += v;
            if (row == col) diag += v;
            ++col;
        }
        ++row;
    }
    CHECK(row == 4);
    CHECK(total == metrics["total"].get<long long>());
    CHECK(metrics["accuracy"].get<double>() ==
          Catch::Approx(static_cast<double>(diag) / total).margin(1e-12));
    CHECK(metrics["per_class_accuracy"].size() == 4);
}

TEST_CASE("dump-embeddings round-trips through the ingest tooling") {
    TempDir dir("damp_cmd_dump");
    CHECK(cmd_train(smoke_config(), {"epochs=1"}, dir.str(), "dump_run") == 0);
    std::string ckpt = (dir.path / "dump_run" / "checkpoint_final.dampbin").string();
    std::string archive_path = (dir.path / "embeddings.dampbin").string();
    CHECK(cmd_dump_embeddings(ckpt, archive_path) == 0);

    RunConfig cfg = load_run_config(smoke_config());
    EmbeddingArchive archive = ingest_embeddings(archive_path, cfg.encoder.joint_dim, cfg.context_len,
                                                 cfg.encoder.grid_tokens());
    CHECK(archive.records.size() == 48);  // 24 source + 24 target
    int post = 0;
    for (const auto& rec : archive.records) post += rec.has_post ? 1 : 0;
    CHECK(post == 48);
}

TEST_CASE("a zero-gamma checkpoint dumps identical pre and post embeddings") {
    TempDir dir("damp_cmd_dump0");
    RunConfig cfg = load_run_config(smoke_config());
    cfg.prompter.gamma_v_init = 0.0;
    cfg.prompter.gamma_s_init = 0.0;
    Trainer tr(cfg);  // untrained: gammas stay zero
    std::string ckpt = (dir.path / "ckpt.dampbin").string();
    tr.save_checkpoint(ckpt);

    EmbeddingArchive archive = build_embedding_archive(
        tr.text_encoder(), tr.image_encoder(), tr.bank(), tr.sources()[0].x, tr.sources()[0].y, tr.target().x,
        &tr.prompter(), tr.visual_on(), tr.textual_on());
    for (const auto& rec : archive.records) {
        REQUIRE(rec.has_post);
        CHECK(rec.v_prime.data == rec.v.data);
        for (int k = 0; k < archive.classes; ++k)
            for (int j = 0; j < archive.joint_dim; ++j)
                CHECK(rec.s_prime(k, j) == archive.s(k, j));
    }
}

TEST_CASE("ablation tables have the documented shape") {
    TempDir dir("damp_cmd_ablate");
    CHECK(cmd_ablate(smoke_config(), {"epochs=1", "sweep_seeds=[1,2]"}, dir.str()) == 0);
    fs::path ladder_path = dir.path / "ablation" / "toggles_ladder.tsv";
    REQUIRE(fs::exists(ladder_path));

    std::ifstream ladder(ladder_path);
    std::string line;
    std::vector<std::vector<std::string>> rows;
    while (std::getline(ladder, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, '\t')) cells.push_back(cell);
        rows.push_back(cells);
    }
    REQUIRE(rows.size() == 8);  // header + 7 ladder rows
    CHECK(rows[0][0] == "row");
    CHECK(rows[1][0] == "baseline");
    CHECK(rows[7][0] == "full");
    for (size_t r = 1; r < rows.size(); ++r) {
        REQUIRE(rows[r].size() == rows[0].size());
        CHECK_NOTHROW(std::stod(rows[r][1]));
        CHECK_NOTHROW(std::stod(rows[r][2]));
    }

    std::ifstream strat(dir.path / "ablation" / "strategies.tsv");
    int strat_rows = 0;
    while (std::getline(strat, line)) ++strat_rows;
    CHECK(strat_rows == 5);  // header + 4 strategies
}

TEST_CASE("grad-check passes on the smoke config and reports all groups") {
    RunConfig cfg = load_run_config(smoke_config());
    Trainer tr(cfg);
    GradCheckReport rep = tr.grad_check(LossSelector::all, 2, 1e-5, 3, 2);
    CHECK(rep.groups.size() == tr.params().size());
    CHECK(rep.worst() < 1e-4);
}
