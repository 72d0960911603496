#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poslab/cli.hpp"
#include "poslab/dataset.hpp"
#include "poslab/protocol.hpp"
#include "poslab/report.hpp"
#include "poslab/workspace.hpp"

using namespace poslab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

GenOptions tiny_gen(const fs::path& ws, const std::string& name) {
    GenOptions opt;
    opt.workspace = ws.string();
    opt.name = name;
    opt.canvas = 32;
    opt.train = 50;
    opt.validation = 10;
    opt.test = 20;
    opt.rate = 0.1;
    opt.max_rate = 0.2;
    return opt;
}

TrainOptions tiny_train(const fs::path& ws, const std::string& dataset) {
    TrainOptions opt;
    opt.workspace = ws.string();
    opt.dataset = dataset;
    opt.rates = {0.1};
    opt.arms = {"vision", "novision"};
    opt.seeds = {1};
    opt.eval_steps = {2, 4};
    opt.max_steps = 4;
    opt.batch_size = 8;
    opt.lr = 1e-3;
    opt.d_model = 16;
    opt.n_heads = 2;
    opt.encoder_layers = 1;
    opt.decoder_layers = 1;
    opt.canvas = 32;
    return opt;
}

}  // namespace

TEST_CASE("workspace resolution: the environment overrides the flag") {
    unsetenv("POSLAB_WORKSPACE");
    CHECK(resolve_workspace("flagged").root == fs::path("flagged"));
    CHECK(resolve_workspace("").root == fs::path("poslab-workspace"));
    setenv("POSLAB_WORKSPACE", "/tmp/poslab_env_ws", 1);
    CHECK(resolve_workspace("flagged").root == fs::path("/tmp/poslab_env_ws"));
    unsetenv("POSLAB_WORKSPACE");
}

TEST_CASE("workspace lock excludes a second sweep") {
    const fs::path root = fs::temp_directory_path() / "poslab_cli_lock";
    fs::remove_all(root);
    WorkspaceLayout ws{root};
    WorkspaceLock lock(ws);
    CHECK_THROWS_AS(WorkspaceLock{ws}, Error);
    fs::remove_all(root);
}

TEST_CASE("gen prints the census and refuses to overwrite without force") {
    const fs::path root = fs::temp_directory_path() / "poslab_cli_gen";
    fs::remove_all(root);
    unsetenv("POSLAB_WORKSPACE");

    std::ostringstream out, err;
    const GenOptions opt = tiny_gen(root, "tiny");
    CHECK(cmd_gen(opt, out, err) == 0);
    CHECK(out.str().find("specs 28800 | ambiguous 16000 | disambiguating 12800") !=
          std::string::npos);
    CHECK(out.str().find("split 50/10/20 | injected 5") != std::string::npos);

    std::ostringstream out2, err2;
    CHECK(cmd_gen(opt, out2, err2) != 0);  // refusal
    CHECK(err2.str().find("--force") != std::string::npos);

    GenOptions forced = opt;
    forced.force = true;
    std::ostringstream out3, err3;
    CHECK(cmd_gen(forced, out3, err3) == 0);
    fs::remove_all(root);
}

TEST_CASE("gen is deterministic: same seed gives byte-identical dataset trees") {
    const fs::path root = fs::temp_directory_path() / "poslab_cli_gen_det";
    fs::remove_all(root);
    unsetenv("POSLAB_WORKSPACE");

    std::ostringstream sink;
    CHECK(cmd_gen(tiny_gen(root, "a"), sink, sink) == 0);
    CHECK(cmd_gen(tiny_gen(root, "b"), sink, sink) == 0);

    const fs::path da = root / "datasets" / "a", db = root / "datasets" / "b";
    CHECK(slurp(da / "manifest.json") == slurp(db / "manifest.json"));
    CHECK(slurp(da / "records.jsonl") == slurp(db / "records.jsonl"));
    int images = 0;
    for (const auto& entry : fs::directory_iterator(da / "images")) {
        ++images;
        CHECK(slurp(entry.path()) == slurp(db / "images" / entry.path().filename()));
    }
    CHECK(images == 50 + 10 + 20 + 10);  // splits plus the max-rate pool prefix
    fs::remove_all(root);
}

TEST_CASE("train + report over a tiny workspace") {
    const fs::path root = fs::temp_directory_path() / "poslab_cli_train";
    fs::remove_all(root);
    unsetenv("POSLAB_WORKSPACE");

    std::ostringstream sink;
    REQUIRE(cmd_gen(tiny_gen(root, "tiny"), sink, sink) == 0);

    std::ostringstream out, err;
    const TrainOptions topt = tiny_train(root, "tiny");
    REQUIRE(cmd_train(topt, out, err) == 0);
    CHECK(out.str().find("injected 5 disambiguating items") != std::string::npos);
    CHECK(out.str().find("2/2 runs completed") != std::string::npos);

    // rerun resumes nothing and skips cleanly
    std::ostringstream out2, err2;
    CHECK(cmd_train(topt, out2, err2) == 0);
    CHECK(out2.str().find("already completed; skipping") != std::string::npos);

    // train-size prefix changes the injected count log line
    TrainOptions smaller = topt;
    smaller.train_size = 20;
    smaller.rates = {0.2};
    std::ostringstream out3, err3;
    REQUIRE(cmd_train(smaller, out3, err3) == 0);
    CHECK(out3.str().find("train base 20, injected 4 disambiguating items") != std::string::npos);

    std::ostringstream rout, rerr;
    REQUIRE(cmd_report(ReportOptions{root.string()}, rout, rerr) == 0);
    CHECK(fs::exists(root / "reports" / "summary.csv"));
    CHECK(fs::exists(root / "reports" / "curves_rate_0p1.svg"));
    CHECK(rout.str().find("arm,rate,step,macro_f1") != std::string::npos);

    // the copied config round-trips to the exact experiment value
    for (const auto& entry : fs::directory_iterator(root / "runs")) {
        const std::string text = slurp(entry.path() / "config.json");
        const auto j = nlohmann::json::parse(text);
        const ExperimentConfig cfg = experiment_config_from_json(j.at("experiment").dump());
        CHECK(cfg.dataset == "tiny");
        CHECK(experiment_config_from_json(experiment_config_to_json(cfg)) == cfg);
    }
    fs::remove_all(root);
}

TEST_CASE("report artifacts are deterministic for fixed inputs") {
    auto mk = [](Arm arm, double rate, uint64_t seed, double f1a, double f1b) {
        RunRecord r;
        r.arm = arm;
        r.rate = rate;
        r.seed = seed;
        r.completed = true;
        r.rows = {{100, 1.0, f1a, 0.4}, {500, 0.8, f1b, 0.6}};
        return r;
    };
    const std::vector<RunRecord> records = {
        mk(Arm::vision, 0.01, 1, 70, 95),
        mk(Arm::vision, 0.01, 2, 74, 97),
        mk(Arm::no_vision, 0.01, 1, 40, 90),
        mk(Arm::no_vision, 0.01, 2, 44, 92),
    };
    const AggregateTable table = aggregate(records);
    const std::string svg1 = learning_curve_svg(table, 0.01);
    const std::string svg2 = learning_curve_svg(aggregate(records), 0.01);
    CHECK(svg1 == svg2);
    CHECK(svg1.find("chance") != std::string::npos);
    CHECK(svg1.find("stroke-dasharray") != std::string::npos);  // no-vision is dashed
    CHECK(svg1.find("<svg") == 0);

    // plotted values are the seed means
    const std::string csv = summary_csv(table);
    CHECK(csv.find("vision,0.01,100,72.0000") != std::string::npos);
    CHECK(csv.find("novision,0.01,100,42.0000") != std::string::npos);
    // delta column = vision mean - novision mean
    CHECK(csv.find(",30.0000") != std::string::npos);

    CHECK_THROWS_AS(learning_curve_svg(table, 0.5), Error);
}

TEST_CASE("check command passes its own oracles") {
    std::ostringstream out;
    CHECK(cmd_check(out) == 0);
    CHECK(out.str().find("[FAIL]") == std::string::npos);
}

TEST_CASE("ingest command loads, partitions and writes a dataset") {
    const fs::path root = fs::temp_directory_path() / "poslab_cli_ingest";
    fs::remove_all(root);
    unsetenv("POSLAB_WORKSPACE");

    const fs::path corpus = fs::temp_directory_path() / "poslab_cli_corpus.jsonl";
    {
        std::ofstream f(corpus, std::ios::trunc);
        for (int i = 0; i < 8; ++i)
            f << R"({"id":"am-)" << i
              << R"(","tokens":["girl","aged","stands"],"subject_index":0,"attractor_index":0,)"
              << R"("verb_index":2,"subject_number":"singular","attractor_number":"singular",)"
              << R"("verb_number":"singular","verb_singular_form":"stands","verb_plural_form":"stand"})"
              << "\n";
        for (int i = 0; i < 4; ++i)
            f << R"({"id":"di-)" << i
              << R"(","tokens":["girls","with","gear","tie"],"subject_index":0,"attractor_index":2,)"
              << R"("verb_index":3,"subject_number":"plural","attractor_number":"singular",)"
              << R"("verb_number":"plural","verb_singular_form":"ties","verb_plural_form":"tie"})"
              << "\n";
        f << "{\"id\":\"broken\"\n";
    }

    IngestOptions opt;
    opt.workspace = root.string();
    opt.corpus = corpus.string();
    opt.name = "natural";
    opt.train = 6;
    opt.validation = 2;
    opt.test = 3;
    opt.rate = 0.0;

    std::ostringstream out, err;
    REQUIRE(cmd_ingest(opt, out, err) == 0);
    CHECK(out.str().find("records 12 valid, 1 rejected | ambiguous 8 | disambiguating 4") !=
          std::string::npos);

    const LoadedDataset ds = load_dataset(root / "datasets" / "natural");
    CHECK(ds.kind == "ingested");
    CHECK(ds.train.size() == 6);
    CHECK(ds.test_pairs.size() == 3);
    fs::remove_all(root);
    fs::remove(corpus);
}
