#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "poslab/dataset.hpp"
#include "poslab/protocol.hpp"

using namespace poslab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// Small artificial dataset shared across the cases in this file.
const fs::path& tiny_dataset() {
    static const fs::path root = [] {
        const fs::path r = fs::temp_directory_path() / "poslab_protocol_ds";
        fs::remove_all(r);
        const SplitSizes sizes{60, 12, 24};
        ArtificialWriteOptions wo;
        wo.render.canvas_size = 32;
        wo.max_rate = 0.2;
        write_artificial_dataset(r, build_splits(3, sizes, 0.1), sizes, wo);
        return r;
    }();
    return root;
}

ExperimentConfig tiny_config(const std::string& dataset) {
    ExperimentConfig cfg;
    cfg.dataset = dataset;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.patch_size = 8;
    cfg.model.canvas_size = 32;
    cfg.model.max_caption_len = 16;
    cfg.train.hyper.lr = 1e-3;
    cfg.train.hyper.max_steps = 4;
    cfg.train.batch_size = 8;
    cfg.injection_rates = {0.1};
    cfg.arms = {Arm::vision, Arm::no_vision};
    cfg.seeds = {1, 2};
    cfg.eval_steps = {2, 4};
    cfg.noise_replace_prob = 0.2;
    return cfg;
}

std::vector<const ImageBuffer*> some_images(int n, int canvas, std::vector<ImageBuffer>& own) {
    own.clear();
    for (int i = 0; i < n; ++i)
        own.push_back(white_noise_image(canvas, canvas, 1000 + static_cast<uint64_t>(i)));
    std::vector<const ImageBuffer*> view;
    for (const auto& img : own) view.push_back(&img);
    return view;
}

}  // namespace

TEST_CASE("experiment config json round trip with strict keys") {
    ExperimentConfig cfg = tiny_config("some/ds");
    const std::string text = experiment_config_to_json(cfg);
    const ExperimentConfig back = experiment_config_from_json(text);
    CHECK(back == cfg);

    CHECK_THROWS_AS(experiment_config_from_json("{\"dataset\":\"x\",\"typo\":1}"), Error);
    std::string with_unknown = text;
    with_unknown.insert(1, "\"extra_key\": 3,");
    CHECK_THROWS_AS(experiment_config_from_json(with_unknown), Error);

    // unknown nested keys are errors too
    std::string nested = text;
    const auto pos = nested.find("\"d_model\"");
    nested.insert(pos, "\"weird\": 1,");
    CHECK_THROWS_AS(experiment_config_from_json(nested), Error);
}

TEST_CASE("config validation catches bad values") {
    ExperimentConfig cfg = tiny_config("ds");
    cfg.eval_steps = {4, 2};
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config("ds");
    cfg.eval_steps = {8};  // beyond max_steps
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config("ds");
    cfg.seeds.clear();
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config("ds");
    cfg.injection_rates = {1.5};
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("apply_arm: vision is identity") {
    std::vector<ImageBuffer> own;
    const auto view = some_images(5, 16, own);
    const ArmedImages armed = apply_arm(view, Arm::vision, 7, 16);
    REQUIRE(armed.view.size() == view.size());
    for (size_t i = 0; i < view.size(); ++i) CHECK(armed.view[i] == view[i]);
}

TEST_CASE("apply_arm: no-vision replaces every image with seeded noise") {
    std::vector<ImageBuffer> own;
    const auto view = some_images(5, 16, own);
    const ArmedImages a = apply_arm(view, Arm::no_vision, 7, 16);
    const ArmedImages b = apply_arm(view, Arm::no_vision, 7, 16);
    REQUIRE(a.view.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(*a.view[i] == *b.view[i]);      // reproducible
        CHECK_FALSE(*a.view[i] == *view[i]);  // replaced
    }
    CHECK_FALSE(*a.view[0] == *a.view[1]);  // distinct noise per pair
    const ArmedImages c = apply_arm(view, Arm::no_vision, 8, 16);
    CHECK_FALSE(*a.view[0] == *c.view[0]);  // seed matters
}

TEST_CASE("apply_arm: shuffled permutes the image multiset and breaks alignment") {
    std::vector<ImageBuffer> own;
    const auto view = some_images(24, 16, own);
    const ArmedImages a = apply_arm(view, Arm::shuffled, 7, 16);
    REQUIRE(a.view.size() == view.size());

    std::multiset<const ImageBuffer*> before(view.begin(), view.end());
    std::multiset<const ImageBuffer*> after(a.view.begin(), a.view.end());
    CHECK(before == after);

    int moved = 0;
    for (size_t i = 0; i < view.size(); ++i) moved += a.view[i] != view[i];
    CHECK(moved > 0);

    const ArmedImages b = apply_arm(view, Arm::shuffled, 7, 16);
    CHECK(a.view == b.view);  // seeded permutation
}

TEST_CASE("batch order covers each epoch exactly once and is reproducible") {
    const int n = 13;
    std::map<int, int> counts;
    for (long long g = 0; g < 2 * n; ++g) counts[batch_item_index(99, n, g)]++;
    for (const auto& [idx, c] : counts) {
        CHECK(idx >= 0);
        CHECK(idx < n);
        CHECK(c == 2);  // two epochs -> each item twice
    }
    CHECK(batch_item_index(99, n, 7) == batch_item_index(99, n, 7));
    // different epochs get different permutations (overwhelmingly likely)
    std::vector<int> e0, e1;
    for (long long g = 0; g < n; ++g) e0.push_back(batch_item_index(99, n, g));
    for (long long g = n; g < 2 * n; ++g) e1.push_back(batch_item_index(99, n, g));
    CHECK(e0 != e1);
}

TEST_CASE("run_experiment produces the cartesian run set with rows at eval steps") {
    const LoadedDataset ds = load_dataset(tiny_dataset());
    const fs::path ws = fs::temp_directory_path() / "poslab_protocol_ws1";
    fs::remove_all(ws);

    ExperimentConfig cfg = tiny_config(tiny_dataset().string());
    std::ostringstream log;
    const auto records = run_experiment(cfg, ds, ws, 1, &log);

    REQUIRE(records.size() == 4);  // 2 arms x 1 rate x 2 seeds
    std::set<std::string> ids;
    for (const auto& rec : records) {
        CHECK(rec.completed);
        CHECK_FALSE(rec.failed);
        ids.insert(rec.run_id);
        REQUIRE(rec.rows.size() == 2);
        CHECK(rec.rows[0].step == 2);
        CHECK(rec.rows[1].step == 4);
        for (const auto& row : rec.rows) {
            CHECK(std::isfinite(row.loss));
            CHECK(row.macro_f1 >= 0.0);
            CHECK(row.macro_f1 <= 100.0);
            CHECK(row.rouge_l >= 0.0);
            CHECK(row.rouge_l <= 1.0);
        }
        const fs::path dir = ws / rec.run_id;
        CHECK(fs::exists(dir / "config.json"));
        CHECK(fs::exists(dir / "metrics.csv"));
        CHECK(fs::exists(dir / "checkpoints" / "last.ckpt"));
    }
    CHECK(ids.size() == 4);  // distinct run ids

    // injection bookkeeping is logged per run
    CHECK(log.str().find("injected 6 disambiguating items") != std::string::npos);

    // a second invocation skips completed runs and reproduces the records
    std::ostringstream log2;
    const auto again = run_experiment(cfg, ds, ws, 1, &log2);
    CHECK(log2.str().find("already completed; skipping") != std::string::npos);
    REQUIRE(again.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        REQUIRE(again[i].rows.size() == records[i].rows.size());
        for (size_t r = 0; r < again[i].rows.size(); ++r)
            CHECK(again[i].rows[r].macro_f1 == records[i].rows[r].macro_f1);
    }

    // loading records back from disk agrees
    const auto loaded = load_run_records(ws);
    CHECK(loaded.size() == 4);
    fs::remove_all(ws);
}

TEST_CASE("identical config and seed reproduce metrics.csv byte-for-byte") {
    const LoadedDataset ds = load_dataset(tiny_dataset());
    ExperimentConfig cfg = tiny_config(tiny_dataset().string());
    cfg.seeds = {5};
    cfg.arms = {Arm::vision};

    const fs::path ws_a = fs::temp_directory_path() / "poslab_protocol_det_a";
    const fs::path ws_b = fs::temp_directory_path() / "poslab_protocol_det_b";
    fs::remove_all(ws_a);
    fs::remove_all(ws_b);

    const auto rec_a = run_experiment(cfg, ds, ws_a, 1, nullptr);
    const auto rec_b = run_experiment(cfg, ds, ws_b, 1, nullptr);
    REQUIRE(rec_a.size() == 1);
    REQUIRE(rec_b.size() == 1);
    CHECK(rec_a[0].run_id == rec_b[0].run_id);
    CHECK(slurp(ws_a / rec_a[0].run_id / "metrics.csv") ==
          slurp(ws_b / rec_b[0].run_id / "metrics.csv"));
    fs::remove_all(ws_a);
    fs::remove_all(ws_b);
}

TEST_CASE("interrupting after an eval step and resuming matches the uninterrupted run") {
    const LoadedDataset ds = load_dataset(tiny_dataset());
    ExperimentConfig cfg = tiny_config(tiny_dataset().string());
    cfg.seeds = {9};
    cfg.arms = {Arm::vision};

    const fs::path ws_ref = fs::temp_directory_path() / "poslab_protocol_res_ref";
    const fs::path ws_int = fs::temp_directory_path() / "poslab_protocol_res_int";
    fs::remove_all(ws_ref);
    fs::remove_all(ws_int);

    const auto ref = run_experiment(cfg, ds, ws_ref, 1, nullptr);
    REQUIRE(ref.size() == 1);

    RunHooks hooks;
    hooks.interrupt_after_step = 2;
    const auto partial = run_experiment(cfg, ds, ws_int, 1, nullptr, &hooks);
    REQUIRE(partial.size() == 1);
    CHECK_FALSE(partial[0].completed);
    CHECK(partial[0].rows.size() == 1);

    std::ostringstream log;
    const auto resumed = run_experiment(cfg, ds, ws_int, 1, &log);
    CHECK(log.str().find("resuming from step 2") != std::string::npos);
    REQUIRE(resumed.size() == 1);
    CHECK(resumed[0].completed);

    CHECK(slurp(ws_ref / ref[0].run_id / "metrics.csv") ==
          slurp(ws_int / resumed[0].run_id / "metrics.csv"));
    fs::remove_all(ws_ref);
    fs::remove_all(ws_int);
}

TEST_CASE("run id collision with a different config is refused") {
    const LoadedDataset ds = load_dataset(tiny_dataset());
    ExperimentConfig cfg = tiny_config(tiny_dataset().string());
    cfg.seeds = {4};
    cfg.arms = {Arm::vision};
    const fs::path ws = fs::temp_directory_path() / "poslab_protocol_coll";
    fs::remove_all(ws);
    const auto recs = run_experiment(cfg, ds, ws, 1, nullptr);
    REQUIRE(recs.size() == 1);

    // tamper with the stored config copy; the id no longer matches it
    const fs::path cfg_path = ws / recs[0].run_id / "config.json";
    std::string text = slurp(cfg_path);
    text.replace(text.find("0.2"), 3, "0.3");
    std::ofstream(cfg_path, std::ios::trunc) << text;
    CHECK_THROWS_AS(run_experiment(cfg, ds, ws, 1, nullptr), Error);
    fs::remove_all(ws);
}

TEST_CASE("aggregate means, ranges, deltas and failure handling") {
    auto mk = [](Arm arm, double rate, uint64_t seed, std::vector<MetricsRow> rows) {
        RunRecord r;
        r.arm = arm;
        r.rate = rate;
        r.seed = seed;
        r.completed = true;
        r.rows = std::move(rows);
        return r;
    };

    // single record: mean equals its own values
    {
        const auto table = aggregate({mk(Arm::vision, 0.01, 1, {{100, 1.0, 80.0, 0.5}})});
        REQUIRE(table.cells.size() == 1);
        CHECK(table.cells[0].mean_f1 == 80.0);
        CHECK(table.cells[0].range_f1 == 0.0);
        CHECK(table.cells[0].n_seeds == 1);
    }

    // two seeds with F1 90 and 92 -> mean 91, range 2; delta vs no-vision
    {
        std::vector<RunRecord> records = {
            mk(Arm::vision, 0.01, 1, {{100, 1.0, 90.0, 0.5}}),
            mk(Arm::vision, 0.01, 2, {{100, 1.2, 92.0, 0.6}}),
            mk(Arm::no_vision, 0.01, 1, {{100, 1.1, 60.0, 0.2}}),
            mk(Arm::no_vision, 0.01, 2, {{100, 1.3, 64.0, 0.1}}),
        };
        RunRecord failed = mk(Arm::vision, 0.01, 3, {});
        failed.completed = false;
        failed.failed = true;
        records.push_back(failed);

        const auto table = aggregate(records);
        CHECK(table.failed_runs == 1);
        REQUIRE(table.cells.size() == 2);
        double vision_mean = 0, novision_mean = 0, vision_range = 0;
        for (const auto& c : table.cells) {
            if (c.arm == Arm::vision) {
                vision_mean = c.mean_f1;
                vision_range = c.range_f1;
            } else {
                novision_mean = c.mean_f1;
            }
            CHECK(c.n_seeds == 2);
        }
        CHECK(vision_mean == 91.0);
        CHECK(vision_range == 2.0);
        CHECK(novision_mean == 62.0);
        REQUIRE(table.deltas.size() == 1);
        CHECK(table.deltas[0].delta_f1 == 29.0);

        // independent spreadsheet-style recomputation of every cell
        for (const auto& c : table.cells) {
            double sum = 0;
            int n = 0;
            for (const auto& r : records) {
                if (r.failed || r.arm != c.arm || r.rate != c.rate) continue;
                for (const auto& row : r.rows)
                    if (row.step == c.step) {
                        sum += row.macro_f1;
                        ++n;
                    }
            }
            CHECK(c.mean_f1 == sum / n);
        }
    }

    // mismatched step grids are an error
    CHECK_THROWS_AS(aggregate({mk(Arm::vision, 0.0, 1, {{100, 1, 50, 0}}),
                               mk(Arm::vision, 0.0, 2, {{200, 1, 50, 0}})}),
                    Error);
}
