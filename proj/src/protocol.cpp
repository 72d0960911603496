#include "poslab/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "poslab/eval.hpp"
#include "poslab/rng.hpp"
#include "poslab/vocab.hpp"

namespace poslab {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr uint64_t kStreamModel = 0x01;
constexpr uint64_t kStreamBatch = 0x02;
constexpr uint64_t kStreamAugment = 0x03;
constexpr uint64_t kStreamArmTrain = 0x04;
constexpr uint64_t kStreamArmVal = 0x05;
constexpr uint64_t kStreamArmTest = 0x06;

uint64_t rate_bits(double rate) {
    uint64_t u;
    static_assert(sizeof(u) == sizeof(rate));
    std::memcpy(&u, &rate, sizeof(u));
    return u;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw Error(Error::Kind::config, where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (allowed.count(it.key()) == 0)
            throw Error(Error::Kind::config, "unknown key '" + it.key() + "' in " + where);
}

std::string format_rate(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", rate);
    return buf;
}

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string metrics_row_line(const MetricsRow& r) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.4f,%.6f\n", r.step, r.loss, r.macro_f1, r.rouge_l);
    return buf;
}

std::vector<MetricsRow> parse_metrics_csv(const fs::path& path) {
    std::vector<MetricsRow> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        MetricsRow r;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &r.step, &r.loss, &r.macro_f1,
                        &r.rouge_l) == 4)
            rows.push_back(r);
    }
    return rows;
}

struct RunPaths {
    fs::path dir, config, metrics, status, checkpoints, last_ckpt;
    explicit RunPaths(const fs::path& base) {
        dir = base;
        config = base / "config.json";
        metrics = base / "metrics.csv";
        status = base / "status.json";
        checkpoints = base / "checkpoints";
        last_ckpt = checkpoints / "last.ckpt";
    }
};

void write_file_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error(Error::Kind::io, "cannot open for write: " + tmp.string());
        f << content;
        if (!f) throw Error(Error::Kind::io, "write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace

const char* to_string(Arm arm) {
    switch (arm) {
        case Arm::vision: return "vision";
        case Arm::no_vision: return "novision";
        case Arm::shuffled: return "shuffled";
    }
    return "?";
}

Arm arm_from_string(const std::string& s) {
    if (s == "vision") return Arm::vision;
    if (s == "novision" || s == "no_vision") return Arm::no_vision;
    if (s == "shuffled") return Arm::shuffled;
    throw Error(Error::Kind::config, "unknown arm: " + s);
}

void ExperimentConfig::validate() const {
    if (dataset.empty()) throw Error(Error::Kind::config, "dataset path is empty");
    if (seeds.empty()) throw Error(Error::Kind::config, "at least one seed is required");
    if (arms.empty()) throw Error(Error::Kind::config, "at least one arm is required");
    if (injection_rates.empty()) throw Error(Error::Kind::config, "at least one rate is required");
    for (double r : injection_rates)
        if (r < 0.0 || r > 1.0) throw Error(Error::Kind::config, "injection rate outside [0,1]");
    if (eval_steps.empty()) throw Error(Error::Kind::config, "eval_steps must be non-empty");
    for (size_t i = 0; i < eval_steps.size(); ++i) {
        if (eval_steps[i] <= 0 || eval_steps[i] > train.hyper.max_steps)
            throw Error(Error::Kind::config, "eval steps must lie in (0, max_steps]");
        if (i > 0 && eval_steps[i] <= eval_steps[i - 1])
            throw Error(Error::Kind::config, "eval steps must be strictly ascending");
    }
    if (noise_replace_prob < 0.0 || noise_replace_prob > 1.0)
        throw Error(Error::Kind::config, "noise_replace_prob outside [0,1]");
    if (train.batch_size <= 0) throw Error(Error::Kind::config, "batch_size must be positive");
    if (train.train_size < 0) throw Error(Error::Kind::config, "train_size must be >= 0");
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(Error::Kind::config, std::string("malformed config json: ") + e.what());
    }
    check_keys(j,
               {"dataset", "model", "train", "injection_rates", "arms", "seeds", "eval_steps",
                "noise_replace_prob"},
               "experiment config");

    ExperimentConfig cfg;
    try {
        cfg.dataset = j.at("dataset").get<std::string>();

        const json& m = j.at("model");
        check_keys(m,
                   {"d_model", "n_heads", "encoder_layers", "decoder_layers", "patch_size",
                    "max_caption_len", "canvas_size"},
                   "model");
        if (m.contains("d_model")) cfg.model.d_model = m.at("d_model").get<int>();
        if (m.contains("n_heads")) cfg.model.n_heads = m.at("n_heads").get<int>();
        if (m.contains("encoder_layers"))
            cfg.model.encoder_layers = m.at("encoder_layers").get<int>();
        if (m.contains("decoder_layers"))
            cfg.model.decoder_layers = m.at("decoder_layers").get<int>();
        if (m.contains("patch_size")) cfg.model.patch_size = m.at("patch_size").get<int>();
        if (m.contains("max_caption_len"))
            cfg.model.max_caption_len = m.at("max_caption_len").get<int>();
        if (m.contains("canvas_size")) cfg.model.canvas_size = m.at("canvas_size").get<int>();

        const json& t = j.at("train");
        check_keys(t,
                   {"lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps", "max_steps",
                    "batch_size", "train_size"},
                   "train");
        if (t.contains("lr")) cfg.train.hyper.lr = t.at("lr").get<double>();
        if (t.contains("beta1")) cfg.train.hyper.beta1 = t.at("beta1").get<double>();
        if (t.contains("beta2")) cfg.train.hyper.beta2 = t.at("beta2").get<double>();
        if (t.contains("eps")) cfg.train.hyper.eps = t.at("eps").get<double>();
        if (t.contains("weight_decay"))
            cfg.train.hyper.weight_decay = t.at("weight_decay").get<double>();
        if (t.contains("warmup_steps"))
            cfg.train.hyper.warmup_steps = t.at("warmup_steps").get<int>();
        if (t.contains("max_steps")) cfg.train.hyper.max_steps = t.at("max_steps").get<int>();
        if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
        if (t.contains("train_size")) cfg.train.train_size = t.at("train_size").get<int>();

        cfg.injection_rates = j.at("injection_rates").get<std::vector<double>>();
        for (const auto& a : j.at("arms")) cfg.arms.push_back(arm_from_string(a.get<std::string>()));
        cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        cfg.eval_steps = j.at("eval_steps").get<std::vector<int>>();
        cfg.noise_replace_prob = j.at("noise_replace_prob").get<double>();
    } catch (const json::exception& e) {
        throw Error(Error::Kind::config, std::string("bad config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["dataset"] = cfg.dataset;
    j["model"] = {{"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},
                  {"encoder_layers", cfg.model.encoder_layers},
                  {"decoder_layers", cfg.model.decoder_layers},
                  {"patch_size", cfg.model.patch_size},
                  {"max_caption_len", cfg.model.max_caption_len},
                  {"canvas_size", cfg.model.canvas_size}};
    j["train"] = {{"lr", cfg.train.hyper.lr},
                  {"beta1", cfg.train.hyper.beta1},
                  {"beta2", cfg.train.hyper.beta2},
                  {"eps", cfg.train.hyper.eps},
                  {"weight_decay", cfg.train.hyper.weight_decay},
                  {"warmup_steps", cfg.train.hyper.warmup_steps},
                  {"max_steps", cfg.train.hyper.max_steps},
                  {"batch_size", cfg.train.batch_size},
                  {"train_size", cfg.train.train_size}};
    j["injection_rates"] = cfg.injection_rates;
    std::vector<std::string> arms;
    for (Arm a : cfg.arms) arms.emplace_back(to_string(a));
    j["arms"] = arms;
    j["seeds"] = cfg.seeds;
    j["eval_steps"] = cfg.eval_steps;
    j["noise_replace_prob"] = cfg.noise_replace_prob;
    return j.dump(2) + "\n";
}

ArmedImages apply_arm(const std::vector<const ImageBuffer*>& images, Arm arm, uint64_t seed,
                      int canvas) {
    if (images.empty()) throw Error(Error::Kind::contract, "apply_arm on an empty pair list");
    ArmedImages out;
    switch (arm) {
        case Arm::vision:
            out.view = images;
            break;
        case Arm::no_vision: {
            out.owned.reserve(images.size());
            for (size_t i = 0; i < images.size(); ++i)
                out.owned.push_back(white_noise_image(canvas, canvas, derive_seed(seed, i)));
            for (const auto& img : out.owned) out.view.push_back(&img);
            break;
        }
        case Arm::shuffled: {
            Rng rng(derive_seed(seed, /*stream=*/0x5FF1u));
            std::vector<int> perm = rng.permutation(static_cast<int>(images.size()));
            out.view.resize(images.size());
            for (size_t i = 0; i < images.size(); ++i)
                out.view[i] = images[static_cast<size_t>(perm[i])];
            break;
        }
    }
    return out;
}

int batch_item_index(uint64_t batch_key, int n_items, long long global_pos) {
    // Epoch permutations are derived on demand, so position -> item is a pure
    // function and training can resume mid-stream.
    thread_local uint64_t cached_key = 0;
    thread_local long long cached_epoch = -1;
    thread_local std::vector<int> perm;
    const long long epoch = global_pos / n_items;
    if (cached_key != batch_key || cached_epoch != epoch || static_cast<int>(perm.size()) != n_items) {
        Rng rng(derive_seed(batch_key, static_cast<uint64_t>(epoch)));
        perm = rng.permutation(n_items);
        cached_key = batch_key;
        cached_epoch = epoch;
    }
    return perm[static_cast<size_t>(global_pos % n_items)];
}

std::string run_id_for(const ExperimentConfig& cfg, Arm arm, double rate, uint64_t seed) {
    std::ostringstream key;
    key << experiment_config_to_json(cfg) << '|' << to_string(arm) << '|' << format_rate(rate)
        << '|' << seed;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(key.str())));
    return std::string(buf).substr(0, 12);
}

namespace {

struct RunCell {
    Arm arm;
    double rate;
    uint64_t seed;
};

// Executes one (arm, rate, seed) cell. Throws only on environmental errors;
// divergence is reported through the record.
RunRecord execute_run(const ExperimentConfig& cfg, const LoadedDataset& ds, const RunCell& cell,
                      const fs::path& runs_dir, std::ostream* log, std::mutex* log_mutex,
                      const RunHooks* hooks) {
    RunRecord rec;
    rec.arm = cell.arm;
    rec.rate = cell.rate;
    rec.seed = cell.seed;
    rec.run_id = run_id_for(cfg, cell.arm, cell.rate, cell.seed);

    const RunPaths paths(runs_dir / rec.run_id);
    auto say = [&](const std::string& msg) {
        if (!log) return;
        std::lock_guard<std::mutex> lock(*log_mutex);
        (*log) << "[" << rec.run_id << " " << to_string(cell.arm) << " rate="
               << format_rate(cell.rate) << " seed=" << cell.seed << "] " << msg << "\n";
        log->flush();
    };

    const std::string config_copy = [&] {
        json j;
        j["experiment"] = json::parse(experiment_config_to_json(cfg));
        j["run"] = {{"arm", to_string(cell.arm)},
                    {"rate", cell.rate},
                    {"seed", cell.seed},
                    {"run_id", rec.run_id}};
        return j.dump(2) + "\n";
    }();

    // completed runs are immutable; a same-id rerun must carry the same config
    if (fs::exists(paths.config)) {
        std::ifstream f(paths.config);
        std::string existing((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
        if (existing != config_copy)
            throw Error(Error::Kind::io,
                        "run id collision: " + paths.dir.string() + " holds a different config");
        if (fs::exists(paths.status)) {
            json st = json::parse(std::ifstream(paths.status));
            if (st.value("state", "") == "completed") {
                rec.rows = parse_metrics_csv(paths.metrics);
                if (fs::exists(paths.last_ckpt))
                    rec.checkpoint_paths.push_back(paths.last_ckpt.string());
                rec.completed = true;
                say("already completed; skipping");
                return rec;
            }
            if (st.value("state", "") == "failed") {
                rec.failed = true;
                rec.failure = st.value("error", "failed");
                say("previously failed; skipping");
                return rec;
            }
        }
    } else {
        fs::create_directories(paths.checkpoints);
        write_file_atomic(paths.config, config_copy);
    }

    // ---- assemble the training set for this rate
    const int base_n = cfg.train.train_size > 0
                           ? std::min<int>(cfg.train.train_size, static_cast<int>(ds.train.size()))
                           : static_cast<int>(ds.train.size());
    std::vector<const DatasetItem*> train_items;
    train_items.reserve(static_cast<size_t>(base_n));
    for (int i = 0; i < base_n; ++i) train_items.push_back(&ds.train[static_cast<size_t>(i)]);
    const int injected = injection_count(cell.rate, base_n);
    if (injected > static_cast<int>(ds.injection_pool.size()))
        throw Error(Error::Kind::partition,
                    "injection rate " + format_rate(cell.rate) + " needs " +
                        std::to_string(injected) + " pool items but only " +
                        std::to_string(ds.injection_pool.size()) + " are materialized");
    for (int i = 0; i < injected; ++i)
        train_items.push_back(&ds.injection_pool[static_cast<size_t>(i)]);
    say("train base " + std::to_string(base_n) + ", injected " + std::to_string(injected) +
        " disambiguating items");

    // injection bookkeeping: exactly `injected` disambiguating items
    {
        int dis = 0;
        for (const auto* item : train_items)
            dis += item->label == AgreementLabel::disambiguating ? 1 : 0;
        if (dis != injected ||
            static_cast<int>(train_items.size()) != base_n + injected)
            throw Error(Error::Kind::contract, "injection bookkeeping check failed");
    }

    // ---- vocabulary frozen from the training split
    std::vector<const TokenList*> caps;
    caps.reserve(train_items.size());
    for (const auto* item : train_items) caps.push_back(&item->tokens);
    const Vocabulary vocab = Vocabulary::from_captions(caps);

    ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = vocab.size();
    if (ds.canvas != 0 && ds.canvas != mcfg.canvas_size)
        throw Error(Error::Kind::config, "dataset canvas " + std::to_string(ds.canvas) +
                                             " does not match model canvas " +
                                             std::to_string(mcfg.canvas_size));
    const uint64_t pair_key = derive_seed(cell.seed, rate_bits(cell.rate));
    mcfg.seed = derive_seed(pair_key, kStreamModel);
    const uint64_t batch_key = derive_seed(pair_key, kStreamBatch);
    const uint64_t augment_key = derive_seed(pair_key, kStreamAugment);

    // ---- arm application (training list; NoVision also covers inference)
    std::vector<const ImageBuffer*> train_imgs_raw, val_imgs_raw, test_imgs_raw;
    for (const auto* item : train_items) train_imgs_raw.push_back(&item->image);
    for (const auto& item : ds.validation) val_imgs_raw.push_back(&item.image);
    for (const auto& item : ds.test_items) test_imgs_raw.push_back(&item.image);

    const ArmedImages train_imgs =
        apply_arm(train_imgs_raw, cell.arm, derive_seed(cell.seed, kStreamArmTrain), mcfg.canvas_size);
    // Shuffled destroys grounding during training only; evaluation probes the
    // model on properly aligned pairs.
    const Arm eval_arm = cell.arm == Arm::shuffled ? Arm::vision : cell.arm;
    const ArmedImages val_imgs =
        apply_arm(val_imgs_raw, eval_arm, derive_seed(cell.seed, kStreamArmVal), mcfg.canvas_size);
    const ArmedImages test_imgs =
        apply_arm(test_imgs_raw, eval_arm, derive_seed(cell.seed, kStreamArmTest), mcfg.canvas_size);

    // ---- model / optimizer, possibly resumed
    NetF net(mcfg);
    AdamState<float> opt = net.fresh_optimizer();
    int start_step = 0;
    rec.rows = parse_metrics_csv(paths.metrics);
    if (!rec.rows.empty() && fs::exists(paths.last_ckpt)) {
        Checkpoint<float> ck = load_checkpoint<float>(paths.last_ckpt.string());
        if (!(ck.config == mcfg))
            throw Error(Error::Kind::checkpoint, "checkpoint config mismatch on resume");
        net.params() = ck.params;
        opt.m = ck.opt_m;
        opt.v = ck.opt_v;
        opt.step = ck.opt_step;
        start_step = static_cast<int>(ck.trained_steps);
        while (!rec.rows.empty() && rec.rows.back().step > start_step) rec.rows.pop_back();
        say("resuming from step " + std::to_string(start_step));
    } else {
        rec.rows.clear();
        write_file_atomic(paths.metrics, "step,loss,macro_f1,rouge_l\n");
        write_file_atomic(paths.status, json{{"state", "running"}, {"last_step", 0}}.dump() + "\n");
    }

    const int T = mcfg.max_caption_len;
    const int B = cfg.train.batch_size;
    const int n_train = static_cast<int>(train_items.size());

    TokenBatch batch;
    batch.batch = B;
    batch.seq_len = T;
    batch.inputs.resize(static_cast<size_t>(B) * T);
    batch.targets.resize(static_cast<size_t>(B) * T);
    batch.images.resize(static_cast<size_t>(B));

    NoiseSpec noise{cfg.noise_replace_prob, augment_key};

    auto evaluate_at = [&](int completed) {
        MetricsRow row;
        row.step = completed;

        // validation loss, weighted by supervised positions per chunk
        double loss_sum = 0;
        long long valid_total = 0;
        TokenBatch vb;
        vb.seq_len = T;
        for (size_t start = 0; start < ds.validation.size(); start += static_cast<size_t>(B)) {
            const size_t end = std::min(ds.validation.size(), start + static_cast<size_t>(B));
            vb.batch = static_cast<int>(end - start);
            vb.inputs.assign(static_cast<size_t>(vb.batch) * T, 0);
            vb.targets.assign(static_cast<size_t>(vb.batch) * T, 0);
            vb.images.clear();
            long long valid = 0;
            for (size_t i = start; i < end; ++i) {
                pack_sequence(vocab.encode(ds.validation[i].tokens), T,
                              vb.inputs.data() + (i - start) * T,
                              vb.targets.data() + (i - start) * T);
                vb.images.push_back(val_imgs.view[i]->pixels.data());
            }
            for (int tgt : vb.targets) valid += tgt != 0 ? 1 : 0;
            loss_sum += net.eval_loss(vb) * static_cast<double>(valid);
            valid_total += valid;
        }
        row.loss = valid_total > 0 ? loss_sum / static_cast<double>(valid_total) : 0.0;

        // hierarchical preference on the test minimal pairs
        const auto preds = score_minimal_pairs(net, vocab, ds.test_pairs, test_imgs.view, 64);
        row.macro_f1 = macro_f1(preds).macro_f1;

        // captioning sanity on a fixed validation prefix
        const int n_rouge = std::min<int>(kRougeEvalItems, static_cast<int>(ds.validation.size()));
        double rouge_sum = 0;
        for (int i = 0; i < n_rouge; ++i) {
            const std::vector<int> hyp =
                net.generate_caption(*val_imgs.view[static_cast<size_t>(i)], kRougeBeam);
            rouge_sum += rouge_l_f1(vocab.decode(hyp), ds.validation[static_cast<size_t>(i)].tokens);
        }
        row.rouge_l = n_rouge > 0 ? rouge_sum / n_rouge : 0.0;
        return row;
    };

    try {
        for (int step = start_step; step < cfg.train.hyper.max_steps; ++step) {
            for (int j = 0; j < B; ++j) {
                const long long g = static_cast<long long>(step) * B + j;
                const int idx = batch_item_index(batch_key, n_train, g);
                const DatasetItem* item = train_items[static_cast<size_t>(idx)];
                pack_sequence(vocab.encode(item->tokens), T,
                              batch.inputs.data() + static_cast<size_t>(j) * T,
                              batch.targets.data() + static_cast<size_t>(j) * T);
                batch.images[static_cast<size_t>(j)] =
                    train_imgs.view[static_cast<size_t>(idx)]->pixels.data();
            }
            net.train_step(batch, opt, cfg.train.hyper, step, noise);

            const int completed = step + 1;
            if (std::find(cfg.eval_steps.begin(), cfg.eval_steps.end(), completed) !=
                cfg.eval_steps.end()) {
                const MetricsRow row = evaluate_at(completed);
                rec.rows.push_back(row);

                std::string csv = "step,loss,macro_f1,rouge_l\n";
                for (const auto& r : rec.rows) csv += metrics_row_line(r);
                write_file_atomic(paths.metrics, csv);

                Checkpoint<float> ck;
                ck.config = mcfg;
                ck.params = net.params();
                ck.opt_m = opt.m;
                ck.opt_v = opt.v;
                ck.opt_step = opt.step;
                ck.trained_steps = completed;
                ck.rng_state = {cell.seed, pair_key, batch_key, augment_key};
                const fs::path tmp = paths.last_ckpt.string() + ".tmp";
                save_checkpoint(ck, net.manifest(), tmp.string());
                fs::rename(tmp, paths.last_ckpt);
                write_file_atomic(paths.status,
                                  json{{"state", "running"}, {"last_step", completed}}.dump() +
                                      "\n");
                char msg[160];
                std::snprintf(msg, sizeof(msg),
                              "step %d: loss %.4f, macro_f1 %.2f, rouge_l %.3f", completed,
                              row.loss, row.macro_f1, row.rouge_l);
                say(msg);
                if (hooks && hooks->interrupt_after_step == completed) {
                    say("interrupted (test hook)");
                    return rec;
                }
            }
        }
        rec.checkpoint_paths.push_back(paths.last_ckpt.string());
        write_file_atomic(paths.status, json{{"state", "completed"}}.dump() + "\n");
        rec.completed = true;
        say("completed");
    } catch (const Error& e) {
        if (e.kind() != Error::Kind::diverged) throw;
        rec.failed = true;
        rec.failure = e.what();
        write_file_atomic(paths.status,
                          json{{"state", "failed"}, {"error", rec.failure}}.dump() + "\n");
        say(std::string("failed: ") + e.what());
    }
    return rec;
}

}  // namespace

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const LoadedDataset& dataset,
                                      const fs::path& runs_dir, int jobs, std::ostream* log,
                                      const RunHooks* hooks) {
    cfg.validate();
    if (dataset.train.empty() || dataset.validation.empty() || dataset.test_pairs.empty())
        throw Error(Error::Kind::config, "dataset must provide train, validation and test splits");
    fs::create_directories(runs_dir);

    std::vector<RunCell> cells;
    for (Arm arm : cfg.arms)
        for (double rate : cfg.injection_rates)
            for (uint64_t seed : cfg.seeds) cells.push_back({arm, rate, seed});

    std::vector<RunRecord> records(cells.size());
    std::mutex log_mutex;
    std::atomic<size_t> next{0};
    std::atomic<bool> aborted{false};
    std::string abort_reason;
    std::mutex abort_mutex;

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size() || aborted.load()) return;
            try {
                records[i] = execute_run(cfg, dataset, cells[i], runs_dir, log, &log_mutex, hooks);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(abort_mutex);
                if (!aborted.exchange(true)) abort_reason = e.what();
                return;
            }
        }
    };

    const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (aborted.load()) throw Error(Error::Kind::io, "experiment aborted: " + abort_reason);
    return records;
}

AggregateTable aggregate(const std::vector<RunRecord>& records) {
    AggregateTable table;
    std::map<std::pair<std::pair<int, double>, int>, std::vector<const MetricsRow*>> groups;
    std::set<std::vector<int>> grids;

    for (const auto& rec : records) {
        if (rec.failed) {
            ++table.failed_runs;
            continue;
        }
        std::vector<int> grid;
        for (const auto& row : rec.rows) {
            grid.push_back(row.step);
            groups[{{static_cast<int>(rec.arm), rec.rate}, row.step}].push_back(&row);
        }
        grids.insert(grid);
    }
    if (grids.size() > 1)
        throw Error(Error::Kind::evaluation, "runs disagree on their eval step grids");

    for (const auto& [key, rows] : groups) {
        AggregateCell cell;
        cell.arm = static_cast<Arm>(key.first.first);
        cell.rate = key.first.second;
        cell.step = key.second;
        cell.n_seeds = static_cast<int>(rows.size());
        double f1_min = rows.front()->macro_f1, f1_max = rows.front()->macro_f1;
        for (const auto* r : rows) {
            cell.mean_f1 += r->macro_f1;
            cell.mean_loss += r->loss;
            cell.mean_rouge += r->rouge_l;
            f1_min = std::min(f1_min, r->macro_f1);
            f1_max = std::max(f1_max, r->macro_f1);
        }
        cell.mean_f1 /= cell.n_seeds;
        cell.mean_loss /= cell.n_seeds;
        cell.mean_rouge /= cell.n_seeds;
        cell.range_f1 = f1_max - f1_min;
        table.cells.push_back(cell);
    }

    // Delta = mean(Vision) - mean(NoVision) at matching (rate, step)
    for (const auto& v : table.cells) {
        if (v.arm != Arm::vision) continue;
        for (const auto& n : table.cells) {
            if (n.arm != Arm::no_vision || n.rate != v.rate || n.step != v.step) continue;
            table.deltas.push_back({v.rate, v.step, v.mean_f1 - n.mean_f1});
        }
    }
    return table;
}

std::vector<RunRecord> load_run_records(const fs::path& runs_dir) {
    std::vector<RunRecord> records;
    if (!fs::exists(runs_dir)) return records;
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(runs_dir))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());

    for (const auto& dir : dirs) {
        const RunPaths paths(dir);
        if (!fs::exists(paths.config) || !fs::exists(paths.status)) continue;
        json cfg = json::parse(std::ifstream(paths.config));
        json st = json::parse(std::ifstream(paths.status));
        RunRecord rec;
        rec.run_id = dir.filename().string();
        rec.arm = arm_from_string(cfg.at("run").at("arm").get<std::string>());
        rec.rate = cfg.at("run").at("rate").get<double>();
        rec.seed = cfg.at("run").at("seed").get<uint64_t>();
        const std::string state = st.value("state", "");
        if (state == "failed") {
            rec.failed = true;
            rec.failure = st.value("error", "failed");
        } else if (state == "completed") {
            rec.completed = true;
        } else {
            continue;  // still running / partial
        }
        rec.rows = parse_metrics_csv(paths.metrics);
        if (fs::exists(paths.last_ckpt)) rec.checkpoint_paths.push_back(paths.last_ckpt.string());
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace poslab
