#include "poslab/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "poslab/dataset.hpp"
#include "poslab/eval.hpp"
#include "poslab/protocol.hpp"
#include "poslab/report.hpp"
#include "poslab/rng.hpp"
#include "poslab/workspace.hpp"

namespace poslab {
namespace {

namespace fs = std::filesystem;

fs::path resolve_dataset_path(const WorkspaceLayout& ws, const std::string& name_or_path) {
    const fs::path p(name_or_path);
    if (p.is_absolute() || name_or_path.find('/') != std::string::npos) return p;
    return ws.datasets() / name_or_path;
}

}  // namespace

int cmd_gen(const GenOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        const WorkspaceLayout ws = resolve_workspace(opt.workspace);
        ws.ensure();

        SplitSizes sizes{opt.train, opt.validation, opt.test};
        SplitBundle bundle = build_splits(opt.seed, sizes, opt.rate);

        ArtificialWriteOptions wo;
        wo.render.canvas_size = opt.canvas;
        wo.render.margin_fraction = opt.margin;
        wo.render.small_object_fraction = opt.small_fraction;
        wo.max_rate = opt.max_rate;
        wo.force = opt.force;

        const fs::path root = ws.datasets() / opt.name;
        const DatasetCounts counts = write_artificial_dataset(root, bundle, sizes, wo);

        out << "specs " << counts.total << " | ambiguous " << counts.ambiguous
            << " | disambiguating " << counts.disambiguating << "\n";
        out << "split " << sizes.train << "/" << sizes.validation << "/" << sizes.test
            << " | injected " << bundle.injected_count << " (rate " << bundle.injection_rate
            << ")\n";
        out << "dataset written to " << root.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "gen: " << e.what() << "\n";
        return 1;
    }
}

int cmd_ingest(const IngestOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        const WorkspaceLayout ws = resolve_workspace(opt.workspace);
        ws.ensure();

        CorpusLoad load = load_annotated_corpus(opt.corpus);
        for (const auto& rej : load.rejections)
            out << "rejected " << (rej.id.empty() ? "<no id>" : rej.id) << ": " << rej.reason
                << "\n";

        auto [ambiguous, disambiguating] = partition_corpus(load.records);
        out << "records " << load.records.size() << " valid, " << load.rejections.size()
            << " rejected | ambiguous " << ambiguous.size() << " | disambiguating "
            << disambiguating.size() << "\n";

        SplitSizes sizes;
        sizes.validation = opt.validation;
        sizes.train = opt.train > 0 ? opt.train
                                    : static_cast<int>(ambiguous.size()) - opt.validation;
        sizes.test = opt.test > 0 ? opt.test : static_cast<int>(disambiguating.size());

        const fs::path root = ws.datasets() / opt.name;
        write_ingested_dataset(root, load.records, opt.seed, sizes, opt.rate, opt.force);
        out << "split " << sizes.train << "/" << sizes.validation << "/" << sizes.test << "\n";
        out << "dataset written to " << root.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "ingest: " << e.what() << "\n";
        return 1;
    }
}

int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        const WorkspaceLayout ws = resolve_workspace(opt.workspace);
        ws.ensure();
        WorkspaceLock lock(ws);

        ExperimentConfig cfg;
        if (!opt.config_file.empty()) {
            std::ifstream f(opt.config_file);
            if (!f) throw Error(Error::Kind::io, "cannot open config: " + opt.config_file);
            std::string text((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
            cfg = experiment_config_from_json(text);
        } else {
            cfg.dataset = opt.dataset;
            cfg.model.d_model = opt.d_model;
            cfg.model.n_heads = opt.n_heads;
            cfg.model.encoder_layers = opt.encoder_layers;
            cfg.model.decoder_layers = opt.decoder_layers;
            cfg.model.patch_size = opt.patch_size;
            cfg.model.max_caption_len = opt.max_caption_len;
            cfg.model.canvas_size = opt.canvas;
            cfg.train.hyper.lr = opt.lr;
            cfg.train.hyper.max_steps = opt.max_steps;
            cfg.train.batch_size = opt.batch_size;
            cfg.train.train_size = opt.train_size;
            cfg.injection_rates = opt.rates;
            cfg.arms.clear();
            for (const auto& a : opt.arms) cfg.arms.push_back(arm_from_string(a));
            cfg.seeds = opt.seeds;
            cfg.eval_steps = opt.eval_steps;
            cfg.noise_replace_prob = opt.noise_replace_prob;
            cfg.validate();
        }

        const fs::path dataset_path = resolve_dataset_path(ws, cfg.dataset);
        out << "loading dataset " << dataset_path.string() << "\n";
        const LoadedDataset ds = load_dataset(dataset_path);

        const auto records = run_experiment(cfg, ds, ws.runs(), opt.jobs, &out);
        size_t completed = 0;
        for (const auto& rec : records) completed += rec.completed ? 1 : 0;
        out << completed << "/" << records.size() << " runs completed\n";
        return completed == records.size() ? 0 : 2;
    } catch (const std::exception& e) {
        err << "train: " << e.what() << "\n";
        return 1;
    }
}

int cmd_report(const ReportOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        const WorkspaceLayout ws = resolve_workspace(opt.workspace);
        const auto records = load_run_records(ws.runs());
        if (records.empty())
            throw Error(Error::Kind::evaluation, "no completed runs under " + ws.runs().string());

        const AggregateTable table = aggregate(records);
        write_reports(table, ws.reports());
        out << summary_csv(table);
        if (table.failed_runs > 0)
            out << "# excluded " << table.failed_runs << " failed run(s)\n";
        out << "reports written to " << ws.reports().string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "report: " << e.what() << "\n";
        return 1;
    }
}

// ---------------------------------------------------------------------------
// check: self-tests against independent oracles

namespace {

bool check_line(std::ostream& out, const std::string& name, bool ok, const std::string& detail) {
    out << (ok ? "[ok]   " : "[FAIL] ") << name;
    if (!detail.empty()) out << " (" << detail << ")";
    out << "\n";
    return ok;
}

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.patch_size = 8;
    cfg.canvas_size = 16;
    cfg.max_caption_len = 6;
    cfg.seed = 7;
    return cfg;
}

TokenBatch micro_batch(const ModelConfig& cfg, const std::vector<ImageBuffer>& imgs) {
    TokenBatch b;
    b.batch = static_cast<int>(imgs.size());
    b.seq_len = cfg.max_caption_len;
    b.inputs.resize(static_cast<size_t>(b.batch) * b.seq_len);
    b.targets.resize(b.inputs.size());
    Rng rng(3);
    for (int i = 0; i < b.batch; ++i) {
        std::vector<int> ids;
        const int len = 3 + static_cast<int>(rng.below(2));
        for (int k = 0; k < len; ++k)
            ids.push_back(4 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size - 4))));
        pack_sequence(ids, b.seq_len, b.inputs.data() + static_cast<size_t>(i) * b.seq_len,
                      b.targets.data() + static_cast<size_t>(i) * b.seq_len);
        b.images.push_back(imgs[static_cast<size_t>(i)].pixels.data());
    }
    return b;
}

}  // namespace

int cmd_check(std::ostream& out) {
    bool all_ok = true;

    // finite-difference gradient check, 64-bit mode
    {
        const ModelConfig cfg = micro_config();
        NetD net(cfg);
        std::vector<ImageBuffer> imgs;
        for (int i = 0; i < 2; ++i)
            imgs.push_back(white_noise_image(cfg.canvas_size, cfg.canvas_size, 11 + i));
        const TokenBatch batch = micro_batch(cfg, imgs);

        net.loss_and_grad(batch);
        const std::vector<double> analytic(net.grads().begin(), net.grads().end());

        Rng pick(17);
        double worst = 0.0;
        const double h = 1e-3;
        for (int k = 0; k < 25; ++k) {
            const size_t idx = static_cast<size_t>(pick.below(net.param_count()));
            const double keep = net.params()[idx];
            net.params()[idx] = keep + h;
            const double up = net.eval_loss(batch);
            net.params()[idx] = keep - h;
            const double down = net.eval_loss(batch);
            net.params()[idx] = keep;
            const double fd = (up - down) / (2 * h);
            const double err =
                std::abs(fd - analytic[idx]) / std::max(1e-6, std::abs(fd) + std::abs(analytic[idx]));
            worst = std::max(worst, err);
        }
        all_ok &= check_line(out, "gradient vs central finite differences", worst < 1e-4,
                             "worst rel err " + std::to_string(worst));
    }

    // softmax normalization and prefix-by-prefix logprob oracle
    {
        const ModelConfig cfg = micro_config();
        NetD net(cfg);
        const ImageBuffer img = white_noise_image(cfg.canvas_size, cfg.canvas_size, 5);
        const std::vector<int> caption = {4, 7, 9};

        const double lp = net.caption_logprob(img, caption);
        const auto probs = net.last_probs();
        double worst_norm = 0.0;
        for (int t = 0; t < cfg.max_caption_len; ++t) {
            double sum = 0;
            for (int v = 0; v < cfg.vocab_size; ++v)
                sum += probs[static_cast<size_t>(t) * cfg.vocab_size + v];
            worst_norm = std::max(worst_norm, std::abs(sum - 1.0));
        }
        all_ok &= check_line(out, "per-position softmax normalization", worst_norm < 1e-6,
                             "worst |sum-1| " + std::to_string(worst_norm));

        // the oracle re-runs the forward per prefix and reads one conditional
        double oracle = 0.0;
        std::vector<int> target = caption;
        target.push_back(2);  // EOS
        for (size_t t = 0; t < target.size(); ++t) {
            const std::vector<int> prefix(caption.begin(), caption.begin() + static_cast<long>(t));
            net.caption_logprob(img, prefix);
            const auto p = net.last_probs();
            oracle += std::log(p[t * static_cast<size_t>(cfg.vocab_size) +
                                 static_cast<size_t>(target[t])]);
        }
        all_ok &= check_line(out, "caption logprob vs prefix-by-prefix oracle",
                             std::abs(oracle - lp) < 1e-6,
                             "delta " + std::to_string(std::abs(oracle - lp)));
    }

    // macro-F1 hand case and brute-force spot check
    {
        auto mk = [](Number gold, Number pred) {
            PairPrediction p;
            p.gold_number = gold;
            p.predicted_number = pred;
            return p;
        };
        const Number S = Number::singular, P = Number::plural;
        const std::vector<PairPrediction> hand = {mk(S, S), mk(S, S), mk(P, P), mk(P, S)};
        const double got = macro_f1(hand).macro_f1;
        all_ok &= check_line(out, "macro-F1 hand case (S,S,P,P)/(S,S,P,S) = 73.33",
                             std::abs(got - 73.0 - 1.0 / 3.0) < 1e-9,
                             "got " + std::to_string(got));

        Rng rng(29);
        bool match = true;
        for (int trial = 0; trial < 200 && match; ++trial) {
            std::vector<PairPrediction> preds;
            const int n = 1 + static_cast<int>(rng.below(40));
            for (int i = 0; i < n; ++i)
                preds.push_back(mk(rng.below(2) ? S : P, rng.below(2) ? S : P));
            // explicit TP/FP/FN counting
            double f1s[2];
            for (int cls = 0; cls < 2; ++cls) {
                const Number c = cls == 0 ? S : P;
                int tp = 0, fp = 0, fn = 0;
                for (const auto& p : preds) {
                    tp += p.gold_number == c && p.predicted_number == c;
                    fp += p.gold_number != c && p.predicted_number == c;
                    fn += p.gold_number == c && p.predicted_number != c;
                }
                const double pr = tp + fp ? double(tp) / (tp + fp) : 0.0;
                const double rc = tp + fn ? double(tp) / (tp + fn) : 0.0;
                f1s[cls] = pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0.0;
            }
            const double lib = macro_f1(preds).macro_f1;
            const double ora = 100.0 * 0.5 * (f1s[0] + f1s[1]);
            match = std::abs(lib - ora) == 0.0;
            if (!match)
                out << "  trial " << trial << ": lib " << lib << " oracle " << ora << " diff "
                    << (lib - ora) << "\n";
        }
        all_ok &= check_line(out, "macro-F1 vs brute-force counting (200 random sets)", match, "");
    }

    // ROUGE-L hand case and DP oracle spot check
    {
        const double got = rouge_l_f1({"a", "c"}, {"a", "b", "c"});
        all_ok &= check_line(out, "ROUGE-L hand case (\"a c\", \"a b c\") = 0.8",
                             std::abs(got - 0.8) < 1e-12, "got " + std::to_string(got));

        Rng rng(31);
        double worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            auto rand_seq = [&](int max_len) {
                TokenList s;
                const int n = static_cast<int>(rng.below(static_cast<uint64_t>(max_len + 1)));
                for (int i = 0; i < n; ++i) s.push_back(std::string(1, char('a' + rng.below(4))));
                return s;
            };
            const TokenList h = rand_seq(12), r = rand_seq(12);
            // full-table DP oracle
            std::vector<std::vector<int>> dp(h.size() + 1, std::vector<int>(r.size() + 1, 0));
            for (size_t i = 1; i <= h.size(); ++i)
                for (size_t j = 1; j <= r.size(); ++j)
                    dp[i][j] = h[i - 1] == r[j - 1] ? dp[i - 1][j - 1] + 1
                                                    : std::max(dp[i - 1][j], dp[i][j - 1]);
            const int lcs = dp[h.size()][r.size()];
            double expect = 0.0;
            if (lcs > 0 && !h.empty() && !r.empty()) {
                const double p = double(lcs) / h.size(), rr = double(lcs) / r.size();
                expect = 2 * p * rr / (p + rr);
            }
            worst = std::max(worst, std::abs(rouge_l_f1(h, r) - expect));
        }
        all_ok &= check_line(out, "ROUGE-L vs quadratic-DP oracle (200 random pairs)",
                             worst < 1e-9, "worst delta " + std::to_string(worst));
    }

    out << (all_ok ? "all checks passed\n" : "CHECK FAILURES PRESENT\n");
    return all_ok ? 0 : 1;
}

}  // namespace poslab
