#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace poslab {

struct GenOptions {
    std::string workspace;
    std::string name = "artificial";
    uint64_t seed = 1;
    int canvas = 64;
    int train = 15000;
    int validation = 1000;
    int test = 5000;
    double rate = 0.01;
    double max_rate = 0.02;
    double margin = 0.10;
    double small_fraction = 0.25;
    bool force = false;
};

struct IngestOptions {
    std::string workspace;
    std::string corpus;
    std::string name = "natural";
    uint64_t seed = 1;
    int train = 0;  // 0 = all remaining ambiguous after validation
    int validation = 0;
    int test = 0;  // 0 = all disambiguating
    double rate = 0.01;
    bool force = false;
};

struct TrainOptions {
    std::string workspace;
    std::string config_file;  // when set, flags below are ignored
    std::string dataset = "artificial";
    std::vector<double> rates = {0.0, 0.001, 0.005, 0.01};
    std::vector<std::string> arms = {"vision", "novision"};
    std::vector<uint64_t> seeds = {1, 2};
    std::vector<int> eval_steps = {100, 500, 1000};
    int max_steps = 1000;
    int batch_size = 64;
    double lr = 1e-4;
    double noise_replace_prob = 0.2;
    int train_size = 0;
    int jobs = 1;
    int d_model = 128;
    int n_heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int patch_size = 8;
    int max_caption_len = 16;
    int canvas = 64;
};

struct ReportOptions {
    std::string workspace;
};

int cmd_gen(const GenOptions& opt, std::ostream& out, std::ostream& err);
int cmd_ingest(const IngestOptions& opt, std::ostream& out, std::ostream& err);
int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err);
int cmd_report(const ReportOptions& opt, std::ostream& out, std::ostream& err);

// Gradient and metric self-tests against independent oracles; returns 0 when
// every check passes.
int cmd_check(std::ostream& out);

}  // namespace poslab
