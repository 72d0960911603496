#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "poslab/dataset.hpp"
#include "poslab/model.hpp"

namespace poslab {

enum class Arm { vision, no_vision, shuffled };

const char* to_string(Arm arm);
Arm arm_from_string(const std::string& s);

struct TrainSettings {
    TrainHyper hyper;        // AdamW + linear-decay schedule
    int batch_size = 64;
    int train_size = 0;      // 0 = full train base, else a prefix of it

    bool operator==(const TrainSettings&) const = default;
};

struct ExperimentConfig {
    std::string dataset;
    ModelConfig model;  // vocab_size/seed are derived per run, not configured
    TrainSettings train;
    std::vector<double> injection_rates;
    std::vector<Arm> arms;
    std::vector<uint64_t> seeds;
    std::vector<int> eval_steps;
    double noise_replace_prob = 0.2;

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

// Strict (unknown keys are errors) JSON round trip for the config file.
ExperimentConfig experiment_config_from_json(const std::string& text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

struct MetricsRow {
    int step = 0;
    double loss = 0.0;
    double macro_f1 = 0.0;
    double rouge_l = 0.0;
};

struct RunRecord {
    Arm arm = Arm::vision;
    double rate = 0.0;
    uint64_t seed = 0;
    std::string run_id;
    std::vector<MetricsRow> rows;
    std::vector<std::string> checkpoint_paths;
    bool completed = false;
    bool failed = false;
    std::string failure;
};

// Test hook: abandon each run right after the named eval step has been
// persisted, as if the process had been killed there. 0 disables it.
struct RunHooks {
    int interrupt_after_step = 0;
};

// Images for one pair list under an arm. Vision passes the originals
// through; NoVision owns per-item seeded noise; Shuffled is a seeded uniform
// permutation of the originals (captions stay put).
struct ArmedImages {
    std::vector<const ImageBuffer*> view;
    std::vector<ImageBuffer> owned;
};

ArmedImages apply_arm(const std::vector<const ImageBuffer*>& images, Arm arm, uint64_t seed,
                      int canvas);

// Deterministic per-epoch shuffled batch order: item index for global
// position g = step * batch + j. Shared across arms at equal (rate, seed).
int batch_item_index(uint64_t batch_key, int n_items, long long global_pos);

// Validation items used for the ROUGE-L sanity metric and the beam width,
// fixed by protocol.
constexpr int kRougeEvalItems = 200;
constexpr int kRougeBeam = 4;

// Trains and evaluates every (arm x rate x seed) cell, persisting metrics and
// checkpoints incrementally under runs_dir/<run_id>/; completed runs are
// skipped, partial runs resume from their last checkpoint. Jobs > 1 runs
// cells in parallel worker threads.
std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const LoadedDataset& dataset,
                                      const std::filesystem::path& runs_dir, int jobs = 1,
                                      std::ostream* log = nullptr,
                                      const RunHooks* hooks = nullptr);

std::string run_id_for(const ExperimentConfig& cfg, Arm arm, double rate, uint64_t seed);

struct AggregateCell {
    Arm arm;
    double rate = 0.0;
    int step = 0;
    double mean_f1 = 0.0;
    double range_f1 = 0.0;  // max - min over seeds
    double mean_loss = 0.0;
    double mean_rouge = 0.0;
    int n_seeds = 0;
};

struct DeltaCell {
    double rate = 0.0;
    int step = 0;
    double delta_f1 = 0.0;  // mean(Vision) - mean(NoVision)
};

struct AggregateTable {
    std::vector<AggregateCell> cells;
    std::vector<DeltaCell> deltas;
    int failed_runs = 0;
};

AggregateTable aggregate(const std::vector<RunRecord>& records);

// Reads RunRecords back from a runs directory (used by report/resume paths).
std::vector<RunRecord> load_run_records(const std::filesystem::path& runs_dir);

}  // namespace poslab
