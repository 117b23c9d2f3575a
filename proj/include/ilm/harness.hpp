#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/metrics.hpp"
#include "ilm/model.hpp"
#include "ilm/train.hpp"

namespace ilm::harness {

struct GridPoint {
    float learning_rate = 1e-3f;
    int64_t n_steps = 1000;
    int n_envs = 0; // 0: use every training environment in the data dir
};

struct PretrainConfig {
    bool enabled = false;
    int64_t n_steps = 1000;
    float learning_rate = 1e-3f;
    int n_sentences = 3000;
};

// One experiment recipe: corpus + model + training grid. Parsed from a JSON
// config file; ILM_MASTER_SEED overrides the seed field.
struct ExperimentConfig {
    std::string experiment; // structured_noise | correlation | ood | heads_dynamics
    uint64_t master_seed = 0;

    // corpus
    int n_content = 48;
    int n_pairs = 0;
    int n_markup = 0;
    int n_contexts = 0;
    int n_train_sentences = 1500;
    int n_test_sentences = 400;
    int seq_len = 12;
    double markup_rate = 0.4;
    double pair_bias = 0.9;
    double p_split = 0.8;
    double overlap = 0.6;
    int n_domains = 0;      // ood: max grid n_envs + 1 (held-out)
    int n_domain_sets = 1;  // ood: independent domain draws, cycled by restart
    bool equal_tokens = false; // structured_noise: size Env-B by token count

    EncoderConfig model; // vocab_size/seed filled per run

    // training base
    int batch_size = 8;
    double mask_rate = 0.15;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    int64_t checkpoint_every = 0;
    int phi_update_period = 1;

    // grid
    std::vector<float> learning_rates;
    std::vector<int64_t> steps_grid;
    std::vector<int> n_envs_grid; // ood only
    int n_restarts = 5;

    PretrainConfig pretrain;
    double eval_mask_rate = 0.15;

    static ExperimentConfig load(const std::string& path);
};

struct RunSpec {
    int grid_index = 0;
    GridPoint grid;
    std::string variant; // "ilm" | "elm"
    int restart = 0;
    uint64_t seed = 0; // shared by the ilm/elm pair
    std::string config_hash;
    std::string run_dir; // relative to the output dir
};

std::vector<GridPoint> expand_grid(const ExperimentConfig& cfg);
std::string grid_point_hash(const ExperimentConfig& cfg, const GridPoint& gp);
// Matched ilm/elm entries for every grid point and restart. heads_dynamics
// runs ilm only (there is no paired comparison).
std::vector<RunSpec> build_manifest(const ExperimentConfig& cfg);

// Writes vocab + environment JSON files under <out_dir>/data. Idempotent:
// identical bytes for a fixed config.
void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir);

// Executes one run (pretraining its warm-start checkpoint first if needed)
// and writes checkpoint + trainlog + metadata under the run directory.
// Partial outputs are removed if the run aborts.
void cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, int grid_index,
               const std::string& variant, int restart);

// Per-run metric rows (perplexity / entropy bias, per experiment kind).
std::vector<MetricsRecord> eval_run(const ExperimentConfig& cfg, const std::string& out_dir,
                                    const RunSpec& run);
// Evaluates every manifest entry in order into <out_dir>/metrics.csv.
void cmd_eval_all(const ExperimentConfig& cfg, const std::string& out_dir);

// Pairs metrics rows, writes report/report.json + per-panel CSVs + SVGs.
void cmd_compare(const ExperimentConfig& cfg, const std::string& out_dir);

// heads_dynamics: per-run D_in/D_out series over the checkpoint sequence,
// aggregated series with bootstrap CIs, and MDS coordinates of the final
// checkpoint of restart 0.
void cmd_heads(const ExperimentConfig& cfg, const std::string& out_dir);

// Explicit-series form: one checkpoint per point, arbitrary grouping.
void cmd_heads_files(const std::vector<std::string>& checkpoint_paths,
                     const std::vector<int>& grouping, const std::string& series_csv,
                     const std::string& mds_csv);

// gen-data + pretrains + all runs (jobs-way parallel) + eval + report.
// Returns 0 on success, 2 if any run failed.
int run_all(const ExperimentConfig& cfg, const std::string& out_dir, int jobs);

// Derived seeds (shared by the CLI and tests).
uint64_t data_seed(const ExperimentConfig& cfg);
uint64_t eval_seed(const ExperimentConfig& cfg);

} // namespace ilm::harness
