#pragma once

#include "editlab/iterate.hpp"
#include "editlab/train.hpp"

#include <string>

namespace editlab {

// Experiment runner behind the CLI: resolved run configuration, the plain-text
// config format, run-directory layout (config.resolved, checkpoints/, traces/,
// reports/), and the per-command entry points.

struct RunConfig {
    WorldSpec world;

    ModelConfig model;

    PretrainConfig pretrain;

    struct Edit {
        EditAlgo algo = EditAlgo::Memit;
        std::vector<int> causal_layers = {1, 2};
        int m = 50;
        std::vector<std::uint64_t> trial_seeds = {101, 102, 103};
        int n_prefixes = 5;
        double lambda_c = 100.0;
        double alpha_lambda = 1e-6;
        double encore_lambda_p = 0.05;
        double encore_lambda_n = 0.1;
        int cov_sample_sequences = 128;
        int preserved_cap = 512;
    } edit;

    struct Optimize {
        int steps = 100;
        double step_size = 0.05;
        double kl_weight = 0.0625;
        double neighbor_weight = 0.0;
        bool neighbor_prefixed = false;
        std::string early_stop = "none";  // none | mpes
        double clamp_norm = 4.0;
        int workers = 1;
    } optimize;

    struct Stopping {
        std::string kind = "gap_below_eps";
        double epsilon = 1.0;
        int max_iterations = 10;
    } stopping;

    struct Run {
        std::string output_dir = "runs/out";
        std::string checkpoint;  // empty -> <output_dir>/checkpoints/pretrained.ckpt
        bool pretrain_if_missing = false;
        std::string mode = "full";  // full | spread_only
        double collapse_factor = 100.0;
        bool parallel_trials = false;
        std::string snapshot_retention = "none";  // none | last | all
        bool dump_targets = false;
        bool dump_solver_state = false;
    } run;

    void validate() const;  // throws ConfigError on inconsistent references

    // derived pieces
    SpreadConfig spread_config() const;
    OptimizeSpec optimize_spec() const;
    StoppingPolicy stopping_policy() const;
    std::string checkpoint_path() const;
};

// plain-text config format ([section] / key = value / arrays), lossless
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string config_to_text(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::string& path);

/// Applies EDITLAB_OUT_ROOT to relative output dirs.
std::string resolve_output_dir(const std::string& dir);

struct GenDataResult {
    int facts = 0;
    int probes = 0;
    int vocab = 0;
    std::vector<int> eligible_per_trial;
};
GenDataResult cmd_gen_data(const RunConfig& cfg);

struct PretrainOutcome {
    double final_nll = 0;
    double recall = 0;
    std::string checkpoint;
};
PretrainOutcome cmd_pretrain(const RunConfig& cfg);

struct TrialOutcome {
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    int chosen_k = 0;
    bool stopped_early = false;
    int requests_run = 0;
    IterationRecord chosen;
};

struct RunOutcome {
    std::vector<TrialOutcome> trials;
    int n_failed = 0;
    std::string output_dir;
};
RunOutcome cmd_run(const RunConfig& cfg);

MetricsReport cmd_eval(const RunConfig& cfg);

struct SweepOutcome {
    struct Row {
        std::uint64_t trial_seed = 0;
        std::string policy;
        int chosen_k = 0;
        double score_acc = 0;
        double score_succ = 0;
        double gap = 0;
    };
    std::vector<Row> rows;
    std::string table_path;
};
SweepOutcome cmd_sweep_stopping(const RunConfig& cfg);

/// Re-renders the summary table of an existing run directory.
std::string cmd_report(const std::string& run_dir);

// deterministic CSV formatting shared by reports and tests
std::string metrics_csv_header();
std::string metrics_csv_row(int k, const MetricsReport& m, double p_bar, double p_hat, double gap,
                            bool baseline = false);

}  // namespace editlab
