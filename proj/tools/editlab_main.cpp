// editlab CLI: dataset generation, pretraining, editing runs, evaluation,
// stopping-criteria sweeps and report emission. Values come from a config
// file (--config); command-line flags override file values.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
// 5 partial trial failure.

#include "editlab/runner.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>

namespace {

using namespace editlab;

struct Overrides {
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::string> algo;
    std::optional<std::string> mode;
    std::optional<std::string> stopping_kind;
    std::optional<std::string> early_stop;
    std::optional<std::string> checkpoint;
    std::optional<std::string> retention;
    std::optional<int> m;
    std::optional<int> max_iterations;
    std::optional<int> steps;
    std::optional<int> epochs;
    std::optional<int> n_prefixes;
    std::optional<int> workers;
    std::optional<double> epsilon;
    std::optional<double> neighbor_weight;
    std::optional<double> kl_weight;
    std::optional<double> step_size;
    std::optional<double> lambda_c;
    std::optional<double> learning_rate;
    std::optional<std::vector<std::uint64_t>> trial_seeds;
    std::optional<std::vector<int>> causal_layers;
    std::optional<std::uint64_t> world_seed;
    bool neighbor_assist = false;
    bool neighbor_prefixed = false;
    bool pretrain_if_missing = false;
    bool parallel_trials = false;
    bool dump_targets = false;
    bool dump_solver_state = false;
};

void add_options(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config, "config file (documented schema, see README)");
    cmd->add_option("-o,--out", o.out, "output/run directory")
        ->envname("EDITLAB_OUT");
    cmd->add_option("--algo", o.algo,
                    "editing algorithm: memit|pmet|alphaedit|rome|r-rome|emmet|encore");
    cmd->add_option("--mode", o.mode, "iteration mode: full|spread_only");
    cmd->add_option("--stopping", o.stopping_kind,
                    "gap_below_eps|monotonic_gap|consecutive_spread_gap");
    cmd->add_option("--early-stop", o.early_stop, "delta search early stopping: none|mpes");
    cmd->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint path");
    cmd->add_option("--retention", o.retention, "snapshot retention: none|last|all");
    cmd->add_option("-m,--edits", o.m, "edits per batch");
    cmd->add_option("--max-iterations", o.max_iterations, "iteration cap");
    cmd->add_option("--steps", o.steps, "delta-search gradient steps");
    cmd->add_option("--epochs", o.epochs, "pretraining epochs");
    cmd->add_option("--n-prefixes", o.n_prefixes, "random prefixes per edit");
    cmd->add_option("--workers", o.workers, "delta-search worker threads");
    cmd->add_option("--epsilon", o.epsilon, "stopping threshold");
    cmd->add_option("--neighbor-weight", o.neighbor_weight, "neighbor loss weight");
    cmd->add_option("--kl-weight", o.kl_weight, "KL anchor weight");
    cmd->add_option("--step-size", o.step_size, "delta-search step size");
    cmd->add_option("--lambda-c", o.lambda_c, "covariance regularizer scale");
    cmd->add_option("--learning-rate", o.learning_rate, "pretraining learning rate");
    cmd->add_option("--trial-seeds", o.trial_seeds, "trial seeds")->delimiter(',');
    cmd->add_option("--causal-layers", o.causal_layers, "causal layer indices")->delimiter(',');
    cmd->add_option("--world-seed", o.world_seed, "fact world seed");
    cmd->add_flag("--neighbor-assist", o.neighbor_assist,
                  "enable neighbor-assisted editing (weight 1 unless --neighbor-weight)");
    cmd->add_flag("--neighbor-prefixed", o.neighbor_prefixed,
                  "prefix the assist neighbor prompts");
    cmd->add_flag("--pretrain", o.pretrain_if_missing, "pretrain when checkpoint is missing");
    cmd->add_flag("--parallel-trials", o.parallel_trials, "run trials concurrently");
    cmd->add_flag("--dump-targets", o.dump_targets, "write per-iteration delta targets");
    cmd->add_flag("--dump-solver-state", o.dump_solver_state, "write solver matrix dumps");
}

RunConfig build_config(const Overrides& o) {
    RunConfig cfg;
    if (o.config) cfg = load_config(*o.config);
    if (o.out) cfg.run.output_dir = *o.out;
    if (o.algo) cfg.edit.algo = algo_from_name(*o.algo);
    if (o.mode) cfg.run.mode = *o.mode;
    if (o.stopping_kind) cfg.stopping.kind = *o.stopping_kind;
    if (o.early_stop) cfg.optimize.early_stop = *o.early_stop;
    if (o.checkpoint) cfg.run.checkpoint = *o.checkpoint;
    if (o.retention) cfg.run.snapshot_retention = *o.retention;
    if (o.m) cfg.edit.m = *o.m;
    if (o.max_iterations) cfg.stopping.max_iterations = *o.max_iterations;
    if (o.steps) cfg.optimize.steps = *o.steps;
    if (o.epochs) cfg.pretrain.epochs = *o.epochs;
    if (o.n_prefixes) cfg.edit.n_prefixes = *o.n_prefixes;
    if (o.workers) cfg.optimize.workers = *o.workers;
    if (o.epsilon) cfg.stopping.epsilon = *o.epsilon;
    if (o.neighbor_assist) cfg.optimize.neighbor_weight = 1.0;
    if (o.neighbor_weight) cfg.optimize.neighbor_weight = *o.neighbor_weight;
    if (o.neighbor_prefixed) cfg.optimize.neighbor_prefixed = true;
    if (o.kl_weight) cfg.optimize.kl_weight = *o.kl_weight;
    if (o.step_size) cfg.optimize.step_size = *o.step_size;
    if (o.lambda_c) cfg.edit.lambda_c = *o.lambda_c;
    if (o.learning_rate) cfg.pretrain.learning_rate = *o.learning_rate;
    if (o.trial_seeds) cfg.edit.trial_seeds = *o.trial_seeds;
    if (o.causal_layers) cfg.edit.causal_layers = *o.causal_layers;
    if (o.world_seed) cfg.world.seed = *o.world_seed;
    if (o.pretrain_if_missing) cfg.run.pretrain_if_missing = true;
    if (o.parallel_trials) cfg.run.parallel_trials = true;
    if (o.dump_targets) cfg.run.dump_targets = true;
    if (o.dump_solver_state) cfg.run.dump_solver_state = true;
    return cfg;
}

int dispatch(const std::string& name, const Overrides& o, const std::string& report_dir) {
    if (name == "report") {
        std::fputs(cmd_report(report_dir).c_str(), stdout);
        return 0;
    }
    const RunConfig cfg = build_config(o);
    if (name == "gen-data") {
        const GenDataResult r = cmd_gen_data(cfg);
        std::printf("facts=%d probes=%d vocab=%d\n", r.facts, r.probes, r.vocab);
        for (std::size_t i = 0; i < r.eligible_per_trial.size(); ++i)
            std::printf("trial %llu: %d edit requests\n",
                        static_cast<unsigned long long>(cfg.edit.trial_seeds[i]),
                        r.eligible_per_trial[i]);
        return 0;
    }
    if (name == "pretrain") {
        const PretrainOutcome r = cmd_pretrain(cfg);
        std::printf("final_nll=%.6f recall=%.4f checkpoint=%s\n", r.final_nll, r.recall,
                    r.checkpoint.c_str());
        return 0;
    }
    if (name == "run") {
        const RunOutcome r = cmd_run(cfg);
        for (const auto& t : r.trials) {
            if (t.failed) {
                std::printf("trial %llu: FAILED (%s)\n",
                            static_cast<unsigned long long>(t.seed), t.error.c_str());
            } else {
                std::printf(
                    "trial %llu: k*=%d%s requests=%d eff_acc=%.4f spec_acc=%.4f score_acc=%.4f "
                    "gap=%.6g\n",
                    static_cast<unsigned long long>(t.seed), t.chosen_k,
                    t.stopped_early ? "" : " (cap)", t.requests_run, t.chosen.metrics.eff_acc,
                    t.chosen.metrics.spec_acc, t.chosen.metrics.score_acc, t.chosen.gap);
            }
        }
        std::printf("reports: %s/reports\n", r.output_dir.c_str());
        return r.n_failed > 0 ? 5 : 0;
    }
    if (name == "eval") {
        const MetricsReport r = cmd_eval(cfg);
        std::printf("eff_acc=%.4f eff_succ=%.4f gen_acc=%.4f gen_succ=%.4f spec_acc=%.4f "
                    "spec_succ=%.4f score_acc=%.4f score_succ=%.4f me_ppl=%.6g\n",
                    r.eff_acc, r.eff_succ, r.gen_acc, r.gen_succ, r.spec_acc, r.spec_succ,
                    r.score_acc, r.score_succ, r.collapse_ppl);
        return 0;
    }
    if (name == "sweep-stopping") {
        const SweepOutcome r = cmd_sweep_stopping(cfg);
        for (const auto& row : r.rows)
            std::printf("trial %llu %s: k=%d score_acc=%.4f score_succ=%.4f gap=%.6g\n",
                        static_cast<unsigned long long>(row.trial_seed), row.policy.c_str(),
                        row.chosen_k, row.score_acc, row.score_succ, row.gap);
        std::printf("table: %s\n", r.table_path.c_str());
        return 0;
    }
    std::fprintf(stderr, "unknown command: %s\n", name.c_str());
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"editlab: locate-and-edit knowledge editing on a toy transformer"};
    app.require_subcommand(1);

    Overrides o;
    std::string report_dir;
    for (const char* name : {"gen-data", "pretrain", "run", "eval", "sweep-stopping"}) {
        CLI::App* cmd = app.add_subcommand(name);
        add_options(cmd, o);
    }
    CLI::App* rep = app.add_subcommand("report", "re-render tables from a run directory");
    rep->add_option("run_dir", report_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        return dispatch(name, o, report_dir);
    } catch (const editlab::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const editlab::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const editlab::TrainingError& e) {
        std::fprintf(stderr, "training failure: %s\n", e.what());
        return 4;
    } catch (const editlab::OptimizationError& e) {
        std::fprintf(stderr, "optimization failure: %s\n", e.what());
        return 4;
    } catch (const editlab::Error& e) {  // input / data / io
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
}
