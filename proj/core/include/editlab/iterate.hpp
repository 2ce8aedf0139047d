#pragma once

#include "editlab/evaluate.hpp"
#include "editlab/optimize.hpp"
#include "editlab/spread.hpp"

#include <functional>
#include <span>

namespace editlab {

// Iterative editing controller: alternates Optimization and Spread, tracks
// p(theta_k, h-bar) and p(theta_k+1, h-hat), and applies the stopping policy.

enum class StopKind { GapBelowEps, MonotonicGap, ConsecutiveSpreadGap };

const char* stop_kind_name(StopKind k);
StopKind stop_kind_from_name(const std::string& s);

struct StoppingPolicy {
    StopKind kind = StopKind::GapBelowEps;
    double epsilon = 1.0;  // paper default
    int max_iterations = 10;
    void validate() const;
};

struct IterationRecord {
    int k = 0;
    double p_bar = 0;  // p(theta_k, h-bar_k), patched to the iteration targets
    double p_hat = 0;  // p(theta_k+1, h-hat_k), realized states after Spread
    double gap = 0;    // |p_hat - p_bar|
    MetricsReport metrics;
    double collapse_ppl = 0;
    bool collapse_flagged = false;
    bool stopped_here = false;
};

/// Eq.-4 style target-token perplexity: mean over edits of 1/f(x_i)[o*_i].
/// With `targets`, each edit prompt is patched so the trace realizes the
/// recorded target state; without, the realized (unpatched) forward is used.
double target_perplexity(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                         const std::vector<DeltaTarget>* targets);

struct IterativeOptions {
    enum class Mode { Full, SpreadOnly } mode = Mode::Full;
    double collapse_factor = 100.0;  // flag when collapse ppl exceeds this x pre-edit
    bool record_only = false;        // run to max_iterations, never stop early
    // invoked after each Spread step with the post-edit weights
    std::function<void(int k, const ToyLM& model, const std::vector<DeltaTarget>& targets,
                       const IterationRecord& record)>
        on_iteration;
};

struct IterativeResult {
    ToyLM final_model;
    std::vector<IterationRecord> trace;
    int chosen_k = 0;  // iteration whose post-Spread weights final_model holds
    bool stopped_early = false;
    EditBatch batch;  // requests that actually ran (failures pruned at k = 1)
    SpreadReport spread_report;
};

IterativeResult run_iterative(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                              const SpreadConfig& spread_cfg, const OptimizeSpec& opt_spec,
                              const StoppingPolicy& stopping, const IterativeOptions& opts = {});

// Offline policy replay on recorded sequences (1-based iteration indices;
// returns the last index when the rule never fires).
int stop_index_gap_below(double eps, std::span<const double> gaps);
int stop_index_monotonic(std::span<const double> gaps);
int stop_index_consecutive(double eps, std::span<const double> p_hats);
/// diffs[i] = |p_hat_{i+2} - p_hat_{i+1}|, i.e. the value recorded at k = i+2.
int stop_index_consecutive_diffs(double eps, std::span<const double> diffs);

struct PolicyOutcome {
    StoppingPolicy policy;
    int chosen_k = 0;
    IterationRecord record;
};

/// One shared trajectory to max_iterations, each policy evaluated offline.
std::vector<PolicyOutcome> compare_stopping(const ToyLM& model, const FactWorld& world,
                                            const EditBatch& batch, const SpreadConfig& spread_cfg,
                                            const OptimizeSpec& opt_spec,
                                            const std::vector<StoppingPolicy>& policies,
                                            int max_iterations,
                                            std::vector<IterationRecord>* trajectory = nullptr);

}  // namespace editlab
