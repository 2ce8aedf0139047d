#pragma once

#include "editlab/factworld.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Optimization stage: finds the latent delta that makes the new object likely
// under prefix-averaged NLL with a KL anchor on the subject-only distribution,
// optionally with a neighbor-preservation term and MPES early stopping.

enum class TargetSite { HiddenState, MlpOutput, AttnAndMlp };
enum class EarlyStop { None, Mpes };

struct OptimizeSpec {
    TargetSite target_site = TargetSite::HiddenState;
    int layer = 0;  // l_c, or l_* for MlpOutput
    int steps = 100;
    double step_size = 0.05;
    double kl_weight = 0.0625;
    double neighbor_weight = 0.0;  // 0 disables the neighbor term
    bool neighbor_prefixed = false;
    EarlyStop early_stop = EarlyStop::None;
    double clamp_norm = 4.0;  // max ||delta|| as multiple of ||base state||; <= 0 disables
    std::uint64_t seed = 0;
    int n_workers = 1;

    void validate(const ModelConfig& cfg) const;
};

struct LossBreakdown {
    double total = 0.0;
    double nll = 0.0;
    double kl = 0.0;
    double neighbor = 0.0;
    int underflow_clamps = 0;
};

struct DeltaTarget {
    int request_id = 0;
    TargetSite site = TargetSite::HiddenState;
    int layer = 0;
    int position = 0;   // t on the bare edit prompt
    Vec delta;          // delta at the site the Spread stage consumes
    Vec attn_delta;     // AttnAndMlp only; discarded by Spread
    Vec target_state;   // h-bar (or z-bar for MlpOutput), absolute
    LossBreakdown achieved;
    int steps_used = 0;
    bool mpes_stopped = false;
};

/// Prefix-averaged NLL of o* plus the KL anchor (single-delta sites).
LossBreakdown loss_g(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                     const std::vector<TokenSeq>& prefixes, const Vec& delta,
                     const OptimizeSpec& spec);

/// loss_g plus neighbor_weight * (-ln f(x-tilde, h+delta)[o]).
LossBreakdown loss_g_neighbor(const ToyLM& model, const FactWorld& world,
                              const EditRequest& request, const std::vector<TokenSeq>& prefixes,
                              const Vec& delta, const OptimizeSpec& spec);

/// Gradient descent from delta = 0 with per-step norm clamp; returns the
/// best-loss delta seen. MPES stops once o* is the unique argmax for every
/// prefixed prompt.
DeltaTarget find_delta(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                       const std::vector<TokenSeq>& prefixes, const OptimizeSpec& spec);

/// One DeltaTarget per request against the same frozen weights. Per-request
/// failures are annotated with the request id; throws only if all fail.
std::vector<DeltaTarget> find_targets_batch(const ToyLM& model, const FactWorld& world,
                                            const EditBatch& batch, const OptimizeSpec& spec,
                                            std::vector<std::string>* errors = nullptr);

/// Patch that realizes target.target_state on top of `current`, a fresh
/// unpatched trace of the bare edit prompt.
PatchSpec target_patch(const DeltaTarget& target, const HiddenTrace& current);

// JSONL round-trip for ablation replay
void save_targets(const std::vector<DeltaTarget>& targets, const std::string& path);
std::vector<DeltaTarget> load_targets(const std::string& path);

}  // namespace editlab
