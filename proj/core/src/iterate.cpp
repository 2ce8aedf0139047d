#include "editlab/iterate.hpp"

#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace editlab {

const char* stop_kind_name(StopKind k) {
    switch (k) {
        case StopKind::GapBelowEps: return "gap_below_eps";
        case StopKind::MonotonicGap: return "monotonic_gap";
        case StopKind::ConsecutiveSpreadGap: return "consecutive_spread_gap";
    }
    return "gap_below_eps";
}

StopKind stop_kind_from_name(const std::string& s) {
    if (s == "gap_below_eps") return StopKind::GapBelowEps;
    if (s == "monotonic_gap") return StopKind::MonotonicGap;
    if (s == "consecutive_spread_gap") return StopKind::ConsecutiveSpreadGap;
    throw ConfigError("unknown stopping policy: " + s);
}

void StoppingPolicy::validate() const {
    if (epsilon <= 0.0) throw ConfigError("StoppingPolicy: epsilon must be > 0");
    if (max_iterations < 1) throw ConfigError("StoppingPolicy: max_iterations must be >= 1");
}

double target_perplexity(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                         const std::vector<DeltaTarget>* targets) {
    if (batch.requests.empty()) throw InputError("target_perplexity: empty batch");
    std::unordered_map<int, const DeltaTarget*> by_id;
    if (targets) {
        for (const auto& t : *targets) by_id.emplace(t.request_id, &t);
        if (by_id.size() != batch.requests.size())
            throw InputError("target_perplexity: need exactly one state per request");
    }

    double sum = 0.0;
    for (const auto& req : batch.requests) {
        const Rendered prompt = world.fact_prompt(req.fact_index);
        const int last = static_cast<int>(prompt.tokens.size()) - 1;
        HiddenTrace tr = forward(model, prompt.tokens, {.with_logits = false});
        if (targets) {
            const PatchSpec patch = target_patch(*by_id.at(req.id), tr);
            tr = forward_resume(model, tr, {&patch, 1}, {.with_logits = false});
        }
        const Eigen::RowVectorXd lp = log_softmax_row(row_logits(model, tr, last));
        // e^{-ln p} with the same 1e-300 underflow clamp as the loss
        sum += std::exp(std::min(-lp(req.new_object), 690.77552789821368));
    }
    return sum / static_cast<double>(batch.requests.size());
}

namespace {

EditBatch prune_to_targets(const EditBatch& batch, const std::vector<DeltaTarget>& targets) {
    std::unordered_set<int> ids;
    for (const auto& t : targets) ids.insert(t.request_id);
    EditBatch out = batch;
    out.requests.clear();
    for (const auto& r : batch.requests)
        if (ids.count(r.id)) out.requests.push_back(r);
    return out;
}

}  // namespace

IterativeResult run_iterative(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                              const SpreadConfig& spread_cfg, const OptimizeSpec& opt_spec,
                              const StoppingPolicy& stopping, const IterativeOptions& opts) {
    stopping.validate();
    spread_cfg.validate(model.config);
    if (batch.requests.empty()) throw InputError("run_iterative: empty batch");

    IterativeResult res;
    const double pre_collapse = sequence_perplexity(model, world.probe_utterances);

    ToyLM current = model;
    std::vector<DeltaTarget> first_targets;
    EditBatch run_batch = batch;
    SpreadContext ctx = make_spread_context(world, batch, spread_cfg);

    double prev_gap = 0.0, prev_p_hat = 0.0;
    for (int k = 1; k <= stopping.max_iterations; ++k) {
        std::vector<DeltaTarget> targets;
        if (opts.mode == IterativeOptions::Mode::Full || k == 1) {
            std::vector<std::string> errors;
            targets = find_targets_batch(current, world, run_batch, opt_spec, &errors);
            if (k == 1) {
                if (!errors.empty()) run_batch = prune_to_targets(run_batch, targets);
                first_targets = targets;
            }
        } else {
            targets = first_targets;  // spread-only ablation: iteration-1 targets reused
        }

        IterationRecord rec;
        rec.k = k;
        rec.p_bar = target_perplexity(current, world, run_batch, &targets);

        SpreadReport srep;
        ToyLM next = apply_edit(current, world, run_batch, targets, spread_cfg, ctx, &srep, k);
        res.spread_report.rome_sequential_batch |= srep.rome_sequential_batch;
        res.spread_report.pinv_fallbacks += srep.pinv_fallbacks;
        res.spread_report.cov_warnings += srep.cov_warnings;

        rec.p_hat = target_perplexity(next, world, run_batch, nullptr);
        rec.gap = std::abs(rec.p_hat - rec.p_bar);
        rec.metrics = evaluate_batch(next, world, run_batch, &world.probe_utterances);
        rec.collapse_ppl = rec.metrics.collapse_ppl;
        rec.collapse_flagged = rec.collapse_ppl > opts.collapse_factor * pre_collapse;
        res.trace.push_back(rec);
        if (opts.on_iteration) opts.on_iteration(k, next, targets, rec);

        bool stop = false;
        int chosen = k;
        if (!opts.record_only) {
            switch (stopping.kind) {
                case StopKind::GapBelowEps:
                    stop = rec.gap <= stopping.epsilon;
                    break;
                case StopKind::MonotonicGap:
                    if (k >= 2 && rec.gap >= prev_gap) {
                        stop = true;
                        chosen = k - 1;  // roll back to the pre-violation weights
                    }
                    break;
                case StopKind::ConsecutiveSpreadGap:
                    stop = k >= 2 && std::abs(rec.p_hat - prev_p_hat) <= stopping.epsilon;
                    break;
            }
        }

        if (stop) {
            res.chosen_k = chosen;
            res.stopped_early = true;
            res.trace[static_cast<std::size_t>(chosen - 1)].stopped_here = true;
            res.final_model = (chosen == k) ? std::move(next) : std::move(current);
            res.batch = std::move(run_batch);
            return res;
        }
        prev_gap = rec.gap;
        prev_p_hat = rec.p_hat;
        current = std::move(next);
    }

    res.chosen_k = stopping.max_iterations;
    res.trace.back().stopped_here = true;
    res.final_model = std::move(current);
    res.batch = std::move(run_batch);
    return res;
}

int stop_index_gap_below(double eps, std::span<const double> gaps) {
    for (std::size_t i = 0; i < gaps.size(); ++i)
        if (gaps[i] <= eps) return static_cast<int>(i) + 1;
    return static_cast<int>(gaps.size());
}

int stop_index_monotonic(std::span<const double> gaps) {
    for (std::size_t i = 1; i < gaps.size(); ++i)
        if (gaps[i] >= gaps[i - 1]) return static_cast<int>(i);  // pre-violation iteration
    return static_cast<int>(gaps.size());
}

int stop_index_consecutive(double eps, std::span<const double> p_hats) {
    for (std::size_t i = 1; i < p_hats.size(); ++i)
        if (std::abs(p_hats[i] - p_hats[i - 1]) <= eps) return static_cast<int>(i) + 1;
    return static_cast<int>(p_hats.size());
}

int stop_index_consecutive_diffs(double eps, std::span<const double> diffs) {
    for (std::size_t i = 0; i < diffs.size(); ++i)
        if (diffs[i] <= eps) return static_cast<int>(i) + 2;
    return static_cast<int>(diffs.size()) + 1;
}

std::vector<PolicyOutcome> compare_stopping(const ToyLM& model, const FactWorld& world,
                                            const EditBatch& batch, const SpreadConfig& spread_cfg,
                                            const OptimizeSpec& opt_spec,
                                            const std::vector<StoppingPolicy>& policies,
                                            int max_iterations,
                                            std::vector<IterationRecord>* trajectory) {
    if (policies.empty()) throw InputError("compare_stopping: no policies");
    StoppingPolicy record_all;
    record_all.max_iterations = max_iterations;
    IterativeOptions opts;
    opts.record_only = true;
    const IterativeResult run =
        run_iterative(model, world, batch, spread_cfg, opt_spec, record_all, opts);

    std::vector<double> gaps, p_hats;
    for (const auto& r : run.trace) {
        gaps.push_back(r.gap);
        p_hats.push_back(r.p_hat);
    }

    std::vector<PolicyOutcome> out;
    for (const auto& policy : policies) {
        policy.validate();
        int k = 0;
        switch (policy.kind) {
            case StopKind::GapBelowEps: k = stop_index_gap_below(policy.epsilon, gaps); break;
            case StopKind::MonotonicGap: k = stop_index_monotonic(gaps); break;
            case StopKind::ConsecutiveSpreadGap:
                k = stop_index_consecutive(policy.epsilon, p_hats);
                break;
        }
        k = std::min(k, policy.max_iterations);
        out.push_back({policy, k, run.trace[static_cast<std::size_t>(k - 1)]});
    }
    if (trajectory) *trajectory = run.trace;
    return out;
}

}  // namespace editlab
