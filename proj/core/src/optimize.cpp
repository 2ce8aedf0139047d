#include "editlab/optimize.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <thread>

namespace editlab {

namespace {

constexpr double kMaxNll = 690.77552789821368;  // -ln(1e-300) underflow clamp

enum class TermKind { EditNll, Kl, NeighborNll };

struct PromptCtx {
    TermKind kind;
    TokenSeq tokens;
    int t = 0;         // patch position (last subject token)
    int eval_row = 0;  // row whose distribution the term reads
    double weight = 1.0;
    Token target = 0;                    // EditNll / NeighborNll
    Eigen::RowVectorXd ref_log_probs;    // Kl
    HiddenTrace base;                    // unpatched forward, reused per step
};

struct EvalResult {
    LossBreakdown loss;
    std::vector<Vec> grads;  // one per delta component
    bool mpes_ok = true;     // o* unique argmax on every EditNll prompt
};

// Shared objective for loss evaluation and descent. Holds the cached
// unpatched traces; eval() resumes the forward from the patch layer only.
class Objective {
public:
    Objective(const ToyLM& model, const FactWorld& world, const EditRequest& request,
              const std::vector<TokenSeq>& prefixes, const OptimizeSpec& spec)
        : model_(model), spec_(spec) {
        spec.validate(model.config);
        const Rendered bare = world.fact_prompt(request.fact_index);
        bare_t_ = bare.subject_end;
        Token o_star = request.new_object;

        HiddenTrace bare_tr = forward(model, bare.tokens, {.with_logits = false});
        switch (spec.target_site) {
            case TargetSite::HiddenState:
                base_states_ = {bare_tr.hidden(spec.layer, bare_t_)};
                break;
            case TargetSite::MlpOutput:
                base_states_ = {bare_tr.mlp(spec.layer, bare_t_)};
                break;
            case TargetSite::AttnAndMlp:
                base_states_ = {bare_tr.mlp(spec.layer, bare_t_),
                                bare_tr.attn(spec.layer, bare_t_)};
                base_hidden_ = bare_tr.hidden(spec.layer, bare_t_);
                break;
        }
        if (spec.target_site != TargetSite::AttnAndMlp)
            base_hidden_ = base_states_.front();

        if (prefixes.empty()) throw InputError("find_delta: empty prefix pool");
        for (const auto& prefix : prefixes) {
            const Rendered r = world.fact_prompt(request.fact_index, prefix);
            PromptCtx ctx;
            ctx.kind = TermKind::EditNll;
            ctx.tokens = r.tokens;
            ctx.t = r.subject_end;
            ctx.eval_row = static_cast<int>(r.tokens.size()) - 1;
            ctx.weight = 1.0 / static_cast<double>(prefixes.size());
            ctx.target = o_star;
            ctx.base = forward(model, r.tokens, {.with_logits = false});
            prompts_.push_back(std::move(ctx));
        }

        if (spec.kl_weight > 0.0) {
            PromptCtx ctx;
            ctx.kind = TermKind::Kl;
            ctx.tokens = world.subject_only(request.fact_index);
            ctx.t = static_cast<int>(ctx.tokens.size()) - 1;
            ctx.eval_row = ctx.t;
            ctx.weight = spec.kl_weight;
            ctx.base = forward(model, ctx.tokens, {.with_logits = false});
            ctx.ref_log_probs = log_softmax_row(row_logits(model, ctx.base, ctx.eval_row));
            prompts_.push_back(std::move(ctx));
        }

        if (spec.neighbor_weight > 0.0) {
            if (!request.assist_neighbor)
                throw ConfigError("neighbor term requested but request " +
                                  std::to_string(request.id) + " has no assist neighbor");
            const auto& nb_fact =
                world.facts[static_cast<std::size_t>(*request.assist_neighbor)];
            std::vector<TokenSeq> nb_prefixes;
            if (spec.neighbor_prefixed)
                nb_prefixes = prefixes;
            else
                nb_prefixes = {TokenSeq{}};
            for (const auto& prefix : nb_prefixes) {
                const Rendered r = world.fact_prompt(*request.assist_neighbor, prefix);
                PromptCtx ctx;
                ctx.kind = TermKind::NeighborNll;
                ctx.tokens = r.tokens;
                ctx.t = r.subject_end;
                ctx.eval_row = static_cast<int>(r.tokens.size()) - 1;
                ctx.weight = spec.neighbor_weight / static_cast<double>(nb_prefixes.size());
                ctx.target = nb_fact.object;
                ctx.base = forward(model, r.tokens, {.with_logits = false});
                prompts_.push_back(std::move(ctx));
            }
        }
    }

    int n_deltas() const { return static_cast<int>(base_states_.size()); }
    int bare_t() const { return bare_t_; }
    const Vec& base_state(int i) const { return base_states_[static_cast<std::size_t>(i)]; }
    const Vec& base_hidden() const { return base_hidden_; }

    std::vector<PatchSpec> patches_at(const std::vector<Vec>& deltas, int position) const {
        std::vector<PatchSpec> ps;
        switch (spec_.target_site) {
            case TargetSite::HiddenState:
                ps.push_back({PatchSite::HiddenState, spec_.layer, position, deltas[0]});
                break;
            case TargetSite::MlpOutput:
                ps.push_back({PatchSite::MlpOutput, spec_.layer, position, deltas[0]});
                break;
            case TargetSite::AttnAndMlp:
                ps.push_back({PatchSite::MlpOutput, spec_.layer, position, deltas[0]});
                ps.push_back({PatchSite::AttnOutput, spec_.layer, position, deltas[1]});
                break;
        }
        return ps;
    }

    EvalResult eval(const std::vector<Vec>& deltas, bool with_grads) const {
        EvalResult res;
        res.grads.assign(static_cast<std::size_t>(n_deltas()), Vec::Zero(model_.config.d_model));
        for (const auto& ctx : prompts_) {
            const auto patches = patches_at(deltas, ctx.t);
            const HiddenTrace tr =
                forward_resume(model_, ctx.base, patches, {.with_logits = false});
            const Eigen::RowVectorXd logits = row_logits(model_, tr, ctx.eval_row);
            if (!logits.allFinite())
                throw NumericError("loss evaluation produced non-finite logits");

            Eigen::RowVectorXd seed;
            switch (ctx.kind) {
                case TermKind::EditNll: {
                    NllLoss loss(ctx.target);
                    double nll = loss.value(logits);
                    if (nll > kMaxNll) {
                        nll = kMaxNll;
                        ++res.loss.underflow_clamps;
                    }
                    res.loss.nll += ctx.weight * nll;
                    if (with_grads) seed = ctx.weight * loss.grad(logits);
                    const ArgmaxInfo a = argmax_row(logits);
                    if (!(a.unique && a.index == ctx.target)) res.mpes_ok = false;
                    break;
                }
                case TermKind::Kl: {
                    KlToReference loss(ctx.ref_log_probs);
                    res.loss.kl += ctx.weight * loss.value(logits);
                    if (with_grads) seed = ctx.weight * loss.grad(logits);
                    break;
                }
                case TermKind::NeighborNll: {
                    NllLoss loss(ctx.target);
                    double nll = loss.value(logits);
                    if (nll > kMaxNll) {
                        nll = kMaxNll;
                        ++res.loss.underflow_clamps;
                    }
                    res.loss.neighbor += ctx.weight * nll;
                    if (with_grads) seed = ctx.weight * loss.grad(logits);
                    break;
                }
            }
            if (with_grads) {
                LogitGrad lg{ctx.eval_row, std::move(seed)};
                auto g = backward_to_sites(model_, tr, {&lg, 1}, patches);
                for (std::size_t i = 0; i < g.size(); ++i)
                    res.grads[i] += g[i];
            }
        }
        res.loss.total = res.loss.nll + res.loss.kl + res.loss.neighbor;
        return res;
    }

private:
    const ToyLM& model_;
    OptimizeSpec spec_;
    std::vector<PromptCtx> prompts_;
    std::vector<Vec> base_states_;  // [main site, (attn)]
    Vec base_hidden_;
    int bare_t_ = 0;
};

LossBreakdown eval_single(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                          const std::vector<TokenSeq>& prefixes, const Vec& delta,
                          const OptimizeSpec& spec) {
    if (spec.target_site == TargetSite::AttnAndMlp)
        throw ConfigError("loss_g takes a single delta; AttnAndMlp is a paired site");
    Objective obj(model, world, request, prefixes, spec);
    return obj.eval({delta}, false).loss;
}

}  // namespace

void OptimizeSpec::validate(const ModelConfig& cfg) const {
    if (steps <= 0) throw ConfigError("OptimizeSpec: steps must be > 0");
    if (step_size <= 0.0) throw ConfigError("OptimizeSpec: step_size must be > 0");
    if (kl_weight < 0.0 || neighbor_weight < 0.0)
        throw ConfigError("OptimizeSpec: weights must be >= 0");
    if (layer < 0 || layer >= cfg.n_layers) throw ConfigError("OptimizeSpec: layer out of range");
}

LossBreakdown loss_g(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                     const std::vector<TokenSeq>& prefixes, const Vec& delta,
                     const OptimizeSpec& spec) {
    OptimizeSpec s = spec;
    s.neighbor_weight = 0.0;
    return eval_single(model, world, request, prefixes, delta, s);
}

LossBreakdown loss_g_neighbor(const ToyLM& model, const FactWorld& world,
                              const EditRequest& request, const std::vector<TokenSeq>& prefixes,
                              const Vec& delta, const OptimizeSpec& spec) {
    if (spec.neighbor_weight > 0.0 && !request.assist_neighbor)
        throw ConfigError("loss_g_neighbor: request " + std::to_string(request.id) +
                          " has no assist neighbor");
    return eval_single(model, world, request, prefixes, delta, spec);
}

DeltaTarget find_delta(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                       const std::vector<TokenSeq>& prefixes, const OptimizeSpec& spec) {
    Objective obj(model, world, request, prefixes, spec);
    const int K = obj.n_deltas();
    std::vector<Vec> deltas(static_cast<std::size_t>(K), Vec::Zero(model.config.d_model));

    EvalResult cur = obj.eval(deltas, true);
    std::vector<Vec> best_deltas = deltas;
    LossBreakdown best = cur.loss;
    int steps_used = 0;
    bool mpes_stopped = false;

    if (spec.early_stop == EarlyStop::Mpes && cur.mpes_ok) {
        mpes_stopped = true;
    } else {
        for (int step = 1; step <= spec.steps; ++step) {
            for (int i = 0; i < K; ++i) {
                auto& d = deltas[static_cast<std::size_t>(i)];
                d -= spec.step_size * cur.grads[static_cast<std::size_t>(i)];
                if (spec.clamp_norm > 0.0) {
                    const double limit = spec.clamp_norm * obj.base_state(i).norm();
                    const double n = d.norm();
                    if (n > limit && n > 0.0) d *= limit / n;
                }
            }
            cur = obj.eval(deltas, step < spec.steps);
            if (!std::isfinite(cur.loss.total))
                throw OptimizationError("find_delta: non-finite loss at step " +
                                        std::to_string(step) + " (request " +
                                        std::to_string(request.id) + ")");
            steps_used = step;
            if (cur.loss.total < best.total) {
                best = cur.loss;
                best_deltas = deltas;
            }
            if (spec.early_stop == EarlyStop::Mpes && cur.mpes_ok) {
                mpes_stopped = true;
                break;
            }
        }
    }

    DeltaTarget out;
    out.request_id = request.id;
    out.site = spec.target_site;
    out.layer = spec.layer;
    out.position = obj.bare_t();
    out.delta = best_deltas[0];
    if (K > 1) out.attn_delta = best_deltas[1];
    // AttnAndMlp reconstructs the hidden target from the MLP delta alone
    out.target_state = (spec.target_site == TargetSite::AttnAndMlp)
                           ? Vec(obj.base_hidden() + best_deltas[0])
                           : Vec(obj.base_state(0) + best_deltas[0]);
    out.achieved = best;
    out.steps_used = steps_used;
    out.mpes_stopped = mpes_stopped;
    return out;
}

std::vector<DeltaTarget> find_targets_batch(const ToyLM& model, const FactWorld& world,
                                            const EditBatch& batch, const OptimizeSpec& spec,
                                            std::vector<std::string>* errors) {
    if (batch.requests.empty()) throw InputError("find_targets_batch: empty batch");
    const std::size_t n = batch.requests.size();
    std::vector<DeltaTarget> results(n);
    std::vector<char> ok(n, 0);
    std::vector<std::string> errs(n);

    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            try {
                results[i] = find_delta(model, world, batch.requests[i], batch.prefix_pool, spec);
                ok[i] = 1;
            } catch (const std::exception& e) {
                errs[i] = "request " + std::to_string(batch.requests[i].id) + ": " + e.what();
            }
        }
    };

    const int workers = std::max(1, spec.n_workers);
    if (workers == 1 || n < 2) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + static_cast<std::size_t>(workers) - 1) /
                                  static_cast<std::size_t>(workers);
        for (int w = 0; w < workers; ++w) {
            const std::size_t lo = static_cast<std::size_t>(w) * chunk;
            if (lo >= n) break;
            pool.emplace_back(work, lo, std::min(lo + chunk, n));
        }
        for (auto& t : pool) t.join();
    }

    std::vector<DeltaTarget> out;
    std::vector<std::string> failures;
    for (std::size_t i = 0; i < n; ++i) {
        if (ok[i])
            out.push_back(std::move(results[i]));
        else
            failures.push_back(errs[i]);
    }
    if (out.empty()) {
        std::string msg = "find_targets_batch: all requests failed";
        for (const auto& e : failures) msg += "; " + e;
        throw OptimizationError(msg);
    }
    if (errors) *errors = std::move(failures);
    return out;
}

PatchSpec target_patch(const DeltaTarget& target, const HiddenTrace& current) {
    PatchSpec p;
    p.layer = target.layer;
    p.position = target.position;
    if (target.site == TargetSite::MlpOutput) {
        p.site = PatchSite::MlpOutput;
        p.delta = target.target_state - current.mlp(target.layer, target.position);
    } else {
        p.site = PatchSite::HiddenState;
        p.delta = target.target_state - current.hidden(target.layer, target.position);
    }
    return p;
}

namespace {

using nlohmann::json;

json vec_to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

Vec vec_from_json(const json& a) {
    Vec v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
    return v;
}

const char* site_name(TargetSite s) {
    switch (s) {
        case TargetSite::HiddenState: return "hidden_state";
        case TargetSite::MlpOutput: return "mlp_output";
        case TargetSite::AttnAndMlp: return "attn_and_mlp";
    }
    return "hidden_state";
}

TargetSite site_from_name(const std::string& s) {
    if (s == "hidden_state") return TargetSite::HiddenState;
    if (s == "mlp_output") return TargetSite::MlpOutput;
    if (s == "attn_and_mlp") return TargetSite::AttnAndMlp;
    throw DataError("unknown target site: " + s);
}

}  // namespace

void save_targets(const std::vector<DeltaTarget>& targets, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open targets file for writing: " + path);
    for (const auto& t : targets) {
        json j{{"request_id", t.request_id},
               {"site", site_name(t.site)},
               {"layer", t.layer},
               {"position", t.position},
               {"delta", vec_to_json(t.delta)},
               {"target_state", vec_to_json(t.target_state)},
               {"loss", {{"total", t.achieved.total},
                         {"nll", t.achieved.nll},
                         {"kl", t.achieved.kl},
                         {"neighbor", t.achieved.neighbor},
                         {"underflow_clamps", t.achieved.underflow_clamps}}},
               {"steps_used", t.steps_used},
               {"mpes_stopped", t.mpes_stopped}};
        if (t.attn_delta.size() > 0) j["attn_delta"] = vec_to_json(t.attn_delta);
        f << j.dump() << '\n';
    }
}

std::vector<DeltaTarget> load_targets(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open targets file: " + path);
    std::vector<DeltaTarget> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DataError("corrupt targets line in " + path);
        DeltaTarget t;
        t.request_id = j.at("request_id").get<int>();
        t.site = site_from_name(j.at("site").get<std::string>());
        t.layer = j.at("layer").get<int>();
        t.position = j.at("position").get<int>();
        t.delta = vec_from_json(j.at("delta"));
        t.target_state = vec_from_json(j.at("target_state"));
        if (j.contains("attn_delta")) t.attn_delta = vec_from_json(j.at("attn_delta"));
        const auto& l = j.at("loss");
        t.achieved.total = l.at("total").get<double>();
        t.achieved.nll = l.at("nll").get<double>();
        t.achieved.kl = l.at("kl").get<double>();
        t.achieved.neighbor = l.at("neighbor").get<double>();
        t.achieved.underflow_clamps = l.at("underflow_clamps").get<int>();
        t.steps_used = j.at("steps_used").get<int>();
        t.mpes_stopped = j.at("mpes_stopped").get<bool>();
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace editlab
