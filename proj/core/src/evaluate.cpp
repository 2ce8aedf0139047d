#include "editlab/evaluate.hpp"

#include <cmath>

namespace editlab {

namespace {

struct PromptScore {
    double acc = 0;  // target is the unique argmax
    double succ = 0;
};

PromptScore score_prompt(const ToyLM& model, const TokenSeq& tokens, Token want, Token rival) {
    const HiddenTrace tr = forward(model, tokens, {.with_logits = false});
    const Eigen::RowVectorXd logits =
        row_logits(model, tr, static_cast<int>(tokens.size()) - 1);
    const ArgmaxInfo a = argmax_row(logits);
    PromptScore s;
    s.acc = (a.unique && a.index == want) ? 1.0 : 0.0;
    s.succ = (logits(want) > logits(rival)) ? 1.0 : 0.0;  // monotone in probability
    return s;
}

}  // namespace

KindMetrics edit_success_metrics(const ToyLM& model, const FactWorld& world,
                                 const EditBatch& batch, PromptKind kind,
                                 std::vector<RequestFlags>* flags) {
    if (batch.requests.empty()) throw InputError("edit_success_metrics: empty batch");
    if (flags && flags->size() != batch.requests.size()) {
        flags->assign(batch.requests.size(), RequestFlags{});
        for (std::size_t i = 0; i < batch.requests.size(); ++i)
            (*flags)[i].request_id = batch.requests[i].id;
    }

    double acc_sum = 0, succ_sum = 0;
    for (std::size_t i = 0; i < batch.requests.size(); ++i) {
        const auto& req = batch.requests[i];
        const auto& fact = world.facts[static_cast<std::size_t>(req.fact_index)];
        double acc = 0, succ = 0;
        bool broken = false;
        switch (kind) {
            case PromptKind::Edit: {
                const PromptScore s = score_prompt(model, world.fact_prompt(req.fact_index).tokens,
                                                   req.new_object, fact.object);
                acc = s.acc;
                succ = s.succ;
                break;
            }
            case PromptKind::Paraphrase: {
                const auto prompts = world.paraphrase_prompts(req.fact_index);
                for (const auto& p : prompts) {
                    const PromptScore s =
                        score_prompt(model, p.tokens, req.new_object, fact.object);
                    acc += s.acc;
                    succ += s.succ;
                }
                acc /= static_cast<double>(prompts.size());
                succ /= static_cast<double>(prompts.size());
                break;
            }
            case PromptKind::Neighbor: {
                if (req.eval_neighbors.empty())
                    throw InputError("edit_success_metrics: request " + std::to_string(req.id) +
                                     " has no eval neighbors");
                for (int nb : req.eval_neighbors) {
                    const Token nb_obj = world.facts[static_cast<std::size_t>(nb)].object;
                    // specificity: the original object must beat the new one
                    const PromptScore s =
                        score_prompt(model, world.fact_prompt(nb).tokens, nb_obj, req.new_object);
                    acc += s.acc;
                    succ += s.succ;
                    if (s.succ == 0.0) broken = true;
                }
                acc /= static_cast<double>(req.eval_neighbors.size());
                succ /= static_cast<double>(req.eval_neighbors.size());
                break;
            }
        }
        acc_sum += acc;
        succ_sum += succ;
        if (flags) {
            auto& f = (*flags)[i];
            switch (kind) {
                case PromptKind::Edit: f.eff_acc = acc; f.eff_succ = succ; break;
                case PromptKind::Paraphrase: f.gen_acc = acc; f.gen_succ = succ; break;
                case PromptKind::Neighbor:
                    f.spec_acc = acc;
                    f.spec_succ = succ;
                    f.any_neighbor_broken = broken;
                    break;
            }
        }
    }
    const double n = static_cast<double>(batch.requests.size());
    return KindMetrics{acc_sum / n, succ_sum / n};
}

double harmonic_score(double eff, double gen, double spec) {
    for (double v : {eff, gen, spec})
        if (v < 0.0 || v > 1.0 || !std::isfinite(v))
            throw InputError("harmonic_score: input outside [0, 1]");
    if (eff == 0.0 || gen == 0.0 || spec == 0.0) return 0.0;
    return 3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spec);
}

std::pair<std::vector<int>, std::vector<int>> underedit_overedit(
    const std::vector<RequestFlags>& flags) {
    std::vector<int> under, over;
    for (const auto& f : flags) {
        if (f.eff_succ == 0.0) under.push_back(f.request_id);
        if (f.any_neighbor_broken) over.push_back(f.request_id);
    }
    return {under, over};
}

MetricsReport evaluate_batch(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                             const std::vector<TokenSeq>* probes) {
    MetricsReport rep;
    std::vector<RequestFlags> flags;
    const KindMetrics eff = edit_success_metrics(model, world, batch, PromptKind::Edit, &flags);
    const KindMetrics gen =
        edit_success_metrics(model, world, batch, PromptKind::Paraphrase, &flags);
    const KindMetrics spec =
        edit_success_metrics(model, world, batch, PromptKind::Neighbor, &flags);
    rep.eff_acc = eff.accuracy;
    rep.eff_succ = eff.success;
    rep.gen_acc = gen.accuracy;
    rep.gen_succ = gen.success;
    rep.spec_acc = spec.accuracy;
    rep.spec_succ = spec.success;
    rep.score_acc = harmonic_score(eff.accuracy, gen.accuracy, spec.accuracy);
    rep.score_succ = harmonic_score(eff.success, gen.success, spec.success);
    std::tie(rep.underedit_ids, rep.overedit_ids) = underedit_overedit(flags);
    rep.per_request = std::move(flags);
    if (probes) rep.collapse_ppl = sequence_perplexity(model, *probes);
    return rep;
}

}  // namespace editlab
