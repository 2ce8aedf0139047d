#pragma once

#include "editlab/factworld.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Evaluation suite: efficacy / generalization / specificity as both accuracy
// (vocabulary argmax) and success (pairwise probability win), their harmonic
// scores, UnderEdit/OverEdit id lists, and the collapse-perplexity column.

enum class PromptKind { Edit, Paraphrase, Neighbor };

struct RequestFlags {
    int request_id = 0;
    double eff_acc = 0, eff_succ = 0;    // 0/1 on the single edit prompt
    double gen_acc = 0, gen_succ = 0;    // means over paraphrase prompts
    double spec_acc = 0, spec_succ = 0;  // means over eval neighbors
    bool any_neighbor_broken = false;    // some eval neighbor lost f[o] > f[o*]
};

struct KindMetrics {
    double accuracy = 0;
    double success = 0;
};

struct MetricsReport {
    double eff_acc = 0, eff_succ = 0;
    double gen_acc = 0, gen_succ = 0;
    double spec_acc = 0, spec_succ = 0;
    double score_acc = 0, score_succ = 0;
    double collapse_ppl = 0;
    std::vector<int> underedit_ids, overedit_ids;
    std::vector<RequestFlags> per_request;
};

/// Exact probability ties count as failure for both accuracy and success.
KindMetrics edit_success_metrics(const ToyLM& model, const FactWorld& world,
                                 const EditBatch& batch, PromptKind kind,
                                 std::vector<RequestFlags>* flags = nullptr);

/// 3 / (1/eff + 1/gen + 1/spec); 0 whenever a component is 0.
double harmonic_score(double eff, double gen, double spec);

/// underedit: edit-prompt success flag false; overedit: >= 1 broken neighbor.
std::pair<std::vector<int>, std::vector<int>> underedit_overedit(
    const std::vector<RequestFlags>& flags);

/// Full report; collapse_ppl computed over `probes` when given.
MetricsReport evaluate_batch(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                             const std::vector<TokenSeq>* probes = nullptr);

}  // namespace editlab
