#pragma once

#include "editlab/factworld.hpp"
#include "editlab/model.hpp"

#include <functional>

namespace editlab::testutil {

inline ModelConfig small_config(int d_model = 16, int n_layers = 3, int vocab = 50,
                                std::uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = (d_model % 4 == 0) ? 4 : 2;
    cfg.d_mlp = 3 * d_model;
    cfg.max_seq_len = 16;
    cfg.seed = seed;
    return cfg;
}

inline TokenSeq random_tokens(Rng& rng, int len, int vocab) {
    TokenSeq t;
    for (int i = 0; i < len; ++i) t.push_back(static_cast<Token>(rng.below(vocab)));
    return t;
}

inline WorldSpec small_world_spec(std::uint64_t seed = 3, int subjects = 24, int relations = 3,
                                  int pool = 3) {
    WorldSpec ws;
    ws.seed = seed;
    ws.n_subjects = subjects;
    ws.n_relations = relations;
    ws.pool_size = pool;
    ws.n_probes = 8;
    ws.prefixed_corpus_copies = 1;
    return ws;
}

// Central finite differences through the same loss value the backward pass
// optimizes; independent of the reverse-mode path.
inline Vec numeric_grad_delta(const ToyLM& model, const TokenSeq& tokens, const PatchSpec& patch,
                              int eval_row, const DistributionLoss& loss, double step = 1e-5) {
    Vec g(model.config.d_model);
    PatchSpec p = patch;
    for (int i = 0; i < model.config.d_model; ++i) {
        p.delta = patch.delta;
        p.delta(i) += step;
        const HiddenTrace up = forward_patched(model, tokens, p);
        const double fu = loss.value(up.logits.row(eval_row));
        p.delta(i) = patch.delta(i) - step;
        const HiddenTrace dn = forward_patched(model, tokens, p);
        const double fd = loss.value(dn.logits.row(eval_row));
        g(i) = (fu - fd) / (2.0 * step);
    }
    return g;
}

inline double rel_max_err(const Vec& a, const Vec& b) {
    const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-12});
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace editlab::testutil
