#pragma once

#include "editlab/model.hpp"

namespace editlab {

// Pretraining: Adam (decoupled step size, bias-corrected first/second moments)
// over next-token NLL, deterministic given the seed. Sequences are shuffled
// each epoch and grouped into equal-length sub-batches inside each minibatch.
struct PretrainConfig {
    int epochs = 100;
    double learning_rate = 1e-3;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct PretrainResult {
    std::vector<double> epoch_nll;  // mean training NLL per epoch
    double final_nll = 0.0;         // full-corpus NLL after training
};

PretrainResult pretrain(ToyLM& model, const std::vector<TokenSeq>& corpus,
                        const PretrainConfig& cfg);

/// Mean next-token NLL of the corpus under the model (evaluation pass).
double corpus_nll(const ToyLM& model, const std::vector<TokenSeq>& corpus);

/// Fraction of (prompt, target) pairs where the target is the unique argmax.
double recall_top1(const ToyLM& model, const std::vector<std::pair<TokenSeq, Token>>& probes);

}  // namespace editlab
