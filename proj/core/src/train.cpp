#include "editlab/train.hpp"

#include <cmath>
#include <map>
#include <numeric>

namespace editlab {

namespace {

// Flat views over every parameter tensor, in a fixed order shared between the
// model and ParamGrads-shaped accumulators.
template <typename M>
std::vector<Eigen::Map<Eigen::ArrayXd>> tensor_views(M& m) {
    std::vector<Eigen::Map<Eigen::ArrayXd>> out;
    auto add = [&](auto& t) { out.emplace_back(t.data(), t.size()); };
    add(m.tok_emb);
    add(m.pos_emb);
    for (auto& L : m.layers) {
        add(L.w_q);
        add(L.b_q);
        add(L.w_k);
        add(L.b_k);
        add(L.w_v);
        add(L.b_v);
        add(L.w_o);
        add(L.b_o);
        add(L.ln1_g);
        add(L.ln1_b);
        add(L.ln2_g);
        add(L.ln2_b);
        add(L.w_in);
        add(L.b_in);
        add(L.w_out);
        add(L.b_out);
    }
    add(m.lnf_g);
    add(m.lnf_b);
    add(m.unembed);
    return out;
}

std::map<std::size_t, std::vector<std::size_t>> bucket_by_length(
    const std::vector<TokenSeq>& corpus, const std::vector<std::size_t>& order) {
    std::map<std::size_t, std::vector<std::size_t>> buckets;
    for (std::size_t idx : order) buckets[corpus[idx].size()].push_back(idx);
    return buckets;
}

// Forward + backward over one equal-length sub-batch; returns (nll_sum, preds).
std::pair<double, std::size_t> batch_grad(const ToyLM& model, const std::vector<TokenSeq>& seqs,
                                          ParamGrads& grads) {
    HiddenTrace tr = forward_batch(model, seqs);
    const int T = tr.seq_len;
    const int B = tr.batch;
    const std::size_t preds = static_cast<std::size_t>(B) * static_cast<std::size_t>(T - 1);
    double nll = 0.0;
    Mat dlogits = Mat::Zero(tr.logits.rows(), tr.logits.cols());
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t + 1 < T; ++t) {
            const int r = tr.row(b, t);
            const Token next = tr.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t + 1)];
            const Eigen::RowVectorXd lp = log_softmax_row(tr.logits.row(r));
            nll -= lp(next);
            dlogits.row(r) = lp.array().exp();
            dlogits(r, next) -= 1.0;
        }
    }
    backward_params(model, tr, dlogits, grads);
    return {nll, preds};
}

}  // namespace

double corpus_nll(const ToyLM& model, const std::vector<TokenSeq>& corpus) {
    if (corpus.empty()) throw InputError("corpus_nll: empty corpus");
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double nll = 0.0;
    std::size_t preds = 0;
    for (const auto& [len, idxs] : bucket_by_length(corpus, order)) {
        if (len < 2) throw InputError("corpus_nll: sequence shorter than 2 tokens");
        for (std::size_t start = 0; start < idxs.size(); start += 64) {
            std::vector<TokenSeq> chunk;
            for (std::size_t i = start; i < std::min(start + 64, idxs.size()); ++i)
                chunk.push_back(corpus[idxs[i]]);
            HiddenTrace tr = forward_batch(model, chunk);
            for (int b = 0; b < tr.batch; ++b)
                for (int t = 0; t + 1 < tr.seq_len; ++t) {
                    const Eigen::RowVectorXd lp = log_softmax_row(tr.logits.row(tr.row(b, t)));
                    nll -= lp(tr.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t + 1)]);
                    ++preds;
                }
        }
    }
    return nll / static_cast<double>(preds);
}

PretrainResult pretrain(ToyLM& model, const std::vector<TokenSeq>& corpus,
                        const PretrainConfig& cfg) {
    if (corpus.empty()) throw InputError("pretrain: empty corpus");
    if (cfg.epochs < 0) throw InputError("pretrain: negative epochs");
    for (const auto& s : corpus)
        if (s.size() < 2) throw InputError("pretrain: sequence shorter than 2 tokens");

    PretrainResult res;
    if (cfg.epochs == 0) {
        res.final_nll = corpus_nll(model, corpus);
        return res;
    }

    ParamGrads grads = ParamGrads::zeros(model.config);
    ParamGrads m1 = ParamGrads::zeros(model.config);
    ParamGrads m2 = ParamGrads::zeros(model.config);
    auto w_views = tensor_views(model);
    auto g_views = tensor_views(grads);
    auto m_views = tensor_views(m1);
    auto v_views = tensor_views(m2);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_nll = 0.0;
        std::size_t epoch_preds = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(start + static_cast<std::size_t>(cfg.batch_size), order.size());
            std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));

            grads.setZero();
            double nll = 0.0;
            std::size_t preds = 0;
            for (const auto& [len, idxs] : bucket_by_length(corpus, chunk)) {
                (void)len;
                std::vector<TokenSeq> seqs;
                seqs.reserve(idxs.size());
                for (std::size_t i : idxs) seqs.push_back(corpus[i]);
                auto [n, p] = batch_grad(model, seqs, grads);
                nll += n;
                preds += p;
            }
            ++step;
            if (!std::isfinite(nll))
                throw TrainingError("pretrain: NLL diverged at step " + std::to_string(step));
            const double inv = 1.0 / static_cast<double>(preds);
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < w_views.size(); ++i) {
                auto g = g_views[i] * inv;
                m_views[i] = cfg.beta1 * m_views[i] + (1.0 - cfg.beta1) * g;
                v_views[i] = cfg.beta2 * v_views[i] + (1.0 - cfg.beta2) * g.square();
                w_views[i] -=
                    cfg.learning_rate * (m_views[i] / bc1) / ((v_views[i] / bc2).sqrt() + cfg.adam_eps);
            }
            epoch_nll += nll;
            epoch_preds += preds;
        }
        res.epoch_nll.push_back(epoch_nll / static_cast<double>(epoch_preds));
    }
    res.final_nll = corpus_nll(model, corpus);
    return res;
}

double recall_top1(const ToyLM& model, const std::vector<std::pair<TokenSeq, Token>>& probes) {
    if (probes.empty()) throw InputError("recall_top1: no probes");
    std::size_t hit = 0;
    for (const auto& [prompt, target] : probes) {
        const ArgmaxInfo a = predict_next(model, prompt);
        hit += (a.unique && a.index == target);
    }
    return static_cast<double>(hit) / static_cast<double>(probes.size());
}

}  // namespace editlab
