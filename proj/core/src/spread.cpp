#include "editlab/spread.hpp"

#include "editlab/checkpoint.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace editlab {

namespace {

constexpr double kSvdRelTol = 1e-10;

// X = B A^-1 for symmetric PSD A, via eigendecomposition. Eigenvalues below
// tol * max are truncated when pinv is allowed, otherwise a NumericError.
Mat solve_right_sym(const Mat& A, const Mat& B, bool pinv_fallback, bool* pinv_used) {
    Eigen::SelfAdjointEigenSolver<Mat> es(A);
    if (es.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
    const Vec& ev = es.eigenvalues();
    const double cutoff = kSvdRelTol * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
    Vec inv = Vec::Zero(ev.size());
    bool truncated = false;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) > cutoff)
            inv(i) = 1.0 / ev(i);
        else
            truncated = true;
    }
    if (truncated) {
        if (!pinv_fallback) throw NumericError("singular system and pseudo-inverse disabled");
        if (pinv_used) *pinv_used = true;
    }
    return B * es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

// Orthogonal projector onto the complement of span(cols), rank by SVD cutoff.
Mat complement_projector(const Mat& cols) {
    const Eigen::Index d = cols.rows();
    if (cols.cols() == 0) return Mat::Identity(d, d);
    Eigen::BDCSVD<Mat> svd(cols, Eigen::ComputeThinU);
    const Vec& sv = svd.singularValues();
    const double cutoff = kSvdRelTol * std::max(sv(0), 1e-300);
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv(rank) > cutoff) ++rank;
    const Mat U1 = svd.matrixU().leftCols(rank);
    return Mat::Identity(d, d) - U1 * U1.transpose();
}

void check_dims(const Mat& W, const KVSet& kv) {
    if (kv.K.cols() != kv.V.cols()) throw InputError("KVSet: K and V column counts differ");
    if (W.cols() != kv.K.rows() || W.rows() != kv.V.rows())
        throw InputError("solver: W shape does not match KVSet");
}

}  // namespace

const char* algo_name(EditAlgo a) {
    switch (a) {
        case EditAlgo::Memit: return "memit";
        case EditAlgo::Pmet: return "pmet";
        case EditAlgo::AlphaEdit: return "alphaedit";
        case EditAlgo::Rome: return "rome";
        case EditAlgo::RRome: return "r-rome";
        case EditAlgo::Emmet: return "emmet";
        case EditAlgo::Encore: return "encore";
    }
    return "memit";
}

EditAlgo algo_from_name(const std::string& s) {
    if (s == "memit") return EditAlgo::Memit;
    if (s == "pmet") return EditAlgo::Pmet;
    if (s == "alphaedit") return EditAlgo::AlphaEdit;
    if (s == "rome") return EditAlgo::Rome;
    if (s == "r-rome" || s == "rrome") return EditAlgo::RRome;
    if (s == "emmet") return EditAlgo::Emmet;
    if (s == "encore") return EditAlgo::Encore;
    throw ConfigError("unknown editing algorithm: " + s);
}

void CausalLayerSet::validate(const ModelConfig& cfg) const {
    if (layers.empty()) throw ConfigError("CausalLayerSet: empty");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] < 0 || layers[i] >= cfg.n_layers)
            throw ConfigError("CausalLayerSet: layer " + std::to_string(layers[i]) +
                              " out of range");
        if (i > 0 && layers[i] <= layers[i - 1])
            throw ConfigError("CausalLayerSet: layers must be strictly increasing");
    }
}

void SpreadConfig::validate(const ModelConfig& cfg) const {
    layers.validate(cfg);
    if ((algo == EditAlgo::Rome || algo == EditAlgo::RRome) && layers.count() != 1)
        throw ConfigError("ROME/R-ROME edit a single layer l_*");
    if (lambda_c < 0.0 || alpha_lambda < 0.0 || encore_lambda_p < 0.0 || encore_lambda_n < 0.0)
        throw InputError("SpreadConfig: negative regularizer weight");
}

KVSet KVSet::from(const Mat& W, Mat K, Mat V) {
    KVSet kv;
    kv.K = std::move(K);
    kv.V = std::move(V);
    if (kv.K.cols() != kv.V.cols()) throw InputError("KVSet: K and V column counts differ");
    if (W.cols() != kv.K.rows() || W.rows() != kv.V.rows())
        throw InputError("KVSet: shapes do not match W");
    kv.R = kv.V - W * kv.K;
    return kv;
}

Mat solve_memit(const Mat& W, const KVSet& kv, const Mat& C, bool pinv_fallback,
                bool* pinv_used) {
    check_dims(W, kv);
    const Mat A = C + kv.K * kv.K.transpose();
    return solve_right_sym(A, kv.R * kv.K.transpose(), pinv_fallback, pinv_used);
}

Mat solve_rome(const Mat& W, const Vec& k_star, const Vec& v_star, const Mat& C) {
    if (k_star.norm() == 0.0) throw InputError("solve_rome: zero key");
    if (W.cols() != k_star.size() || W.rows() != v_star.size())
        throw InputError("solve_rome: shape mismatch");
    bool pinv = false;
    const Vec cinv_k = solve_right_sym(C, k_star.transpose(), false, &pinv).transpose();
    const double denom = k_star.dot(cinv_k);
    if (!(denom > 0.0)) throw NumericError("solve_rome: k^T C^-1 k is not positive");
    const Vec resid = v_star - W * k_star;
    return W + (resid / denom) * cinv_k.transpose();
}

Mat solve_alphaedit(const Mat& W, const KVSet& kv, const Mat& C, const Mat& preserved_keys,
                    double lambda_r) {
    check_dims(W, kv);
    if (lambda_r < 0.0) throw InputError("solve_alphaedit: negative ridge");
    const Mat P = complement_projector(preserved_keys);
    const Mat PK = P * kv.K;
    Mat A = PK * PK.transpose() + P * C * P;
    A.diagonal().array() += lambda_r;
    const Mat core = solve_right_sym(A, kv.R * PK.transpose(), true, nullptr);
    return core * P;
}

Mat solve_emmet(const Mat& W, const KVSet& kv, const Mat& C0) {
    check_dims(W, kv);
    bool pinv = false;
    // C0^-1 K via symmetric solve on the left: (C0^-1 K)^T = K^T C0^-1
    const Mat kt_c0inv = solve_right_sym(C0, kv.K.transpose(), false, &pinv);
    const Mat G = kt_c0inv * kv.K;  // K^T C0^-1 K, m x m
    Eigen::SelfAdjointEigenSolver<Mat> es(G);
    const Vec& ev = es.eigenvalues();
    if (ev.minCoeff() <= kSvdRelTol * std::max(ev.cwiseAbs().maxCoeff(), 1e-300)) {
        Eigen::ColPivHouseholderQR<Mat> qr(kv.K);
        qr.setThreshold(kSvdRelTol);
        const Eigen::Index rank = qr.rank();
        std::string cols;
        for (Eigen::Index i = rank; i < kv.K.cols(); ++i) {
            if (!cols.empty()) cols += ", ";
            cols += std::to_string(qr.colsPermutation().indices()(i));
        }
        throw NumericError("solve_emmet: edit keys are linearly dependent (columns " + cols + ")");
    }
    const Mat Ginv = es.eigenvectors() * ev.cwiseInverse().asDiagonal() *
                     es.eigenvectors().transpose();
    return W + kv.R * Ginv * kt_c0inv;
}

Mat solve_encore(const Mat& W, const KVSet& kv, const Mat& K0, double lambda_p, double lambda_n) {
    check_dims(W, kv);
    if (lambda_p < 0.0 || lambda_n < 0.0) throw InputError("solve_encore: negative weight");
    Mat A = kv.K * kv.K.transpose();
    if (K0.cols() > 0) A += lambda_p * (K0 * K0.transpose());
    A.diagonal().array() += lambda_n;
    return solve_right_sym(A, kv.R * kv.K.transpose(), true, nullptr);
}

CovMatrix cov_from_keys(const Mat& keys, double lambda_c) {
    if (keys.cols() == 0) throw InputError("cov_from_keys: no samples");
    CovMatrix cov;
    cov.scale = lambda_c;
    cov.samples = keys.cols();
    cov.C = (lambda_c / static_cast<double>(keys.cols())) * (keys * keys.transpose());
    cov.low_sample_warning = keys.cols() < keys.rows() / 4;
    return cov;
}

CovMatrix estimate_cov(const ToyLM& model, const std::vector<TokenSeq>& sample_prompts, int layer,
                       double lambda_c) {
    if (sample_prompts.empty()) throw InputError("estimate_cov: no sample prompts");
    const int d = model.config.d_mlp;
    Mat accum = Mat::Zero(d, d);
    long n = 0;
    for (const auto& s : sample_prompts) {
        const HiddenTrace tr = forward(model, s, {.with_logits = false});
        const Mat& acts = tr.layers[static_cast<std::size_t>(layer)].mlp_act;  // T x d_mlp
        accum.noalias() += acts.transpose() * acts;
        n += acts.rows();
    }
    CovMatrix cov;
    cov.scale = lambda_c;
    cov.samples = n;
    cov.C = (lambda_c / static_cast<double>(n)) * accum;
    cov.low_sample_warning = n < d / 4;
    return cov;
}

KeyValue extract_key_value(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                           const DeltaTarget& target, int layer, int layers_remaining,
                           const std::vector<TokenSeq>& prefix_pool, bool r_rome_averaging) {
    if (layers_remaining < 1) throw InputError("extract_key_value: layers_remaining < 1");
    const Rendered bare = world.fact_prompt(request.fact_index);
    const HiddenTrace tr = forward(model, bare.tokens, {.with_logits = false});

    KeyValue out;
    out.k = tr.key_act(layer, bare.subject_end);
    if (r_rome_averaging && !prefix_pool.empty()) {
        Vec sum = out.k;
        for (const auto& prefix : prefix_pool) {
            const Rendered r = world.fact_prompt(request.fact_index, prefix);
            const HiddenTrace ptr = forward(model, r.tokens, {.with_logits = false});
            sum += ptr.key_act(layer, r.subject_end);
        }
        out.k = sum / static_cast<double>(prefix_pool.size() + 1);
    }

    const Vec current = (target.site == TargetSite::MlpOutput)
                            ? tr.mlp(target.layer, target.position)
                            : tr.hidden(target.layer, target.position);
    const Vec residual = (target.target_state - current) / static_cast<double>(layers_remaining);
    const auto& W = model.layers[static_cast<std::size_t>(layer)].w_out;
    out.v = W * out.k + residual;
    return out;
}

PreservedSet preserved_keys(const ToyLM& model, const FactWorld& world,
                            const std::vector<int>& fact_indices, int layer) {
    PreservedSet ps;
    ps.keys.resize(model.config.d_mlp, static_cast<Eigen::Index>(fact_indices.size()));
    for (std::size_t i = 0; i < fact_indices.size(); ++i) {
        const Rendered r = world.fact_prompt(fact_indices[i]);
        const HiddenTrace tr = forward(model, r.tokens, {.with_logits = false});
        ps.keys.col(static_cast<Eigen::Index>(i)) = tr.key_act(layer, r.subject_end);
    }
    if (!ps.keys.allFinite()) throw NumericError("preserved_keys: non-finite key activation");
    return ps;
}

SpreadContext make_spread_context(const FactWorld& world, const EditBatch& batch,
                                  const SpreadConfig& cfg) {
    SpreadContext ctx;
    Rng rng(cfg.seed);

    std::vector<std::size_t> lines(world.pretrain_corpus.size());
    std::iota(lines.begin(), lines.end(), std::size_t{0});
    rng.shuffle(lines);
    const std::size_t n_cov =
        std::min(lines.size(), static_cast<std::size_t>(std::max(1, cfg.cov_sample_sequences)));
    for (std::size_t i = 0; i < n_cov; ++i) ctx.cov_sequences.push_back(world.pretrain_corpus[lines[i]]);

    std::unordered_set<int> edited;
    for (const auto& r : batch.requests) edited.insert(r.fact_index);
    std::vector<int> unedited;
    for (std::size_t i = 0; i < world.facts.size(); ++i)
        if (!edited.count(static_cast<int>(i))) unedited.push_back(static_cast<int>(i));
    rng.shuffle(unedited);
    if (static_cast<int>(unedited.size()) > cfg.preserved_cap)
        unedited.resize(static_cast<std::size_t>(cfg.preserved_cap));
    std::sort(unedited.begin(), unedited.end());
    ctx.preserved_facts = std::move(unedited);
    return ctx;
}

namespace {

std::unordered_map<int, const EditRequest*> request_index(const EditBatch& batch) {
    std::unordered_map<int, const EditRequest*> m;
    for (const auto& r : batch.requests) m.emplace(r.id, &r);
    return m;
}

void maybe_dump(const SpreadConfig& cfg, int iteration, int layer, const KVSet& kv, const Mat& C,
                const Mat& delta) {
    if (cfg.debug_dump_dir.empty()) return;
    std::filesystem::create_directories(cfg.debug_dump_dir);
    const std::string path = cfg.debug_dump_dir + "/solver_iter" + std::to_string(iteration) +
                             "_layer" + std::to_string(layer) + ".bin";
    save_matrices({{"K", kv.K}, {"V", kv.V}, {"R", kv.R}, {"C", C}, {"Delta", delta}}, path);
}

}  // namespace

ToyLM apply_edit(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                 const std::vector<DeltaTarget>& targets, const SpreadConfig& cfg,
                 const SpreadContext& ctx, SpreadReport* report, int iteration) {
    cfg.validate(model.config);
    SpreadReport rep;
    ToyLM work = model;
    if (targets.empty()) {
        if (report) *report = rep;
        return work;
    }

    const auto by_id = request_index(batch);
    auto request_for = [&](const DeltaTarget& t) -> const EditRequest& {
        auto it = by_id.find(t.request_id);
        if (it == by_id.end())
            throw InputError("apply_edit: target for unknown request " +
                             std::to_string(t.request_id));
        return *it->second;
    };

    const bool single_layer_rank_one =
        (cfg.algo == EditAlgo::Rome || cfg.algo == EditAlgo::RRome);

    if (single_layer_rank_one) {
        const int l = cfg.layers.layers.front();
        rep.rome_sequential_batch = targets.size() > 1;
        CovMatrix cov = estimate_cov(work, ctx.cov_sequences, l, cfg.lambda_c);
        rep.cov_warnings += cov.low_sample_warning;
        // one fact at a time; later edits see the earlier updates
        for (const auto& t : targets) {
            const auto& req = request_for(t);
            const KeyValue kvp = extract_key_value(work, world, req, t, l, 1, batch.prefix_pool,
                                                   cfg.algo == EditAlgo::RRome);
            auto& W = work.layers[static_cast<std::size_t>(l)].w_out;
            const Mat updated = solve_rome(W, kvp.k, kvp.v, cov.C);
            if (!cfg.debug_dump_dir.empty()) {
                KVSet kv = KVSet::from(W, kvp.k, kvp.v);
                maybe_dump(cfg, iteration, l, kv, cov.C, updated - W);
            }
            W = updated;
        }
        if (!work.all_finite()) throw NumericError("apply_edit: non-finite weights after update");
        if (report) *report = rep;
        return work;
    }

    const int c = cfg.layers.count();
    for (int j = 0; j < c; ++j) {
        const int l = cfg.layers.layers[static_cast<std::size_t>(j)];
        const int remaining = c - j;

        Mat K(model.config.d_mlp, static_cast<Eigen::Index>(targets.size()));
        Mat V(model.config.d_model, static_cast<Eigen::Index>(targets.size()));
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const KeyValue kvp = extract_key_value(work, world, request_for(targets[i]),
                                                   targets[i], l, remaining, batch.prefix_pool,
                                                   false);
            K.col(static_cast<Eigen::Index>(i)) = kvp.k;
            V.col(static_cast<Eigen::Index>(i)) = kvp.v;
        }
        auto& W = work.layers[static_cast<std::size_t>(l)].w_out;
        const KVSet kv = KVSet::from(W, std::move(K), std::move(V));
        const CovMatrix cov = estimate_cov(work, ctx.cov_sequences, l, cfg.lambda_c);
        rep.cov_warnings += cov.low_sample_warning;

        Mat delta;
        switch (cfg.algo) {
            case EditAlgo::Memit:
            case EditAlgo::Pmet: {
                bool pinv = false;
                delta = solve_memit(W, kv, cov.C, cfg.pseudo_inverse_fallback, &pinv);
                rep.pinv_fallbacks += pinv;
                break;
            }
            case EditAlgo::AlphaEdit: {
                const PreservedSet ps = preserved_keys(work, world, ctx.preserved_facts, l);
                delta = solve_alphaedit(W, kv, cov.C, ps.keys, cfg.alpha_lambda);
                break;
            }
            case EditAlgo::Emmet: {
                const PreservedSet ps = preserved_keys(work, world, ctx.preserved_facts, l);
                // C0 = K0 K0^T needs full rank at toy scale; tiny ridge keeps
                // it invertible without visibly moving the solution
                Mat C0 = ps.keys * ps.keys.transpose();
                const double ridge = 1e-8 * std::max(C0.trace() / C0.rows(), 1e-12);
                C0.diagonal().array() += ridge;
                delta = solve_emmet(W, kv, C0) - W;
                break;
            }
            case EditAlgo::Encore: {
                const PreservedSet ps = preserved_keys(work, world, ctx.preserved_facts, l);
                delta = solve_encore(W, kv, ps.keys, cfg.encore_lambda_p, cfg.encore_lambda_n);
                break;
            }
            case EditAlgo::Rome:
            case EditAlgo::RRome:
                throw ConfigError("unreachable: rank-one algorithms handled above");
        }
        maybe_dump(cfg, iteration, l, kv, cov.C, delta);
        W += delta;
        if (!W.allFinite())
            throw NumericError("apply_edit: non-finite weights after layer " + std::to_string(l));
    }
    if (report) *report = rep;
    return work;
}

}  // namespace editlab
