#pragma once

#include "editlab/factworld.hpp"
#include "editlab/model.hpp"
#include "editlab/optimize.hpp"

namespace editlab {

// Spread stage: key/value extraction at the causal layers, covariance
// regularizer estimation, and the per-algorithm closed-form updates applied
// to the last-MLP matrices.

enum class EditAlgo { Memit, Pmet, AlphaEdit, Rome, RRome, Emmet, Encore };

const char* algo_name(EditAlgo a);
EditAlgo algo_from_name(const std::string& s);

struct CausalLayerSet {
    std::vector<int> layers;  // strictly increasing, all < L
    void validate(const ModelConfig& cfg) const;
    int top() const { return layers.back(); }
    int count() const { return static_cast<int>(layers.size()); }
};

struct KVSet {
    Mat K;  // d_mlp x m, one key column per edit
    Mat V;  // d_model x m target values
    Mat R;  // V - W K
    static KVSet from(const Mat& W, Mat K, Mat V);
};

struct CovMatrix {
    Mat C;  // d_mlp x d_mlp, symmetric PSD
    double scale = 0.0;
    long samples = 0;
    bool low_sample_warning = false;
};

struct PreservedSet {
    Mat keys;  // d_mlp x E
    Mat values;  // optional, may be 0x0
};

struct SpreadConfig {
    EditAlgo algo = EditAlgo::Memit;
    CausalLayerSet layers;
    double lambda_c = 100.0;       // covariance scale
    double alpha_lambda = 1e-6;    // AlphaEdit ridge
    double encore_lambda_p = 0.05;
    double encore_lambda_n = 0.1;
    int cov_sample_sequences = 128;
    int preserved_cap = 512;
    std::uint64_t seed = 0;  // sampling of covariance lines / preserved facts
    bool pseudo_inverse_fallback = true;
    std::string debug_dump_dir;  // empty = no solver dumps

    void validate(const ModelConfig& cfg) const;
};

// -- closed-form solvers (pure matrix functions) --

/// MEMIT/PMET least-squares update: Delta = R K^T (C + K K^T)^-1.
Mat solve_memit(const Mat& W, const KVSet& kv, const Mat& C, bool pinv_fallback = true,
                bool* pinv_used = nullptr);

/// ROME rank-one equality-constrained update; returns W-hat with W-hat k = v.
Mat solve_rome(const Mat& W, const Vec& k_star, const Vec& v_star, const Mat& C);

/// AlphaEdit: update confined to the orthogonal complement of span(K_E);
/// Delta K_E = 0 holds exactly via the right projector factor.
Mat solve_alphaedit(const Mat& W, const KVSet& kv, const Mat& C, const Mat& preserved_keys,
                    double lambda_r);

/// EMMET equality-constrained batch update; returns W-hat with W-hat K = V.
Mat solve_emmet(const Mat& W, const KVSet& kv, const Mat& C0);

/// ENCORE norm-constrained update:
/// Delta = (V - W K1) K1^T (lp K0 K0^T + K1 K1^T + ln I)^-1.
Mat solve_encore(const Mat& W, const KVSet& kv, const Mat& K0, double lambda_p, double lambda_n);

// -- extraction and application --

/// lambda_c * uncentered second moment of key activations, all positions.
CovMatrix cov_from_keys(const Mat& keys /* d_mlp x N */, double lambda_c);
CovMatrix estimate_cov(const ToyLM& model, const std::vector<TokenSeq>& sample_prompts, int layer,
                       double lambda_c);

struct KeyValue {
    Vec k;
    Vec v;
};

/// k: post-GELU first-MLP activation at (layer, t) of the bare edit prompt
/// (mean over prefixed renderings when r_rome_averaging); v: W k plus this
/// layer's share of the remaining residual toward the target state.
KeyValue extract_key_value(const ToyLM& model, const FactWorld& world, const EditRequest& request,
                           const DeltaTarget& target, int layer, int layers_remaining,
                           const std::vector<TokenSeq>& prefix_pool, bool r_rome_averaging);

/// Key activations of preserved (unedited) facts at one layer.
PreservedSet preserved_keys(const ToyLM& model, const FactWorld& world,
                            const std::vector<int>& fact_indices, int layer);

struct SpreadContext {
    std::vector<TokenSeq> cov_sequences;
    std::vector<int> preserved_facts;
};
SpreadContext make_spread_context(const FactWorld& world, const EditBatch& batch,
                                  const SpreadConfig& cfg);

struct SpreadReport {
    bool rome_sequential_batch = false;  // ROME asked to batch-edit m > 1
    int pinv_fallbacks = 0;
    int cov_warnings = 0;
};

/// Applies the algorithm's update for every target; multi-layer algorithms
/// sweep the causal layers in ascending order, re-extracting keys and
/// residuals after each layer's update. Returns a new model.
ToyLM apply_edit(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                 const std::vector<DeltaTarget>& targets, const SpreadConfig& cfg,
                 const SpreadContext& ctx, SpreadReport* report = nullptr, int iteration = 0);

}  // namespace editlab
