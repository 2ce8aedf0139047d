#pragma once

#include "editlab/common.hpp"

#include <memory>
#include <span>

namespace editlab {

// A small deterministic autoregressive transformer, f64 throughout.
// Pre-norm blocks: h' = h + Attn(LN1(h)); h_out = h' + MLP(LN2(h')), GELU
// nonlinearity, learned absolute positions, final LayerNorm before the
// unembedding. Forward keeps a full activation trace so hidden states can be
// read, patched additively, and differentiated against.

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_mlp = 256;
    int max_seq_len = 32;
    std::uint64_t seed = 42;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;  // throws ConfigError
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Mat w_q, w_k, w_v, w_o;  // d_model x d_model, applied as x * W^T + b
    Vec b_q, b_k, b_v, b_o;
    Vec ln1_g, ln1_b, ln2_g, ln2_b;
    Mat w_in;   // d_mlp x d_model
    Vec b_in;   // d_mlp
    Mat w_out;  // d_model x d_mlp   (the "last MLP" matrix the editors touch)
    Vec b_out;  // d_model
};

struct ToyLM {
    ModelConfig config;
    Mat tok_emb;  // vocab x d_model
    Mat pos_emb;  // max_seq_len x d_model
    std::vector<LayerWeights> layers;
    Vec lnf_g, lnf_b;
    Mat unembed;  // vocab x d_model, logits = x * unembed^T

    static ToyLM init(const ModelConfig& cfg);  // seeded from cfg.seed
    bool all_finite() const;
    std::uint64_t weight_hash() const;
};

enum class PatchSite { HiddenState, MlpOutput, AttnOutput };

// Additive intervention delta at one (site, layer, position).
struct PatchSpec {
    PatchSite site = PatchSite::HiddenState;
    int layer = 0;
    int position = 0;
    Vec delta;

    void validate(const ModelConfig& cfg, int seq_len) const;  // throws InputError
};

// Full activation record for a forward pass over a batch of B equal-length
// sequences (rows are position-major: row(b * T + t)). Single-sequence calls
// are the B = 1 case. Patched values are stored as seen by downstream layers.
struct HiddenTrace {
    int batch = 0;
    int seq_len = 0;
    std::vector<TokenSeq> tokens;

    Mat x0;  // embeddings
    struct Layer {
        Mat ln1_xhat, ln1_out;
        Vec ln1_rstd;
        Mat q, k, v;              // N x d_model
        std::vector<Mat> probs;   // [b * n_heads + h] -> T x T causal softmax
        Mat ctx;                  // N x d_model, heads concatenated
        Mat attn_out;             // N x d_model (attention-module output)
        Mat h_mid;                // residual after attention
        Mat ln2_xhat, ln2_out;
        Vec ln2_rstd;
        Mat mlp_pre;              // N x d_mlp
        Mat mlp_act;              // N x d_mlp, GELU(mlp_pre): the "key" k_t^l
        Mat mlp_out;              // N x d_model: z_t^l
        Mat h_out;                // N x d_model: h_t^l
    };
    std::vector<Layer> layers;
    Mat lnf_xhat, lnf_out;
    Vec lnf_rstd;
    Mat logits;  // N x vocab; empty unless requested

    int row(int b, int t) const { return b * seq_len + t; }

    // spec-named readouts, single sequence (b = 0)
    Vec hidden(int layer, int t) const { return layers.at(layer).h_out.row(t).transpose(); }
    Vec attn(int layer, int t) const { return layers.at(layer).attn_out.row(t).transpose(); }
    Vec key_act(int layer, int t) const { return layers.at(layer).mlp_act.row(t).transpose(); }
    Vec mlp(int layer, int t) const { return layers.at(layer).mlp_out.row(t).transpose(); }
};

struct ForwardOptions {
    bool with_logits = true;  // materialize the full N x vocab logit matrix
};

/// Forward pass; logits row i depends only on tokens 0..i.
HiddenTrace forward(const ToyLM& model, const TokenSeq& tokens,
                    const ForwardOptions& opt = {});

/// Forward with additive patches applied at their sites.
HiddenTrace forward_patched(const ToyLM& model, const TokenSeq& tokens,
                            std::span<const PatchSpec> patches,
                            const ForwardOptions& opt = {});
HiddenTrace forward_patched(const ToyLM& model, const TokenSeq& tokens,
                            const PatchSpec& patch, const ForwardOptions& opt = {});

/// Equal-length batch forward (training / sampling paths).
HiddenTrace forward_batch(const ToyLM& model, const std::vector<TokenSeq>& seqs,
                          const ForwardOptions& opt = {});

/// Recompute only the layers at and above the lowest patch site, reusing the
/// unpatched base trace below. Bit-identical to forward_patched.
HiddenTrace forward_resume(const ToyLM& model, const HiddenTrace& base,
                           std::span<const PatchSpec> patches,
                           const ForwardOptions& opt = {});

/// Logits for one row without materializing the full matrix.
Eigen::RowVectorXd row_logits(const ToyLM& model, const HiddenTrace& trace, int row);

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& logits);
Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& logits);

struct ArgmaxInfo {
    Token index = 0;
    bool unique = true;
};
ArgmaxInfo argmax_row(const Eigen::RowVectorXd& row);

/// Scalar loss on the next-token distribution at one position, expressed on
/// logits. grad() returns dloss/dlogits for reverse mode; value() is what the
/// finite-difference oracle probes.
struct DistributionLoss {
    virtual ~DistributionLoss() = default;
    virtual double value(const Eigen::RowVectorXd& logits) const = 0;
    virtual Eigen::RowVectorXd grad(const Eigen::RowVectorXd& logits) const = 0;
};

struct NllLoss final : DistributionLoss {
    Token target;
    explicit NllLoss(Token t) : target(t) {}
    double value(const Eigen::RowVectorXd& logits) const override;
    Eigen::RowVectorXd grad(const Eigen::RowVectorXd& logits) const override;
};

// D_KL(softmax(logits) || reference)
struct KlToReference final : DistributionLoss {
    Eigen::RowVectorXd ref_log_probs;
    explicit KlToReference(Eigen::RowVectorXd ref) : ref_log_probs(std::move(ref)) {}
    double value(const Eigen::RowVectorXd& logits) const override;
    Eigen::RowVectorXd grad(const Eigen::RowVectorXd& logits) const override;
};

// Seed gradient: dloss/dlogits at a handful of rows.
struct LogitGrad {
    int row;
    Eigen::RowVectorXd dlogits;
};

/// Reverse-mode gradient of a loss (given as logit-row gradients) with
/// respect to the additive deltas at each listed site. One backward sweep;
/// does not descend below the lowest site. Trace must come from a forward on
/// the same weights with the deltas already applied (zero deltas are fine).
std::vector<Vec> backward_to_sites(const ToyLM& model, const HiddenTrace& trace,
                                   std::span<const LogitGrad> seeds,
                                   std::span<const PatchSpec> sites);

/// grad_wrt_delta: d loss / d delta for a patch evaluated at `patch.delta`,
/// with the loss read at `eval_position` of the (patched) output.
Vec grad_wrt_delta(const ToyLM& model, const TokenSeq& tokens, const PatchSpec& patch,
                   int eval_position, const DistributionLoss& loss);

// Parameter-shaped gradient accumulator for training.
struct ParamGrads {
    Mat tok_emb, pos_emb;
    struct Layer {
        Mat w_q, w_k, w_v, w_o;
        Vec b_q, b_k, b_v, b_o;
        Vec ln1_g, ln1_b, ln2_g, ln2_b;
        Mat w_in;
        Vec b_in;
        Mat w_out;
        Vec b_out;
    };
    std::vector<Layer> layers;
    Vec lnf_g, lnf_b;
    Mat unembed;

    static ParamGrads zeros(const ModelConfig& cfg);
    void add(const ParamGrads& other);
    void setZero();
};

/// Full backward over all parameters given dense dlogits (training path).
void backward_params(const ToyLM& model, const HiddenTrace& trace, const Mat& dlogits,
                     ParamGrads& grads);

/// exp(mean next-token NLL) over every prediction in `seqs`.
double sequence_perplexity(const ToyLM& model, const std::vector<TokenSeq>& seqs);

/// Greedy next-token prediction at the end of `tokens`.
ArgmaxInfo predict_next(const ToyLM& model, const TokenSeq& tokens);

}  // namespace editlab
