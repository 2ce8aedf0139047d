#include "editlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace editlab {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014326779399461;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_prime(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// y = gamma .* xhat + beta, xhat = (x - mean) * rstd, per row
void layer_norm(const Mat& x, const Vec& g, const Vec& b, Mat& xhat, Mat& out, Vec& rstd) {
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    out.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd(i) = rs;
        xhat.row(i) = (x.row(i).array() - mu) * rs;
        out.row(i) = xhat.row(i).array() * g.transpose().array() + b.transpose().array();
    }
}

// dx for y = LN(x); optionally accumulates dgamma / dbeta
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const Vec& g,
                        Vec* dgamma, Vec* dbeta) {
    const auto n = dy.rows();
    const auto d = dy.cols();
    Mat dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd dxhat = dy.row(i).array() * g.transpose().array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat.array() * xhat.row(i).array()).mean();
        dx.row(i) = rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
    }
    if (dgamma) *dgamma += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
    if (dbeta) *dbeta += dy.colwise().sum().transpose();
    return dx;
}

struct SitePatches {
    // (position, delta) per site for one layer
    std::vector<std::pair<int, const Vec*>> attn, mlp, hidden;
    bool any() const { return !attn.empty() || !mlp.empty() || !hidden.empty(); }
};

std::vector<SitePatches> group_patches(std::span<const PatchSpec> patches, int n_layers) {
    std::vector<SitePatches> by_layer(static_cast<std::size_t>(n_layers));
    for (const auto& p : patches) {
        auto& slot = by_layer[static_cast<std::size_t>(p.layer)];
        switch (p.site) {
            case PatchSite::AttnOutput: slot.attn.emplace_back(p.position, &p.delta); break;
            case PatchSite::MlpOutput: slot.mlp.emplace_back(p.position, &p.delta); break;
            case PatchSite::HiddenState: slot.hidden.emplace_back(p.position, &p.delta); break;
        }
    }
    return by_layer;
}

void add_deltas(Mat& m, const std::vector<std::pair<int, const Vec*>>& ds) {
    for (const auto& [pos, delta] : ds) m.row(pos) += delta->transpose();
}

// Stages of a block, used to resume mid-layer after a patch.
enum Stage : int { kAttn = 0, kMlp = 1, kHidden = 2 };

class ForwardPass {
public:
    ForwardPass(const ToyLM& model, HiddenTrace& tr) : m_(model), tr_(tr) {}

    void embed() {
        const int N = tr_.batch * tr_.seq_len;
        tr_.x0.resize(N, m_.config.d_model);
        for (int b = 0; b < tr_.batch; ++b)
            for (int t = 0; t < tr_.seq_len; ++t)
                tr_.x0.row(tr_.row(b, t)) =
                    m_.tok_emb.row(tr_.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) +
                    m_.pos_emb.row(t);
    }

    const Mat& layer_input(int l) const {
        return l == 0 ? tr_.x0 : tr_.layers[static_cast<std::size_t>(l - 1)].h_out;
    }

    // Runs one block from `from` onward; earlier stages must already be in the
    // trace (either freshly computed or copied from an unpatched base).
    void run_layer(int l, Stage from, const SitePatches& sp) {
        auto& L = tr_.layers[static_cast<std::size_t>(l)];
        const auto& W = m_.layers[static_cast<std::size_t>(l)];
        const Mat& h_in = layer_input(l);
        const int T = tr_.seq_len;
        const int H = m_.config.n_heads;
        const int dh = m_.config.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        if (from <= kAttn) {
            layer_norm(h_in, W.ln1_g, W.ln1_b, L.ln1_xhat, L.ln1_out, L.ln1_rstd);
            L.q.noalias() = L.ln1_out * W.w_q.transpose();
            L.q.rowwise() += W.b_q.transpose();
            L.k.noalias() = L.ln1_out * W.w_k.transpose();
            L.k.rowwise() += W.b_k.transpose();
            L.v.noalias() = L.ln1_out * W.w_v.transpose();
            L.v.rowwise() += W.b_v.transpose();
            L.ctx.resize(h_in.rows(), m_.config.d_model);
            L.probs.assign(static_cast<std::size_t>(tr_.batch * H), Mat());
            for (int b = 0; b < tr_.batch; ++b) {
                for (int h = 0; h < H; ++h) {
                    auto Qh = L.q.block(b * T, h * dh, T, dh);
                    auto Kh = L.k.block(b * T, h * dh, T, dh);
                    auto Vh = L.v.block(b * T, h * dh, T, dh);
                    Mat scores = (Qh * Kh.transpose()) * scale;
                    Mat& P = L.probs[static_cast<std::size_t>(b * H + h)];
                    P.setZero(T, T);
                    for (int i = 0; i < T; ++i) {
                        auto row = scores.row(i).head(i + 1);
                        const double mx = row.maxCoeff();
                        Eigen::RowVectorXd e = (row.array() - mx).exp();
                        P.row(i).head(i + 1) = e / e.sum();
                    }
                    L.ctx.block(b * T, h * dh, T, dh).noalias() = P * Vh;
                }
            }
            L.attn_out.noalias() = L.ctx * W.w_o.transpose();
            L.attn_out.rowwise() += W.b_o.transpose();
        }
        add_deltas(L.attn_out, sp.attn);
        if (from <= kMlp || !sp.attn.empty()) {
            L.h_mid = h_in + L.attn_out;
            layer_norm(L.h_mid, W.ln2_g, W.ln2_b, L.ln2_xhat, L.ln2_out, L.ln2_rstd);
            L.mlp_pre.noalias() = L.ln2_out * W.w_in.transpose();
            L.mlp_pre.rowwise() += W.b_in.transpose();
            L.mlp_act = L.mlp_pre.unaryExpr([](double x) { return gelu(x); });
            L.mlp_out.noalias() = L.mlp_act * W.w_out.transpose();
            L.mlp_out.rowwise() += W.b_out.transpose();
        }
        add_deltas(L.mlp_out, sp.mlp);
        L.h_out = L.h_mid + L.mlp_out;
        add_deltas(L.h_out, sp.hidden);
    }

    void head(bool with_logits) {
        const Mat& top = tr_.layers.back().h_out;
        layer_norm(top, m_.lnf_g, m_.lnf_b, tr_.lnf_xhat, tr_.lnf_out, tr_.lnf_rstd);
        if (with_logits) {
            tr_.logits.noalias() = tr_.lnf_out * m_.unembed.transpose();
        } else {
            tr_.logits.resize(0, 0);
        }
    }

private:
    const ToyLM& m_;
    HiddenTrace& tr_;
};

HiddenTrace run_forward(const ToyLM& model, std::vector<TokenSeq> seqs,
                        std::span<const PatchSpec> patches, const ForwardOptions& opt) {
    if (seqs.empty()) throw InputError("forward: empty batch");
    const int T = static_cast<int>(seqs.front().size());
    if (T == 0) throw InputError("forward: empty token sequence");
    if (T > model.config.max_seq_len)
        throw InputError("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                         std::to_string(model.config.max_seq_len));
    for (const auto& s : seqs) {
        if (static_cast<int>(s.size()) != T) throw InputError("forward_batch: unequal lengths");
        for (Token t : s)
            if (t < 0 || t >= model.config.vocab_size)
                throw InputError("forward: token " + std::to_string(t) + " out of range");
    }
    for (const auto& p : patches) p.validate(model.config, T);

    HiddenTrace tr;
    tr.batch = static_cast<int>(seqs.size());
    tr.seq_len = T;
    tr.tokens = std::move(seqs);
    tr.layers.resize(static_cast<std::size_t>(model.config.n_layers));

    ForwardPass fp(model, tr);
    fp.embed();
    const auto by_layer = group_patches(patches, model.config.n_layers);
    for (int l = 0; l < model.config.n_layers; ++l)
        fp.run_layer(l, kAttn, by_layer[static_cast<std::size_t>(l)]);
    fp.head(opt.with_logits);
    return tr;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_mlp <= 0 ||
        max_seq_len <= 0)
        throw ConfigError("ModelConfig: all counts must be positive");
    if (d_model % n_heads != 0) throw ConfigError("ModelConfig: d_model not divisible by n_heads");
    if (n_layers < 2) throw ConfigError("ModelConfig: need n_layers >= 2 for editing");
}

void PatchSpec::validate(const ModelConfig& cfg, int seq_len) const {
    if (layer < 0 || layer >= cfg.n_layers)
        throw InputError("PatchSpec: layer " + std::to_string(layer) + " out of range");
    if (position < 0 || position >= seq_len)
        throw InputError("PatchSpec: position " + std::to_string(position) + " out of range");
    if (delta.size() != cfg.d_model) throw InputError("PatchSpec: delta has wrong dimension");
    if (!delta.allFinite()) throw InputError("PatchSpec: delta not finite");
}

ToyLM ToyLM::init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const double std0 = 0.02;
    auto randn = [&](Eigen::Index r, Eigen::Index c, double sd) {
        Mat m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = sd * rng.normal();
        return m;
    };

    ToyLM m;
    m.config = cfg;
    m.tok_emb = randn(cfg.vocab_size, cfg.d_model, std0);
    m.pos_emb = randn(cfg.max_seq_len, cfg.d_model, std0);
    const double resid_sd = std0 / std::sqrt(2.0 * cfg.n_layers);
    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& L : m.layers) {
        L.w_q = randn(cfg.d_model, cfg.d_model, std0);
        L.w_k = randn(cfg.d_model, cfg.d_model, std0);
        L.w_v = randn(cfg.d_model, cfg.d_model, std0);
        L.w_o = randn(cfg.d_model, cfg.d_model, resid_sd);
        L.b_q = Vec::Zero(cfg.d_model);
        L.b_k = Vec::Zero(cfg.d_model);
        L.b_v = Vec::Zero(cfg.d_model);
        L.b_o = Vec::Zero(cfg.d_model);
        L.ln1_g = Vec::Ones(cfg.d_model);
        L.ln1_b = Vec::Zero(cfg.d_model);
        L.ln2_g = Vec::Ones(cfg.d_model);
        L.ln2_b = Vec::Zero(cfg.d_model);
        L.w_in = randn(cfg.d_mlp, cfg.d_model, std0);
        L.b_in = Vec::Zero(cfg.d_mlp);
        L.w_out = randn(cfg.d_model, cfg.d_mlp, resid_sd);
        L.b_out = Vec::Zero(cfg.d_model);
    }
    m.lnf_g = Vec::Ones(cfg.d_model);
    m.lnf_b = Vec::Zero(cfg.d_model);
    m.unembed = randn(cfg.vocab_size, cfg.d_model, std0);
    return m;
}

bool ToyLM::all_finite() const {
    auto ok = [](const Mat& m) { return m.allFinite(); };
    auto okv = [](const Vec& v) { return v.allFinite(); };
    if (!ok(tok_emb) || !ok(pos_emb) || !ok(unembed) || !okv(lnf_g) || !okv(lnf_b)) return false;
    for (const auto& L : layers) {
        if (!ok(L.w_q) || !ok(L.w_k) || !ok(L.w_v) || !ok(L.w_o) || !ok(L.w_in) || !ok(L.w_out))
            return false;
        if (!okv(L.b_q) || !okv(L.b_k) || !okv(L.b_v) || !okv(L.b_o) || !okv(L.b_in) ||
            !okv(L.b_out))
            return false;
        if (!okv(L.ln1_g) || !okv(L.ln1_b) || !okv(L.ln2_g) || !okv(L.ln2_b)) return false;
    }
    return true;
}

std::uint64_t ToyLM::weight_hash() const {
    std::uint64_t h = fnv1a64(tok_emb);
    h = fnv1a64(pos_emb, h);
    for (const auto& L : layers) {
        for (const Mat* m : {&L.w_q, &L.w_k, &L.w_v, &L.w_o, &L.w_in, &L.w_out}) h = fnv1a64(*m, h);
        for (const Vec* v : {&L.b_q, &L.b_k, &L.b_v, &L.b_o, &L.b_in, &L.b_out, &L.ln1_g, &L.ln1_b,
                             &L.ln2_g, &L.ln2_b})
            h = fnv1a64(*v, h);
    }
    h = fnv1a64(lnf_g, h);
    h = fnv1a64(lnf_b, h);
    h = fnv1a64(unembed, h);
    return h;
}

HiddenTrace forward(const ToyLM& model, const TokenSeq& tokens, const ForwardOptions& opt) {
    return run_forward(model, {tokens}, {}, opt);
}

HiddenTrace forward_patched(const ToyLM& model, const TokenSeq& tokens,
                            std::span<const PatchSpec> patches, const ForwardOptions& opt) {
    return run_forward(model, {tokens}, patches, opt);
}

HiddenTrace forward_patched(const ToyLM& model, const TokenSeq& tokens, const PatchSpec& patch,
                            const ForwardOptions& opt) {
    return run_forward(model, {tokens}, {&patch, 1}, opt);
}

HiddenTrace forward_batch(const ToyLM& model, const std::vector<TokenSeq>& seqs,
                          const ForwardOptions& opt) {
    return run_forward(model, seqs, {}, opt);
}

HiddenTrace forward_resume(const ToyLM& model, const HiddenTrace& base,
                           std::span<const PatchSpec> patches, const ForwardOptions& opt) {
    if (patches.empty()) return base;
    for (const auto& p : patches) p.validate(model.config, base.seq_len);

    HiddenTrace tr = base;
    ForwardPass fp(model, tr);
    const auto by_layer = group_patches(patches, model.config.n_layers);

    int first = model.config.n_layers;
    for (int l = 0; l < model.config.n_layers; ++l) {
        if (by_layer[static_cast<std::size_t>(l)].any()) {
            first = l;
            break;
        }
    }
    for (int l = first; l < model.config.n_layers; ++l) {
        const auto& sp = by_layer[static_cast<std::size_t>(l)];
        // At the first affected layer everything below the patched stage is
        // still valid in the copied base; run_layer applies the deltas and
        // recomputes only what they feed.
        const Stage from = (l > first) ? kAttn : (!sp.attn.empty() ? kMlp : kHidden);
        fp.run_layer(l, from, sp);
    }
    fp.head(opt.with_logits);
    return tr;
}

Eigen::RowVectorXd row_logits(const ToyLM& model, const HiddenTrace& trace, int row) {
    if (trace.logits.size() > 0) return trace.logits.row(row);
    return trace.lnf_out.row(row) * model.unembed.transpose();
}

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& logits) {
    const double mx = logits.maxCoeff();
    Eigen::RowVectorXd e = (logits.array() - mx).exp();
    return e / e.sum();
}

Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& logits) {
    const double mx = logits.maxCoeff();
    Eigen::ArrayXd sh = (logits.array() - mx).transpose();
    const double lse = std::log(sh.exp().sum());
    return (sh - lse).transpose().matrix();
}

ArgmaxInfo argmax_row(const Eigen::RowVectorXd& row) {
    ArgmaxInfo out;
    Eigen::Index idx = 0;
    const double mx = row.maxCoeff(&idx);
    out.index = static_cast<Token>(idx);
    int ties = 0;
    for (Eigen::Index i = 0; i < row.size(); ++i) ties += (row(i) == mx);
    out.unique = (ties == 1);
    return out;
}

double NllLoss::value(const Eigen::RowVectorXd& logits) const {
    return -log_softmax_row(logits)(target);
}

Eigen::RowVectorXd NllLoss::grad(const Eigen::RowVectorXd& logits) const {
    Eigen::RowVectorXd g = softmax_row(logits);
    g(target) -= 1.0;
    return g;
}

double KlToReference::value(const Eigen::RowVectorXd& logits) const {
    const Eigen::RowVectorXd lp = log_softmax_row(logits);
    double kl = 0.0;
    for (Eigen::Index i = 0; i < lp.size(); ++i)
        kl += std::exp(lp(i)) * (lp(i) - ref_log_probs(i));
    return kl;
}

Eigen::RowVectorXd KlToReference::grad(const Eigen::RowVectorXd& logits) const {
    const Eigen::RowVectorXd lp = log_softmax_row(logits);
    const Eigen::RowVectorXd p = lp.array().exp();
    const double kl = (p.array() * (lp - ref_log_probs).array()).sum();
    return p.array() * ((lp - ref_log_probs).array() - kl);
}

namespace {

// Shared reverse sweep over the block stack.
struct BackwardSweep {
    const ToyLM& m;
    const HiddenTrace& tr;
    ParamGrads* pg;

    BackwardSweep(const ToyLM& model, const HiddenTrace& trace, ParamGrads* grads = nullptr)
        : m(model), tr(trace), pg(grads) {}

    // dh: gradient wrt h_out of layer l (input) -> gradient wrt h_out of l-1.
    // site gradients are harvested by the caller between steps.
    Mat dh;       // running gradient wrt current layer output
    Mat d_hmid;   // set during layer step, gradient wrt h_mid (for attn site)

    void from_logit_seeds(std::span<const LogitGrad> seeds) {
        const int N = tr.batch * tr.seq_len;
        Mat dlnf = Mat::Zero(N, m.config.d_model);
        for (const auto& s : seeds) dlnf.row(s.row) += s.dlogits * m.unembed;
        if (pg) {
            for (const auto& s : seeds) pg->unembed += s.dlogits.transpose() * tr.lnf_out.row(s.row);
        }
        dh = layer_norm_backward(dlnf, tr.lnf_xhat, tr.lnf_rstd, m.lnf_g,
                                 pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);
    }

    void from_dense_logits(const Mat& dlogits) {
        Mat dlnf = dlogits * m.unembed;
        if (pg) pg->unembed += dlogits.transpose() * tr.lnf_out;
        dh = layer_norm_backward(dlnf, tr.lnf_xhat, tr.lnf_rstd, m.lnf_g,
                                 pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);
    }

    // One block backward; afterwards dh is the gradient wrt layer l's input.
    void layer_backward(int l) {
        const auto& L = tr.layers[static_cast<std::size_t>(l)];
        const auto& W = m.layers[static_cast<std::size_t>(l)];
        ParamGrads::Layer* g = pg ? &pg->layers[static_cast<std::size_t>(l)] : nullptr;
        const int T = tr.seq_len;
        const int H = m.config.n_heads;
        const int dh_dim = m.config.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh_dim));

        // h_out = h_mid + mlp_out
        const Mat& dz = dh;
        Mat dg_act = dz * W.w_out;
        if (g) {
            g->w_out += dz.transpose() * L.mlp_act;
            g->b_out += dz.colwise().sum().transpose();
        }
        Mat du =
            dg_act.array() * L.mlp_pre.unaryExpr([](double x) { return gelu_prime(x); }).array();
        if (g) {
            g->w_in += du.transpose() * L.ln2_out;
            g->b_in += du.colwise().sum().transpose();
        }
        Mat dm = du * W.w_in;
        d_hmid = dh + layer_norm_backward(dm, L.ln2_xhat, L.ln2_rstd, W.ln2_g,
                                          g ? &g->ln2_g : nullptr, g ? &g->ln2_b : nullptr);

        // h_mid = h_in + attn_out
        const Mat& dattn = d_hmid;
        Mat dctx = dattn * W.w_o;
        if (g) {
            g->w_o += dattn.transpose() * L.ctx;
            g->b_o += dattn.colwise().sum().transpose();
        }
        Mat dq = Mat::Zero(dctx.rows(), m.config.d_model);
        Mat dk = Mat::Zero(dctx.rows(), m.config.d_model);
        Mat dv = Mat::Zero(dctx.rows(), m.config.d_model);
        for (int b = 0; b < tr.batch; ++b) {
            for (int h = 0; h < H; ++h) {
                const Mat& P = L.probs[static_cast<std::size_t>(b * H + h)];
                auto Qh = L.q.block(b * T, h * dh_dim, T, dh_dim);
                auto Kh = L.k.block(b * T, h * dh_dim, T, dh_dim);
                auto Vh = L.v.block(b * T, h * dh_dim, T, dh_dim);
                auto dctx_h = dctx.block(b * T, h * dh_dim, T, dh_dim);
                Mat dP = dctx_h * Vh.transpose();
                Mat dS = P.array() * (dP.array().colwise() -
                                      (dP.array() * P.array()).rowwise().sum());
                dq.block(b * T, h * dh_dim, T, dh_dim).noalias() = dS * Kh * scale;
                dk.block(b * T, h * dh_dim, T, dh_dim).noalias() = dS.transpose() * Qh * scale;
                dv.block(b * T, h * dh_dim, T, dh_dim).noalias() = P.transpose() * dctx_h;
            }
        }
        if (g) {
            g->w_q += dq.transpose() * L.ln1_out;
            g->b_q += dq.colwise().sum().transpose();
            g->w_k += dk.transpose() * L.ln1_out;
            g->b_k += dk.colwise().sum().transpose();
            g->w_v += dv.transpose() * L.ln1_out;
            g->b_v += dv.colwise().sum().transpose();
        }
        Mat da = dq * W.w_q + dk * W.w_k + dv * W.w_v;
        dh = d_hmid + layer_norm_backward(da, L.ln1_xhat, L.ln1_rstd, W.ln1_g,
                                          g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
    }

    void embed_backward() {
        if (!pg) return;
        for (int b = 0; b < tr.batch; ++b)
            for (int t = 0; t < tr.seq_len; ++t) {
                const int r = tr.row(b, t);
                pg->tok_emb.row(
                    tr.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) +=
                    dh.row(r);
                pg->pos_emb.row(t) += dh.row(r);
            }
    }
};

}  // namespace

std::vector<Vec> backward_to_sites(const ToyLM& model, const HiddenTrace& trace,
                                   std::span<const LogitGrad> seeds,
                                   std::span<const PatchSpec> sites) {
    int lowest = model.config.n_layers;
    for (const auto& s : sites) lowest = std::min(lowest, s.layer);

    BackwardSweep sweep{model, trace};
    sweep.from_logit_seeds(seeds);

    std::vector<Vec> grads(sites.size());
    for (int l = model.config.n_layers - 1; l >= lowest; --l) {
        // dh currently holds dloss/d h_out^l: both hidden and mlp deltas feed
        // h_out additively, so their gradients are read here.
        for (std::size_t i = 0; i < sites.size(); ++i) {
            if (sites[i].layer != l) continue;
            if (sites[i].site == PatchSite::HiddenState || sites[i].site == PatchSite::MlpOutput)
                grads[i] = sweep.dh.row(sites[i].position).transpose();
        }
        bool need_attn = false, need_below = (l > lowest);
        for (const auto& s : sites)
            if (s.layer == l && s.site == PatchSite::AttnOutput) need_attn = true;
        if (!need_attn && !need_below) break;
        sweep.layer_backward(l);
        for (std::size_t i = 0; i < sites.size(); ++i) {
            if (sites[i].layer != l || sites[i].site != PatchSite::AttnOutput) continue;
            grads[i] = sweep.d_hmid.row(sites[i].position).transpose();
        }
    }
    for (auto& v : grads) {
        if (v.size() == 0) v = Vec::Zero(model.config.d_model);
        if (!v.allFinite()) throw NumericError("backward_to_sites: non-finite gradient");
    }
    return grads;
}

Vec grad_wrt_delta(const ToyLM& model, const TokenSeq& tokens, const PatchSpec& patch,
                   int eval_position, const DistributionLoss& loss) {
    HiddenTrace tr = forward_patched(model, tokens, patch, {.with_logits = false});
    const Eigen::RowVectorXd logits = row_logits(model, tr, eval_position);
    if (!logits.allFinite())
        throw NumericError("grad_wrt_delta: non-finite logits at layer " +
                           std::to_string(patch.layer) + ", position " +
                           std::to_string(eval_position));
    LogitGrad seed{eval_position, loss.grad(logits)};
    auto g = backward_to_sites(model, tr, {&seed, 1}, {&patch, 1});
    return g.front();
}

ParamGrads ParamGrads::zeros(const ModelConfig& cfg) {
    ParamGrads g;
    g.tok_emb = Mat::Zero(cfg.vocab_size, cfg.d_model);
    g.pos_emb = Mat::Zero(cfg.max_seq_len, cfg.d_model);
    g.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& L : g.layers) {
        L.w_q = Mat::Zero(cfg.d_model, cfg.d_model);
        L.w_k = Mat::Zero(cfg.d_model, cfg.d_model);
        L.w_v = Mat::Zero(cfg.d_model, cfg.d_model);
        L.w_o = Mat::Zero(cfg.d_model, cfg.d_model);
        L.b_q = Vec::Zero(cfg.d_model);
        L.b_k = Vec::Zero(cfg.d_model);
        L.b_v = Vec::Zero(cfg.d_model);
        L.b_o = Vec::Zero(cfg.d_model);
        L.ln1_g = Vec::Zero(cfg.d_model);
        L.ln1_b = Vec::Zero(cfg.d_model);
        L.ln2_g = Vec::Zero(cfg.d_model);
        L.ln2_b = Vec::Zero(cfg.d_model);
        L.w_in = Mat::Zero(cfg.d_mlp, cfg.d_model);
        L.b_in = Vec::Zero(cfg.d_mlp);
        L.w_out = Mat::Zero(cfg.d_model, cfg.d_mlp);
        L.b_out = Vec::Zero(cfg.d_model);
    }
    g.lnf_g = Vec::Zero(cfg.d_model);
    g.lnf_b = Vec::Zero(cfg.d_model);
    g.unembed = Mat::Zero(cfg.vocab_size, cfg.d_model);
    return g;
}

void ParamGrads::add(const ParamGrads& o) {
    tok_emb += o.tok_emb;
    pos_emb += o.pos_emb;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& a = layers[i];
        const auto& b = o.layers[i];
        a.w_q += b.w_q;
        a.w_k += b.w_k;
        a.w_v += b.w_v;
        a.w_o += b.w_o;
        a.b_q += b.b_q;
        a.b_k += b.b_k;
        a.b_v += b.b_v;
        a.b_o += b.b_o;
        a.ln1_g += b.ln1_g;
        a.ln1_b += b.ln1_b;
        a.ln2_g += b.ln2_g;
        a.ln2_b += b.ln2_b;
        a.w_in += b.w_in;
        a.b_in += b.b_in;
        a.w_out += b.w_out;
        a.b_out += b.b_out;
    }
    lnf_g += o.lnf_g;
    lnf_b += o.lnf_b;
    unembed += o.unembed;
}

void ParamGrads::setZero() {
    tok_emb.setZero();
    pos_emb.setZero();
    for (auto& L : layers) {
        L.w_q.setZero();
        L.w_k.setZero();
        L.w_v.setZero();
        L.w_o.setZero();
        L.b_q.setZero();
        L.b_k.setZero();
        L.b_v.setZero();
        L.b_o.setZero();
        L.ln1_g.setZero();
        L.ln1_b.setZero();
        L.ln2_g.setZero();
        L.ln2_b.setZero();
        L.w_in.setZero();
        L.b_in.setZero();
        L.w_out.setZero();
        L.b_out.setZero();
    }
    lnf_g.setZero();
    lnf_b.setZero();
    unembed.setZero();
}

void backward_params(const ToyLM& model, const HiddenTrace& trace, const Mat& dlogits,
                     ParamGrads& grads) {
    BackwardSweep sweep{model, trace, &grads};
    sweep.from_dense_logits(dlogits);
    for (int l = model.config.n_layers - 1; l >= 0; --l) sweep.layer_backward(l);
    sweep.embed_backward();
}

double sequence_perplexity(const ToyLM& model, const std::vector<TokenSeq>& seqs) {
    if (seqs.empty()) throw InputError("sequence_perplexity: no sequences");
    double nll_sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : seqs) {
        if (s.size() < 2) throw InputError("sequence_perplexity: sequence shorter than 2 tokens");
        HiddenTrace tr = forward(model, s);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const Eigen::RowVectorXd lp = log_softmax_row(tr.logits.row(static_cast<int>(i)));
            nll_sum -= lp(s[i + 1]);
            ++count;
        }
    }
    return std::exp(nll_sum / static_cast<double>(count));
}

ArgmaxInfo predict_next(const ToyLM& model, const TokenSeq& tokens) {
    HiddenTrace tr = forward(model, tokens, {.with_logits = false});
    return argmax_row(row_logits(model, tr, static_cast<int>(tokens.size()) - 1));
}

}  // namespace editlab
