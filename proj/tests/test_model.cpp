#include "editlab/checkpoint.hpp"
#include "editlab/model.hpp"
#include "editlab/train.hpp"

#include "testutil.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace editlab;
using namespace editlab::testutil;

TEST_CASE("softmax rows sum to one") {
    const ToyLM model = ToyLM::init(small_config());
    Rng rng(1);
    const TokenSeq tokens = random_tokens(rng, 9, model.config.vocab_size);
    const HiddenTrace tr = forward(model, tokens);
    for (int i = 0; i < tr.seq_len; ++i) {
        const Eigen::RowVectorXd p = softmax_row(tr.logits.row(i));
        CHECK(std::abs(p.sum() - 1.0) < 1e-9);
        CHECK((p.array() >= 0.0).all());
    }
}

TEST_CASE("causal mask: future tokens cannot move earlier logits") {
    const ToyLM model = ToyLM::init(small_config());
    Rng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        TokenSeq tokens = random_tokens(rng, 8, model.config.vocab_size);
        const HiddenTrace a = forward(model, tokens);
        const int cut = 3 + static_cast<int>(rng.below(4));  // change tokens at >= cut
        TokenSeq mutated = tokens;
        for (std::size_t i = static_cast<std::size_t>(cut); i < mutated.size(); ++i)
            mutated[i] = static_cast<Token>(rng.below(model.config.vocab_size));
        const HiddenTrace b = forward(model, mutated);
        for (int i = 0; i < cut; ++i)
            CHECK(a.logits.row(i) == b.logits.row(i));  // bit-identical prefix rows
    }
}

TEST_CASE("fixed seed and inputs give identical logits across two builds") {
    const ModelConfig cfg = small_config(16, 4, 60, 42);
    Rng rng(5);
    const TokenSeq tokens = random_tokens(rng, 10, cfg.vocab_size);
    const ToyLM m1 = ToyLM::init(cfg);
    const ToyLM m2 = ToyLM::init(cfg);
    CHECK(m1.weight_hash() == m2.weight_hash());
    const HiddenTrace t1 = forward(m1, tokens);
    const HiddenTrace t2 = forward(m2, tokens);
    CHECK(fnv1a64(t1.logits) == fnv1a64(t2.logits));
}

TEST_CASE("input validation") {
    const ToyLM model = ToyLM::init(small_config());
    CHECK_THROWS_AS((void)forward(model, TokenSeq{0, static_cast<Token>(model.config.vocab_size)}),
                    InputError);
    CHECK_THROWS_AS((void)forward(model, TokenSeq(40, 0)), InputError);
    CHECK_THROWS_AS((void)forward(model, TokenSeq{}), InputError);

    PatchSpec bad;
    bad.layer = model.config.n_layers;
    bad.delta = Vec::Zero(model.config.d_model);
    CHECK_THROWS_AS((void)forward_patched(model, TokenSeq{1, 2, 3}, bad), InputError);
}

TEST_CASE("zero delta patch is an exact identity") {
    const ToyLM model = ToyLM::init(small_config());
    Rng rng(11);
    const TokenSeq tokens = random_tokens(rng, 7, model.config.vocab_size);
    const HiddenTrace base = forward(model, tokens);
    for (PatchSite site : {PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput}) {
        PatchSpec p{site, 1, 3, Vec::Zero(model.config.d_model)};
        const HiddenTrace patched = forward_patched(model, tokens, p);
        CHECK(base.logits == patched.logits);
    }
}

TEST_CASE("patch at top layer leaves earlier positions unchanged") {
    const ToyLM model = ToyLM::init(small_config());
    Rng rng(13);
    const TokenSeq tokens = random_tokens(rng, 8, model.config.vocab_size);
    const int t = 4;
    Vec delta(model.config.d_model);
    for (int i = 0; i < delta.size(); ++i) delta(i) = 0.3 * rng.normal();
    PatchSpec p{PatchSite::HiddenState, model.config.n_layers - 1, t, delta};
    const HiddenTrace base = forward(model, tokens);
    const HiddenTrace patched = forward_patched(model, tokens, p);
    for (int i = 0; i < t; ++i) CHECK(base.logits.row(i) == patched.logits.row(i));
    // and the next-token distribution at t moves
    const double l1 =
        (softmax_row(base.logits.row(t)) - softmax_row(patched.logits.row(t))).cwiseAbs().sum();
    CHECK(l1 > 0.0);
}

TEST_CASE("forward_resume matches forward_patched bit for bit") {
    const ToyLM model = ToyLM::init(small_config(16, 4));
    Rng rng(17);
    const TokenSeq tokens = random_tokens(rng, 9, model.config.vocab_size);
    const HiddenTrace base = forward(model, tokens);
    auto rand_delta = [&] {
        Vec d(model.config.d_model);
        for (int i = 0; i < d.size(); ++i) d(i) = 0.2 * rng.normal();
        return d;
    };
    for (PatchSite site : {PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput}) {
        for (int layer : {0, 1, 3}) {
            PatchSpec p{site, layer, 5, rand_delta()};
            const HiddenTrace full = forward_patched(model, tokens, p);
            const HiddenTrace resumed = forward_resume(model, base, {&p, 1});
            REQUIRE(resumed.logits.size() == full.logits.size());
            CHECK(full.logits == resumed.logits);
            CHECK(full.layers.back().h_out == resumed.layers.back().h_out);
        }
    }
    // paired patch (attention + MLP at the same layer)
    std::vector<PatchSpec> pair{{PatchSite::MlpOutput, 2, 4, rand_delta()},
                                {PatchSite::AttnOutput, 2, 4, rand_delta()}};
    const HiddenTrace full = forward_patched(model, tokens, pair);
    const HiddenTrace resumed = forward_resume(model, base, pair);
    CHECK(full.logits == resumed.logits);
}

TEST_CASE("batch forward matches per-sequence forward") {
    const ToyLM model = ToyLM::init(small_config());
    Rng rng(19);
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 5; ++i) seqs.push_back(random_tokens(rng, 6, model.config.vocab_size));
    const HiddenTrace batch = forward_batch(model, seqs);
    for (int b = 0; b < 5; ++b) {
        const HiddenTrace single = forward(model, seqs[static_cast<std::size_t>(b)]);
        for (int t = 0; t < 6; ++t) {
            const Eigen::RowVectorXd diff =
                batch.logits.row(batch.row(b, t)) - single.logits.row(t);
            CHECK(diff.cwiseAbs().maxCoeff() < 1e-12);
        }
    }
}

TEST_CASE("constant loss has zero gradient") {
    struct ConstLoss final : DistributionLoss {
        double value(const Eigen::RowVectorXd&) const override { return 3.5; }
        Eigen::RowVectorXd grad(const Eigen::RowVectorXd& l) const override {
            return Eigen::RowVectorXd::Zero(l.size());
        }
    };
    const ToyLM model = ToyLM::init(small_config());
    PatchSpec p{PatchSite::HiddenState, 1, 2, Vec::Zero(model.config.d_model)};
    const Vec g = grad_wrt_delta(model, TokenSeq{1, 2, 3, 4}, p, 3, ConstLoss{});
    CHECK(g.norm() == 0.0);
}

TEST_CASE("grad_wrt_delta matches central finite differences") {
    // seeded 4-layer model, NLL and KL losses, all three sites
    const ModelConfig cfg = small_config(16, 4, 40, 99);
    const ToyLM model = ToyLM::init(cfg);
    Rng rng(23);
    const TokenSeq tokens = random_tokens(rng, 7, cfg.vocab_size);
    const int eval_row = 6;

    for (PatchSite site : {PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput}) {
        PatchSpec p{site, 1, 3, Vec(cfg.d_model)};
        for (int i = 0; i < cfg.d_model; ++i) p.delta(i) = 0.1 * rng.normal();

        const NllLoss nll(static_cast<Token>(rng.below(cfg.vocab_size)));
        Vec analytic = grad_wrt_delta(model, tokens, p, eval_row, nll);
        Vec numeric = numeric_grad_delta(model, tokens, p, eval_row, nll);
        CHECK(rel_max_err(analytic, numeric) <= 1e-4);

        const HiddenTrace base = forward(model, tokens);
        const KlToReference kl(log_softmax_row(base.logits.row(eval_row)));
        analytic = grad_wrt_delta(model, tokens, p, eval_row, kl);
        numeric = numeric_grad_delta(model, tokens, p, eval_row, kl);
        CHECK(rel_max_err(analytic, numeric) <= 1e-4);
    }
}

TEST_CASE("near-one-hot prediction has vanishing NLL gradient") {
    ModelConfig cfg = small_config();
    ToyLM model = ToyLM::init(cfg);
    const Token target = 3;
    // push the unembedding so `target` dominates every distribution
    model.unembed.setZero();
    model.unembed.row(target).setConstant(40.0);
    model.lnf_b.setConstant(1.0);
    PatchSpec p{PatchSite::HiddenState, 1, 2, Vec::Zero(cfg.d_model)};
    const Vec g = grad_wrt_delta(model, TokenSeq{1, 2, 3, 4}, p, 3, NllLoss(target));
    CHECK(g.norm() < 1e-6);
}

TEST_CASE("multi-site backward equals separate single-site backwards") {
    const ModelConfig cfg = small_config(16, 4);
    const ToyLM model = ToyLM::init(cfg);
    Rng rng(31);
    const TokenSeq tokens = random_tokens(rng, 8, cfg.vocab_size);
    std::vector<PatchSpec> sites{{PatchSite::MlpOutput, 2, 4, Vec::Zero(cfg.d_model)},
                                 {PatchSite::AttnOutput, 2, 4, Vec::Zero(cfg.d_model)}};
    const HiddenTrace tr = forward_patched(model, tokens, sites);
    const NllLoss loss(5);
    LogitGrad seed{7, loss.grad(row_logits(model, tr, 7))};
    const auto joint = backward_to_sites(model, tr, {&seed, 1}, sites);
    for (std::size_t i = 0; i < sites.size(); ++i) {
        const auto single = backward_to_sites(model, tr, {&seed, 1}, {&sites[i], 1});
        CHECK((joint[i] - single[0]).norm() == 0.0);
    }
}

TEST_CASE("sequence_perplexity closed forms") {
    ModelConfig cfg = small_config(16, 2, 32);
    ToyLM uniform = ToyLM::init(cfg);
    uniform.unembed.setZero();  // logits identically zero -> uniform rows
    const std::vector<TokenSeq> seqs{{1, 2, 3, 4, 5}, {9, 8, 7}};
    CHECK(std::abs(sequence_perplexity(uniform, seqs) - cfg.vocab_size) < 1e-6);

    ToyLM confident = ToyLM::init(cfg);
    confident.unembed.setZero();
    confident.lnf_b.setConstant(1.0);
    confident.unembed.row(0).setConstant(20.0);  // token 0 always near-certain
    const std::vector<TokenSeq> zeros{{0, 0, 0, 0, 0, 0}};
    CHECK(sequence_perplexity(confident, zeros) == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS((void)sequence_perplexity(uniform, {}), InputError);
}

TEST_CASE("sequence_perplexity matches a naive log-sum loop") {
    const ToyLM model = ToyLM::init(small_config(16, 3, 48, 7));
    Rng rng(41);
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 12; ++i)
        seqs.push_back(
            random_tokens(rng, 4 + static_cast<int>(rng.below(5)), model.config.vocab_size));

    double nll = 0.0;
    long count = 0;
    for (const auto& s : seqs) {
        const HiddenTrace tr = forward(model, s);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const Eigen::RowVectorXd logits = tr.logits.row(static_cast<int>(i));
            double denom = 0.0;
            const double mx = logits.maxCoeff();
            for (Eigen::Index j = 0; j < logits.size(); ++j) denom += std::exp(logits(j) - mx);
            const double p = std::exp(logits(s[i + 1]) - mx) / denom;
            nll += -std::log(p);
            ++count;
        }
    }
    const double expected = std::exp(nll / static_cast<double>(count));
    CHECK(sequence_perplexity(model, seqs) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("checkpoint round trip preserves weights and validates hashes") {
    const ToyLM model = ToyLM::init(small_config(16, 2, 40, 77));
    const std::string path =
        (std::filesystem::temp_directory_path() / "editlab_ckpt_test.bin").string();
    save_checkpoint(model, path);
    const ToyLM back = load_checkpoint(path);
    CHECK(back.config == model.config);
    CHECK(back.weight_hash() == model.weight_hash());

    // corrupt one payload byte -> hash mismatch
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-9, std::ios::end);
        char c = 0x5a;
        f.write(&c, 1);
    }
    CHECK_THROWS_AS((void)load_checkpoint(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("pretrain with zero epochs is a no-op and reports the initial NLL") {
    const ToyLM model = ToyLM::init(small_config(16, 2, 40));
    ToyLM copy = model;
    Rng rng(51);
    std::vector<TokenSeq> corpus;
    for (int i = 0; i < 8; ++i) corpus.push_back(random_tokens(rng, 6, 40));
    PretrainConfig cfg;
    cfg.epochs = 0;
    const PretrainResult res = pretrain(copy, corpus, cfg);
    CHECK(copy.weight_hash() == model.weight_hash());
    CHECK(res.final_nll == doctest::Approx(corpus_nll(model, corpus)).epsilon(1e-12));
}

TEST_CASE("pretrain memorizes a tiny corpus deterministically") {
    const ModelConfig mcfg = small_config(32, 2, 64, 5);
    std::vector<TokenSeq> corpus;
    Rng rng(61);
    std::vector<std::pair<TokenSeq, Token>> probes;
    for (int i = 0; i < 20; ++i) {
        TokenSeq s = random_tokens(rng, 5, 60);
        probes.emplace_back(TokenSeq(s.begin(), s.end() - 1), s.back());
        corpus.push_back(std::move(s));
    }
    PretrainConfig pcfg;
    pcfg.epochs = 150;
    pcfg.learning_rate = 3e-3;
    pcfg.batch_size = 10;
    pcfg.seed = 1;

    ToyLM m1 = ToyLM::init(mcfg);
    const PretrainResult r1 = pretrain(m1, corpus, pcfg);
    CHECK(r1.final_nll < r1.epoch_nll.front());
    CHECK(recall_top1(m1, probes) >= 0.9);

    ToyLM m2 = ToyLM::init(mcfg);
    pretrain(m2, corpus, pcfg);
    CHECK(m1.weight_hash() == m2.weight_hash());
}

TEST_CASE("model validation catches bad configs") {
    ModelConfig cfg = small_config();
    cfg.n_heads = 5;  // 16 % 5 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.n_layers = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.d_mlp = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
