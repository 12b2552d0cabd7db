#include <doctest.h>

#include <cmath>

#include "loopmdm/model.hpp"

using namespace loopmdm;

namespace {

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.vocab = 6;
    cfg.seq_len = 4;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.loop.n_layers_total = 4;
    cfg.loop.loop_start = 1;
    cfg.loop.n_m = 2;
    cfg.loop.s_max = 3;
    return cfg;
}

TokenSeq seq_of(const ModelConfig& cfg, std::vector<int32_t> toks) {
    TokenSeq s;
    s.vocab = cfg.vocab;
    s.tokens = std::move(toks);
    return s;
}

}  // namespace

TEST_CASE("effective depth arithmetic") {
    LoopConfig lc;
    lc.n_layers_total = 12;
    lc.loop_start = 1;
    lc.n_m = 2;
    CHECK(effective_depth(lc, 1) == 12);
    CHECK(effective_depth(lc, 6) == 22);
    CHECK(effective_depth(lc, 12) == 34);
    CHECK_THROWS_AS(effective_depth(lc, 0), ConfigError);
}

TEST_CASE("loop config validation") {
    LoopConfig lc;
    lc.n_layers_total = 3;
    lc.loop_start = 2;
    lc.n_m = 2;
    CHECK_THROWS_AS(lc.validate(), ConfigError);
    lc.loop_start = 1;
    CHECK_NOTHROW(lc.validate());
    lc.s_max = 0;
    CHECK_THROWS_AS(lc.validate(), ConfigError);

    ModelConfig mc = small_cfg();
    mc.d_model = 9;
    CHECK_THROWS_AS(mc.validate(), ConfigError);
    mc = small_cfg();
    mc.n_heads = 4;  // head width 2 is fine
    CHECK_NOTHROW(mc.validate());
    mc.n_heads = 8;  // head width 1 is odd
    CHECK_THROWS_AS(mc.validate(), ConfigError);
}

TEST_CASE("loop count sampling") {
    SUBCASE("uniform with singleton support") {
        LoopConfig lc;
        lc.s_max = 1;
        Rng rng(31);
        for (int i = 0; i < 50; ++i) CHECK(sample_loop_count(lc, rng) == 1);
    }
    SUBCASE("uniform mean over the discrete range") {
        LoopConfig lc;
        lc.s_max = 12;
        Rng rng(32);
        const int n = 100000;
        double mean = 0;
        for (int i = 0; i < n; ++i) {
            int32_t s = sample_loop_count(lc, rng);
            CHECK(s >= 1);
            CHECK(s <= 12);
            mean += s;
        }
        mean /= n;
        double sigma = std::sqrt((144.0 - 1.0) / 12.0 / n);
        CHECK(std::abs(mean - 6.5) <= 3 * sigma);
    }
    SUBCASE("fixed is constant") {
        LoopConfig lc;
        lc.loop_sampler = LoopSampler::fixed;
        lc.fixed_s = 4;
        Rng rng(33);
        for (int i = 0; i < 20; ++i) CHECK(sample_loop_count(lc, rng) == 4);
    }
    SUBCASE("heavy-tailed sampler stays in its truncation window") {
        LoopConfig lc;
        lc.s_max = 6;
        lc.loop_sampler = LoopSampler::lognormal_poisson;
        lc.lognormal_mu = 1.0;
        lc.lognormal_sigma = 0.8;
        Rng rng(34);
        int32_t lo = 1 << 30, hi = 0;
        for (int i = 0; i < 5000; ++i) {
            int32_t s = sample_loop_count(lc, rng);
            CHECK(s >= 1);
            CHECK(s <= 24);
            lo = std::min(lo, s);
            hi = std::max(hi, s);
        }
        CHECK(lo < hi);  // actually random
    }
}

TEST_CASE("parameter count is independent of the loop budget") {
    Rng rng(35);
    ModelConfig cfg = small_cfg();
    ModelParams p1 = init_params(cfg, rng);
    std::size_t base = param_count(p1);
    for (int32_t s_max : {1, 4, 12}) {
        ModelConfig c2 = cfg;
        c2.loop.s_max = s_max;
        Rng r2(35);
        ModelParams p2 = init_params(c2, r2);
        CHECK(param_count(p2) == base);
    }
    // Closed form: embeddings + timestep net + layers + readout.
    std::size_t d = 8, v = 6;
    std::size_t expect = (v + 1) * d + 2 * (d * d + d) + 4 * layer_param_count(cfg) +
                         (d * 2 * d + 2 * d) + (d * v + v);
    CHECK(base == expect);

    std::size_t one_layer = 0;
    ModelParams q = init_params(cfg, rng);
    for (auto& [name, t] : named_params(q))
        if (name.rfind("layer2.", 0) == 0) one_layer += t.size();
    CHECK(one_layer == layer_param_count(cfg));
}

TEST_CASE("freshly initialized model predicts the uniform distribution") {
    Rng rng(36);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    TokenSeq xt = seq_of(cfg, {0, 6, 6, 3});
    RetentionFlags keep;
    keep.hidden_states = true;
    ForwardRecord rec = forward(p, xt, 0.5, 3, keep);
    for (real z : rec.logits.values()) CHECK(z == 0.0);
    auto probs = probs_from_logits(rec.logits);
    for (real pr : probs) CHECK(pr == doctest::Approx(1.0 / 6).epsilon(1e-15));
    // Zero-initialized gates make every block the identity, so looping holds
    // the mid-block state fixed.
    REQUIRE(rec.mid_states.size() == 4);
    for (std::size_t k = 1; k < 4; ++k)
        for (std::size_t i = 0; i < rec.mid_states[0].size(); ++i)
            CHECK(rec.mid_states[k].values()[i] == rec.mid_states[0].values()[i]);
}

TEST_CASE("single loop equals the equivalent non-looped stack bit for bit") {
    Rng rng(37);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng);
    TokenSeq xt = seq_of(cfg, {5, 6, 1, 6});

    ForwardRecord looped = forward(p, xt, 0.3, 1);
    ModelParams flat = p;  // shares every weight tensor
    flat.cfg.loop.loop_start = 0;
    flat.cfg.loop.n_m = 1;
    ForwardRecord plain = forward(flat, xt, 0.3, 1);
    REQUIRE(looped.logits.size() == plain.logits.size());
    for (std::size_t i = 0; i < looped.logits.size(); ++i)
        CHECK(looped.logits.values()[i] == plain.logits.values()[i]);
}

TEST_CASE("forward is deterministic and honors loop counts beyond the training budget") {
    Rng rng(38);
    ModelConfig cfg = small_cfg();
    cfg.loop.s_max = 12;
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng);
    TokenSeq xt = seq_of(cfg, {6, 6, 2, 0});
    ForwardRecord a = forward(p, xt, 0.7, 5);
    ForwardRecord b = forward(p, xt, 0.7, 5);
    for (std::size_t i = 0; i < a.logits.size(); ++i)
        CHECK(a.logits.values()[i] == b.logits.values()[i]);
    CHECK_NOTHROW(forward(p, xt, 0.7, 24));  // S far above s_max
    ForwardRecord more = forward(p, xt, 0.7, 6);
    bool differs = false;
    for (std::size_t i = 0; i < a.logits.size(); ++i)
        differs |= more.logits.values()[i] != a.logits.values()[i];
    CHECK(differs);
}

TEST_CASE("mid-block weights are shared by every loop application") {
    Rng rng(39);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng);
    TokenSeq xt = seq_of(cfg, {6, 4, 6, 2});
    RetentionFlags keep;
    keep.hidden_states = true;
    ForwardRecord before = forward(p, xt, 0.5, 3, keep);
    p.layers[1].wq.values()[5] += 0.25;  // layer 1 is the first mid layer
    ForwardRecord after = forward(p, xt, 0.5, 3, keep);
    REQUIRE(before.mid_states.size() == 4);
    // Head output is upstream of the perturbation; every loop output moves.
    for (std::size_t i = 0; i < before.mid_states[0].size(); ++i)
        CHECK(before.mid_states[0].values()[i] == after.mid_states[0].values()[i]);
    for (std::size_t k = 1; k <= 3; ++k) {
        real delta = 0;
        for (std::size_t i = 0; i < before.mid_states[k].size(); ++i)
            delta += std::abs(before.mid_states[k].values()[i] - after.mid_states[k].values()[i]);
        CHECK(delta > 0);
    }
}

TEST_CASE("attention retention tags layers with their loop index") {
    Rng rng(40);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    TokenSeq xt = seq_of(cfg, {6, 6, 6, 6});
    RetentionFlags keep;
    keep.attention_maps = true;
    ForwardRecord rec = forward(p, xt, 0.5, 2, keep);
    // head(1) + 2 loops x 2 mid layers + tail(1) applications
    REQUIRE(rec.attn.size() == 6);
    REQUIRE(rec.attn_tags.size() == 6);
    CHECK(rec.attn_tags[0].layer == 0);
    CHECK(rec.attn_tags[0].loop == 0);
    CHECK(rec.attn_tags[1].layer == 1);
    CHECK(rec.attn_tags[1].loop == 1);
    CHECK(rec.attn_tags[2].layer == 2);
    CHECK(rec.attn_tags[2].loop == 1);
    CHECK(rec.attn_tags[3].layer == 1);
    CHECK(rec.attn_tags[3].loop == 2);
    CHECK(rec.attn_tags[4].layer == 2);
    CHECK(rec.attn_tags[4].loop == 2);
    CHECK(rec.attn_tags[5].layer == 3);
    CHECK(rec.attn_tags[5].loop == 0);
    for (const AttnMaps& m : rec.attn) {
        CHECK(m.n_blocks == 1);
        CHECK(m.rows == 4);
    }
    ForwardRecord bare = forward(p, xt, 0.5, 2);
    CHECK(bare.attn.empty());
}

TEST_CASE("mask-embedding noise is selective and has the configured spread") {
    Rng rng(41);
    ModelConfig cfg = small_cfg();
    cfg.vocab = 4;
    ModelParams p0 = init_params(cfg, rng);

    SUBCASE("zero std is a bitwise no-op") {
        std::vector<int32_t> toks = {4, 1, 4, 0};
        Rng noise(5);
        Tensor a = embed_tokens(p0, toks, &noise);
        Tensor b = embed_tokens(p0, toks, nullptr);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.values()[i] == b.values()[i]);
    }
    SUBCASE("noise lands only on masked rows with the right variance") {
        ModelConfig cfg2 = cfg;
        cfg2.loop.mask_noise_std = 0.1;
        Rng r2(42);
        ModelParams p = init_params(cfg2, r2);
        const std::size_t n = 20000;
        std::vector<int32_t> toks(n);
        for (std::size_t i = 0; i < n; ++i) toks[i] = (i % 2 == 0) ? 4 : 1;
        Rng noise(43);
        Tensor with = embed_tokens(p, toks, &noise);
        Tensor without = embed_tokens(p, toks, nullptr);
        std::size_t d = 8;
        std::vector<double> m1(d, 0), m2(d, 0);
        std::size_t masked = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (toks[i] != 4) {
                for (std::size_t j = 0; j < d; ++j)
                    CHECK(with.at(i, j) == without.at(i, j));
                continue;
            }
            ++masked;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = with.at(i, j) - without.at(i, j);
                m1[j] += diff;
                m2[j] += diff * diff;
            }
        }
        CHECK(masked == 10000);
        for (std::size_t j = 0; j < d; ++j) {
            double mean = m1[j] / masked;
            double var = m2[j] / masked - mean * mean;
            double sd3 = 3.0 * 0.01 * std::sqrt(2.0 / masked);
            CHECK(std::abs(var - 0.01) <= sd3);
        }
    }
}

TEST_CASE("forward validates its inputs") {
    Rng rng(44);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    TokenSeq ok = seq_of(cfg, {0, 1, 2, 3});
    CHECK_THROWS_AS(forward(p, ok, 0.5, 0), ConfigError);
    CHECK_THROWS_AS(forward(p, ok, -0.1, 1), DomainError);
    CHECK_THROWS_AS(forward(p, ok, 1.5, 1), DomainError);
    CHECK_THROWS_AS(forward(p, seq_of(cfg, {0, 1, 2}), 0.5, 1), ShapeError);
    TokenSeq wrong_vocab = seq_of(cfg, {0, 1, 2, 3});
    wrong_vocab.vocab = 9;
    CHECK_THROWS_AS(forward(p, wrong_vocab, 0.5, 1), ConfigError);
    TokenSeq oob = seq_of(cfg, {0, 1, 2, 7});
    CHECK_THROWS_AS(forward(p, oob, 0.5, 1), ContractError);
    CHECK_THROWS_AS(forward_batch(p, {}, {}, 1), ContractError);
}

TEST_CASE("timestep conditioning separates timesteps") {
    Rng rng(45);
    ModelConfig cfg = small_cfg();
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng);
    Tensor c = conditioning(p, {0.1, 0.9, 0.1});
    REQUIRE(c.rows() == 3);
    real same = 0, diff = 0;
    for (std::size_t j = 0; j < c.cols(); ++j) {
        same += std::abs(c.at(0, j) - c.at(2, j));
        diff += std::abs(c.at(0, j) - c.at(1, j));
    }
    CHECK(same == 0.0);
    CHECK(diff > 1e-6);
}

TEST_CASE("model gradients survive the looped forward") {
    Rng rng(46);
    ModelConfig cfg;
    cfg.vocab = 5;
    cfg.seq_len = 3;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.loop.n_layers_total = 2;
    cfg.loop.loop_start = 0;
    cfg.loop.n_m = 1;
    cfg.loop.s_max = 2;
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng, 0.3);
    TokenSeq xt = seq_of(cfg, {5, 2, 5});

    Tensor w = p.layers[0].wq;
    auto loss_of = [&] {
        ForwardRecord rec = forward(p, xt, 0.4, 2);
        return sum(mul(rec.logits, rec.logits));
    };
    w.zero_grad();
    {
        Tape tape;
        Tensor loss = loss_of();
        tape.backward(loss);
    }
    real h = 1e-5;
    for (std::size_t i : {std::size_t(0), std::size_t(7), std::size_t(15)}) {
        real keep = w.values()[i];
        w.values()[i] = keep + h;
        real up = loss_of().item();
        w.values()[i] = keep - h;
        real dn = loss_of().item();
        w.values()[i] = keep;
        real fd = (up - dn) / (2 * h);
        real an = w.grad()[i];
        CHECK(std::abs(an - fd) <= 1e-4 * std::max<real>({1.0, std::abs(an), std::abs(fd)}));
    }
}
