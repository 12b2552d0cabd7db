#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"
#include "loopmdm/sampler.hpp"

using namespace loopmdm;

namespace {

ModelConfig small_config(int32_t vocab = 8, int32_t seq_len = 8, int32_t d = 16) {
    ModelConfig cfg;
    cfg.vocab = vocab;
    cfg.seq_len = seq_len;
    cfg.d_model = d;
    cfg.n_heads = 2;
    cfg.loop.n_layers_total = 3;
    cfg.loop.loop_start = 1;
    cfg.loop.n_m = 1;
    cfg.loop.s_max = 3;
    return cfg;
}

// Fresh model biased to always predict `tok`: blocks are identity at init, so
// a head bias turns the output into a one-hot-ish distribution everywhere.
ModelParams planted_model(const ModelConfig& cfg, int32_t tok) {
    Rng init(1);
    ModelParams p = init_params(cfg, init);
    p.head_b.values()[static_cast<std::size_t>(tok)] = real(100);
    return p;
}

TokenSeq all_masked(const ModelConfig& cfg) {
    TokenSeq x;
    x.vocab = cfg.vocab;
    x.tokens.assign(cfg.seq_len, cfg.vocab);
    return x;
}

}  // namespace

TEST_CASE("planted model fills every position with the planted token") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 5);

    for (uint64_t seed : {1ull, 2ull, 99ull}) {
        Rng rng(seed);
        Trajectory tr = generate(p, UnmaskPolicy::ancestral(), 8, 2, rng);
        const TokenSeq& fin = tr.final_sequence();
        CHECK(fin.count_masked() == 0);
        for (int32_t tok : fin.tokens) CHECK(tok == 5);
    }
}

TEST_CASE("one commit per step under top-1 confidence") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 3);
    Rng rng(7);
    Trajectory tr = generate(p, UnmaskPolicy::topk(1), cfg.seq_len, 1, rng);

    REQUIRE(static_cast<int32_t>(tr.steps.size()) == cfg.seq_len);
    std::set<int32_t> seen;
    for (const SampleStep& st : tr.steps) {
        CHECK(st.committed_positions.size() == 1);
        seen.insert(st.committed_positions[0]);
    }
    CHECK(static_cast<int32_t>(seen.size()) == cfg.seq_len);
    CHECK(tr.final_sequence().count_masked() == 0);
}

TEST_CASE("left-to-right commits positions in order") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 1);

    SUBCASE("one at a time") {
        Rng rng(3);
        Trajectory tr = generate(p, UnmaskPolicy::left_to_right(1), cfg.seq_len, 1, rng);
        REQUIRE(tr.steps.size() == 8);
        for (std::size_t j = 0; j < tr.steps.size(); ++j) {
            REQUIRE(tr.steps[j].committed_positions.size() == 1);
            CHECK(tr.steps[j].committed_positions[0] == static_cast<int32_t>(j));
        }
    }

    SUBCASE("three at a time") {
        Rng rng(3);
        Trajectory tr = generate(p, UnmaskPolicy::left_to_right(3), 3, 1, rng);
        REQUIRE(tr.steps.size() == 3);
        CHECK(tr.steps[0].committed_positions == std::vector<int32_t>{0, 1, 2});
        CHECK(tr.steps[1].committed_positions == std::vector<int32_t>{3, 4, 5});
        CHECK(tr.steps[2].committed_positions == std::vector<int32_t>{6, 7});
    }
}

TEST_CASE("unmasking is nested and committed tokens never change") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(5);
    randomize_params(p, r);

    Rng rng(11);
    Trajectory tr = generate(p, UnmaskPolicy::ancestral(), 6, 2, rng);
    std::vector<int32_t> committed(cfg.seq_len, -1);
    for (const SampleStep& st : tr.steps) {
        for (std::size_t i = 0; i < st.committed_positions.size(); ++i) {
            int32_t pos = st.committed_positions[i];
            CHECK(committed[pos] == -1);  // never re-committed
            committed[pos] = st.committed_tokens[i];
        }
        for (int32_t pos = 0; pos < cfg.seq_len; ++pos)
            if (committed[pos] != -1) CHECK(st.snapshot.tokens[pos] == committed[pos]);
    }
    CHECK(tr.final_sequence().count_masked() == 0);
}

TEST_CASE("prompt positions pass through untouched") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 0);

    TokenSeq prompt = all_masked(cfg);
    prompt.tokens[1] = 6;
    prompt.tokens[4] = 7;
    prompt.tokens[5] = 2;

    Rng rng(13);
    Trajectory tr = generate(p, UnmaskPolicy::ancestral(), 4, 1, rng, &prompt);
    const TokenSeq& fin = tr.final_sequence();
    CHECK(fin.tokens[1] == 6);
    CHECK(fin.tokens[4] == 7);
    CHECK(fin.tokens[5] == 2);
    for (int32_t pos : {0, 2, 3, 6, 7}) CHECK(fin.tokens[pos] == 0);
    for (const SampleStep& st : tr.steps)
        for (int32_t pos : st.committed_positions) CHECK((pos != 1 && pos != 4 && pos != 5));
}

TEST_CASE("a single full-width confidence step completes the sequence") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 4);
    Rng rng(17);
    Trajectory tr = generate(p, UnmaskPolicy::topk(cfg.seq_len), 1, 1, rng);
    REQUIRE(tr.steps.size() == 1);
    CHECK(static_cast<int32_t>(tr.steps[0].committed_positions.size()) == cfg.seq_len);
    CHECK(tr.final_sequence().count_masked() == 0);
}

TEST_CASE("ancestral grid exhaustion force-commits whatever remains") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    // Uniform model and a 2-step grid: the last step lands at t=0 and commits
    // every position still masked.
    Rng rng(23);
    Trajectory tr = generate(p, UnmaskPolicy::ancestral(), 2, 1, rng);
    CHECK(tr.final_sequence().count_masked() == 0);
    CHECK(tr.steps.back().t == real(0));
}

TEST_CASE("batched deterministic generation matches one-at-a-time") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(31);
    randomize_params(p, r);

    std::vector<TokenSeq> prompts;
    for (int b = 0; b < 3; ++b) {
        TokenSeq pr = all_masked(cfg);
        pr.tokens[b] = b;  // distinct givens
        prompts.push_back(pr);
    }

    Rng rng_batch(1);
    auto batched = generate_batch(p, UnmaskPolicy::topk(2), 4, 2, rng_batch, prompts);
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        Rng rng_single(1);
        Trajectory single = generate(p, UnmaskPolicy::topk(2), 4, 2, rng_single, &prompts[b]);
        REQUIRE(batched[b].steps.size() == single.steps.size());
        CHECK(batched[b].final_sequence().tokens == single.final_sequence().tokens);
        for (std::size_t j = 0; j < single.steps.size(); ++j) {
            CHECK(batched[b].steps[j].committed_positions ==
                  single.steps[j].committed_positions);
            CHECK(batched[b].steps[j].committed_tokens == single.steps[j].committed_tokens);
        }
    }
}

TEST_CASE("adaptive looping respects its boundary settings") {
    ModelConfig cfg = small_config();
    cfg.loop.s_max = 12;
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(41);
    randomize_params(p, r);

    TokenSeq x = all_masked(cfg);
    x.tokens[0] = 1;

    SUBCASE("epsilon 0 runs the full budget") {
        AdaptiveLoopPolicy ap;
        ap.epsilon = 0;
        ap.s_budget = 7;
        auto [rec, loops] = adaptive_forward(p, x, real(0.5), ap);
        CHECK(loops == 7);
        CHECK(rec.logits.rows() == static_cast<std::size_t>(cfg.seq_len));
    }

    SUBCASE("infinite epsilon stops after one loop") {
        AdaptiveLoopPolicy ap;
        ap.epsilon = std::numeric_limits<real>::infinity();
        ap.s_budget = 7;
        auto [rec, loops] = adaptive_forward(p, x, real(0.5), ap);
        CHECK(loops == 1);
    }

    SUBCASE("loops always land inside the budget") {
        for (real eps : {real(0.01), real(0.1), real(0.5)}) {
            AdaptiveLoopPolicy ap;
            ap.epsilon = eps;
            ap.s_budget = 9;
            auto [rec, loops] = adaptive_forward(p, x, real(0.5), ap);
            CHECK(loops >= 1);
            CHECK(loops <= 9);
        }
    }

    SUBCASE("invalid policies are rejected") {
        AdaptiveLoopPolicy ap;
        ap.s_budget = 0;
        CHECK_THROWS_AS(adaptive_forward(p, x, real(0.5), ap), ConfigError);
        ap.s_budget = 1;
        ap.epsilon = -1;
        CHECK_THROWS_AS(adaptive_forward(p, x, real(0.5), ap), ConfigError);
    }
}

TEST_CASE("an identity mid-block is a fixed point for any positive threshold") {
    // Zero-initialized blocks are exact identities, so H(1) == H(0) and the
    // first ratio is 0.
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    TokenSeq x = all_masked(cfg);

    AdaptiveLoopPolicy ap;
    ap.s_budget = 6;
    for (real eps : {real(1e-9), real(0.1), real(10)}) {
        ap.epsilon = eps;
        auto [rec, loops] = adaptive_forward(p, x, real(0.5), ap);
        CHECK(loops == 1);
    }
}

TEST_CASE("zero hidden state stops adaptive looping immediately") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    std::fill(p.tok_emb.values().begin(), p.tok_emb.values().end(), real(0));

    TokenSeq x = all_masked(cfg);
    AdaptiveLoopPolicy ap;
    ap.epsilon = 0;  // would otherwise force the budget
    ap.s_budget = 5;
    auto [rec, loops] = adaptive_forward(p, x, real(0.5), ap);
    CHECK(loops == 1);
}

TEST_CASE("masked-only scope with nothing masked degenerates to one loop") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(43);
    randomize_params(p, r);

    TokenSeq full;
    full.vocab = cfg.vocab;
    full.tokens = {0, 1, 2, 3, 4, 5, 6, 7};
    TokenSeq masked = all_masked(cfg);

    AdaptiveLoopPolicy ap;
    ap.epsilon = 0;
    ap.s_budget = 4;
    ap.norm_scope = AdaptiveLoopPolicy::NormScope::masked_only;
    auto [rec, loops] = adaptive_forward_batch(p, {full, masked}, {real(0.5), real(0.5)}, ap);
    CHECK(loops[0] == 1);  // empty scope, degenerate stop
    CHECK(loops[1] == 4);  // real work runs the budget
}

TEST_CASE("adaptive forward at the full budget matches the fixed forward bit for bit") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(47);
    randomize_params(p, r);

    std::vector<TokenSeq> xs;
    for (int b = 0; b < 3; ++b) {
        TokenSeq x = all_masked(cfg);
        x.tokens[b] = b + 1;
        xs.push_back(x);
    }
    std::vector<real> t(xs.size(), real(0.7));

    AdaptiveLoopPolicy ap;
    ap.epsilon = 0;
    ap.s_budget = 3;
    auto [rec, loops] = adaptive_forward_batch(p, xs, t, ap);
    ForwardRecord fixed = forward_batch(p, xs, t, 3);
    CHECK(rec.logits.values() == fixed.logits.values());
}

TEST_CASE("adaptive generation is deterministic and reports per-step loops") {
    ModelConfig cfg = small_config();
    cfg.loop.s_max = 6;
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(53);
    randomize_params(p, r);

    AdaptiveLoopPolicy ap;
    ap.epsilon = 0;
    ap.s_budget = 5;

    Rng rng1(3), rng2(3);
    Trajectory a = generate(p, UnmaskPolicy::left_to_right(2), 4, ap, rng1);
    Trajectory b = generate(p, UnmaskPolicy::left_to_right(2), 4, ap, rng2);
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t j = 0; j < a.steps.size(); ++j) {
        CHECK(a.steps[j].loops_used == 5);
        CHECK(a.steps[j].snapshot.tokens == b.steps[j].snapshot.tokens);
    }
    CHECK(mean_loops({a}) == real(5));
}

TEST_CASE("mean loops averages across trajectories and steps") {
    Trajectory t1, t2;
    for (int j = 0; j < 2; ++j) {
        SampleStep st;
        st.loops_used = 6;
        t1.steps.push_back(st);
    }
    SampleStep st;
    st.loops_used = 12;
    t2.steps.push_back(st);
    CHECK(mean_loops({t1}) == real(6));
    CHECK(mean_loops({t1, t2}) == real(8));
    CHECK_THROWS_AS(mean_loops({}), ContractError);
    Trajectory empty;
    CHECK_THROWS_AS(mean_loops({empty}), ContractError);
}

TEST_CASE("higher thresholds never loop more") {
    ModelConfig cfg = small_config();
    cfg.loop.s_max = 8;
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng r(59);
    randomize_params(p, r);

    std::vector<TokenSeq> xs;
    Rng mk(7);
    for (int b = 0; b < 6; ++b) {
        TokenSeq x = all_masked(cfg);
        for (int i = 0; i < 3; ++i)
            x.tokens[mk.below(cfg.seq_len)] = static_cast<int32_t>(mk.below(cfg.vocab));
        xs.push_back(x);
    }

    real last_mean = std::numeric_limits<real>::infinity();
    for (real eps : {real(0), real(0.02), real(0.05), real(0.1), real(0.2), real(0.5)}) {
        AdaptiveLoopPolicy ap;
        ap.epsilon = eps;
        ap.s_budget = 8;
        auto [rec, loops] = adaptive_forward_batch(
            p, xs, std::vector<real>(xs.size(), real(0.6)), ap);
        real mean = 0;
        for (int32_t l : loops) mean += l;
        mean /= loops.size();
        CHECK(mean <= last_mean);
        last_mean = mean;
    }
}

TEST_CASE("trajectory export is line-per-step structured text") {
    ModelConfig cfg = small_config();
    ModelParams p = planted_model(cfg, 2);
    Rng rng(61);
    Trajectory tr = generate(p, UnmaskPolicy::left_to_right(4), 2, 1, rng);

    std::string text = tr.export_lines();
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    CHECK(line.front() == '#');

    std::getline(in, line);
    std::istringstream fields(line);
    int step;
    real t;
    int loops;
    std::string positions, tokens;
    fields >> step >> t >> loops >> positions >> tokens;
    CHECK(step == 1);
    CHECK(t == real(0.5));
    CHECK(loops == 1);
    CHECK(positions == "0,1,2,3");
    CHECK(tokens == "2,2,2,2");

    std::getline(in, line);
    CHECK(line.substr(0, 1) == "2");
    CHECK(!std::getline(in, line));
}

TEST_CASE("generation rejects malformed calls") {
    ModelConfig cfg = small_config();
    Rng pinit(2);
    ModelParams p = init_params(cfg, pinit);
    Rng rng(67);

    CHECK_THROWS_AS(generate(p, UnmaskPolicy::ancestral(), 0, 1, rng), ConfigError);
    CHECK_THROWS_AS(generate_batch(p, UnmaskPolicy::ancestral(), 4, 1, rng, {}), ContractError);

    TokenSeq bad;
    bad.vocab = cfg.vocab;
    bad.tokens.assign(3, cfg.vocab);  // wrong length
    CHECK_THROWS_AS(generate(p, UnmaskPolicy::ancestral(), 4, 1, rng, &bad), ShapeError);

    TokenSeq wrong_vocab = all_masked(cfg);
    wrong_vocab.vocab = cfg.vocab + 1;
    for (auto& tok : wrong_vocab.tokens) tok = cfg.vocab + 1;
    CHECK_THROWS_AS(generate(p, UnmaskPolicy::ancestral(), 4, 1, rng, &wrong_vocab), ShapeError);

    Trajectory empty;
    CHECK_THROWS_AS(empty.final_sequence(), ContractError);
}
