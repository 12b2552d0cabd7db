#include "loopmdm/model.hpp"

#include <algorithm>
#include <cmath>

namespace loopmdm {

void LoopConfig::validate() const {
    if (n_layers_total < 1) throw ConfigError("loop: n_layers_total must be >= 1");
    if (n_m < 1) throw ConfigError("loop: n_m must be >= 1");
    if (loop_start < 0) throw ConfigError("loop: loop_start must be >= 0");
    if (loop_start + n_m > n_layers_total)
        throw ConfigError("loop: loop_start=" + std::to_string(loop_start) + " plus n_m=" +
                          std::to_string(n_m) + " exceeds " + std::to_string(n_layers_total) +
                          " layers");
    if (s_max < 1) throw ConfigError("loop: s_max must be >= 1");
    if (fixed_s < 1) throw ConfigError("loop: fixed_s must be >= 1");
    if (lognormal_sigma < 0) throw ConfigError("loop: lognormal_sigma must be >= 0");
    if (mask_noise_std < 0) throw ConfigError("loop: mask_noise_std must be >= 0");
}

void ModelConfig::validate() const {
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (seq_len < 1) throw ConfigError("model: seq_len must be >= 1");
    if (n_heads < 1) throw ConfigError("model: n_heads must be >= 1");
    if (d_model < 2 || d_model % 2 != 0) throw ConfigError("model: d_model must be even and >= 2");
    if (d_model % n_heads != 0)
        throw ConfigError("model: d_model=" + std::to_string(d_model) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    if ((d_model / n_heads) % 2 != 0)
        throw ConfigError("model: head width " + std::to_string(d_model / n_heads) +
                          " must be even");
    loop.validate();
}

int32_t effective_depth(const LoopConfig& cfg, int32_t s) {
    if (s < 1) throw ConfigError("effective_depth: s must be >= 1");
    return cfg.n_head_layers() + s * cfg.n_m + cfg.n_tail_layers();
}

namespace {

int32_t poisson_knuth(real lambda, Rng& rng, int32_t cap) {
    real limit = std::exp(-lambda);
    int32_t k = 0;
    real p = 1;
    do {
        ++k;
        p *= rng.uniform01();
    } while (p > limit && k <= cap);
    return k - 1;
}

}  // namespace

int32_t sample_loop_count(const LoopConfig& cfg, Rng& rng) {
    switch (cfg.loop_sampler) {
        case LoopSampler::uniform:
            return 1 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.s_max)));
        case LoopSampler::fixed: return cfg.fixed_s;
        case LoopSampler::lognormal_poisson: {
            int32_t cap = 4 * cfg.s_max;
            real rate = std::exp(cfg.lognormal_mu + cfg.lognormal_sigma * rng.gauss());
            rate = std::min(rate, real(cap));
            int32_t s = 1 + poisson_knuth(rate, rng, cap);
            return std::clamp(s, 1, cap);
        }
    }
    throw ContractError("sample_loop_count: unknown sampler kind");
}

// ---- parameters ----

namespace {

Tensor zeros_grad(std::size_t r, std::size_t c) { return Tensor::zeros(r, c, true); }

LayerParams init_layer(const ModelConfig& cfg, Rng& rng) {
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t dm = static_cast<std::size_t>(cfg.d_mlp());
    LayerParams lp;
    lp.mod_w = zeros_grad(d, 6 * d);
    lp.mod_b = zeros_grad(1, 6 * d);
    lp.wq = Tensor::trunc_normal(d, d, real(0.02), rng);
    lp.bq = zeros_grad(1, d);
    lp.wk = Tensor::trunc_normal(d, d, real(0.02), rng);
    lp.bk = zeros_grad(1, d);
    lp.wv = Tensor::trunc_normal(d, d, real(0.02), rng);
    lp.bv = zeros_grad(1, d);
    lp.wo = Tensor::trunc_normal(d, d, real(0.02), rng);
    lp.bo = zeros_grad(1, d);
    lp.mlp_w1 = Tensor::trunc_normal(d, dm, real(0.02), rng);
    lp.mlp_b1 = zeros_grad(1, dm);
    lp.mlp_w2 = Tensor::trunc_normal(dm, d, real(0.02), rng);
    lp.mlp_b2 = zeros_grad(1, d);
    return lp;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t v = static_cast<std::size_t>(cfg.vocab);
    ModelParams p;
    p.cfg = cfg;
    p.tok_emb = Tensor::trunc_normal(v + 1, d, real(0.02), rng);
    p.time_w1 = Tensor::trunc_normal(d, d, real(0.02), rng);
    p.time_b1 = zeros_grad(1, d);
    p.time_w2 = Tensor::trunc_normal(d, d, real(0.02), rng);
    p.time_b2 = zeros_grad(1, d);
    p.layers.reserve(static_cast<std::size_t>(cfg.loop.n_layers_total));
    for (int32_t l = 0; l < cfg.loop.n_layers_total; ++l) p.layers.push_back(init_layer(cfg, rng));
    p.final_mod_w = zeros_grad(d, 2 * d);
    p.final_mod_b = zeros_grad(1, 2 * d);
    p.head_w = zeros_grad(d, v);
    p.head_b = zeros_grad(1, v);
    return p;
}

void randomize_params(ModelParams& p, Rng& rng, real stddev) {
    for (auto& [name, t] : named_params(p)) {
        (void)name;
        for (auto& x : t.values()) {
            real z;
            do {
                z = rng.gauss();
            } while (std::abs(z) > real(2));
            x = z * stddev;
        }
    }
}

std::vector<std::pair<std::string, Tensor>> named_params(ModelParams& p) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", p.tok_emb);
    out.emplace_back("time_w1", p.time_w1);
    out.emplace_back("time_b1", p.time_b1);
    out.emplace_back("time_w2", p.time_w2);
    out.emplace_back("time_b2", p.time_b2);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        std::string pre = "layer" + std::to_string(l) + ".";
        out.emplace_back(pre + "mod_w", lp.mod_w);
        out.emplace_back(pre + "mod_b", lp.mod_b);
        out.emplace_back(pre + "wq", lp.wq);
        out.emplace_back(pre + "bq", lp.bq);
        out.emplace_back(pre + "wk", lp.wk);
        out.emplace_back(pre + "bk", lp.bk);
        out.emplace_back(pre + "wv", lp.wv);
        out.emplace_back(pre + "bv", lp.bv);
        out.emplace_back(pre + "wo", lp.wo);
        out.emplace_back(pre + "bo", lp.bo);
        out.emplace_back(pre + "mlp_w1", lp.mlp_w1);
        out.emplace_back(pre + "mlp_b1", lp.mlp_b1);
        out.emplace_back(pre + "mlp_w2", lp.mlp_w2);
        out.emplace_back(pre + "mlp_b2", lp.mlp_b2);
    }
    out.emplace_back("final_mod_w", p.final_mod_w);
    out.emplace_back("final_mod_b", p.final_mod_b);
    out.emplace_back("head_w", p.head_w);
    out.emplace_back("head_b", p.head_b);
    return out;
}

std::size_t param_count(const ModelParams& p) {
    std::size_t n = 0;
    for (auto& [name, t] : named_params(const_cast<ModelParams&>(p))) {
        (void)name;
        n += t.size();
    }
    return n;
}

std::size_t layer_param_count(const ModelConfig& cfg) {
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t dm = static_cast<std::size_t>(cfg.d_mlp());
    return (d * 6 * d + 6 * d) + 4 * (d * d + d) + (d * dm + dm) + (dm * d + d);
}

std::size_t total_param_count(const ModelConfig& cfg) {
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t v = static_cast<std::size_t>(cfg.vocab);
    std::size_t n = static_cast<std::size_t>(cfg.loop.n_layers_total);
    return (v + 1) * d + 2 * (d * d + d) + n * layer_param_count(cfg) + (2 * d * d + 2 * d) +
           (d * v + v);
}

// ---- staged forward ----

Tensor embed_tokens(const ModelParams& p, const std::vector<int32_t>& tokens, Rng* noise_rng) {
    Tensor h = embedding_gather(p.tok_emb, tokens);
    real std = p.cfg.loop.mask_noise_std;
    if (noise_rng == nullptr || std <= real(0)) return h;
    std::size_t d = static_cast<std::size_t>(p.cfg.d_model);
    Tensor noise = Tensor::zeros(tokens.size(), d);
    int32_t mask_id = p.cfg.vocab;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] != mask_id) continue;
        real* row = noise.values().data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = std * noise_rng->gauss();
    }
    return add(h, noise);
}

Tensor conditioning(const ModelParams& p, const std::vector<real>& t) {
    std::size_t d = static_cast<std::size_t>(p.cfg.d_model);
    std::size_t half = d / 2;
    Tensor feats = Tensor::zeros(t.size(), d);
    for (std::size_t b = 0; b < t.size(); ++b) {
        real* row = feats.values().data() + b * d;
        for (std::size_t j = 0; j < half; ++j) {
            real omega = std::pow(real(10000), -real(j) / real(half));
            real ang = real(1000) * t[b] * omega;
            row[j] = std::sin(ang);
            row[half + j] = std::cos(ang);
        }
    }
    return linear(silu(linear(feats, p.time_w1, p.time_b1)), p.time_w2, p.time_b2);
}

namespace {

std::vector<int32_t> row_positions(std::size_t rows, std::size_t block_rows) {
    std::vector<int32_t> pos(rows);
    for (std::size_t i = 0; i < rows; ++i) pos[i] = static_cast<int32_t>(i % block_rows);
    return pos;
}

}  // namespace

Tensor apply_layers(const ModelParams& p, int32_t first, int32_t count, Tensor h, const Tensor& c,
                    std::size_t block_rows, std::vector<AttnMaps>* captures,
                    std::vector<AttnTag>* tags, int32_t loop_index) {
    std::size_t d = static_cast<std::size_t>(p.cfg.d_model);
    std::size_t heads = static_cast<std::size_t>(p.cfg.n_heads);
    auto pos = row_positions(h.rows(), block_rows);
    for (int32_t l = first; l < first + count; ++l) {
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        Tensor mod = linear(c, lp.mod_w, lp.mod_b);
        Tensor sh1 = slice_cols(mod, 0, d), sc1 = slice_cols(mod, d, d);
        Tensor g1 = slice_cols(mod, 2 * d, d), sh2 = slice_cols(mod, 3 * d, d);
        Tensor sc2 = slice_cols(mod, 4 * d, d), g2 = slice_cols(mod, 5 * d, d);

        Tensor a = adaln_blocks(h, sc1, sh1, block_rows);
        Tensor q = rotary_apply(linear(a, lp.wq, lp.bq), heads, pos);
        Tensor k = rotary_apply(linear(a, lp.wk, lp.bk), heads, pos);
        Tensor v = linear(a, lp.wv, lp.bv);
        AttnMaps maps;
        Tensor att = attention_blocks(q, k, v, heads, block_rows,
                                      captures != nullptr ? &maps : nullptr);
        if (captures != nullptr) {
            captures->push_back(std::move(maps));
            if (tags != nullptr) tags->push_back({l, loop_index});
        }
        h = gated_residual_blocks(h, linear(att, lp.wo, lp.bo), g1, block_rows);

        Tensor m = adaln_blocks(h, sc2, sh2, block_rows);
        Tensor ff = linear(gelu(linear(m, lp.mlp_w1, lp.mlp_b1)), lp.mlp_w2, lp.mlp_b2);
        h = gated_residual_blocks(h, ff, g2, block_rows);
    }
    return h;
}

Tensor readout(const ModelParams& p, const Tensor& h, const Tensor& c, std::size_t block_rows) {
    std::size_t d = static_cast<std::size_t>(p.cfg.d_model);
    Tensor mod = linear(c, p.final_mod_w, p.final_mod_b);
    Tensor sh = slice_cols(mod, 0, d), sc = slice_cols(mod, d, d);
    Tensor norm = adaln_blocks(h, sc, sh, block_rows);
    return linear(norm, p.head_w, p.head_b);
}

ForwardRecord forward_batch(const ModelParams& p, const std::vector<TokenSeq>& x_t,
                            const std::vector<real>& t, int32_t s, const RetentionFlags& retain,
                            Rng* noise_rng) {
    if (s < 1) throw ConfigError("forward: loop count must be >= 1");
    if (x_t.empty()) throw ContractError("forward: empty batch");
    if (t.size() != x_t.size())
        throw ShapeError("forward: " + std::to_string(t.size()) + " timesteps for " +
                         std::to_string(x_t.size()) + " sequences");
    std::size_t L = static_cast<std::size_t>(p.cfg.seq_len);
    std::vector<int32_t> flat;
    flat.reserve(x_t.size() * L);
    for (const TokenSeq& seq : x_t) {
        if (seq.length() != L)
            throw ShapeError("forward: sequence length " + std::to_string(seq.length()) +
                             ", model expects " + std::to_string(L));
        if (seq.vocab != p.cfg.vocab)
            throw ConfigError("forward: sequence vocab " + std::to_string(seq.vocab) +
                              ", model expects " + std::to_string(p.cfg.vocab));
        seq.validate();
        flat.insert(flat.end(), seq.tokens.begin(), seq.tokens.end());
    }
    for (real tb : t)
        if (tb < real(0) || tb > real(1))
            throw DomainError("forward: t=" + std::to_string(tb) + " outside [0,1]");

    const LoopConfig& lc = p.cfg.loop;
    ForwardRecord rec;
    std::vector<AttnMaps>* cap = retain.attention_maps ? &rec.attn : nullptr;
    std::vector<AttnTag>* tags = retain.attention_maps ? &rec.attn_tags : nullptr;

    Tensor h = embed_tokens(p, flat, noise_rng);
    Tensor c = conditioning(p, t);
    h = apply_layers(p, 0, lc.n_head_layers(), h, c, L, cap, tags, 0);
    if (retain.hidden_states) rec.mid_states.push_back(h);
    for (int32_t k = 1; k <= s; ++k) {
        h = apply_layers(p, lc.loop_start, lc.n_m, h, c, L, cap, tags, k);
        if (retain.hidden_states) rec.mid_states.push_back(h);
    }
    h = apply_layers(p, lc.loop_start + lc.n_m, lc.n_tail_layers(), h, c, L, cap, tags, 0);
    rec.logits = readout(p, h, c, L);
    return rec;
}

ForwardRecord forward(const ModelParams& p, const TokenSeq& x_t, real t, int32_t s,
                      const RetentionFlags& retain) {
    return forward_batch(p, {x_t}, {t}, s, retain, nullptr);
}

std::vector<real> probs_from_logits(const Tensor& logits) {
    std::size_t R = logits.rows(), V = logits.cols();
    std::vector<real> out(R * V);
    for (std::size_t r = 0; r < R; ++r) {
        const real* z = logits.values().data() + r * V;
        real* o = out.data() + r * V;
        real m = z[0];
        for (std::size_t j = 1; j < V; ++j) m = std::max(m, z[j]);
        real total = 0;
        for (std::size_t j = 0; j < V; ++j) {
            o[j] = std::exp(z[j] - m);
            total += o[j];
        }
        real inv = real(1) / total;
        for (std::size_t j = 0; j < V; ++j) o[j] *= inv;
    }
    return out;
}

}  // namespace loopmdm
