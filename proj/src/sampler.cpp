#include "loopmdm/sampler.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>

namespace loopmdm {

void AdaptiveLoopPolicy::validate() const {
    if (!(epsilon >= real(0)))
        throw ConfigError("adaptive loop policy: epsilon must be >= 0");
    if (s_budget < 1) throw ConfigError("adaptive loop policy: s_budget must be >= 1");
}

const TokenSeq& Trajectory::final_sequence() const {
    if (steps.empty()) throw ContractError("trajectory has no steps");
    return steps.back().snapshot;
}

std::string Trajectory::export_lines() const {
    auto join = [](const std::vector<int32_t>& v) {
        if (v.empty()) return std::string("-");
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(v[i]);
        }
        return s;
    };
    std::string out = "# step\tt\tloops_used\tcommitted_positions\tcommitted_tokens\n";
    char buf[64];
    for (const SampleStep& st : steps) {
        std::snprintf(buf, sizeof buf, "%d\t%.10g\t%d\t", st.index, static_cast<double>(st.t),
                      st.loops_used);
        out += buf;
        out += join(st.committed_positions);
        out += '\t';
        out += join(st.committed_tokens);
        out += '\n';
    }
    return out;
}

// ---- adaptive forward ----

std::pair<ForwardRecord, std::vector<int32_t>> adaptive_forward_batch(
    const ModelParams& p, const std::vector<TokenSeq>& xs, const std::vector<real>& t,
    const AdaptiveLoopPolicy& ap) {
    ap.validate();
    const ModelConfig& cfg = p.cfg;
    if (xs.empty()) throw ContractError("adaptive_forward: empty batch");
    if (t.size() != xs.size())
        throw ShapeError("adaptive_forward: " + std::to_string(t.size()) + " timesteps for " +
                         std::to_string(xs.size()) + " sequences");
    const std::size_t L = static_cast<std::size_t>(cfg.seq_len);
    const std::size_t B = xs.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);

    std::vector<int32_t> flat;
    flat.reserve(B * L);
    for (const TokenSeq& x : xs) {
        if (x.length() != L)
            throw ShapeError("adaptive_forward: sequence length " + std::to_string(x.length()) +
                             ", model expects " + std::to_string(L));
        if (x.vocab != cfg.vocab)
            throw ShapeError("adaptive_forward: sequence vocab " + std::to_string(x.vocab) +
                             ", model expects " + std::to_string(cfg.vocab));
        x.validate();
        flat.insert(flat.end(), x.tokens.begin(), x.tokens.end());
    }

    Tensor c = conditioning(p, t);
    Tensor h = embed_tokens(p, flat, nullptr);
    h = apply_layers(p, 0, cfg.loop.n_head_layers(), h, c, L);

    // Row indices (within a sequence) the change ratio is measured over.
    std::vector<std::vector<int32_t>> scope(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (ap.norm_scope == AdaptiveLoopPolicy::NormScope::all_positions) {
            scope[b].resize(L);
            std::iota(scope[b].begin(), scope[b].end(), 0);
        } else {
            for (std::size_t i = 0; i < L; ++i)
                if (xs[b].is_masked(i)) scope[b].push_back(static_cast<int32_t>(i));
        }
    }

    std::vector<int32_t> active(B);
    std::iota(active.begin(), active.end(), 0);
    std::vector<int32_t> loops(B, 0);
    std::vector<real> final_h(B * L * d);
    Tensor h_act = h;
    Tensor c_act = c;
    std::vector<real> prev = h.values();  // H(0), the pre-loop baseline
    bool warned = false;

    for (int32_t k = 1; !active.empty(); ++k) {
        h_act = apply_layers(p, cfg.loop.loop_start, cfg.loop.n_m, h_act, c_act, L, nullptr,
                             nullptr, k);
        const std::vector<real>& hv = h_act.values();
        std::vector<std::size_t> keep;
        for (std::size_t a = 0; a < active.size(); ++a) {
            int32_t b = active[a];
            real num = 0, den = 0;
            for (int32_t i : scope[b]) {
                const real* cur = &hv[(a * L + static_cast<std::size_t>(i)) * d];
                const real* old = &prev[(a * L + static_cast<std::size_t>(i)) * d];
                for (std::size_t j = 0; j < d; ++j) {
                    real diff = cur[j] - old[j];
                    num += diff * diff;
                    den += cur[j] * cur[j];
                }
            }
            bool stop;
            if (den == real(0)) {
                if (!warned) {
                    std::cerr << "warning: zero-norm hidden state during adaptive looping; "
                                 "stopping that sequence\n";
                    warned = true;
                }
                stop = true;
            } else {
                stop = std::sqrt(num / den) < ap.epsilon;
            }
            if (stop || k == ap.s_budget) {
                loops[b] = k;
                std::copy(&hv[a * L * d], &hv[(a + 1) * L * d],
                          &final_h[static_cast<std::size_t>(b) * L * d]);
            } else {
                keep.push_back(a);
            }
        }
        if (keep.size() == active.size()) {
            prev = hv;
            continue;
        }
        std::vector<int32_t> next_active;
        std::vector<real> next_h, next_c;
        next_active.reserve(keep.size());
        next_h.reserve(keep.size() * L * d);
        next_c.reserve(keep.size() * d);
        const std::vector<real>& cv = c_act.values();
        for (std::size_t a : keep) {
            next_active.push_back(active[a]);
            next_h.insert(next_h.end(), &hv[a * L * d], &hv[(a + 1) * L * d]);
            next_c.insert(next_c.end(), &cv[a * d], &cv[(a + 1) * d]);
        }
        active = std::move(next_active);
        if (!active.empty()) {
            h_act = Tensor::from_values(active.size() * L, d, std::move(next_h));
            c_act = Tensor::from_values(active.size(), d, std::move(next_c));
            prev = h_act.values();
        }
    }

    Tensor h_final = Tensor::from_values(B * L, d, std::move(final_h));
    h_final = apply_layers(p, cfg.loop.loop_start + cfg.loop.n_m, cfg.loop.n_tail_layers(),
                           h_final, c, L);
    ForwardRecord rec;
    rec.logits = readout(p, h_final, c, L);
    return {std::move(rec), std::move(loops)};
}

std::pair<ForwardRecord, int32_t> adaptive_forward(const ModelParams& p, const TokenSeq& x_t,
                                                   real t, const AdaptiveLoopPolicy& ap) {
    auto [rec, loops] = adaptive_forward_batch(p, {x_t}, {t}, ap);
    return {std::move(rec), loops[0]};
}

// ---- generation ----

namespace {

using ForwardFn =
    std::function<std::pair<Tensor, std::vector<int32_t>>(const std::vector<TokenSeq>&, real)>;

std::vector<Trajectory> generate_core(const ModelParams& p, const UnmaskPolicy& policy,
                                      int32_t n_steps, Rng& rng,
                                      const std::vector<TokenSeq>& prompts, const ForwardFn& fwd) {
    if (n_steps < 1) throw ConfigError("generate: n_steps must be >= 1");
    if (prompts.empty()) throw ContractError("generate: empty prompt batch");
    const std::size_t L = static_cast<std::size_t>(p.cfg.seq_len);
    const std::size_t B = prompts.size();
    const std::size_t V = static_cast<std::size_t>(p.cfg.vocab);
    for (const TokenSeq& pr : prompts) {
        if (pr.length() != L)
            throw ShapeError("generate: prompt length " + std::to_string(pr.length()) +
                             ", model expects " + std::to_string(L));
        if (pr.vocab != p.cfg.vocab)
            throw ShapeError("generate: prompt vocab " + std::to_string(pr.vocab) +
                             ", model expects " + std::to_string(p.cfg.vocab));
        pr.validate();
    }

    NoiseSchedule sched;
    std::vector<TokenSeq> x = prompts;
    std::vector<Trajectory> out(B);
    for (int32_t j = 1; j <= n_steps; ++j) {
        bool any_masked = false;
        for (const TokenSeq& seq : x) any_masked = any_masked || seq.has_mask();
        if (!any_masked) break;

        real t_prev = real(n_steps - (j - 1)) / real(n_steps);
        real t_cur = real(n_steps - j) / real(n_steps);
        auto [logits, loops] = fwd(x, t_prev);
        std::vector<real> probs = probs_from_logits(logits);

        for (std::size_t b = 0; b < B; ++b) {
            const real* pb = &probs[b * L * V];
            std::vector<real> seq_probs(pb, pb + L * V);
            TokenSeq before = x[b];
            x[b] = reverse_step(before, seq_probs, sched, t_cur, t_prev, rng, policy);

            SampleStep st;
            st.index = j;
            st.t = t_cur;
            st.loops_used = loops[b];
            st.snapshot = x[b];
            st.confidences.resize(L);
            for (std::size_t i = 0; i < L; ++i) {
                real best = 0;
                for (std::size_t v = 0; v < V; ++v) best = std::max(best, pb[i * V + v]);
                st.confidences[i] = best;
            }
            for (std::size_t i = 0; i < L; ++i) {
                if (before.is_masked(i) && !x[b].is_masked(i)) {
                    st.committed_positions.push_back(static_cast<int32_t>(i));
                    st.committed_tokens.push_back(x[b].tokens[i]);
                }
            }
            out[b].steps.push_back(std::move(st));
        }
    }
    return out;
}

}  // namespace

std::vector<Trajectory> generate_batch(const ModelParams& p, const UnmaskPolicy& policy,
                                       int32_t n_steps, int32_t s, Rng& rng,
                                       const std::vector<TokenSeq>& prompts) {
    ForwardFn fwd = [&p, s](const std::vector<TokenSeq>& xs, real t) {
        ForwardRecord rec = forward_batch(p, xs, std::vector<real>(xs.size(), t), s);
        return std::make_pair(rec.logits, std::vector<int32_t>(xs.size(), s));
    };
    return generate_core(p, policy, n_steps, rng, prompts, fwd);
}

std::vector<Trajectory> generate_batch(const ModelParams& p, const UnmaskPolicy& policy,
                                       int32_t n_steps, const AdaptiveLoopPolicy& ap, Rng& rng,
                                       const std::vector<TokenSeq>& prompts) {
    ap.validate();
    ForwardFn fwd = [&p, &ap](const std::vector<TokenSeq>& xs, real t) {
        auto [rec, loops] = adaptive_forward_batch(p, xs, std::vector<real>(xs.size(), t), ap);
        return std::make_pair(rec.logits, std::move(loops));
    };
    return generate_core(p, policy, n_steps, rng, prompts, fwd);
}

Trajectory generate(const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps, int32_t s,
                    Rng& rng, const TokenSeq* prompt) {
    TokenSeq start;
    if (prompt != nullptr) {
        start = *prompt;
    } else {
        start.vocab = p.cfg.vocab;
        start.tokens.assign(p.cfg.seq_len, p.cfg.vocab);
    }
    return std::move(generate_batch(p, policy, n_steps, s, rng, {start})[0]);
}

Trajectory generate(const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps,
                    const AdaptiveLoopPolicy& ap, Rng& rng, const TokenSeq* prompt) {
    TokenSeq start;
    if (prompt != nullptr) {
        start = *prompt;
    } else {
        start.vocab = p.cfg.vocab;
        start.tokens.assign(p.cfg.seq_len, p.cfg.vocab);
    }
    return std::move(generate_batch(p, policy, n_steps, ap, rng, {start})[0]);
}

real mean_loops(const std::vector<Trajectory>& trajectories) {
    uint64_t n = 0;
    real total = 0;
    for (const Trajectory& tr : trajectories) {
        for (const SampleStep& st : tr.steps) {
            total += st.loops_used;
            ++n;
        }
    }
    if (n == 0) throw ContractError("mean_loops: no steps to average");
    return total / real(n);
}

}  // namespace loopmdm
