#include "loopmdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace loopmdm {

std::size_t TokenSeq::count_masked() const {
    std::size_t n = 0;
    for (int32_t tok : tokens) n += tok == vocab;
    return n;
}

void TokenSeq::validate() const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || tokens[i] > vocab)
            throw ContractError("TokenSeq: token " + std::to_string(tokens[i]) + " at position " +
                                std::to_string(i) + " outside {0.." + std::to_string(vocab) + "}");
}

real NoiseSchedule::alpha(real t) const {
    if (t < real(0) || t > real(1))
        throw DomainError("alpha: t=" + std::to_string(t) + " outside [0,1]");
    switch (kind) {
        case ScheduleKind::linear: return real(1) - t;
    }
    throw ContractError("alpha: unknown schedule kind");
}

real NoiseSchedule::alpha_prime(real t) const {
    if (t < real(0) || t > real(1))
        throw DomainError("alpha_prime: t=" + std::to_string(t) + " outside [0,1]");
    switch (kind) {
        case ScheduleKind::linear: return real(-1);
    }
    throw ContractError("alpha_prime: unknown schedule kind");
}

real nelbo_weight(const NoiseSchedule& sched, real t) {
    if (t <= real(0) || t > real(1))
        throw DomainError("nelbo_weight: t=" + std::to_string(t) + " outside (0,1]");
    return std::abs(sched.alpha_prime(t)) / (real(1) - sched.alpha(t));
}

real remain_masked_prob(const NoiseSchedule& sched, real s, real t) {
    if (!(real(0) <= s && s < t && t <= real(1)))
        throw DomainError("remain_masked_prob: need 0 <= s < t <= 1, got s=" + std::to_string(s) +
                          " t=" + std::to_string(t));
    real denom = real(1) - sched.alpha(t);
    if (denom == real(0))
        throw DomainError("remain_masked_prob: alpha(t)=1 at t=" + std::to_string(t));
    return (real(1) - sched.alpha(s)) / denom;
}

TokenSeq forward_mask(const TokenSeq& x0, const NoiseSchedule& sched, real t, Rng& rng) {
    if (x0.has_mask()) throw ContractError("forward_mask: input already contains mask ids");
    real keep = sched.alpha(t);
    TokenSeq xt = x0;
    for (auto& tok : xt.tokens)
        if (rng.uniform01() >= keep) tok = xt.vocab;
    return xt;
}

real sample_time(Rng& rng, real t_min) {
    return real(1) - (real(1) - t_min) * rng.uniform01();
}

UnmaskPolicy UnmaskPolicy::topk(int32_t k) {
    if (k < 1) throw ConfigError("topk policy: k must be >= 1");
    return {Kind::topk_confidence, k};
}

UnmaskPolicy UnmaskPolicy::left_to_right(int32_t tokens_per_step) {
    if (tokens_per_step < 1) throw ConfigError("left_to_right policy: tokens_per_step must be >= 1");
    return {Kind::fixed_left_to_right, tokens_per_step};
}

namespace {

std::size_t sample_categorical(const real* p, std::size_t v, Rng& rng) {
    real u = rng.uniform01();
    real acc = 0;
    for (std::size_t j = 0; j < v; ++j) {
        acc += p[j];
        if (u < acc) return j;
    }
    return v - 1;
}

std::size_t argmax_row(const real* p, std::size_t v) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

}  // namespace

TokenSeq reverse_step(const TokenSeq& x_t, const std::vector<real>& probs,
                      const NoiseSchedule& sched, real s, real t, Rng& rng,
                      const UnmaskPolicy& policy) {
    std::size_t L = x_t.length();
    std::size_t V = static_cast<std::size_t>(x_t.vocab);
    if (probs.size() != L * V)
        throw ShapeError("reverse_step: " + std::to_string(probs.size()) + " probabilities for " +
                         std::to_string(L) + "x" + std::to_string(V));
    for (std::size_t i = 0; i < L; ++i) {
        if (!x_t.is_masked(i)) continue;
        real total = 0;
        for (std::size_t j = 0; j < V; ++j) total += probs[i * V + j];
        if (std::abs(total - real(1)) > real(1e-6))
            throw ContractError("reverse_step: probability row " + std::to_string(i) + " sums to " +
                                std::to_string(total));
    }

    TokenSeq out = x_t;
    bool final_step = s == real(0);
    switch (policy.kind) {
        case UnmaskPolicy::Kind::ancestral_random: {
            real remain = final_step ? real(0) : remain_masked_prob(sched, s, t);
            for (std::size_t i = 0; i < L; ++i) {
                if (!x_t.is_masked(i)) continue;
                if (rng.uniform01() < remain) continue;
                out.tokens[i] = static_cast<int32_t>(sample_categorical(&probs[i * V], V, rng));
            }
            break;
        }
        case UnmaskPolicy::Kind::topk_confidence: {
            // Commit the k most confident masked positions, ties to the
            // lowest index; the final step commits everything.
            std::vector<std::pair<real, std::size_t>> ranked;
            for (std::size_t i = 0; i < L; ++i)
                if (x_t.is_masked(i)) ranked.emplace_back(probs[i * V + argmax_row(&probs[i * V], V)], i);
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            std::size_t commit = final_step ? ranked.size()
                                            : std::min<std::size_t>(ranked.size(),
                                                                    static_cast<std::size_t>(policy.k));
            for (std::size_t r = 0; r < commit; ++r) {
                std::size_t i = ranked[r].second;
                out.tokens[i] = static_cast<int32_t>(argmax_row(&probs[i * V], V));
            }
            break;
        }
        case UnmaskPolicy::Kind::fixed_left_to_right: {
            std::size_t committed = 0;
            std::size_t quota = static_cast<std::size_t>(policy.k);
            for (std::size_t i = 0; i < L; ++i) {
                if (!x_t.is_masked(i)) continue;
                if (!final_step && committed >= quota) break;
                out.tokens[i] = static_cast<int32_t>(argmax_row(&probs[i * V], V));
                ++committed;
            }
            break;
        }
    }
    return out;
}

}  // namespace loopmdm
