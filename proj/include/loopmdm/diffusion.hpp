#pragma once

#include <cstdint>
#include <vector>

#include "loopmdm/common.hpp"
#include "loopmdm/rng.hpp"

namespace loopmdm {

// Fixed-length token sequence over {0..vocab}, where id vocab is the mask.
struct TokenSeq {
    int32_t vocab = 0;
    std::vector<int32_t> tokens;

    int32_t mask_id() const { return vocab; }
    std::size_t length() const { return tokens.size(); }
    bool is_masked(std::size_t i) const { return tokens[i] == vocab; }
    std::size_t count_masked() const;
    bool has_mask() const { return count_masked() > 0; }
    // ContractError if any entry falls outside {0..vocab}.
    void validate() const;
};

enum class ScheduleKind { linear };

// Noise schedule alpha_t: probability a token survives uncorrupted at time t,
// strictly decreasing from 1 at t=0 to 0 at t=1.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;

    real alpha(real t) const;
    real alpha_prime(real t) const;
};

// |alpha'(t)| / (1 - alpha(t)); the positive per-position loss weight. For the
// linear schedule this is 1/t, so t=0 diverges.
real nelbo_weight(const NoiseSchedule& sched, real t);

// (1 - alpha_s) / (1 - alpha_t): probability a masked position is still
// masked after stepping from time t down to s.
real remain_masked_prob(const NoiseSchedule& sched, real s, real t);

// Independently keeps each token with probability alpha_t, else masks it.
TokenSeq forward_mask(const TokenSeq& x0, const NoiseSchedule& sched, real t, Rng& rng);

// Training timestep draw, uniform over (t_min, 1].
real sample_time(Rng& rng, real t_min = real(1e-3));

// Which masked positions a reverse step commits.
struct UnmaskPolicy {
    enum class Kind { ancestral_random, topk_confidence, fixed_left_to_right };
    Kind kind = Kind::ancestral_random;
    int32_t k = 1;  // positions committed per step for the deterministic kinds

    static UnmaskPolicy ancestral() { return {Kind::ancestral_random, 1}; }
    static UnmaskPolicy topk(int32_t k);
    static UnmaskPolicy left_to_right(int32_t tokens_per_step);
};

// One reverse transition from time t to s < t. probs holds one row of V real
// token probabilities per position (rows are consulted only at masked
// positions, and must sum to 1 there). Unmasked positions pass through; at
// s=0 every remaining masked position is committed.
TokenSeq reverse_step(const TokenSeq& x_t, const std::vector<real>& probs,
                      const NoiseSchedule& sched, real s, real t, Rng& rng,
                      const UnmaskPolicy& policy);

}  // namespace loopmdm
