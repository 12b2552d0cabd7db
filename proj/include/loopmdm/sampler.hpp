#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "loopmdm/model.hpp"

namespace loopmdm {

// Inference-time loop allocation: keep looping the mid-block until the
// relative hidden-state change drops below epsilon or the budget runs out.
struct AdaptiveLoopPolicy {
    enum class NormScope { all_positions, masked_only };

    real epsilon = real(0.1);  // 0 forces the full budget, +inf forces one loop
    int32_t s_budget = 1;
    NormScope norm_scope = NormScope::all_positions;

    void validate() const;
};

struct SampleStep {
    int32_t index = 0;  // 1-based position on the time grid
    real t = 0;         // time after this transition
    int32_t loops_used = 1;
    TokenSeq snapshot;
    std::vector<int32_t> committed_positions;
    std::vector<int32_t> committed_tokens;
    std::vector<real> confidences;  // max token probability per position, pre-commit
};

struct Trajectory {
    std::vector<SampleStep> steps;

    const TokenSeq& final_sequence() const;  // ContractError when empty
    // One header line, then one line per step:
    // step <TAB> t <TAB> loops_used <TAB> committed_positions <TAB> committed_tokens
    std::string export_lines() const;
};

// Reverse-process generation over a uniform time grid from 1 down to 0.
// Prompts fix their non-mask positions; those are never re-predicted. The
// all-mask start is a null prompt. Generation stops early once every
// sequence is complete.
std::vector<Trajectory> generate_batch(const ModelParams& p, const UnmaskPolicy& policy,
                                       int32_t n_steps, int32_t s, Rng& rng,
                                       const std::vector<TokenSeq>& prompts);
std::vector<Trajectory> generate_batch(const ModelParams& p, const UnmaskPolicy& policy,
                                       int32_t n_steps, const AdaptiveLoopPolicy& ap, Rng& rng,
                                       const std::vector<TokenSeq>& prompts);

Trajectory generate(const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps, int32_t s,
                    Rng& rng, const TokenSeq* prompt = nullptr);
Trajectory generate(const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps,
                    const AdaptiveLoopPolicy& ap, Rng& rng, const TokenSeq* prompt = nullptr);

// Forward pass with data-dependent loop count. The change ratio after loop k
// is ||H(k) - H(k-1)||_F / ||H(k)||_F with H(0) the head output; each
// sequence in the batch stops on its own. A zero-norm state stops its
// sequence immediately (ratio treated as 0) and logs a warning.
std::pair<ForwardRecord, int32_t> adaptive_forward(const ModelParams& p, const TokenSeq& x_t,
                                                   real t, const AdaptiveLoopPolicy& ap);
std::pair<ForwardRecord, std::vector<int32_t>> adaptive_forward_batch(
    const ModelParams& p, const std::vector<TokenSeq>& x_t, const std::vector<real>& t,
    const AdaptiveLoopPolicy& ap);

// Average loops_used across every step of every trajectory.
real mean_loops(const std::vector<Trajectory>& trajectories);

}  // namespace loopmdm
