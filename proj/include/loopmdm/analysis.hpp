#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loopmdm/common.hpp"
#include "loopmdm/model.hpp"
#include "loopmdm/sampler.hpp"

namespace loopmdm {

// Mean attention probability that masked-position queries assign to
// masked-position keys, for one mid-block layer at one loop index, averaged
// over heads, masked queries, and contributing sequences.
struct AttentionStats {
    int32_t s = 0;           // loop count the forward ran at
    int32_t layer = 0;       // 0-based layer id within the mid-block
    int32_t loop = 0;        // 1-based loop index
    real mass = 0;           // in [0,1]; meaningful only when n_samples > 0
    int64_t n_samples = 0;   // sequences that had at least one masked query
    int64_t n_skipped = 0;   // sequences skipped for lack of masked positions
};

// Forward-masks the eval set once at time t (seeded, shared across entries of
// s_list) and measures mask-to-mask attention for every mid-block layer and
// loop index at each S. Sequences left without masked positions are skipped
// and counted.
std::vector<AttentionStats> mask_attention_profile(const ModelParams& p,
                                                   const std::vector<TokenSeq>& eval_set,
                                                   real t, const std::vector<int32_t>& s_list,
                                                   uint64_t seed);

// Per-timestep denoising quality: n_bins uniform bins partition (0,1]; each
// bin's sequences are forward-masked at the bin center and scored at every S
// in s_list by the mean NLL over masked positions. gain rows hold
// NLL(S=1) - NLL(S) per bin.
struct TimestepProfile {
    std::vector<real> bin_lo, bin_hi;  // bin i covers (bin_lo[i], bin_hi[i]]
    std::vector<real> bin_t;           // evaluation time, the bin center
    std::vector<int32_t> s_list;
    std::vector<int64_t> counts;  // masked positions scored per bin
    std::vector<real> nll;        // bins x s_list, row-major; 0 when a bin is empty
    std::vector<real> gain;       // same shape

    int32_t n_bins() const { return int32_t(bin_lo.size()); }
    real nll_at(int32_t bin, int32_t si) const;
    real gain_at(int32_t bin, int32_t si) const;
};

// s_list must contain 1 (the gain baseline). Masking is seeded and shared
// across the entries of s_list within each bin.
TimestepProfile timestep_gain_profile(const ModelParams& p,
                                      const std::vector<TokenSeq>& eval_set,
                                      const std::vector<int32_t>& s_list, int32_t n_bins,
                                      uint64_t seed);

// Mean loops_used per timestep bin over a set of sampling trajectories. Steps
// bin by the time their forward pass saw (1 for the first step, then the
// previous step's post-transition time), which always lies in (0,1].
struct LoopAllocationProfile {
    std::vector<real> bin_lo, bin_hi;
    std::vector<real> mean_loops;  // 0 when a bin holds no steps
    std::vector<int64_t> counts;

    int32_t n_bins() const { return int32_t(bin_lo.size()); }
};

LoopAllocationProfile loop_allocation_profile(const std::vector<Trajectory>& trajectories,
                                              int32_t n_bins);

// exp(mean per-token NLL) of the generated sequences under the scorer, with a
// leave-one-out convention: each position is masked in turn with all others
// visible, conditioned at t = 1/seq_len (the mask fraction of that state).
// s = 0 means the scorer's configured s_max. ConfigError on vocabulary
// mismatch; sequences must be complete and of the scorer's length.
real generative_perplexity(const std::vector<TokenSeq>& generated, const ModelParams& scorer,
                           int32_t s = 0);

// Tab-separated tables, one '#' header line then one row per entry.
std::string attention_table(const std::vector<AttentionStats>& stats);
std::string timestep_table(const TimestepProfile& profile);
std::string allocation_table(const LoopAllocationProfile& profile);

// Self-contained SVG line chart, one polyline per series.
struct ChartSeries {
    std::string label;
    std::vector<real> x, y;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series);

}  // namespace loopmdm
