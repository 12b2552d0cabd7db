#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "loopmdm/diffusion.hpp"
#include "loopmdm/tensor.hpp"

namespace loopmdm {

enum class LoopSampler { uniform, fixed, lognormal_poisson };

// Layer partition and loop behavior: layers [0, loop_start) form the head,
// the next n_m layers are the shared mid-block applied S times, the rest are
// the tail.
struct LoopConfig {
    int32_t n_layers_total = 2;
    int32_t loop_start = 0;
    int32_t n_m = 1;
    int32_t s_max = 1;
    LoopSampler loop_sampler = LoopSampler::uniform;
    int32_t fixed_s = 1;
    real lognormal_mu = real(0);
    real lognormal_sigma = real(0.5);
    real mask_noise_std = real(0);

    int32_t n_head_layers() const { return loop_start; }
    int32_t n_tail_layers() const { return n_layers_total - loop_start - n_m; }
    void validate() const;
};

int32_t effective_depth(const LoopConfig& cfg, int32_t s);
int32_t sample_loop_count(const LoopConfig& cfg, Rng& rng);

struct ModelConfig {
    int32_t vocab = 16;  // real tokens; the mask id is vocab itself
    int32_t seq_len = 16;
    int32_t d_model = 64;
    int32_t n_heads = 4;
    LoopConfig loop;

    int32_t d_mlp() const { return 4 * d_model; }
    void validate() const;
};

// One transformer layer: modulation projection, attention, MLP.
struct LayerParams {
    Tensor mod_w, mod_b;  // d -> 6d: shift/scale/gate for attention and MLP
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// All learnable state. The mid-block layers appear once in `layers`; loop
// applications reuse those same tensors, so sharing is physical.
struct ModelParams {
    ModelConfig cfg;
    Tensor tok_emb;                // (vocab+1) x d, last row is the mask embedding
    Tensor time_w1, time_b1, time_w2, time_b2;
    std::vector<LayerParams> layers;  // n_layers_total distinct layers
    Tensor final_mod_w, final_mod_b;  // d -> 2d: shift/scale before readout
    Tensor head_w, head_b;            // d -> vocab; the mask id has no logit
};

// Truncated-normal weights (std 0.02), zero biases, zero-initialized
// modulation and readout so every block starts as the identity and the
// initial prediction is uniform.
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

// Refill every tensor (including modulation) with truncated-normal values.
void randomize_params(ModelParams& p, Rng& rng, real stddev = real(0.05));

std::vector<std::pair<std::string, Tensor>> named_params(ModelParams& p);
std::size_t param_count(const ModelParams& p);
std::size_t layer_param_count(const ModelConfig& cfg);
std::size_t total_param_count(const ModelConfig& cfg);

struct RetentionFlags {
    bool hidden_states = false;
    bool attention_maps = false;
};

// Which layer application produced a captured attention map: `loop` is 0 for
// head/tail layers and the 1-based loop index for mid-block layers.
struct AttnTag {
    int32_t layer = 0;
    int32_t loop = 0;
};

struct ForwardRecord {
    Tensor logits;  // [B*L x vocab]
    std::vector<Tensor> mid_states;  // H^(0..S) at the mid-block boundary, when retained
    std::vector<AttnMaps> attn;
    std::vector<AttnTag> attn_tags;
};

// ---- staged forward pieces (the sampler composes these for adaptive loops) ----

// Token embeddings [n x d]; when noise_rng is given, masked-position rows get
// Gaussian noise of std cfg.loop.mask_noise_std added (training-time only).
Tensor embed_tokens(const ModelParams& p, const std::vector<int32_t>& tokens, Rng* noise_rng);

// Timestep conditioning vectors, one row per sequence.
Tensor conditioning(const ModelParams& p, const std::vector<real>& t);

// Applies distinct layers [first, first+count) in order. block_rows is the
// per-sequence row count; captures, when non-null, receive one entry per
// layer application tagged with loop_index.
Tensor apply_layers(const ModelParams& p, int32_t first, int32_t count, Tensor h, const Tensor& c,
                    std::size_t block_rows, std::vector<AttnMaps>* captures = nullptr,
                    std::vector<AttnTag>* tags = nullptr, int32_t loop_index = 0);

// Final modulated normalization plus the vocabulary projection.
Tensor readout(const ModelParams& p, const Tensor& h, const Tensor& c, std::size_t block_rows);

// ---- full forwards ----

// Batched forward at loop count S with one timestep per sequence. All
// sequences share the model's configured length.
ForwardRecord forward_batch(const ModelParams& p, const std::vector<TokenSeq>& x_t,
                            const std::vector<real>& t, int32_t s,
                            const RetentionFlags& retain = {}, Rng* noise_rng = nullptr);

ForwardRecord forward(const ModelParams& p, const TokenSeq& x_t, real t, int32_t s,
                      const RetentionFlags& retain = {});

// Row-wise softmax of the logits as a flat [rows x vocab] buffer.
std::vector<real> probs_from_logits(const Tensor& logits);

}  // namespace loopmdm
