#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "loopmdm/kv.hpp"
#include "loopmdm/model.hpp"

namespace loopmdm {

// How a position behaves under the forward process during training:
// normal positions are randomly masked and supervised when masked, context
// positions are never masked (conditioning), pause positions are always
// masked and never supervised (pure workspace).
enum class PositionRole : uint8_t { normal = 0, context = 1, pause = 2 };

struct TrainExample {
    TokenSeq x0;                      // complete target sequence, no mask ids
    std::vector<PositionRole> roles;  // empty means all normal
};

struct TrainConfig {
    int32_t batch_size = 32;
    int64_t total_steps = 10000;
    real learning_rate = real(3e-4);
    int64_t warmup_steps = 2500;
    real weight_decay = real(0);
    real ema_decay = real(0.9999);
    real grad_clip = real(1);  // global norm; values <= 0 disable clipping
    uint64_t seed = 0;
    // When set, the run is budget-matched: the step count actually executed is
    // total_steps scaled by the baseline's per-step cost over this model's.
    std::optional<LoopConfig> flops_match_baseline;

    void validate() const;
};

struct StepMetrics {
    int64_t step = 0;
    real loss = 0;
    real lr = 0;
    int32_t s = 0;
    real grad_norm = 0;
    uint64_t cumulative_flops = 0;
};

// Thrown when a training step produces a non-finite loss; the caller decides
// where the diagnostic snapshot goes.
struct TrainingDiverged : std::runtime_error {
    int64_t step;
    TrainingDiverged(int64_t step_, const std::string& what) : std::runtime_error(what), step(step_) {}
};

// ---- loss ----

// Weighted masked cross-entropy over a batch: one loop count per call, one
// timestep per sequence, loss averaged per sequence and per position.
// forced_t / forced_s pin the stochastic choices (tests, eval grids).
Tensor nelbo_loss(const ModelParams& p, const std::vector<TrainExample>& batch, Rng& rng,
                  int32_t* s_used = nullptr, const std::vector<real>* forced_t = nullptr,
                  int32_t forced_s = 0);

// ---- compute accounting (6 * params * tokens convention) ----

struct FlopsReport {
    uint64_t f_layer = 0;      // one layer, one step
    uint64_t f_base = 0;       // non-looped model, one step
    uint64_t f_loop = 0;       // looped model under its loop sampler, one step
    real expected_loops = 1;   // E[S]
    int32_t n_m = 1;
    int32_t s_max = 1;
    // Parameter accounting behind the 6*N*D numbers: N counts every parameter,
    // embeddings and head included; params_outside lets the layers-only
    // convention be recomputed from the report.
    uint64_t tokens_per_step = 0;
    uint64_t params_total = 0;
    uint64_t params_layer = 0;
    uint64_t params_outside = 0;
    int64_t matched_steps = 0;  // filled when a baseline comparison is requested

    std::string serialize() const;
    static FlopsReport parse(const std::string& text);
};

FlopsReport per_step_flops(const ModelConfig& cfg, int32_t batch_size);
int64_t matched_steps(const FlopsReport& rep, int64_t baseline_steps);
// FLOPs actually spent by one step that drew loop count s.
uint64_t step_flops(const FlopsReport& rep, int32_t s);

// ---- training loop state ----

class Trainer {
public:
    Trainer(ModelParams params, TrainConfig tcfg);

    StepMetrics train_step(const std::vector<TrainExample>& batch);

    int64_t step() const { return step_; }
    real lr_at(int64_t step) const;  // 1-based step index
    // total_steps, shrunk proportionally when flops_match_baseline is set.
    int64_t planned_steps() const;
    const ModelParams& params() const { return params_; }
    ModelParams& params() { return params_; }
    const TrainConfig& config() const { return tcfg_; }
    Rng& rng() { return rng_; }
    uint64_t cumulative_flops() const { return flops_; }

    // Copy of the model carrying the EMA weights.
    ModelParams ema_params() const;

    void save_checkpoint(const std::string& path) const;
    static Trainer load_checkpoint(const std::string& path);

private:
    Trainer() = default;
    void init_opt_state();

    ModelParams params_;
    TrainConfig tcfg_;
    Rng rng_;
    int64_t step_ = 0;
    uint64_t flops_ = 0;
    FlopsReport flops_per_step_;
    std::vector<std::pair<std::string, Tensor>> named_;
    std::vector<std::vector<real>> adam_m_, adam_v_, ema_;
};

// Plain weight (non-trainer) checkpoints for frozen models, same container.
void save_model(const ModelParams& p, const std::string& path);
ModelParams load_model(const std::string& path);

// Flat key=value forms of the configs ("model.*", "loop.*", "train.*").
void loop_config_to_kv(const LoopConfig& lc, KvMap& kv, const std::string& prefix);
LoopConfig loop_config_from_kv(const KvMap& kv, const std::string& prefix);
void model_config_to_kv(const ModelConfig& cfg, KvMap& kv);
ModelConfig model_config_from_kv(const KvMap& kv);
void train_config_to_kv(const TrainConfig& cfg, KvMap& kv);
TrainConfig train_config_from_kv(const KvMap& kv);

}  // namespace loopmdm
