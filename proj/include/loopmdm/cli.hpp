#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "loopmdm/kv.hpp"
#include "loopmdm/tasks.hpp"
#include "loopmdm/trainer.hpp"

namespace loopmdm {

// Everything a reproducible run needs, round-trippable through a flat
// key=value config file. Missing keys take these defaults; unknown keys are
// rejected with the offending name.
struct RunConfig {
    RunConfig() { model.vocab = grammar_vocab(); }

    std::string task = "grammar";  // sudoku4 | sudoku9 | clique | grammar | text
    std::string run_dir = "run";
    std::string data_path;       // training dataset file (sudoku and clique tasks)
    std::string eval_data_path;  // held-out dataset file

    real givens_fraction = real(0.5);  // sudoku generation
    int32_t clique_n = 5;
    int32_t clique_k = 3;
    real planted_fraction = real(0.5);
    bool workspace_supervision = true;
    bool padding_free = false;
    uint64_t corpus_seed = 1;      // grammar stream seed
    int64_t n_sequences = 10000;   // grammar corpus size
    std::string text_path;         // text task source
    std::string vocab_chars;       // text task vocabulary

    ModelConfig model;
    TrainConfig train;
    int64_t checkpoint_every = 1000;

    std::string policy = "ancestral";  // ancestral | topk | ltr
    int32_t policy_k = 1;
    int32_t sample_steps = 16;
    uint64_t eval_seed = 1234;

    // ConfigError naming the offending key on any inconsistency, including
    // task/model shape mismatches.
    void validate() const;
};

KvMap run_config_to_kv(const RunConfig& rc);
RunConfig run_config_from_kv(const KvMap& kv);
RunConfig load_run_config(const std::string& path);

// Weights from a plain model container or a trainer checkpoint; a trainer
// checkpoint contributes its EMA weights.
ModelParams load_any_model(const std::string& path);

// Generation-time starting sequence for one dataset example: context
// positions stay visible, all others start masked.
TokenSeq prompt_from_example(const TrainExample& ex, int32_t vocab);

// RUN_THREADS env var, default 1; ConfigError outside [1, 256].
int run_threads();

// Entry point behind the binary: parses argv, writes data to out and
// diagnostics to err. Exit codes: 0 success, 1 usage, 2 bad configuration,
// 3 training diverged (diagnostic snapshot written), 4 runtime failure.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace loopmdm
