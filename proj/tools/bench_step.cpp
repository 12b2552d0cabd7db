#include <chrono>
#include <cstdio>

#include "loopmdm/model.hpp"

using namespace loopmdm;

static double bench(ModelConfig cfg, int B, int S, int iters) {
    Rng rng(1);
    ModelParams p = init_params(cfg, rng);
    randomize_params(p, rng);
    std::vector<TokenSeq> batch(B);
    std::vector<real> t(B, 0.5);
    for (int b = 0; b < B; ++b) {
        batch[b].vocab = cfg.vocab;
        batch[b].tokens.assign(cfg.seq_len, b % 2 == 0 ? cfg.vocab : 1);
    }
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) {
        Tape tape;
        ForwardRecord rec = forward_batch(p, batch, t, S);
        tape.backward(sum(mul(rec.logits, rec.logits)));
    }
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / iters;
}

int main() {
    ModelConfig sudoku;
    sudoku.vocab = 4;
    sudoku.seq_len = 16;
    sudoku.d_model = 128;
    sudoku.n_heads = 8;
    sudoku.loop.n_layers_total = 1;
    sudoku.loop.loop_start = 0;
    sudoku.loop.n_m = 1;
    sudoku.loop.s_max = 6;
    std::printf("sudoku B=32 S=6: %.1f ms/step\n", 1e3 * bench(sudoku, 32, 6, 5));
    std::printf("sudoku B=32 S=3: %.1f ms/step\n", 1e3 * bench(sudoku, 32, 3, 5));

    ModelConfig clique;
    clique.vocab = 2;
    clique.seq_len = 151;
    clique.d_model = 64;
    clique.n_heads = 4;
    clique.loop.n_layers_total = 2;
    clique.loop.loop_start = 0;
    clique.loop.n_m = 1;
    clique.loop.s_max = 6;
    std::printf("clique B=16 S=6: %.1f ms/step\n", 1e3 * bench(clique, 16, 6, 5));

    ModelConfig lm;
    lm.vocab = 16;
    lm.seq_len = 32;
    lm.d_model = 64;
    lm.n_heads = 4;
    lm.loop.n_layers_total = 4;
    lm.loop.loop_start = 1;
    lm.loop.n_m = 2;
    lm.loop.s_max = 6;
    std::printf("toy lm B=16 S=6: %.1f ms/step\n", 1e3 * bench(lm, 16, 6, 5));
    return 0;
}
