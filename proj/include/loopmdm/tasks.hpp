#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loopmdm/common.hpp"
#include "loopmdm/diffusion.hpp"
#include "loopmdm/kv.hpp"
#include "loopmdm/rng.hpp"
#include "loopmdm/trainer.hpp"

namespace loopmdm {

// ---------------------------------------------------------------------------
// Sudoku: grids are row-major value vectors, 1..grid_size per cell, 0 = blank.
// Token encoding maps cell value v to token v-1, so the vocabulary size equals
// grid_size and blanks become the mask id.
// ---------------------------------------------------------------------------

struct SudokuInstance {
    int32_t grid_size = 4;  // 4 or 9
    std::vector<int32_t> givens;    // 0 where blank
    std::vector<int32_t> solution;  // the unique completion of givens
};

// True iff cells is a complete grid whose rows, columns, and boxes each
// contain every value exactly once. ShapeError on wrong size or grid_size.
bool sudoku_valid(int32_t grid_size, const std::vector<int32_t>& cells);

// Number of completions of a partial grid (blanks are 0), counted by
// exhaustive backtracking and capped at limit.
int32_t sudoku_count_solutions(int32_t grid_size, const std::vector<int32_t>& givens,
                               int32_t limit = 2);

// Solved grids by randomized backtracking; cells are then removed in random
// order while the completion stays unique, down to approximately
// givens_fraction of the cells remaining as givens.
std::vector<SudokuInstance> gen_sudoku(int32_t grid_size, int64_t n_instances,
                                       real givens_fraction, Rng& rng);

// Solution as tokens; givens become context positions, blanks normal ones.
TrainExample sudoku_example(const SudokuInstance& inst);

// Givens visible, blanks masked; the generation-time starting sequence.
TokenSeq sudoku_prompt(const SudokuInstance& inst);

// Tokens back to cell values; mask id decodes to 0 (blank).
std::vector<int32_t> sudoku_cells(const TokenSeq& seq);

// Fraction of outputs that match the instance solution exactly.
real solve_rate(const std::vector<TokenSeq>& outputs,
                const std::vector<SudokuInstance>& instances);

// ---------------------------------------------------------------------------
// k-clique: a graph classification task whose sequence layout appends one
// workspace position per ordered vertex tuple, then a single answer position.
// Vocabulary: edge-absent, edge-present, value-0, value-1 (mask id 4).
// ---------------------------------------------------------------------------

inline constexpr int32_t kCliqueEdge0 = 0;
inline constexpr int32_t kCliqueEdge1 = 1;
inline constexpr int32_t kCliqueVal0 = 2;
inline constexpr int32_t kCliqueVal1 = 3;
inline constexpr int32_t kCliqueVocab = 4;
inline constexpr int64_t kCliqueWorkspaceCap = 1024;

struct CliqueInstance {
    int32_t n = 0;
    int32_t k = 0;
    std::vector<uint8_t> adjacency;  // n*n row-major, symmetric, zero diagonal
    int32_t label = 0;               // 1 iff a k-clique exists
};

// Brute-force oracle: scans all size-k vertex subsets.
bool has_k_clique(const std::vector<uint8_t>& adjacency, int32_t n, int32_t k);

// Workspace tuple for position tindex in 1..n^k: the r-th coordinate is
// 1 + floor((tindex-1) / n^(r-1)) mod n. Bijective over [n]^k.
std::vector<int32_t> clique_tuple_of_index(int64_t tindex, int32_t n, int32_t k);

// Whether a (1-based) vertex tuple has all entries distinct and all pairs
// adjacent; the per-tuple workspace target.
bool clique_tuple_target(const std::vector<uint8_t>& adjacency, int32_t n,
                         const std::vector<int32_t>& tuple);

// planted_fraction of the instances get a k-clique planted into a sparse
// random graph; the rest are resampled until clique-free. Labels always come
// from the brute-force oracle. ConfigError when n^k exceeds workspace_cap.
std::vector<CliqueInstance> gen_clique(int32_t n, int32_t k, int64_t n_instances,
                                       real planted_fraction, Rng& rng,
                                       int64_t workspace_cap = kCliqueWorkspaceCap);

enum class CliquePos : uint8_t { edge = 0, workspace = 1, answer = 2 };

struct CliqueEncoding {
    TokenSeq tokens;  // complete sequence with workspace targets and the label
    std::vector<CliquePos> kinds;
};

// n*n edge tokens in row-major pair order, then n^k workspace values, then
// the answer. The padding-free layout drops the workspace block.
CliqueEncoding encode_clique(const CliqueInstance& inst, bool padding_free = false);

// Inverse of encode_clique over the edge and answer tokens.
CliqueInstance decode_clique(const TokenSeq& seq, int32_t n, int32_t k,
                             bool padding_free = false);

// Training view: edges are context; workspace positions are supervised targets
// when workspace_supervision is on, otherwise pause positions (masked, never
// supervised); the answer is always supervised.
TrainExample clique_example(const CliqueInstance& inst, bool workspace_supervision = true,
                            bool padding_free = false);

// Edges visible, workspace and answer masked.
TokenSeq clique_prompt(const CliqueInstance& inst, bool padding_free = false);

// Fraction of outputs whose final (answer) token matches the instance label.
real clique_accuracy(const std::vector<TokenSeq>& outputs,
                     const std::vector<CliqueInstance>& instances);

// ---------------------------------------------------------------------------
// Character corpus: fixed-length sequences from a text file or from a seeded
// synthetic grammar whose per-token entropy has a closed form.
// ---------------------------------------------------------------------------

struct CorpusConfig {
    enum class Source { synthetic_grammar, text_file };
    Source source = Source::synthetic_grammar;
    uint64_t seed = 0;        // synthetic_grammar stream seed
    std::string path;         // text_file source
    std::string vocab_chars;  // text_file: token id = index; newline separates documents
    int32_t seq_len = 64;

    void validate() const;  // ConfigError on bad settings
};

struct Corpus {
    std::vector<TokenSeq> sequences;  // each exactly seq_len long
    int32_t vocab_size = 0;
    int32_t sep_token = -1;
    int32_t oov_token = -1;  // -1 when the source cannot produce unknowns
    int64_t oov_count = 0;
};

// Tokenizes the source, concatenates documents with the separator token, and
// chunks to seq_len (the trailing partial chunk is dropped). The synthetic
// grammar is unbounded, so it requires n_sequences >= 0; for text files a
// negative n_sequences means all available chunks.
Corpus load_corpus(const CorpusConfig& cfg, int64_t n_sequences = -1);

// The synthetic grammar is a stationary Markov chain over grammar_vocab()
// symbols whose transition matrix is circulant, hence doubly stochastic: the
// marginal is uniform and the entropy rate equals the entropy of the offset
// distribution. The last symbol doubles as the document separator.
int32_t grammar_vocab();
int32_t grammar_sep_token();
real grammar_entropy_rate();  // nats per token
std::vector<int32_t> grammar_tokens(int64_t n, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset files: a '#' header line carrying task name, format version, vocab,
// and generation settings; then one instance per line as space-separated
// tokens, a '|', and a parallel role field (0 normal, 1 context, 2 pause).
// ---------------------------------------------------------------------------

struct DatasetFile {
    std::string task;
    KvMap meta;  // includes vocab plus whatever save_examples was given
    std::vector<TrainExample> examples;
};

void save_examples(const std::string& path, const std::string& task, const KvMap& meta,
                   const std::vector<TrainExample>& examples);
DatasetFile load_examples(const std::string& path);

}  // namespace loopmdm
