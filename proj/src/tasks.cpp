#include "loopmdm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

namespace loopmdm {

namespace {

int32_t box_size(int32_t grid_size) {
    switch (grid_size) {
        case 4: return 2;
        case 9: return 3;
    }
    throw DomainError("sudoku: unsupported grid_size " + std::to_string(grid_size));
}

void check_cells(int32_t grid_size, const std::vector<int32_t>& cells, const char* who) {
    const std::size_t want = std::size_t(grid_size) * std::size_t(grid_size);
    if (cells.size() != want)
        throw ShapeError(std::string(who) + ": expected " + std::to_string(want) + " cells, got " +
                         std::to_string(cells.size()));
}

// Whether value v can sit at index i without clashing in its row, column, or
// box. Blank cells (0) never clash.
bool placement_ok(int32_t g, const std::vector<int32_t>& cells, std::size_t i, int32_t v) {
    const int32_t b = box_size(g);
    const int32_t r = int32_t(i) / g;
    const int32_t c = int32_t(i) % g;
    for (int32_t j = 0; j < g; ++j) {
        const std::size_t row_j = std::size_t(r) * g + j;
        const std::size_t col_j = std::size_t(j) * g + c;
        if (row_j != i && cells[row_j] == v) return false;
        if (col_j != i && cells[col_j] == v) return false;
    }
    const int32_t r0 = (r / b) * b;
    const int32_t c0 = (c / b) * b;
    for (int32_t dr = 0; dr < b; ++dr)
        for (int32_t dc = 0; dc < b; ++dc) {
            const std::size_t j = std::size_t(r0 + dr) * g + (c0 + dc);
            if (j != i && cells[j] == v) return false;
        }
    return true;
}

void shuffle_i32(std::vector<int32_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng.below(i)]);
}

bool fill_grid(int32_t g, std::vector<int32_t>& cells, std::size_t pos, Rng& rng) {
    while (pos < cells.size() && cells[pos] != 0) ++pos;
    if (pos == cells.size()) return true;
    std::vector<int32_t> vals(g);
    std::iota(vals.begin(), vals.end(), 1);
    shuffle_i32(vals, rng);
    for (int32_t v : vals) {
        if (!placement_ok(g, cells, pos, v)) continue;
        cells[pos] = v;
        if (fill_grid(g, cells, pos + 1, rng)) return true;
        cells[pos] = 0;
    }
    return false;
}

int32_t count_completions(int32_t g, std::vector<int32_t>& cells, std::size_t pos, int32_t limit) {
    while (pos < cells.size() && cells[pos] != 0) ++pos;
    if (pos == cells.size()) return 1;
    int32_t total = 0;
    for (int32_t v = 1; v <= g && total < limit; ++v) {
        if (!placement_ok(g, cells, pos, v)) continue;
        cells[pos] = v;
        total += count_completions(g, cells, pos + 1, limit - total);
        cells[pos] = 0;
    }
    return total;
}

}  // namespace

bool sudoku_valid(int32_t grid_size, const std::vector<int32_t>& cells) {
    box_size(grid_size);
    check_cells(grid_size, cells, "sudoku_valid");
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] < 1 || cells[i] > grid_size) return false;
        if (!placement_ok(grid_size, cells, i, cells[i])) return false;
    }
    return true;
}

int32_t sudoku_count_solutions(int32_t grid_size, const std::vector<int32_t>& givens,
                               int32_t limit) {
    box_size(grid_size);
    check_cells(grid_size, givens, "sudoku_count_solutions");
    if (limit < 1) throw DomainError("sudoku_count_solutions: limit must be positive");
    std::vector<int32_t> cells = givens;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] == 0) continue;
        if (cells[i] < 1 || cells[i] > grid_size) return 0;
        if (!placement_ok(grid_size, cells, i, cells[i])) return 0;
    }
    return count_completions(grid_size, cells, 0, limit);
}

std::vector<SudokuInstance> gen_sudoku(int32_t grid_size, int64_t n_instances,
                                       real givens_fraction, Rng& rng) {
    box_size(grid_size);
    if (n_instances < 0) throw DomainError("gen_sudoku: n_instances must be nonnegative");
    if (!(givens_fraction > real(0) && givens_fraction < real(1)))
        throw DomainError("gen_sudoku: givens_fraction must lie in (0,1), got " +
                          std::to_string(givens_fraction));
    const int32_t cells_n = grid_size * grid_size;
    const int32_t target = int32_t(std::llround(givens_fraction * cells_n));

    std::vector<SudokuInstance> out;
    out.reserve(std::size_t(n_instances));
    for (int64_t inst = 0; inst < n_instances; ++inst) {
        std::vector<int32_t> solution(std::size_t(cells_n), 0);
        fill_grid(grid_size, solution, 0, rng);

        std::vector<int32_t> order(static_cast<std::size_t>(cells_n));
        std::iota(order.begin(), order.end(), 0);
        shuffle_i32(order, rng);

        std::vector<int32_t> givens = solution;
        int32_t remaining = cells_n;
        for (int32_t idx : order) {
            if (remaining <= target) break;
            const int32_t kept = givens[std::size_t(idx)];
            givens[std::size_t(idx)] = 0;
            if (sudoku_count_solutions(grid_size, givens) == 1)
                --remaining;
            else
                givens[std::size_t(idx)] = kept;
        }
        out.push_back({grid_size, std::move(givens), std::move(solution)});
    }
    return out;
}

TrainExample sudoku_example(const SudokuInstance& inst) {
    box_size(inst.grid_size);
    check_cells(inst.grid_size, inst.givens, "sudoku_example givens");
    check_cells(inst.grid_size, inst.solution, "sudoku_example solution");
    TrainExample ex;
    ex.x0.vocab = inst.grid_size;
    ex.x0.tokens.reserve(inst.solution.size());
    ex.roles.reserve(inst.solution.size());
    for (std::size_t i = 0; i < inst.solution.size(); ++i) {
        ex.x0.tokens.push_back(inst.solution[i] - 1);
        ex.roles.push_back(inst.givens[i] != 0 ? PositionRole::context : PositionRole::normal);
    }
    return ex;
}

TokenSeq sudoku_prompt(const SudokuInstance& inst) {
    box_size(inst.grid_size);
    check_cells(inst.grid_size, inst.givens, "sudoku_prompt");
    TokenSeq seq;
    seq.vocab = inst.grid_size;
    seq.tokens.reserve(inst.givens.size());
    for (int32_t v : inst.givens) seq.tokens.push_back(v != 0 ? v - 1 : inst.grid_size);
    return seq;
}

std::vector<int32_t> sudoku_cells(const TokenSeq& seq) {
    seq.validate();
    std::vector<int32_t> cells;
    cells.reserve(seq.length());
    for (int32_t tok : seq.tokens) cells.push_back(tok == seq.vocab ? 0 : tok + 1);
    return cells;
}

real solve_rate(const std::vector<TokenSeq>& outputs,
                const std::vector<SudokuInstance>& instances) {
    if (outputs.size() != instances.size())
        throw ShapeError("solve_rate: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(instances.size()) + " instances");
    if (instances.empty()) throw ContractError("solve_rate: empty evaluation set");
    int64_t hits = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const SudokuInstance& inst = instances[i];
        check_cells(inst.grid_size, inst.solution, "solve_rate solution");
        if (outputs[i].vocab != inst.grid_size ||
            outputs[i].length() != inst.solution.size())
            throw ShapeError("solve_rate: output " + std::to_string(i) +
                             " does not match the instance grid");
        bool ok = true;
        for (std::size_t j = 0; j < inst.solution.size() && ok; ++j)
            ok = outputs[i].tokens[j] == inst.solution[j] - 1;
        hits += ok;
    }
    return real(hits) / real(instances.size());
}

namespace {

constexpr real kCliqueEdgeProb = real(0.3);

int64_t workspace_len(int32_t n, int32_t k) {
    int64_t p = 1;
    for (int32_t r = 0; r < k; ++r) {
        if (p > INT64_MAX / n) throw DomainError("clique: n^k overflows");
        p *= n;
    }
    return p;
}

void check_adjacency(const std::vector<uint8_t>& adjacency, int32_t n, const char* who) {
    if (n < 1) throw DomainError(std::string(who) + ": need at least one vertex");
    if (adjacency.size() != std::size_t(n) * std::size_t(n))
        throw ShapeError(std::string(who) + ": adjacency size " +
                         std::to_string(adjacency.size()) + " for n=" + std::to_string(n));
}

void sample_graph(std::vector<uint8_t>& adj, int32_t n, Rng& rng) {
    std::fill(adj.begin(), adj.end(), uint8_t(0));
    for (int32_t a = 0; a < n; ++a)
        for (int32_t b = a + 1; b < n; ++b) {
            const uint8_t bit = rng.uniform01() < kCliqueEdgeProb ? 1 : 0;
            adj[std::size_t(a) * n + b] = bit;
            adj[std::size_t(b) * n + a] = bit;
        }
}

}  // namespace

bool has_k_clique(const std::vector<uint8_t>& adjacency, int32_t n, int32_t k) {
    check_adjacency(adjacency, n, "has_k_clique");
    if (k < 1) throw DomainError("has_k_clique: k must be positive");
    if (k > n) return false;
    if (k == 1) return true;
    std::vector<int32_t> idx(static_cast<std::size_t>(k));
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
        bool complete = true;
        for (int32_t r = 0; r < k && complete; ++r)
            for (int32_t s = r + 1; s < k && complete; ++s)
                complete = adjacency[std::size_t(idx[std::size_t(r)]) * n + idx[std::size_t(s)]] != 0;
        if (complete) return true;
        int32_t i = k - 1;
        while (i >= 0 && idx[std::size_t(i)] == n - k + i) --i;
        if (i < 0) return false;
        ++idx[std::size_t(i)];
        for (int32_t j = i + 1; j < k; ++j) idx[std::size_t(j)] = idx[std::size_t(j - 1)] + 1;
    }
}

std::vector<int32_t> clique_tuple_of_index(int64_t tindex, int32_t n, int32_t k) {
    if (n < 1 || k < 1) throw DomainError("clique_tuple_of_index: need n >= 1 and k >= 1");
    const int64_t total = workspace_len(n, k);
    if (tindex < 1 || tindex > total)
        throw DomainError("clique_tuple_of_index: tindex " + std::to_string(tindex) +
                          " outside 1.." + std::to_string(total));
    std::vector<int32_t> tuple(static_cast<std::size_t>(k));
    int64_t stride = 1;
    for (int32_t r = 0; r < k; ++r) {
        tuple[std::size_t(r)] = 1 + int32_t((tindex - 1) / stride % n);
        stride *= n;
    }
    return tuple;
}

bool clique_tuple_target(const std::vector<uint8_t>& adjacency, int32_t n,
                         const std::vector<int32_t>& tuple) {
    check_adjacency(adjacency, n, "clique_tuple_target");
    for (int32_t v : tuple)
        if (v < 1 || v > n)
            throw DomainError("clique_tuple_target: vertex " + std::to_string(v) +
                              " outside 1.." + std::to_string(n));
    for (std::size_t r = 0; r < tuple.size(); ++r)
        for (std::size_t s = r + 1; s < tuple.size(); ++s) {
            if (tuple[r] == tuple[s]) return false;
            if (adjacency[std::size_t(tuple[r] - 1) * n + (tuple[s] - 1)] == 0) return false;
        }
    return true;
}

std::vector<CliqueInstance> gen_clique(int32_t n, int32_t k, int64_t n_instances,
                                       real planted_fraction, Rng& rng, int64_t workspace_cap) {
    if (!(n >= k && k >= 2))
        throw ConfigError("gen_clique: need n >= k >= 2, got n=" + std::to_string(n) +
                          " k=" + std::to_string(k));
    if (n_instances < 0) throw DomainError("gen_clique: n_instances must be nonnegative");
    if (!(planted_fraction >= real(0) && planted_fraction <= real(1)))
        throw ConfigError("gen_clique: planted_fraction must lie in [0,1]");
    const int64_t ws = workspace_len(n, k);
    if (ws > workspace_cap)
        throw ConfigError("gen_clique: workspace length n^k = " + std::to_string(ws) +
                          " exceeds cap " + std::to_string(workspace_cap));

    const int64_t n_planted =
        std::min<int64_t>(n_instances, std::llround(planted_fraction * real(n_instances)));
    std::vector<uint8_t> planted(std::size_t(n_instances), 0);
    std::fill(planted.begin(), planted.begin() + std::ptrdiff_t(n_planted), uint8_t(1));
    for (std::size_t i = planted.size(); i > 1; --i)
        std::swap(planted[i - 1], planted[rng.below(i)]);

    std::vector<CliqueInstance> out;
    out.reserve(std::size_t(n_instances));
    for (int64_t inst = 0; inst < n_instances; ++inst) {
        CliqueInstance ci;
        ci.n = n;
        ci.k = k;
        ci.adjacency.assign(std::size_t(n) * std::size_t(n), 0);
        if (planted[std::size_t(inst)]) {
            sample_graph(ci.adjacency, n, rng);
            std::vector<int32_t> verts(static_cast<std::size_t>(n));
            std::iota(verts.begin(), verts.end(), 0);
            shuffle_i32(verts, rng);
            for (int32_t r = 0; r < k; ++r)
                for (int32_t s = r + 1; s < k; ++s) {
                    ci.adjacency[std::size_t(verts[std::size_t(r)]) * n + verts[std::size_t(s)]] = 1;
                    ci.adjacency[std::size_t(verts[std::size_t(s)]) * n + verts[std::size_t(r)]] = 1;
                }
        } else {
            int64_t tries = 0;
            do {
                if (++tries > 100000)
                    throw ContractError("gen_clique: could not sample a clique-free graph");
                sample_graph(ci.adjacency, n, rng);
            } while (has_k_clique(ci.adjacency, n, k));
        }
        ci.label = has_k_clique(ci.adjacency, n, k) ? 1 : 0;
        out.push_back(std::move(ci));
    }
    return out;
}

CliqueEncoding encode_clique(const CliqueInstance& inst, bool padding_free) {
    check_adjacency(inst.adjacency, inst.n, "encode_clique");
    if (inst.label != 0 && inst.label != 1)
        throw DomainError("encode_clique: label must be 0 or 1");
    for (int32_t a = 0; a < inst.n; ++a) {
        if (inst.adjacency[std::size_t(a) * inst.n + a] != 0)
            throw ContractError("encode_clique: nonzero diagonal at vertex " + std::to_string(a));
        for (int32_t b = a + 1; b < inst.n; ++b)
            if (inst.adjacency[std::size_t(a) * inst.n + b] !=
                inst.adjacency[std::size_t(b) * inst.n + a])
                throw ContractError("encode_clique: adjacency not symmetric at (" +
                                    std::to_string(a) + "," + std::to_string(b) + ")");
    }
    const int64_t ws = padding_free ? 0 : workspace_len(inst.n, inst.k);
    const std::size_t total = std::size_t(inst.n) * inst.n + std::size_t(ws) + 1;
    CliqueEncoding enc;
    enc.tokens.vocab = kCliqueVocab;
    enc.tokens.tokens.reserve(total);
    enc.kinds.reserve(total);
    for (int32_t a = 0; a < inst.n; ++a)
        for (int32_t b = 0; b < inst.n; ++b) {
            enc.tokens.tokens.push_back(kCliqueEdge0 +
                                        (inst.adjacency[std::size_t(a) * inst.n + b] ? 1 : 0));
            enc.kinds.push_back(CliquePos::edge);
        }
    for (int64_t t = 1; t <= ws; ++t) {
        const bool hit =
            clique_tuple_target(inst.adjacency, inst.n, clique_tuple_of_index(t, inst.n, inst.k));
        enc.tokens.tokens.push_back(hit ? kCliqueVal1 : kCliqueVal0);
        enc.kinds.push_back(CliquePos::workspace);
    }
    enc.tokens.tokens.push_back(inst.label ? kCliqueVal1 : kCliqueVal0);
    enc.kinds.push_back(CliquePos::answer);
    return enc;
}

CliqueInstance decode_clique(const TokenSeq& seq, int32_t n, int32_t k, bool padding_free) {
    if (n < 1 || k < 1) throw DomainError("decode_clique: need n >= 1 and k >= 1");
    const int64_t ws = padding_free ? 0 : workspace_len(n, k);
    const std::size_t want = std::size_t(n) * std::size_t(n) + std::size_t(ws) + 1;
    if (seq.vocab != kCliqueVocab)
        throw ShapeError("decode_clique: vocab " + std::to_string(seq.vocab) + ", expected " +
                         std::to_string(kCliqueVocab));
    if (seq.length() != want)
        throw ShapeError("decode_clique: length " + std::to_string(seq.length()) + ", expected " +
                         std::to_string(want));
    CliqueInstance inst;
    inst.n = n;
    inst.k = k;
    inst.adjacency.assign(std::size_t(n) * std::size_t(n), 0);
    for (int32_t a = 0; a < n; ++a)
        for (int32_t b = 0; b < n; ++b) {
            const int32_t tok = seq.tokens[std::size_t(a) * n + b];
            if (tok != kCliqueEdge0 && tok != kCliqueEdge1)
                throw ShapeError("decode_clique: non-edge token at pair (" + std::to_string(a) +
                                 "," + std::to_string(b) + ")");
            inst.adjacency[std::size_t(a) * n + b] = tok == kCliqueEdge1 ? 1 : 0;
        }
    for (int32_t a = 0; a < n; ++a) {
        if (inst.adjacency[std::size_t(a) * n + a] != 0)
            throw ShapeError("decode_clique: nonzero diagonal at vertex " + std::to_string(a));
        for (int32_t b = a + 1; b < n; ++b)
            if (inst.adjacency[std::size_t(a) * n + b] != inst.adjacency[std::size_t(b) * n + a])
                throw ShapeError("decode_clique: adjacency not symmetric at (" +
                                 std::to_string(a) + "," + std::to_string(b) + ")");
    }
    for (std::size_t i = std::size_t(n) * std::size_t(n); i < want; ++i)
        if (seq.tokens[i] != kCliqueVal0 && seq.tokens[i] != kCliqueVal1)
            throw ShapeError("decode_clique: non-value token at position " + std::to_string(i));
    inst.label = seq.tokens[want - 1] == kCliqueVal1 ? 1 : 0;
    return inst;
}

TrainExample clique_example(const CliqueInstance& inst, bool workspace_supervision,
                            bool padding_free) {
    CliqueEncoding enc = encode_clique(inst, padding_free);
    TrainExample ex;
    ex.x0 = std::move(enc.tokens);
    ex.roles.reserve(enc.kinds.size());
    for (CliquePos kind : enc.kinds) {
        switch (kind) {
            case CliquePos::edge: ex.roles.push_back(PositionRole::context); break;
            case CliquePos::workspace:
                ex.roles.push_back(workspace_supervision ? PositionRole::normal
                                                         : PositionRole::pause);
                break;
            case CliquePos::answer: ex.roles.push_back(PositionRole::normal); break;
        }
    }
    return ex;
}

TokenSeq clique_prompt(const CliqueInstance& inst, bool padding_free) {
    CliqueEncoding enc = encode_clique(inst, padding_free);
    TokenSeq seq = std::move(enc.tokens);
    for (std::size_t i = 0; i < seq.tokens.size(); ++i)
        if (enc.kinds[i] != CliquePos::edge) seq.tokens[i] = seq.vocab;
    return seq;
}

real clique_accuracy(const std::vector<TokenSeq>& outputs,
                     const std::vector<CliqueInstance>& instances) {
    if (outputs.size() != instances.size())
        throw ShapeError("clique_accuracy: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(instances.size()) + " instances");
    if (instances.empty()) throw ContractError("clique_accuracy: empty evaluation set");
    int64_t hits = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const CliqueInstance& inst = instances[i];
        const std::size_t edges = std::size_t(inst.n) * std::size_t(inst.n);
        const std::size_t with_ws = edges + std::size_t(workspace_len(inst.n, inst.k)) + 1;
        if (outputs[i].vocab != kCliqueVocab ||
            (outputs[i].length() != edges + 1 && outputs[i].length() != with_ws))
            throw ShapeError("clique_accuracy: output " + std::to_string(i) +
                             " does not match either task layout");
        const int32_t want = inst.label ? kCliqueVal1 : kCliqueVal0;
        hits += outputs[i].tokens.back() == want;
    }
    return real(hits) / real(instances.size());
}

namespace {

// Transition offsets in hundredths; the circulant rows make the chain doubly
// stochastic, so the stationary distribution is uniform and the entropy rate
// is the entropy of this table.
constexpr int32_t kGrammarSymbols = 8;
constexpr int32_t kGrammarCents[kGrammarSymbols] = {40, 20, 15, 10, 6, 4, 3, 2};

}  // namespace

int32_t grammar_vocab() { return kGrammarSymbols; }

int32_t grammar_sep_token() { return kGrammarSymbols - 1; }

real grammar_entropy_rate() {
    real h = 0;
    for (int32_t c : kGrammarCents) {
        const real p = real(c) / real(100);
        h -= p * std::log(p);
    }
    return h;
}

std::vector<int32_t> grammar_tokens(int64_t n, Rng& rng) {
    if (n < 0) throw DomainError("grammar_tokens: n must be nonnegative");
    std::vector<int32_t> out;
    out.reserve(std::size_t(n));
    if (n == 0) return out;
    int32_t state = int32_t(rng.below(kGrammarSymbols));
    out.push_back(state);
    while (int64_t(out.size()) < n) {
        const real u = real(rng.uniform01()) * real(100);
        int32_t cum = 0;
        int32_t offset = kGrammarSymbols - 1;
        for (int32_t j = 0; j < kGrammarSymbols; ++j) {
            cum += kGrammarCents[j];
            if (u < real(cum)) {
                offset = j;
                break;
            }
        }
        state = (state + offset) % kGrammarSymbols;
        out.push_back(state);
    }
    return out;
}

void CorpusConfig::validate() const {
    if (seq_len < 1)
        throw ConfigError("CorpusConfig: seq_len must be positive, got " + std::to_string(seq_len));
    if (source == Source::text_file) {
        if (path.empty()) throw ConfigError("CorpusConfig: text_file needs a path");
        if (vocab_chars.empty()) throw ConfigError("CorpusConfig: text_file needs vocab_chars");
        bool seen[256] = {};
        for (char ch : vocab_chars) {
            if (ch == '\n')
                throw ConfigError("CorpusConfig: newline is the document separator, keep it out "
                                  "of vocab_chars");
            auto& slot = seen[static_cast<unsigned char>(ch)];
            if (slot) throw ConfigError("CorpusConfig: duplicate vocab character");
            slot = true;
        }
    }
}

Corpus load_corpus(const CorpusConfig& cfg, int64_t n_sequences) {
    cfg.validate();
    Corpus out;
    std::vector<int32_t> toks;
    if (cfg.source == CorpusConfig::Source::synthetic_grammar) {
        if (n_sequences < 0)
            throw ConfigError("load_corpus: the synthetic grammar is unbounded, pass n_sequences");
        out.vocab_size = grammar_vocab();
        out.sep_token = grammar_sep_token();
        Rng rng(cfg.seed);
        toks = grammar_tokens(n_sequences * cfg.seq_len, rng);
    } else {
        out.vocab_size = int32_t(cfg.vocab_chars.size()) + 2;
        out.sep_token = int32_t(cfg.vocab_chars.size());
        out.oov_token = out.sep_token + 1;
        std::ifstream in(cfg.path, std::ios::binary);
        if (!in) throw IoError("load_corpus: cannot open " + cfg.path);
        int32_t map[256];
        std::fill(std::begin(map), std::end(map), -1);
        for (std::size_t i = 0; i < cfg.vocab_chars.size(); ++i)
            map[static_cast<unsigned char>(cfg.vocab_chars[i])] = int32_t(i);
        char ch = 0;
        while (in.get(ch)) {
            if (ch == '\n') {
                toks.push_back(out.sep_token);
            } else if (map[static_cast<unsigned char>(ch)] >= 0) {
                toks.push_back(map[static_cast<unsigned char>(ch)]);
            } else {
                toks.push_back(out.oov_token);
                ++out.oov_count;
            }
        }
    }
    int64_t n_chunks = int64_t(toks.size()) / cfg.seq_len;
    if (n_sequences >= 0) n_chunks = std::min(n_chunks, n_sequences);
    out.sequences.reserve(std::size_t(n_chunks));
    for (int64_t c = 0; c < n_chunks; ++c) {
        TokenSeq seq;
        seq.vocab = out.vocab_size;
        seq.tokens.assign(toks.begin() + c * cfg.seq_len, toks.begin() + (c + 1) * cfg.seq_len);
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

namespace {

constexpr int32_t kDatasetVersion = 1;

void check_field_text(const std::string& text, bool is_key) {
    for (char ch : text)
        if (ch == ' ' || ch == '\n' || (is_key && ch == '='))
            throw ContractError("dataset header fields must not contain spaces, newlines, or "
                                "'=' in keys: \"" + text + "\"");
    if (text.empty()) throw ContractError("dataset header fields must be nonempty");
}

}  // namespace

void save_examples(const std::string& path, const std::string& task, const KvMap& meta,
                   const std::vector<TrainExample>& examples) {
    if (examples.empty()) throw ContractError("save_examples: no examples");
    check_field_text(task, false);
    const int32_t vocab = examples.front().x0.vocab;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_examples: cannot open " + path);

    out << "# task=" << task << " version=" << kDatasetVersion << " vocab=" << vocab;
    for (const auto& [key, value] : meta.entries()) {
        if (key == "task" || key == "version" || key == "vocab") continue;
        check_field_text(key, true);
        check_field_text(value, false);
        out << ' ' << key << '=' << value;
    }
    out << '\n';

    for (std::size_t e = 0; e < examples.size(); ++e) {
        const TrainExample& ex = examples[e];
        if (ex.x0.vocab != vocab)
            throw ContractError("save_examples: example " + std::to_string(e) +
                                " has vocab " + std::to_string(ex.x0.vocab) + ", expected " +
                                std::to_string(vocab));
        if (ex.x0.tokens.empty())
            throw ContractError("save_examples: example " + std::to_string(e) + " is empty");
        if (!ex.roles.empty() && ex.roles.size() != ex.x0.length())
            throw ContractError("save_examples: example " + std::to_string(e) +
                                " role count does not match its length");
        for (int32_t tok : ex.x0.tokens)
            if (tok < 0 || tok >= vocab)
                throw ContractError("save_examples: example " + std::to_string(e) +
                                    " contains a mask or out-of-range token");
        for (std::size_t i = 0; i < ex.x0.length(); ++i) {
            if (i) out << ' ';
            out << ex.x0.tokens[i];
        }
        out << " |";
        for (std::size_t i = 0; i < ex.x0.length(); ++i)
            out << ' ' << int32_t(ex.roles.empty() ? PositionRole::normal : ex.roles[i]);
        out << '\n';
    }
    if (!out) throw IoError("save_examples: write failed for " + path);
}

DatasetFile load_examples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_examples: cannot open " + path);
    std::string header;
    if (!std::getline(in, header) || header.size() < 2 || header[0] != '#' || header[1] != ' ')
        throw IoError("load_examples: missing dataset header in " + path);

    DatasetFile file;
    std::istringstream hs(header.substr(2));
    std::string field;
    std::string version;
    while (hs >> field) {
        const std::size_t eq = field.find('=');
        if (eq == std::string::npos || eq == 0)
            throw IoError("load_examples: malformed header field \"" + field + "\"");
        const std::string key = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        if (key == "task")
            file.task = value;
        else if (key == "version")
            version = value;
        else
            file.meta.set(key, value);
    }
    if (file.task.empty()) throw IoError("load_examples: header lacks a task name");
    if (version != std::to_string(kDatasetVersion))
        throw IoError("load_examples: unsupported dataset version \"" + version + "\"");
    if (!file.meta.has("vocab")) throw IoError("load_examples: header lacks vocab");
    int64_t vocab = 0;
    try {
        vocab = file.meta.get_i64("vocab");
    } catch (const ConfigError& e) {
        throw IoError("load_examples: " + std::string(e.what()));
    }
    if (vocab < 1) throw IoError("load_examples: vocab must be positive");

    std::string line;
    int64_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::size_t bar = line.find('|');
        if (bar == std::string::npos)
            throw IoError("load_examples: line " + std::to_string(line_no) +
                          " lacks the '|' role separator");
        TrainExample ex;
        ex.x0.vocab = int32_t(vocab);
        std::istringstream ts(line.substr(0, bar));
        int32_t value = 0;
        while (ts >> value) {
            if (value < 0 || value >= vocab)
                throw IoError("load_examples: line " + std::to_string(line_no) +
                              " has a mask or out-of-range token " + std::to_string(value));
            ex.x0.tokens.push_back(value);
        }
        if (!ts.eof())
            throw IoError("load_examples: line " + std::to_string(line_no) +
                          " has a malformed token field");
        if (ex.x0.tokens.empty())
            throw IoError("load_examples: line " + std::to_string(line_no) + " has no tokens");
        std::istringstream rs(line.substr(bar + 1));
        while (rs >> value) {
            if (value < 0 || value > 2)
                throw IoError("load_examples: line " + std::to_string(line_no) +
                              " has an unknown role " + std::to_string(value));
            ex.roles.push_back(PositionRole(value));
        }
        if (!rs.eof())
            throw IoError("load_examples: line " + std::to_string(line_no) +
                          " has a malformed role field");
        if (ex.roles.size() != ex.x0.length())
            throw IoError("load_examples: line " + std::to_string(line_no) + " carries " +
                          std::to_string(ex.roles.size()) + " roles for " +
                          std::to_string(ex.x0.length()) + " tokens");
        file.examples.push_back(std::move(ex));
    }
    return file;
}

}  // namespace loopmdm
