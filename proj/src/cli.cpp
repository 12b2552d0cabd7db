#include "loopmdm/cli.hpp"

#include <atomic>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "loopmdm/analysis.hpp"
#include "loopmdm/sampler.hpp"

namespace fs = std::filesystem;

namespace loopmdm {

namespace {

std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << text;
    out.flush();
    if (!out) throw IoError("short write to '" + path + "'");
}

std::string fmt_real(real x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", static_cast<double>(x));
    return buf;
}

bool kv_bool(const KvMap& kv, const std::string& key) {
    const std::string& v = kv.get(key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

int64_t int_pow_checked(int64_t base, int32_t exp, const char* key) {
    int64_t v = 1;
    for (int32_t i = 0; i < exp; ++i) {
        if (v > (int64_t(1) << 40) / base)
            throw ConfigError(std::string("config key '") + key + "': workspace size overflows");
        v *= base;
    }
    return v;
}

void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
}

// Jobs claim indices from a shared counter; results must go to per-index
// slots so the output is scheduling-independent.
void parallel_jobs(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(std::size_t(run_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    for (std::thread& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

UnmaskPolicy make_policy(const std::string& name, int32_t k) {
    if (name == "ancestral") return UnmaskPolicy::ancestral();
    if (name == "topk") return UnmaskPolicy::topk(k);
    if (name == "ltr") return UnmaskPolicy::left_to_right(k);
    throw ConfigError("config key 'sample.policy': unknown policy '" + name + "'");
}

// ---- datasets ----

std::vector<TrainExample> corpus_examples(const RunConfig& rc, uint64_t seed, int64_t n) {
    CorpusConfig cc;
    if (rc.task == "grammar") {
        cc.source = CorpusConfig::Source::synthetic_grammar;
        cc.seed = seed;
    } else {
        cc.source = CorpusConfig::Source::text_file;
        cc.path = rc.text_path;
        cc.vocab_chars = rc.vocab_chars;
    }
    cc.seq_len = rc.model.seq_len;
    Corpus corpus = load_corpus(cc, n);
    if (corpus.vocab_size != rc.model.vocab)
        throw ConfigError("config key 'model.vocab': corpus has vocabulary " +
                          std::to_string(corpus.vocab_size) + ", config says " +
                          std::to_string(rc.model.vocab));
    std::vector<TrainExample> out;
    out.reserve(corpus.sequences.size());
    for (TokenSeq& seq : corpus.sequences) {
        TrainExample ex;
        ex.x0 = std::move(seq);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<TrainExample> dataset_examples(const RunConfig& rc, const std::string& path,
                                           const char* key) {
    if (path.empty())
        throw ConfigError(std::string("config key '") + key + "': no dataset file configured");
    DatasetFile df = load_examples(path);
    if (df.task != rc.task)
        throw ConfigError("dataset '" + path + "' holds task '" + df.task + "', config says '" +
                          rc.task + "'");
    const int64_t vocab = df.meta.get_i64("vocab");
    if (vocab != rc.model.vocab)
        throw ConfigError("config key 'model.vocab': dataset '" + path + "' has vocabulary " +
                          std::to_string(vocab) + ", config says " + std::to_string(rc.model.vocab));
    for (const TrainExample& ex : df.examples)
        if (ex.x0.length() != std::size_t(rc.model.seq_len))
            throw ConfigError("config key 'model.seq_len': dataset '" + path +
                              "' holds sequences of length " + std::to_string(ex.x0.length()) +
                              ", config says " + std::to_string(rc.model.seq_len));
    return std::move(df.examples);
}

bool file_task(const RunConfig& rc) { return rc.task != "grammar" && rc.task != "text"; }

std::vector<TrainExample> train_examples(const RunConfig& rc) {
    if (file_task(rc)) return dataset_examples(rc, rc.data_path, "task.data");
    if (rc.task == "grammar") return corpus_examples(rc, rc.corpus_seed, rc.n_sequences);
    std::vector<TrainExample> all = corpus_examples(rc, 0, -1);
    const std::size_t cut = all.size() - all.size() / 10;
    return {all.begin(), all.begin() + long(cut)};
}

std::vector<TrainExample> eval_examples(const RunConfig& rc, int64_t n) {
    if (file_task(rc)) {
        std::vector<TrainExample> ex = dataset_examples(rc, rc.eval_data_path, "task.eval_data");
        if (n >= 0 && std::size_t(n) < ex.size()) ex.resize(std::size_t(n));
        return ex;
    }
    if (rc.task == "grammar") return corpus_examples(rc, rc.corpus_seed + 1, n < 0 ? 128 : n);
    std::vector<TrainExample> all = corpus_examples(rc, 0, -1);
    const std::size_t cut = all.size() - all.size() / 10;
    std::vector<TrainExample> ex(all.begin() + long(cut), all.end());
    if (n >= 0 && std::size_t(n) < ex.size()) ex.resize(std::size_t(n));
    return ex;
}

std::vector<TokenSeq> example_inputs(const std::vector<TrainExample>& examples) {
    std::vector<TokenSeq> out;
    out.reserve(examples.size());
    for (const TrainExample& ex : examples) out.push_back(ex.x0);
    return out;
}

std::vector<TokenSeq> null_prompts(const ModelConfig& cfg, std::size_t n) {
    TokenSeq blank;
    blank.vocab = cfg.vocab;
    blank.tokens.assign(std::size_t(cfg.seq_len), cfg.vocab);
    return std::vector<TokenSeq>(n, blank);
}

std::vector<TokenSeq> read_token_lines(const std::string& path, int32_t vocab) {
    std::string text = slurp_file(path);
    std::vector<TokenSeq> out;
    std::istringstream lines(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        TokenSeq seq;
        seq.vocab = vocab;
        std::istringstream toks(line);
        int64_t tok = 0;
        while (toks >> tok) {
            if (tok < 0 || tok > vocab)
                throw IoError("samples file '" + path + "' line " + std::to_string(line_no) +
                              ": token " + std::to_string(tok) + " outside vocabulary " +
                              std::to_string(vocab));
            seq.tokens.push_back(int32_t(tok));
        }
        if (!toks.eof())
            throw IoError("samples file '" + path + "' line " + std::to_string(line_no) +
                          ": not a token list");
        if (!seq.tokens.empty()) out.push_back(std::move(seq));
    }
    if (out.empty()) throw IoError("samples file '" + path + "' holds no sequences");
    return out;
}

std::string token_line(const TokenSeq& seq) {
    std::string out;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        if (i > 0) out += ' ';
        out += std::to_string(seq.tokens[i]);
    }
    return out;
}

// ---- metric helpers ----

real mean_nelbo(const ModelParams& p, const std::vector<TrainExample>& examples, int32_t s,
                uint64_t seed) {
    Rng rng(seed);
    real weighted = 0;
    std::size_t total = 0;
    for (std::size_t at = 0; at < examples.size(); at += 32) {
        const std::size_t bn = std::min<std::size_t>(32, examples.size() - at);
        std::vector<TrainExample> batch(examples.begin() + long(at), examples.begin() + long(at + bn));
        Tensor loss = nelbo_loss(p, batch, rng, nullptr, nullptr, s);
        weighted += loss.item() * real(bn);
        total += bn;
    }
    return weighted / real(total);
}

real exact_match_rate(const std::vector<Trajectory>& trajs,
                      const std::vector<TrainExample>& examples) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < trajs.size(); ++i)
        if (trajs[i].final_sequence().tokens == examples[i].x0.tokens) ++hits;
    return real(hits) / real(trajs.size());
}

real answer_match_rate(const std::vector<Trajectory>& trajs,
                       const std::vector<TrainExample>& examples) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < trajs.size(); ++i)
        if (trajs[i].final_sequence().tokens.back() == examples[i].x0.tokens.back()) ++hits;
    return real(hits) / real(trajs.size());
}

std::vector<TokenSeq> final_sequences(const std::vector<Trajectory>& trajs) {
    std::vector<TokenSeq> out;
    out.reserve(trajs.size());
    for (const Trajectory& tr : trajs) out.push_back(tr.final_sequence());
    return out;
}

void check_model_matches(const ModelParams& p, int32_t vocab, int32_t seq_len,
                         const std::string& what) {
    if (p.cfg.vocab != vocab)
        throw ConfigError(what + ": checkpoint vocabulary " + std::to_string(p.cfg.vocab) +
                          " does not match task vocabulary " + std::to_string(vocab));
    if (p.cfg.seq_len != seq_len)
        throw ConfigError(what + ": checkpoint length " + std::to_string(p.cfg.seq_len) +
                          " does not match task length " + std::to_string(seq_len));
}

// ---- commands ----

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
    RunConfig rc = load_run_config(config_path);
    fs::create_directories(rc.run_dir);

    KvMap canon = run_config_to_kv(rc);
    canon.set("run.code_version", code_version());
    spit_file(rc.run_dir + "/config.kv", canon.serialize());

    std::vector<TrainExample> data = train_examples(rc);
    if (data.empty()) throw ContractError("train: dataset is empty");

    Rng seeder(rc.train.seed);
    Rng init_rng = seeder.split();
    Rng data_rng = seeder.split();
    Trainer trainer(init_params(rc.model, init_rng), rc.train);

    const int64_t total = trainer.planned_steps();
    const int64_t tick = std::max<int64_t>(1, total / 10);
    std::string metrics = "# step\tloss\tlr\ts\tgrad_norm\tcumulative_flops\n";
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    std::vector<TrainExample> batch(std::size_t(rc.train.batch_size));
    char buf[192];
    try {
        for (int64_t step = 0; step < total; ++step) {
            for (TrainExample& ex : batch) {
                if (cursor == order.size()) {
                    shuffle_indices(order, data_rng);
                    cursor = 0;
                }
                ex = data[order[cursor++]];
            }
            StepMetrics m = trainer.train_step(batch);
            std::snprintf(buf, sizeof buf, "%lld\t%.17g\t%.17g\t%d\t%.17g\t%llu\n",
                          static_cast<long long>(m.step), static_cast<double>(m.loss),
                          static_cast<double>(m.lr), m.s, static_cast<double>(m.grad_norm),
                          static_cast<unsigned long long>(m.cumulative_flops));
            metrics += buf;
            if (m.step % rc.checkpoint_every == 0 && m.step < total)
                trainer.save_checkpoint(rc.run_dir + "/ckpt_" + std::to_string(m.step) + ".bin");
            if (m.step % tick == 0 || m.step == total)
                err << "step " << m.step << "/" << total << " loss " << fmt_real(m.loss) << "\n";
        }
    } catch (const TrainingDiverged& d) {
        spit_file(rc.run_dir + "/metrics.tsv", metrics);
        trainer.save_checkpoint(rc.run_dir + "/diverged.bin");
        err << "training diverged at step " << d.step << ": " << d.what()
            << "; snapshot in " << rc.run_dir << "/diverged.bin\n";
        return 3;
    }
    spit_file(rc.run_dir + "/metrics.tsv", metrics);
    trainer.save_checkpoint(rc.run_dir + "/ckpt_final.bin");
    save_model(trainer.ema_params(), rc.run_dir + "/model_ema.bin");
    FlopsReport rep = per_step_flops(rc.model, rc.train.batch_size);
    if (rc.train.flops_match_baseline) rep.matched_steps = total;
    spit_file(rc.run_dir + "/flops.txt", rep.serialize());
    out << rc.run_dir << "\n";
    return 0;
}

struct SampleArgs {
    std::string checkpoint;
    std::string prompts_path;
    std::string out_dir;
    std::string policy = "ancestral";
    std::string norm_scope = "all";
    int32_t k = 1;
    int32_t steps = 16;
    int32_t n = 0;  // 0 means 8, or every prompt when --prompts is given
    int32_t loops = 0;  // 0 means the checkpoint's s_max
    std::vector<double> adaptive;
    uint64_t seed = 1;
};

int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
    if (a.n < 0) throw ConfigError("sample: --n must be >= 0");
    ModelParams p = load_any_model(a.checkpoint);
    UnmaskPolicy policy = make_policy(a.policy, a.k);

    std::vector<TokenSeq> prompts;
    if (!a.prompts_path.empty()) {
        DatasetFile df = load_examples(a.prompts_path);
        const std::size_t want = a.n > 0 ? std::size_t(a.n) : df.examples.size();
        if (want > df.examples.size())
            throw ConfigError("requested " + std::to_string(want) + " samples, prompts file holds " +
                              std::to_string(df.examples.size()));
        for (std::size_t i = 0; i < want; ++i)
            prompts.push_back(prompt_from_example(df.examples[i], p.cfg.vocab));
        for (const TokenSeq& pr : prompts)
            if (pr.length() != std::size_t(p.cfg.seq_len))
                throw ConfigError("prompt length " + std::to_string(pr.length()) +
                                  " does not match checkpoint length " +
                                  std::to_string(p.cfg.seq_len));
    } else {
        prompts = null_prompts(p.cfg, std::size_t(a.n > 0 ? a.n : 8));
    }

    Rng rng(a.seed);
    std::vector<Trajectory> trajs;
    if (!a.adaptive.empty()) {
        AdaptiveLoopPolicy ap;
        ap.epsilon = real(a.adaptive[0]);
        ap.s_budget = int32_t(a.adaptive[1]);
        ap.norm_scope = a.norm_scope == "masked" ? AdaptiveLoopPolicy::NormScope::masked_only
                                                 : AdaptiveLoopPolicy::NormScope::all_positions;
        trajs = generate_batch(p, policy, a.steps, ap, rng, prompts);
    } else {
        const int32_t s = a.loops > 0 ? a.loops : p.cfg.loop.s_max;
        trajs = generate_batch(p, policy, a.steps, s, rng, prompts);
    }

    std::string samples;
    for (const Trajectory& tr : trajs) samples += token_line(tr.final_sequence()) + "\n";
    out << samples;
    out << "# mean_loops=" << fmt_real(mean_loops(trajs)) << "\n";
    if (!a.out_dir.empty()) {
        fs::create_directories(a.out_dir);
        spit_file(a.out_dir + "/samples.txt", samples);
        std::string traj_text;
        for (const Trajectory& tr : trajs) traj_text += tr.export_lines();
        spit_file(a.out_dir + "/trajectories.txt", traj_text);
        err << "wrote " << trajs.size() << " samples to " << a.out_dir << "\n";
    }
    return 0;
}

struct EvalArgs {
    std::string config;
    std::string checkpoint;
    std::string alt_checkpoint;
    std::string alt_data;
    std::string scorer;
    std::vector<int32_t> loops;
    int64_t n = -1;
    uint64_t seed = 0;  // 0 means the config's eval_seed
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    RunConfig rc = load_run_config(a.config);
    const uint64_t seed = a.seed != 0 ? a.seed : rc.eval_seed;
    if (a.loops.empty()) throw ConfigError("eval: --loops list is empty");
    for (int32_t s : a.loops)
        if (s < 1) throw ConfigError("eval: loop count " + std::to_string(s) + " below 1");

    std::vector<TrainExample> examples = eval_examples(rc, a.n);
    if (examples.empty()) throw ContractError("eval: no held-out examples");
    ModelParams p = load_any_model(a.checkpoint);
    check_model_matches(p, rc.model.vocab, rc.model.seq_len, "eval");

    ModelParams alt;
    std::vector<TrainExample> alt_ex;
    const bool with_alt = !a.alt_checkpoint.empty();
    if (with_alt) {
        alt = load_any_model(a.alt_checkpoint);
        DatasetFile df = load_examples(a.alt_data);
        const int64_t vocab = df.meta.get_i64("vocab");
        alt_ex = std::move(df.examples);
        if (a.n >= 0 && std::size_t(a.n) < alt_ex.size()) alt_ex.resize(std::size_t(a.n));
        if (alt_ex.empty()) throw ContractError("eval: alt dataset holds no examples");
        check_model_matches(alt, int32_t(vocab), int32_t(alt_ex[0].x0.length()), "eval (alt)");
    }

    ModelParams scorer;
    const bool with_scorer = !a.scorer.empty();
    if (with_scorer) {
        scorer = load_any_model(a.scorer);
        check_model_matches(scorer, rc.model.vocab, rc.model.seq_len, "eval (scorer)");
    }

    const UnmaskPolicy policy = make_policy(rc.policy, rc.policy_k);
    const bool puzzle = rc.task == "sudoku4" || rc.task == "sudoku9";
    const bool clique = rc.task == "clique";
    std::string metric_name = puzzle ? "solve_rate" : clique ? "accuracy" : "gen_ppl";

    struct Row {
        real nelbo = 0;
        real metric = -1;
        real alt_metric = -1;
    };
    std::vector<Row> rows(a.loops.size());
    std::vector<TokenSeq> prompts;
    for (const TrainExample& ex : examples) prompts.push_back(prompt_from_example(ex, rc.model.vocab));
    std::vector<TokenSeq> alt_prompts;
    for (const TrainExample& ex : alt_ex)
        alt_prompts.push_back(prompt_from_example(ex, alt.cfg.vocab));

    parallel_jobs(a.loops.size(), [&](std::size_t i) {
        const int32_t s = a.loops[i];
        Row row;
        row.nelbo = mean_nelbo(p, examples, s, seed);
        if (puzzle || clique) {
            Rng gen_rng(seed ^ 0x9e3779b97f4a7c15ULL);
            std::vector<Trajectory> trajs = generate_batch(p, policy, rc.sample_steps, s, gen_rng, prompts);
            row.metric = puzzle ? exact_match_rate(trajs, examples) : answer_match_rate(trajs, examples);
            if (with_alt) {
                Rng alt_rng(seed ^ 0x9e3779b97f4a7c15ULL);
                std::vector<Trajectory> alt_trajs =
                    generate_batch(alt, policy, rc.sample_steps, s, alt_rng, alt_prompts);
                row.alt_metric = puzzle ? exact_match_rate(alt_trajs, alt_ex)
                                        : answer_match_rate(alt_trajs, alt_ex);
            }
        } else if (with_scorer) {
            Rng gen_rng(seed ^ 0x9e3779b97f4a7c15ULL);
            const std::size_t n_gen = std::min<std::size_t>(examples.size(), 64);
            std::vector<Trajectory> trajs =
                generate_batch(p, policy, rc.sample_steps, s, gen_rng, null_prompts(p.cfg, n_gen));
            row.metric = generative_perplexity(final_sequences(trajs), scorer);
        }
        rows[i] = row;
    });

    std::string table = "# s\tnelbo";
    const bool have_metric = rows[0].metric >= 0;
    if (have_metric) table += "\t" + metric_name;
    if (with_alt) table += "\talt_" + metric_name;
    table += "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        table += std::to_string(a.loops[i]) + "\t" + fmt_real(rows[i].nelbo);
        if (have_metric) table += "\t" + fmt_real(rows[i].metric);
        if (with_alt) table += "\t" + fmt_real(rows[i].alt_metric);
        table += "\n";
    }
    out << table;
    err << "evaluated " << examples.size() << " examples at " << a.loops.size() << " loop counts\n";
    return 0;
}

struct AnalyzeArgs {
    std::string op;
    std::string config;
    std::string checkpoint;
    std::string scorer;
    std::string samples_path;
    std::string out_path;
    std::string svg_path;
    std::vector<int32_t> s_list;
    std::vector<double> adaptive;
    double t = 0.5;
    int32_t bins = 20;
    int32_t steps = 0;  // 0 means the config's sample_steps
    int32_t loops = 0;
    int64_t n = 64;
    uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
    RunConfig rc = load_run_config(a.config);
    const uint64_t seed = a.seed != 0 ? a.seed : rc.eval_seed;
    ModelParams p = load_any_model(a.checkpoint);
    check_model_matches(p, rc.model.vocab, rc.model.seq_len, "analyze");

    std::string table;
    std::string chart;
    if (a.op == "attention") {
        std::vector<TokenSeq> eval_set = example_inputs(eval_examples(rc, a.n));
        std::vector<int32_t> s_list = a.s_list.empty()
                                          ? std::vector<int32_t>{p.cfg.loop.s_max}
                                          : a.s_list;
        std::vector<AttentionStats> stats =
            mask_attention_profile(p, eval_set, real(a.t), s_list, seed);
        table = attention_table(stats);
        if (!a.svg_path.empty()) {
            const int32_t s_star = *std::max_element(s_list.begin(), s_list.end());
            std::vector<ChartSeries> series(std::size_t(p.cfg.loop.n_m));
            for (const AttentionStats& st : stats) {
                if (st.s != s_star) continue;
                ChartSeries& sr = series[std::size_t(st.layer)];
                sr.label = "layer " + std::to_string(st.layer);
                sr.x.push_back(real(st.loop));
                sr.y.push_back(st.mass);
            }
            chart = svg_line_chart("mask-to-mask attention (S=" + std::to_string(s_star) + ")",
                                   "loop", "mass", series);
        }
    } else if (a.op == "gain") {
        std::vector<TokenSeq> eval_set = example_inputs(eval_examples(rc, a.n));
        std::vector<int32_t> s_list =
            a.s_list.empty() ? std::vector<int32_t>{1, p.cfg.loop.s_max} : a.s_list;
        TimestepProfile prof = timestep_gain_profile(p, eval_set, s_list, a.bins, seed);
        table = timestep_table(prof);
        if (!a.svg_path.empty()) {
            std::vector<ChartSeries> series;
            for (std::size_t si = 0; si < prof.s_list.size(); ++si) {
                ChartSeries sr;
                sr.label = "S=" + std::to_string(prof.s_list[si]);
                for (int32_t bin = 0; bin < prof.n_bins(); ++bin) {
                    if (prof.counts[std::size_t(bin)] == 0) continue;
                    sr.x.push_back(prof.bin_t[std::size_t(bin)]);
                    sr.y.push_back(prof.gain_at(bin, int32_t(si)));
                }
                if (!sr.x.empty()) series.push_back(std::move(sr));
            }
            chart = svg_line_chart("denoising gain over the baseline", "t", "gain (nats)", series);
        }
    } else if (a.op == "allocation") {
        if (a.adaptive.size() != 2)
            throw ConfigError("analyze allocation: --adaptive EPSILON BUDGET is required");
        AdaptiveLoopPolicy ap;
        ap.epsilon = real(a.adaptive[0]);
        ap.s_budget = int32_t(a.adaptive[1]);
        std::vector<TokenSeq> prompts;
        if (file_task(rc)) {
            for (const TrainExample& ex : eval_examples(rc, a.n))
                prompts.push_back(prompt_from_example(ex, rc.model.vocab));
        } else {
            prompts = null_prompts(p.cfg, std::size_t(a.n));
        }
        Rng rng(seed);
        const int32_t steps = a.steps > 0 ? a.steps : rc.sample_steps;
        std::vector<Trajectory> trajs =
            generate_batch(p, make_policy(rc.policy, rc.policy_k), steps, ap, rng, prompts);
        LoopAllocationProfile prof = loop_allocation_profile(trajs, a.bins);
        table = allocation_table(prof);
        if (!a.svg_path.empty()) {
            ChartSeries sr;
            sr.label = "mean loops";
            for (int32_t bin = 0; bin < prof.n_bins(); ++bin) {
                if (prof.counts[std::size_t(bin)] == 0) continue;
                sr.x.push_back((prof.bin_lo[std::size_t(bin)] + prof.bin_hi[std::size_t(bin)]) / 2);
                sr.y.push_back(prof.mean_loops[std::size_t(bin)]);
            }
            chart = svg_line_chart("loop allocation over time", "t", "mean loops", {sr});
        }
    } else if (a.op == "perplexity") {
        if (a.scorer.empty()) throw ConfigError("analyze perplexity: --scorer is required");
        ModelParams scorer = load_any_model(a.scorer);
        std::vector<TokenSeq> samples;
        if (!a.samples_path.empty()) {
            samples = read_token_lines(a.samples_path, scorer.cfg.vocab);
        } else {
            Rng rng(seed);
            const int32_t steps = a.steps > 0 ? a.steps : rc.sample_steps;
            const int32_t s = a.loops > 0 ? a.loops : p.cfg.loop.s_max;
            std::vector<Trajectory> trajs =
                generate_batch(p, make_policy(rc.policy, rc.policy_k), steps, s, rng,
                               null_prompts(p.cfg, std::size_t(a.n)));
            samples = final_sequences(trajs);
        }
        if (!a.svg_path.empty())
            throw ConfigError("analyze perplexity: no chart for a single number");
        table = fmt_real(generative_perplexity(samples, scorer)) + "\n";
    } else {
        throw ConfigError("analyze: unknown op '" + a.op + "'");
    }

    out << table;
    if (!a.out_path.empty()) spit_file(a.out_path, table);
    if (!chart.empty()) {
        spit_file(a.svg_path, chart);
        err << "wrote chart to " << a.svg_path << "\n";
    }
    return 0;
}

int cmd_flops(const std::string& config_path, const std::string& baseline_path,
              const std::string& out_path, std::ostream& out, std::ostream&) {
    RunConfig rc = load_run_config(config_path);
    FlopsReport rep = per_step_flops(rc.model, rc.train.batch_size);
    if (!baseline_path.empty()) {
        RunConfig rb = load_run_config(baseline_path);
        FlopsReport base = per_step_flops(rb.model, rb.train.batch_size);
        unsigned __int128 num =
            static_cast<unsigned __int128>(rb.train.total_steps) * base.f_loop;
        rep.matched_steps = static_cast<int64_t>(num / rep.f_loop);
    }
    const std::string text = rep.serialize();
    out << text;
    if (!out_path.empty()) spit_file(out_path, text);
    return 0;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path, int64_t n,
                 uint64_t seed, std::ostream& out, std::ostream& err) {
    RunConfig rc = load_run_config(config_path);
    if (n < 1) throw ConfigError("gen-data: --n must be >= 1");
    Rng rng(seed != 0 ? seed : rc.corpus_seed);

    std::vector<TrainExample> examples;
    KvMap meta;
    if (rc.task == "sudoku4" || rc.task == "sudoku9") {
        const int32_t grid = rc.task == "sudoku4" ? 4 : 9;
        std::vector<SudokuInstance> insts = gen_sudoku(grid, n, rc.givens_fraction, rng);
        for (const SudokuInstance& inst : insts) examples.push_back(sudoku_example(inst));
        meta.set_i64("grid_size", grid);
        meta.set_real("givens_fraction", rc.givens_fraction);
    } else if (rc.task == "clique") {
        std::vector<CliqueInstance> insts =
            gen_clique(rc.clique_n, rc.clique_k, n, rc.planted_fraction, rng);
        for (const CliqueInstance& inst : insts)
            examples.push_back(clique_example(inst, rc.workspace_supervision, rc.padding_free));
        meta.set_i64("n", rc.clique_n);
        meta.set_i64("k", rc.clique_k);
        meta.set_real("planted_fraction", rc.planted_fraction);
        meta.set_i64("workspace_supervision", rc.workspace_supervision ? 1 : 0);
        meta.set_i64("padding_free", rc.padding_free ? 1 : 0);
    } else {
        RunConfig gen = rc;
        gen.corpus_seed = seed != 0 ? seed : rc.corpus_seed;
        gen.n_sequences = n;
        examples = gen.task == "grammar" ? corpus_examples(gen, gen.corpus_seed, n)
                                         : corpus_examples(gen, 0, n);
        meta.set_i64("seq_len", rc.model.seq_len);
    }
    save_examples(out_path, rc.task, meta, examples);
    out << out_path << "\n";
    err << "wrote " << examples.size() << " examples\n";
    return 0;
}

}  // namespace

// ---- run config ----

int run_threads() {
    const char* env = std::getenv("RUN_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    errno = 0;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (errno != 0 || end == env || *end != '\0' || v < 1 || v > 256)
        throw ConfigError("RUN_THREADS: '" + std::string(env) + "' is not a thread count in [1,256]");
    return int(v);
}

KvMap run_config_to_kv(const RunConfig& rc) {
    KvMap kv;
    kv.set("task.name", rc.task);
    kv.set("run.dir", rc.run_dir);
    kv.set_i64("run.checkpoint_every", rc.checkpoint_every);
    kv.set_u64("run.eval_seed", rc.eval_seed);
    kv.set("task.data", rc.data_path);
    kv.set("task.eval_data", rc.eval_data_path);
    kv.set_real("task.givens_fraction", rc.givens_fraction);
    kv.set_i64("task.clique_n", rc.clique_n);
    kv.set_i64("task.clique_k", rc.clique_k);
    kv.set_real("task.planted_fraction", rc.planted_fraction);
    kv.set_i64("task.workspace_supervision", rc.workspace_supervision ? 1 : 0);
    kv.set_i64("task.padding_free", rc.padding_free ? 1 : 0);
    kv.set_u64("task.corpus_seed", rc.corpus_seed);
    kv.set_i64("task.n_sequences", rc.n_sequences);
    kv.set("task.text_path", rc.text_path);
    kv.set("task.vocab_chars", rc.vocab_chars);
    model_config_to_kv(rc.model, kv);
    train_config_to_kv(rc.train, kv);
    kv.set("sample.policy", rc.policy);
    kv.set_i64("sample.k", rc.policy_k);
    kv.set_i64("sample.steps", rc.sample_steps);
    return kv;
}

RunConfig run_config_from_kv(const KvMap& kv) {
    RunConfig defaults;
    KvMap merged = run_config_to_kv(defaults);

    RunConfig probe;
    probe.train.flops_match_baseline = LoopConfig{};
    KvMap known = run_config_to_kv(probe);
    known.set("run.code_version", "");
    for (const auto& [key, value] : kv.entries()) {
        if (!known.has(key)) throw ConfigError("unknown config key '" + key + "'");
        merged.set(key, value);
    }
    if (merged.get_or("train.flops_match", "0") == "1") {
        KvMap base_defaults;
        loop_config_to_kv(LoopConfig{}, base_defaults, "train.baseline.");
        for (const auto& [key, value] : base_defaults.entries())
            if (!merged.has(key)) merged.set(key, value);
    }

    RunConfig rc;
    rc.task = merged.get("task.name");
    rc.run_dir = merged.get("run.dir");
    rc.checkpoint_every = merged.get_i64("run.checkpoint_every");
    rc.eval_seed = merged.get_u64("run.eval_seed");
    rc.data_path = merged.get("task.data");
    rc.eval_data_path = merged.get("task.eval_data");
    rc.givens_fraction = merged.get_real("task.givens_fraction");
    rc.clique_n = int32_t(merged.get_i64("task.clique_n"));
    rc.clique_k = int32_t(merged.get_i64("task.clique_k"));
    rc.planted_fraction = merged.get_real("task.planted_fraction");
    rc.workspace_supervision = kv_bool(merged, "task.workspace_supervision");
    rc.padding_free = kv_bool(merged, "task.padding_free");
    rc.corpus_seed = merged.get_u64("task.corpus_seed");
    rc.n_sequences = merged.get_i64("task.n_sequences");
    rc.text_path = merged.get("task.text_path");
    rc.vocab_chars = merged.get("task.vocab_chars");
    rc.model = model_config_from_kv(merged);
    rc.train = train_config_from_kv(merged);
    rc.policy = merged.get("sample.policy");
    rc.policy_k = int32_t(merged.get_i64("sample.k"));
    rc.sample_steps = int32_t(merged.get_i64("sample.steps"));
    rc.validate();
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    return run_config_from_kv(KvMap::parse(slurp_file(path)));
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (checkpoint_every < 1)
        throw ConfigError("config key 'run.checkpoint_every': must be >= 1");
    if (policy != "ancestral" && policy != "topk" && policy != "ltr")
        throw ConfigError("config key 'sample.policy': unknown policy '" + policy + "'");
    if (policy_k < 1) throw ConfigError("config key 'sample.k': must be >= 1");
    if (sample_steps < 1) throw ConfigError("config key 'sample.steps': must be >= 1");

    if (task == "sudoku4" || task == "sudoku9") {
        const int32_t grid = task == "sudoku4" ? 4 : 9;
        if (model.vocab != grid)
            throw ConfigError("config key 'model.vocab': task " + task + " needs vocabulary " +
                              std::to_string(grid));
        if (model.seq_len != grid * grid)
            throw ConfigError("config key 'model.seq_len': task " + task + " needs length " +
                              std::to_string(grid * grid));
        if (!(givens_fraction > 0) || givens_fraction >= 1)
            throw ConfigError("config key 'task.givens_fraction': must lie in (0,1)");
    } else if (task == "clique") {
        if (clique_n < 2 || clique_k < 2 || clique_k > clique_n)
            throw ConfigError("config key 'task.clique_n': need n >= k >= 2");
        if (!(planted_fraction >= 0) || planted_fraction > 1)
            throw ConfigError("config key 'task.planted_fraction': must lie in [0,1]");
        const int64_t edges = int64_t(clique_n) * clique_n;
        const int64_t expected =
            padding_free ? edges + 1 : edges + int_pow_checked(clique_n, clique_k, "task.clique_k") + 1;
        if (model.vocab != kCliqueVocab)
            throw ConfigError("config key 'model.vocab': clique task needs vocabulary " +
                              std::to_string(kCliqueVocab));
        if (model.seq_len != expected)
            throw ConfigError("config key 'model.seq_len': clique layout needs length " +
                              std::to_string(expected));
    } else if (task == "grammar") {
        if (model.vocab != grammar_vocab())
            throw ConfigError("config key 'model.vocab': grammar task needs vocabulary " +
                              std::to_string(grammar_vocab()));
        if (n_sequences < 1) throw ConfigError("config key 'task.n_sequences': must be >= 1");
    } else if (task == "text") {
        if (text_path.empty()) throw ConfigError("config key 'task.text_path': missing path");
        if (vocab_chars.empty())
            throw ConfigError("config key 'task.vocab_chars': missing vocabulary");
        if (model.vocab != int32_t(vocab_chars.size()) + 2)
            throw ConfigError("config key 'model.vocab': text task needs vocabulary " +
                              std::to_string(vocab_chars.size() + 2));
    } else {
        throw ConfigError("config key 'task.name': unknown task '" + task + "'");
    }
}

ModelParams load_any_model(const std::string& path) {
    try {
        return Trainer::load_checkpoint(path).ema_params();
    } catch (const IoError&) {
        return load_model(path);
    }
}

TokenSeq prompt_from_example(const TrainExample& ex, int32_t vocab) {
    if (ex.x0.vocab != vocab)
        throw ConfigError("prompt vocabulary " + std::to_string(ex.x0.vocab) +
                          " does not match model vocabulary " + std::to_string(vocab));
    TokenSeq prompt = ex.x0;
    for (std::size_t i = 0; i < prompt.length(); ++i)
        if (ex.roles.empty() || ex.roles[i] != PositionRole::context)
            prompt.tokens[i] = prompt.mask_id();
    return prompt;
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"looped masked diffusion laboratory"};
    app.require_subcommand(0, 1);
    bool dump_defaults = false;
    app.add_flag("--dump-defaults", dump_defaults, "print the canonical default config and exit");

    std::string train_config;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", train_config, "run config file")->required();

    SampleArgs sa;
    CLI::App* sample_cmd = app.add_subcommand("sample", "generate sequences from a checkpoint");
    sample_cmd->add_option("--checkpoint", sa.checkpoint, "model or trainer checkpoint")->required();
    sample_cmd->add_option("--prompts", sa.prompts_path, "dataset file supplying prompts");
    sample_cmd->add_option("--out", sa.out_dir, "directory for samples and trajectories");
    sample_cmd->add_option("--policy", sa.policy, "unmasking policy")
        ->check(CLI::IsMember({"ancestral", "topk", "ltr"}));
    sample_cmd->add_option("--k", sa.k, "positions per step for topk/ltr");
    sample_cmd->add_option("--steps", sa.steps, "reverse steps");
    sample_cmd->add_option("--n", sa.n, "number of samples (0: 8, or every prompt)");
    CLI::Option* loops_opt = sample_cmd->add_option("--loops", sa.loops, "fixed loop count");
    CLI::Option* adaptive_opt =
        sample_cmd->add_option("--adaptive", sa.adaptive, "adaptive looping: EPSILON BUDGET")
            ->expected(2);
    loops_opt->excludes(adaptive_opt);
    sample_cmd->add_option("--norm-scope", sa.norm_scope, "adaptive change norm scope")
        ->check(CLI::IsMember({"all", "masked"}));
    sample_cmd->add_option("--seed", sa.seed, "sampling seed");

    EvalArgs ea;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on held-out data");
    eval_cmd->add_option("--config", ea.config, "run config file")->required();
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "model or trainer checkpoint")->required();
    eval_cmd->add_option("--loops", ea.loops, "loop counts, comma separated")
        ->required()
        ->delimiter(',');
    CLI::Option* alt_ckpt_opt =
        eval_cmd->add_option("--alt-checkpoint", ea.alt_checkpoint, "second checkpoint to compare");
    eval_cmd->add_option("--alt-data", ea.alt_data, "held-out dataset for the second checkpoint");
    alt_ckpt_opt->needs(eval_cmd->get_option("--alt-data"));
    eval_cmd->add_option("--scorer", ea.scorer, "scorer checkpoint for generative perplexity");
    eval_cmd->add_option("--n", ea.n, "cap on held-out examples");
    eval_cmd->add_option("--seed", ea.seed, "evaluation seed (0: config's run.eval_seed)");

    AnalyzeArgs aa;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "profiles and perplexity");
    analyze_cmd->add_option("--op", aa.op, "attention | gain | allocation | perplexity")
        ->required()
        ->check(CLI::IsMember({"attention", "gain", "allocation", "perplexity"}));
    analyze_cmd->add_option("--config", aa.config, "run config file")->required();
    analyze_cmd->add_option("--checkpoint", aa.checkpoint, "model or trainer checkpoint")->required();
    analyze_cmd->add_option("--scorer", aa.scorer, "scorer checkpoint (perplexity)");
    analyze_cmd->add_option("--samples", aa.samples_path, "token-line file to score (perplexity)");
    analyze_cmd->add_option("--out", aa.out_path, "write the table here as well");
    analyze_cmd->add_option("--svg", aa.svg_path, "write a line chart here");
    analyze_cmd->add_option("--s-list", aa.s_list, "loop counts, comma separated")->delimiter(',');
    analyze_cmd->add_option("--adaptive", aa.adaptive, "adaptive looping: EPSILON BUDGET")
        ->expected(2);
    analyze_cmd->add_option("--t", aa.t, "corruption time (attention)");
    analyze_cmd->add_option("--bins", aa.bins, "timestep bins");
    analyze_cmd->add_option("--steps", aa.steps, "reverse steps (0: config's sample.steps)");
    analyze_cmd->add_option("--loops", aa.loops, "loop count for generation (0: checkpoint s_max)");
    analyze_cmd->add_option("--n", aa.n, "evaluation set or sample cap");
    analyze_cmd->add_option("--seed", aa.seed, "profile seed (0: config's run.eval_seed)");

    std::string flops_config, flops_baseline, flops_out;
    CLI::App* flops_cmd = app.add_subcommand("flops", "per-step compute accounting");
    flops_cmd->add_option("--config", flops_config, "run config file")->required();
    flops_cmd->add_option("--baseline", flops_baseline, "baseline config for matched steps");
    flops_cmd->add_option("--out", flops_out, "write the report here as well");

    std::string gen_config, gen_out;
    int64_t gen_n = 0;
    uint64_t gen_seed = 0;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a dataset file");
    gen_cmd->add_option("--config", gen_config, "run config file")->required();
    gen_cmd->add_option("--out", gen_out, "dataset file to write")->required();
    gen_cmd->add_option("--n", gen_n, "number of instances")->required();
    gen_cmd->add_option("--seed", gen_seed, "generation seed (0: config's task.corpus_seed)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (dump_defaults) {
            out << run_config_to_kv(RunConfig{}).serialize();
            return 0;
        }
        if (train_cmd->parsed()) return cmd_train(train_config, out, err);
        if (sample_cmd->parsed()) return cmd_sample(sa, out, err);
        if (eval_cmd->parsed()) return cmd_eval(ea, out, err);
        if (analyze_cmd->parsed()) return cmd_analyze(aa, out, err);
        if (flops_cmd->parsed()) return cmd_flops(flops_config, flops_baseline, flops_out, out, err);
        if (gen_cmd->parsed()) return cmd_gen_data(gen_config, gen_out, gen_n, gen_seed, out, err);
        err << app.help();
        return 1;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace loopmdm
