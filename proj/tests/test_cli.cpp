#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "loopmdm/analysis.hpp"
#include "loopmdm/cli.hpp"
#include "loopmdm/sampler.hpp"
#include "loopmdm/tasks.hpp"

using namespace loopmdm;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& stem) {
    static uint64_t counter = 0;
    return "/tmp/loopmdm_cli_" + stem + "_" + std::to_string(++counter);
}

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("loopmdm");
    for (const std::string& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliResult r;
    r.code = cli_main(int(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(out));
    out << text;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

std::vector<std::string> fields_of(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

// Small grammar run shared by the sample/eval/analyze cases; trained once
// through the real train command.
struct CliFixture {
    std::string dir;
    std::string config;
    std::string model;       // EMA weights container
    std::string checkpoint;  // full trainer state
};

std::string fixture_config_text(const std::string& run_dir) {
    return "task.name=grammar\n"
           "run.dir=" + run_dir + "\n"
           "run.checkpoint_every=10\n"
           "run.eval_seed=77\n"
           "task.corpus_seed=7\n"
           "task.n_sequences=64\n"
           "model.vocab=8\n"
           "model.seq_len=16\n"
           "model.d_model=16\n"
           "model.n_heads=2\n"
           "loop.n_layers_total=3\n"
           "loop.loop_start=1\n"
           "loop.n_m=1\n"
           "loop.s_max=3\n"
           "train.batch_size=8\n"
           "train.total_steps=30\n"
           "train.warmup_steps=5\n"
           "train.learning_rate=0.001\n"
           "train.ema_decay=0.99\n"
           "train.seed=5\n"
           "sample.steps=8\n";
}

const CliFixture& trained_fixture() {
    static const CliFixture fix = [] {
        CliFixture f;
        f.dir = temp_path("fixture_run");
        f.config = temp_path("fixture_cfg") + ".kv";
        write_file(f.config, fixture_config_text(f.dir));
        CliResult r = run_cli({"train", "--config", f.config});
        REQUIRE(r.code == 0);
        f.model = f.dir + "/model_ema.bin";
        f.checkpoint = f.dir + "/ckpt_final.bin";
        return f;
    }();
    return fix;
}

}  // namespace

TEST_CASE("run config defaults validate and round trip") {
    RunConfig defaults;
    CHECK_NOTHROW(defaults.validate());

    KvMap kv = run_config_to_kv(defaults);
    RunConfig back = run_config_from_kv(kv);
    CHECK(run_config_to_kv(back).serialize() == kv.serialize());

    CliResult dump = run_cli({"--dump-defaults"});
    CHECK(dump.code == 0);
    CHECK(dump.out == kv.serialize());
    CHECK_NOTHROW(run_config_from_kv(KvMap::parse(dump.out)));
}

TEST_CASE("run config rejects unknown keys and bad values") {
    KvMap kv;
    kv.set("task.nme", "grammar");
    CHECK_THROWS_WITH_AS(run_config_from_kv(kv), doctest::Contains("task.nme"), ConfigError);

    KvMap policy;
    policy.set("sample.policy", "diagonal");
    CHECK_THROWS_WITH_AS(run_config_from_kv(policy), doctest::Contains("sample.policy"),
                         ConfigError);

    KvMap task;
    task.set("task.name", "crossword");
    CHECK_THROWS_WITH_AS(run_config_from_kv(task), doctest::Contains("task.name"), ConfigError);

    // The stamped version key written into run directories is accepted.
    KvMap stamped;
    stamped.set("run.code_version", "abc123");
    CHECK_NOTHROW(run_config_from_kv(stamped));
}

TEST_CASE("run config enforces task and model consistency") {
    RunConfig rc;
    rc.task = "sudoku4";
    rc.model.vocab = 4;
    rc.model.seq_len = 16;
    CHECK_NOTHROW(rc.validate());
    rc.model.vocab = 5;
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("model.vocab"), ConfigError);
    rc.model.vocab = 4;
    rc.model.seq_len = 25;
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("model.seq_len"), ConfigError);

    RunConfig clique;
    clique.task = "clique";
    clique.clique_n = 4;
    clique.clique_k = 2;
    clique.model.vocab = kCliqueVocab;
    clique.model.seq_len = 16 + 16 + 1;
    CHECK_NOTHROW(clique.validate());
    clique.padding_free = true;
    CHECK_THROWS_AS(clique.validate(), ConfigError);
    clique.model.seq_len = 16 + 1;
    CHECK_NOTHROW(clique.validate());

    RunConfig text;
    text.task = "text";
    CHECK_THROWS_WITH_AS(text.validate(), doctest::Contains("task.text_path"), ConfigError);
    text.text_path = "corpus.txt";
    text.vocab_chars = "ab";
    text.model.vocab = 3;
    CHECK_THROWS_WITH_AS(text.validate(), doctest::Contains("model.vocab"), ConfigError);
    text.model.vocab = 4;
    CHECK_NOTHROW(text.validate());
}

TEST_CASE("cli reports usage errors as exit 1") {
    CHECK(run_cli({}).code == 1);
    CHECK(run_cli({"--bogus"}).code == 1);
    CHECK(run_cli({"train"}).code == 1);  // missing --config
    CHECK(run_cli({"frobnicate"}).code == 1);

    const CliFixture& fix = trained_fixture();
    CliResult both = run_cli({"sample", "--checkpoint", fix.model, "--loops", "2", "--adaptive",
                              "0.1", "3"});
    CHECK(both.code == 1);
    CliResult policy = run_cli({"sample", "--checkpoint", fix.model, "--policy", "diagonal"});
    CHECK(policy.code == 1);
    CliResult alt = run_cli({"eval", "--config", fix.config, "--checkpoint", fix.model, "--loops",
                             "1", "--alt-checkpoint", fix.model});
    CHECK(alt.code == 1);  // --alt-checkpoint needs --alt-data
}

TEST_CASE("bad configuration exits 2 before touching the run directory") {
    const std::string dir = temp_path("never_created");
    const std::string cfg = temp_path("bad_cfg") + ".kv";

    write_file(cfg, "task.name=grammar\nrun.dir=" + dir + "\nmodel.vocab=8\n" +
                        "loop.n_layers_total=3\nloop.loop_start=2\nloop.n_m=2\n");
    CliResult r = run_cli({"train", "--config", cfg});
    CHECK(r.code == 2);
    CHECK(!fs::exists(dir));

    write_file(cfg, "task.name=grammar\nrun.dir=" + dir + "\nmodel.vocab=8\ntask.nme=x\n");
    CliResult unknown = run_cli({"train", "--config", cfg});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("task.nme") != std::string::npos);
    CHECK(!fs::exists(dir));
}

TEST_CASE("train writes a complete run directory") {
    const CliFixture& fix = trained_fixture();
    CHECK(fs::exists(fix.dir + "/config.kv"));
    CHECK(fs::exists(fix.dir + "/metrics.tsv"));
    CHECK(fs::exists(fix.dir + "/ckpt_10.bin"));
    CHECK(fs::exists(fix.dir + "/ckpt_20.bin"));
    CHECK(!fs::exists(fix.dir + "/ckpt_30.bin"));  // the final step is ckpt_final
    CHECK(fs::exists(fix.checkpoint));
    CHECK(fs::exists(fix.model));
    CHECK(fs::exists(fix.dir + "/flops.txt"));

    // The stamped config round trips and records the build id.
    KvMap stamped = KvMap::parse(read_file(fix.dir + "/config.kv"));
    CHECK(stamped.get("run.code_version") == std::string(code_version()));
    RunConfig rc = run_config_from_kv(stamped);
    CHECK(rc.task == "grammar");
    CHECK(rc.train.total_steps == 30);

    std::vector<std::string> rows = lines_of(read_file(fix.dir + "/metrics.tsv"));
    REQUIRE(rows.size() == 31);
    CHECK(rows[0] == "# step\tloss\tlr\ts\tgrad_norm\tcumulative_flops");
    uint64_t prev_flops = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::vector<std::string> f = fields_of(rows[i]);
        REQUIRE(f.size() == 6);
        CHECK(std::stoll(f[0]) == int64_t(i));
        CHECK(std::isfinite(std::stod(f[1])));
        const int s = std::stoi(f[3]);
        CHECK(s >= 1);
        CHECK(s <= 3);
        const uint64_t flops = std::stoull(f[5]);
        CHECK(flops > prev_flops);
        prev_flops = flops;
    }

    FlopsReport rep = FlopsReport::parse(read_file(fix.dir + "/flops.txt"));
    CHECK(rep.f_layer > 0);
    CHECK(rep.s_max == 3);
    CHECK(rep.matched_steps == 0);

    ModelParams ema = load_model(fix.model);
    CHECK(ema.cfg.vocab == 8);
    CHECK(ema.cfg.loop.s_max == 3);
    Trainer resumed = Trainer::load_checkpoint(fix.checkpoint);
    CHECK(resumed.step() == 30);
}

TEST_CASE("a rerun with the same config and seed is byte-identical") {
    const CliFixture& fix = trained_fixture();
    const std::string dir = temp_path("rerun");
    const std::string cfg = temp_path("rerun_cfg") + ".kv";
    write_file(cfg, fixture_config_text(dir));
    CliResult r = run_cli({"train", "--config", cfg});
    REQUIRE(r.code == 0);
    CHECK(read_file(dir + "/metrics.tsv") == read_file(fix.dir + "/metrics.tsv"));
    CHECK(read_file(dir + "/model_ema.bin") == read_file(fix.dir + "/model_ema.bin"));
    CHECK(read_file(dir + "/ckpt_final.bin") == read_file(fix.dir + "/ckpt_final.bin"));
    fs::remove_all(dir);
}

TEST_CASE("divergence exits 3 and leaves a diagnostic snapshot") {
    const std::string dir = temp_path("divergent_run");
    const std::string cfg = temp_path("divergent_cfg") + ".kv";
    std::string text = fixture_config_text(dir);
    text.replace(text.find("train.learning_rate=0.001"), 25, "train.learning_rate=1e308");
    text.replace(text.find("train.warmup_steps=5"), 20, "train.warmup_steps=1");
    write_file(cfg, text);

    CliResult r = run_cli({"train", "--config", cfg});
    CHECK(r.code == 3);
    CHECK(r.err.find("diverged") != std::string::npos);
    CHECK(fs::exists(dir + "/diverged.bin"));
    CHECK(fs::exists(dir + "/metrics.tsv"));
    CHECK(lines_of(read_file(dir + "/metrics.tsv")).size() >= 2);  // header plus the steps that ran
    Trainer snap = Trainer::load_checkpoint(dir + "/diverged.bin");
    CHECK(snap.step() < 30);
    fs::remove_all(dir);
}

TEST_CASE("sample emits token lines and honors loop flags") {
    const CliFixture& fix = trained_fixture();

    CliResult r = run_cli({"sample", "--checkpoint", fix.model, "--n", "4", "--seed", "11",
                           "--steps", "8"});
    REQUIRE(r.code == 0);
    std::vector<std::string> rows = lines_of(r.out);
    REQUIRE(rows.size() == 5);
    CHECK(rows[4] == "# mean_loops=3");  // defaults to the checkpoint's s_max
    for (int i = 0; i < 4; ++i) {
        std::istringstream toks(rows[std::size_t(i)]);
        int tok = 0, count = 0;
        while (toks >> tok) {
            CHECK(tok >= 0);
            CHECK(tok < 8);  // fully denoised, no mask ids
            ++count;
        }
        CHECK(count == 16);
    }

    // Identical invocations are identical; the trainer checkpoint carries the
    // same EMA weights as the plain container.
    CliResult again = run_cli({"sample", "--checkpoint", fix.model, "--n", "4", "--seed", "11",
                               "--steps", "8"});
    CHECK(again.out == r.out);
    CliResult via_ckpt = run_cli({"sample", "--checkpoint", fix.checkpoint, "--n", "4", "--seed",
                                  "11", "--steps", "8"});
    CHECK(via_ckpt.out == r.out);

    // Inference may exceed the training-time loop ceiling.
    CliResult deep = run_cli({"sample", "--checkpoint", fix.model, "--n", "2", "--loops", "7",
                              "--seed", "3"});
    REQUIRE(deep.code == 0);
    CHECK(lines_of(deep.out).back() == "# mean_loops=7");

    CliResult full = run_cli({"sample", "--checkpoint", fix.model, "--n", "2", "--adaptive", "0",
                              "3", "--seed", "4"});
    REQUIRE(full.code == 0);
    CHECK(lines_of(full.out).back() == "# mean_loops=3");
    CliResult lazy = run_cli({"sample", "--checkpoint", fix.model, "--n", "2", "--adaptive",
                              "1e30", "3", "--seed", "4", "--norm-scope", "masked"});
    REQUIRE(lazy.code == 0);
    CHECK(lines_of(lazy.out).back() == "# mean_loops=1");

    CliResult missing = run_cli({"sample", "--checkpoint", fix.dir + "/no_such.bin"});
    CHECK(missing.code == 4);
}

TEST_CASE("sample writes samples and trajectories; ltr commits in order") {
    const CliFixture& fix = trained_fixture();
    const std::string out_dir = temp_path("sample_out");
    CliResult r = run_cli({"sample", "--checkpoint", fix.model, "--n", "2", "--policy", "ltr",
                           "--k", "1", "--steps", "16", "--seed", "9", "--out", out_dir});
    REQUIRE(r.code == 0);

    std::vector<std::string> printed = lines_of(r.out);
    std::vector<std::string> saved = lines_of(read_file(out_dir + "/samples.txt"));
    REQUIRE(printed.size() == 3);
    REQUIRE(saved.size() == 2);
    CHECK(printed[0] == saved[0]);
    CHECK(printed[1] == saved[1]);

    std::vector<std::string> traj = lines_of(read_file(out_dir + "/trajectories.txt"));
    int expected_pos = 0;
    for (const std::string& line : traj) {
        if (line.empty() || line[0] == '#') {
            expected_pos = 0;
            continue;
        }
        std::vector<std::string> f = fields_of(line);
        REQUIRE(f.size() == 5);
        CHECK(f[3] == std::to_string(expected_pos));  // one leftmost commit per step
        ++expected_pos;
    }
    CHECK(expected_pos == 16);
    fs::remove_all(out_dir);
}

TEST_CASE("sample builds prompts from dataset files") {
    const CliFixture& fix = trained_fixture();
    const std::string data = temp_path("prompt_data") + ".bin";
    CliResult gen = run_cli({"gen-data", "--config", fix.config, "--out", data, "--n", "3",
                             "--seed", "21"});
    REQUIRE(gen.code == 0);
    CHECK(gen.out == data + "\n");

    CliResult r = run_cli({"sample", "--checkpoint", fix.model, "--prompts", data, "--seed", "2"});
    REQUIRE(r.code == 0);
    CHECK(lines_of(r.out).size() == 4);  // every prompt by default

    CliResult capped = run_cli({"sample", "--checkpoint", fix.model, "--prompts", data, "--n",
                                "2", "--seed", "2"});
    REQUIRE(capped.code == 0);
    CHECK(lines_of(capped.out).size() == 3);

    CliResult over = run_cli({"sample", "--checkpoint", fix.model, "--prompts", data, "--n", "9",
                              "--seed", "2"});
    CHECK(over.code == 2);
    fs::remove(data);
}

TEST_CASE("prompt_from_example keeps context visible and masks the rest") {
    TrainExample ex;
    ex.x0.vocab = 4;
    ex.x0.tokens = {0, 1, 2, 3};
    TokenSeq all_masked = prompt_from_example(ex, 4);
    CHECK(all_masked.tokens == std::vector<int32_t>{4, 4, 4, 4});

    ex.roles = {PositionRole::context, PositionRole::normal, PositionRole::pause,
                PositionRole::context};
    TokenSeq prompt = prompt_from_example(ex, 4);
    CHECK(prompt.tokens == std::vector<int32_t>{0, 4, 4, 3});

    CHECK_THROWS_AS(prompt_from_example(ex, 6), ConfigError);
}

TEST_CASE("eval prints one row per loop count and is reproducible") {
    const CliFixture& fix = trained_fixture();
    std::vector<std::string> args = {"eval", "--config", fix.config, "--checkpoint", fix.model,
                                     "--loops", "1,3", "--n", "12"};
    CliResult r = run_cli(args);
    REQUIRE(r.code == 0);
    std::vector<std::string> rows = lines_of(r.out);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == "# s\tnelbo");
    CHECK(fields_of(rows[1])[0] == "1");
    CHECK(fields_of(rows[2])[0] == "3");
    for (int i = 1; i <= 2; ++i) {
        const double nelbo = std::stod(fields_of(rows[std::size_t(i)])[1]);
        CHECK(std::isfinite(nelbo));
        CHECK(nelbo > 0);
    }

    CHECK(run_cli(args).out == r.out);

    // Row results are computed independently, so worker count cannot matter.
    setenv("RUN_THREADS", "3", 1);
    CliResult threaded = run_cli(args);
    unsetenv("RUN_THREADS");
    CHECK(threaded.code == 0);
    CHECK(threaded.out == r.out);

    CliResult scored = run_cli({"eval", "--config", fix.config, "--checkpoint", fix.model,
                                "--loops", "1", "--n", "12", "--scorer", fix.model});
    REQUIRE(scored.code == 0);
    std::vector<std::string> srows = lines_of(scored.out);
    CHECK(srows[0] == "# s\tnelbo\tgen_ppl");
    CHECK(std::stod(fields_of(srows[1])[2]) > 1);
}

TEST_CASE("eval runs task metrics and rejects mismatched checkpoints") {
    const CliFixture& fix = trained_fixture();

    ModelConfig scfg;
    scfg.vocab = 4;
    scfg.seq_len = 16;
    scfg.d_model = 16;
    scfg.n_heads = 2;
    scfg.loop.n_layers_total = 2;
    scfg.loop.loop_start = 0;
    scfg.loop.n_m = 1;
    scfg.loop.s_max = 2;
    Rng rng(3);
    const std::string sudoku_model = temp_path("sudoku_model") + ".bin";
    save_model(init_params(scfg, rng), sudoku_model);

    const std::string sudoku_cfg = temp_path("sudoku_cfg") + ".kv";
    const std::string sudoku_data = temp_path("sudoku_eval") + ".bin";
    write_file(sudoku_cfg, "task.name=sudoku4\nmodel.vocab=4\nmodel.seq_len=16\n"
                           "model.d_model=16\nmodel.n_heads=2\nloop.n_layers_total=2\n"
                           "loop.n_m=1\nloop.s_max=2\ntask.eval_data=" + sudoku_data + "\n");
    CliResult gen = run_cli({"gen-data", "--config", sudoku_cfg, "--out", sudoku_data, "--n", "6",
                             "--seed", "4"});
    REQUIRE(gen.code == 0);

    CliResult r = run_cli({"eval", "--config", sudoku_cfg, "--checkpoint", sudoku_model,
                           "--loops", "1,2"});
    REQUIRE(r.code == 0);
    std::vector<std::string> rows = lines_of(r.out);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == "# s\tnelbo\tsolve_rate");
    for (int i = 1; i <= 2; ++i) {
        const double rate = std::stod(fields_of(rows[std::size_t(i)])[2]);
        CHECK(rate >= 0);
        CHECK(rate <= 1);
    }

    // Comparing a checkpoint against itself on the same data gives twin columns.
    CliResult alt = run_cli({"eval", "--config", sudoku_cfg, "--checkpoint", sudoku_model,
                             "--loops", "1", "--alt-checkpoint", sudoku_model, "--alt-data",
                             sudoku_data});
    REQUIRE(alt.code == 0);
    std::vector<std::string> arows = lines_of(alt.out);
    CHECK(arows[0] == "# s\tnelbo\tsolve_rate\talt_solve_rate");
    std::vector<std::string> f = fields_of(arows[1]);
    CHECK(f[2] == f[3]);

    // A grammar checkpoint cannot score the sudoku task.
    CliResult mismatch = run_cli({"eval", "--config", sudoku_cfg, "--checkpoint", fix.model,
                                  "--loops", "1"});
    CHECK(mismatch.code == 2);

    CliResult empty = run_cli({"eval", "--config", fix.config, "--checkpoint", fix.model,
                               "--loops", ""});
    CHECK(empty.code == 2);

    fs::remove(sudoku_model);
    fs::remove(sudoku_cfg);
    fs::remove(sudoku_data);
}

TEST_CASE("analyze emits the profile tables") {
    const CliFixture& fix = trained_fixture();

    const std::string table_path = temp_path("attention_table") + ".tsv";
    const std::string svg_path = temp_path("attention_chart") + ".svg";
    CliResult att = run_cli({"analyze", "--op", "attention", "--config", fix.config,
                             "--checkpoint", fix.model, "--n", "8", "--s-list", "1,3", "--out",
                             table_path, "--svg", svg_path});
    REQUIRE(att.code == 0);
    std::vector<std::string> rows = lines_of(att.out);
    REQUIRE(rows.size() == 5);  // header, one s=1 row, three s=3 rows
    CHECK(rows[0] == "# s\tlayer\tloop\tmass\tn_samples\tn_skipped");
    CHECK(read_file(table_path) == att.out);
    CHECK(read_file(svg_path).substr(0, 4) == "<svg");
    CHECK(run_cli({"analyze", "--op", "attention", "--config", fix.config, "--checkpoint",
                   fix.model, "--n", "8", "--s-list", "1,3"})
              .out == att.out);
    fs::remove(table_path);
    fs::remove(svg_path);

    CliResult gain = run_cli({"analyze", "--op", "gain", "--config", fix.config, "--checkpoint",
                              fix.model, "--n", "8", "--bins", "4", "--s-list", "1,3"});
    REQUIRE(gain.code == 0);
    std::vector<std::string> grows = lines_of(gain.out);
    REQUIRE(grows.size() == 5);
    CHECK(grows[0] == "# t_lo\tt_hi\tt_eval\tcount\tnll_s1\tnll_s3\tgain_s1\tgain_s3");
    for (std::size_t i = 1; i < grows.size(); ++i)
        CHECK(fields_of(grows[i])[6] == "0");  // the baseline's gain over itself

    CliResult alloc = run_cli({"analyze", "--op", "allocation", "--config", fix.config,
                               "--checkpoint", fix.model, "--n", "6", "--adaptive", "0", "3",
                               "--bins", "4"});
    REQUIRE(alloc.code == 0);
    std::vector<std::string> arows = lines_of(alloc.out);
    REQUIRE(arows.size() == 5);
    CHECK(arows[0] == "# t_lo\tt_hi\tcount\tmean_loops");
    int64_t total = 0;
    for (std::size_t i = 1; i < arows.size(); ++i) {
        std::vector<std::string> f = fields_of(arows[i]);
        const int64_t count = std::stoll(f[2]);
        total += count;
        if (count > 0) CHECK(f[3] == "3");  // zero threshold forces the full budget
    }
    CHECK(total >= 6);

    CliResult no_adaptive = run_cli({"analyze", "--op", "allocation", "--config", fix.config,
                                     "--checkpoint", fix.model, "--n", "6"});
    CHECK(no_adaptive.code == 2);
}

TEST_CASE("analyze scores perplexity from files or fresh samples") {
    const CliFixture& fix = trained_fixture();

    // A zero-initialized scorer is exactly uniform, so any sample set scores
    // at the vocabulary size.
    ModelConfig ucfg;
    ucfg.vocab = 8;
    ucfg.seq_len = 16;
    ucfg.d_model = 16;
    ucfg.n_heads = 2;
    ucfg.loop.n_layers_total = 2;
    ucfg.loop.loop_start = 0;
    ucfg.loop.n_m = 1;
    ucfg.loop.s_max = 1;
    Rng rng(4);
    const std::string uniform_scorer = temp_path("uniform_scorer") + ".bin";
    save_model(init_params(ucfg, rng), uniform_scorer);

    const std::string samples_path = temp_path("samples") + ".txt";
    write_file(samples_path, "0 1 2 3 4 5 6 7 0 1 2 3 4 5 6 7\n"
                             "7 6 5 4 3 2 1 0 7 6 5 4 3 2 1 0\n");
    CliResult uniform = run_cli({"analyze", "--op", "perplexity", "--config", fix.config,
                                 "--checkpoint", fix.model, "--scorer", uniform_scorer,
                                 "--samples", samples_path});
    REQUIRE(uniform.code == 0);
    CHECK(std::stod(uniform.out) == doctest::Approx(8).epsilon(1e-12));

    CliResult generated = run_cli({"analyze", "--op", "perplexity", "--config", fix.config,
                                   "--checkpoint", fix.model, "--scorer", fix.model, "--n", "6"});
    REQUIRE(generated.code == 0);
    const double ppl = std::stod(generated.out);
    CHECK(std::isfinite(ppl));
    CHECK(ppl > 1);

    CliResult no_scorer = run_cli({"analyze", "--op", "perplexity", "--config", fix.config,
                                   "--checkpoint", fix.model});
    CHECK(no_scorer.code == 2);

    CliResult chart = run_cli({"analyze", "--op", "perplexity", "--config", fix.config,
                               "--checkpoint", fix.model, "--scorer", uniform_scorer,
                               "--samples", samples_path, "--svg", "/tmp/nope.svg"});
    CHECK(chart.code == 2);

    write_file(samples_path, "0 1 99\n");
    CliResult bad = run_cli({"analyze", "--op", "perplexity", "--config", fix.config,
                             "--checkpoint", fix.model, "--scorer", uniform_scorer, "--samples",
                             samples_path});
    CHECK(bad.code == 4);

    fs::remove(uniform_scorer);
    fs::remove(samples_path);
}

TEST_CASE("flops reports match the library accounting") {
    const CliFixture& fix = trained_fixture();
    const std::string out_path = temp_path("flops") + ".txt";
    CliResult r = run_cli({"flops", "--config", fix.config, "--out", out_path});
    REQUIRE(r.code == 0);
    FlopsReport rep = FlopsReport::parse(r.out);
    CHECK(read_file(out_path) == r.out);

    RunConfig rc = load_run_config(fix.config);
    FlopsReport expect = per_step_flops(rc.model, rc.train.batch_size);
    CHECK(rep.f_layer == expect.f_layer);
    CHECK(rep.f_base == expect.f_base);
    CHECK(rep.f_loop == expect.f_loop);
    CHECK(rep.matched_steps == 0);

    // A model matched against its own cost keeps its step budget.
    CliResult self_match = run_cli({"flops", "--config", fix.config, "--baseline", fix.config});
    REQUIRE(self_match.code == 0);
    CHECK(FlopsReport::parse(self_match.out).matched_steps == rc.train.total_steps);

    // Against a cheaper baseline the matched budget shrinks proportionally.
    const std::string base_cfg = temp_path("baseline_cfg") + ".kv";
    std::string text = fixture_config_text(temp_path("baseline_run"));
    text.replace(text.find("loop.s_max=3"), 12, "loop.s_max=1");
    write_file(base_cfg, text);
    CliResult matched = run_cli({"flops", "--config", fix.config, "--baseline", base_cfg});
    REQUIRE(matched.code == 0);
    RunConfig rb = load_run_config(base_cfg);
    FlopsReport base = per_step_flops(rb.model, rb.train.batch_size);
    const int64_t want =
        int64_t(double(rb.train.total_steps) * double(base.f_loop) / double(expect.f_loop));
    CHECK(FlopsReport::parse(matched.out).matched_steps == want);
    CHECK(want < rb.train.total_steps);

    fs::remove(out_path);
    fs::remove(base_cfg);
}

TEST_CASE("gen-data writes loadable dataset files") {
    const std::string sudoku_cfg = temp_path("gen_sudoku_cfg") + ".kv";
    write_file(sudoku_cfg, "task.name=sudoku4\nmodel.vocab=4\nmodel.seq_len=16\n"
                           "task.givens_fraction=0.5\n");
    const std::string sudoku_path = temp_path("gen_sudoku") + ".bin";
    CliResult sr = run_cli({"gen-data", "--config", sudoku_cfg, "--out", sudoku_path, "--n", "8",
                            "--seed", "3"});
    REQUIRE(sr.code == 0);
    DatasetFile sudoku = load_examples(sudoku_path);
    CHECK(sudoku.task == "sudoku4");
    CHECK(sudoku.meta.get_i64("vocab") == 4);
    CHECK(sudoku.meta.get_i64("grid_size") == 4);
    REQUIRE(sudoku.examples.size() == 8);
    for (const TrainExample& ex : sudoku.examples) {
        REQUIRE(ex.x0.tokens.size() == 16);
        CHECK(sudoku_valid(4, sudoku_cells(ex.x0)));
        bool has_context = false, has_normal = false;
        for (PositionRole role : ex.roles) {
            has_context = has_context || role == PositionRole::context;
            has_normal = has_normal || role == PositionRole::normal;
        }
        CHECK(has_context);
        CHECK(has_normal);
    }

    const std::string clique_cfg = temp_path("gen_clique_cfg") + ".kv";
    write_file(clique_cfg, "task.name=clique\ntask.clique_n=4\ntask.clique_k=2\n"
                           "model.vocab=4\nmodel.seq_len=33\n");
    const std::string clique_path = temp_path("gen_clique") + ".bin";
    CliResult cr = run_cli({"gen-data", "--config", clique_cfg, "--out", clique_path, "--n", "6",
                            "--seed", "5"});
    REQUIRE(cr.code == 0);
    DatasetFile clique = load_examples(clique_path);
    CHECK(clique.task == "clique");
    CHECK(clique.meta.get_i64("n") == 4);
    CHECK(clique.meta.get_i64("k") == 2);
    REQUIRE(clique.examples.size() == 6);
    CHECK(clique.examples[0].x0.tokens.size() == 33);

    // Grammar generation matches the corpus loader stream for the same seed.
    const CliFixture& fix = trained_fixture();
    const std::string grammar_path = temp_path("gen_grammar") + ".bin";
    CliResult gr = run_cli({"gen-data", "--config", fix.config, "--out", grammar_path, "--n", "5",
                            "--seed", "21"});
    REQUIRE(gr.code == 0);
    DatasetFile grammar = load_examples(grammar_path);
    REQUIRE(grammar.examples.size() == 5);
    CorpusConfig cc;
    cc.source = CorpusConfig::Source::synthetic_grammar;
    cc.seed = 21;
    cc.seq_len = 16;
    Corpus corpus = load_corpus(cc, 5);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(grammar.examples[i].x0.tokens == corpus.sequences[i].tokens);

    CliResult zero = run_cli({"gen-data", "--config", sudoku_cfg, "--out", sudoku_path, "--n",
                              "0"});
    CHECK(zero.code == 2);

    fs::remove(sudoku_cfg);
    fs::remove(sudoku_path);
    fs::remove(clique_cfg);
    fs::remove(clique_path);
    fs::remove(grammar_path);
}

TEST_CASE("text task splits a corpus file for training and eval") {
    const std::string text_path = temp_path("text_corpus") + ".txt";
    std::string doc;
    for (int i = 0; i < 40; ++i) doc += (i % 2 == 0 ? "abbaabbaab\n" : "babaabbbaa\n");
    write_file(text_path, doc);

    const std::string cfg = temp_path("text_cfg") + ".kv";
    write_file(cfg, "task.name=text\ntask.text_path=" + text_path + "\ntask.vocab_chars=ab\n"
                    "model.vocab=4\nmodel.seq_len=16\nmodel.d_model=16\nmodel.n_heads=2\n"
                    "loop.n_layers_total=2\nloop.n_m=1\nloop.s_max=2\n");

    ModelConfig tcfg;
    tcfg.vocab = 4;
    tcfg.seq_len = 16;
    tcfg.d_model = 16;
    tcfg.n_heads = 2;
    tcfg.loop.n_layers_total = 2;
    tcfg.loop.loop_start = 0;
    tcfg.loop.n_m = 1;
    tcfg.loop.s_max = 2;
    Rng rng(8);
    const std::string model_path = temp_path("text_model") + ".bin";
    save_model(init_params(tcfg, rng), model_path);

    CliResult r = run_cli({"eval", "--config", cfg, "--checkpoint", model_path, "--loops", "1",
                           "--n", "2"});
    REQUIRE(r.code == 0);
    std::vector<std::string> rows = lines_of(r.out);
    REQUIRE(rows.size() == 2);
    // A fresh model predicts uniformly; each masked position costs ln(vocab)
    // before weighting, and the weighted per-token mean stays finite.
    CHECK(std::stod(fields_of(rows[1])[1]) > 0);

    const std::string data_path = temp_path("text_data") + ".bin";
    CliResult gen = run_cli({"gen-data", "--config", cfg, "--out", data_path, "--n", "4"});
    REQUIRE(gen.code == 0);
    DatasetFile df = load_examples(data_path);
    CHECK(df.task == "text");
    CHECK(df.meta.get_i64("vocab") == 4);
    REQUIRE(df.examples.size() == 4);

    fs::remove(text_path);
    fs::remove(cfg);
    fs::remove(model_path);
    fs::remove(data_path);
}

TEST_CASE("run_threads reads and validates RUN_THREADS") {
    unsetenv("RUN_THREADS");
    CHECK(run_threads() == 1);
    setenv("RUN_THREADS", "4", 1);
    CHECK(run_threads() == 4);
    setenv("RUN_THREADS", "0", 1);
    CHECK_THROWS_AS(run_threads(), ConfigError);
    setenv("RUN_THREADS", "banana", 1);
    CHECK_THROWS_AS(run_threads(), ConfigError);
    setenv("RUN_THREADS", "257", 1);
    CHECK_THROWS_AS(run_threads(), ConfigError);
    unsetenv("RUN_THREADS");
}

TEST_CASE("load_any_model accepts both checkpoint kinds") {
    const CliFixture& fix = trained_fixture();
    ModelParams ema = load_any_model(fix.model);
    ModelParams from_trainer = load_any_model(fix.checkpoint);
    CHECK(ema.cfg.vocab == from_trainer.cfg.vocab);
    CHECK(ema.tok_emb.values() == from_trainer.tok_emb.values());

    const std::string junk = temp_path("junk") + ".bin";
    write_file(junk, "not a checkpoint");
    CHECK_THROWS_AS(load_any_model(junk), IoError);
    fs::remove(junk);
}
