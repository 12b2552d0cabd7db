#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "loopmdm/analysis.hpp"
#include "loopmdm/cli.hpp"
#include "loopmdm/sampler.hpp"
#include "loopmdm/tasks.hpp"

namespace py = pybind11;
using namespace loopmdm;

namespace {

py::array_t<double> logits_array(const ModelParams& p, const Tensor& logits) {
    const auto v = std::size_t(p.cfg.vocab);
    const std::size_t rows = logits.size() / v;
    py::array_t<double> out({rows, v});
    std::copy(logits.values().begin(), logits.values().end(), out.mutable_data());
    return out;
}

KvMap kv_from_dict(const py::dict& d) {
    KvMap kv;
    for (auto item : d)
        kv.set(py::cast<std::string>(item.first), py::cast<std::string>(item.second));
    return kv;
}

py::dict dict_from_kv(const KvMap& kv) {
    py::dict d;
    for (const auto& [key, value] : kv.entries()) d[py::str(key)] = py::str(value);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Looped masked diffusion core: model, training, sampling, tasks, analysis";

    m.def("code_version", &code_version, "Build-time source id");

    // ---- randomness ----

    py::class_<Rng>(m, "Rng", "xoshiro256** stream, reproducible across platforms")
        .def(py::init<uint64_t>(), py::arg("seed"))
        .def("uniform01", &Rng::uniform01)
        .def("below", &Rng::below, py::arg("n"))
        .def("gauss", &Rng::gauss)
        .def("split", &Rng::split);

    // ---- diffusion process ----

    py::enum_<ScheduleKind>(m, "ScheduleKind").value("linear", ScheduleKind::linear);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def(py::init<>())
        .def_readwrite("kind", &NoiseSchedule::kind)
        .def("alpha", &NoiseSchedule::alpha, py::arg("t"))
        .def("alpha_prime", &NoiseSchedule::alpha_prime, py::arg("t"));

    m.def("nelbo_weight", &nelbo_weight, py::arg("sched"), py::arg("t"));
    m.def("remain_masked_prob", &remain_masked_prob, py::arg("sched"), py::arg("s"), py::arg("t"));
    m.def("sample_time", &sample_time, py::arg("rng"), py::arg("t_min") = real(1e-3));

    py::class_<TokenSeq>(m, "TokenSeq", "Fixed-length tokens over {0..vocab}; id vocab is the mask")
        .def(py::init([](int32_t vocab, std::vector<int32_t> tokens) {
                 TokenSeq s;
                 s.vocab = vocab;
                 s.tokens = std::move(tokens);
                 s.validate();
                 return s;
             }),
             py::arg("vocab"), py::arg("tokens"))
        .def_readwrite("vocab", &TokenSeq::vocab)
        .def_readwrite("tokens", &TokenSeq::tokens)
        .def("mask_id", &TokenSeq::mask_id)
        .def("count_masked", &TokenSeq::count_masked)
        .def("__len__", &TokenSeq::length)
        .def("__repr__", [](const TokenSeq& s) {
            return "TokenSeq(vocab=" + std::to_string(s.vocab) + ", len=" +
                   std::to_string(s.length()) + ")";
        });

    m.def("forward_mask", &forward_mask, py::arg("x0"), py::arg("sched"), py::arg("t"),
          py::arg("rng"), "Independently mask each token with probability 1 - alpha(t)");

    py::class_<UnmaskPolicy> policy(m, "UnmaskPolicy");
    py::enum_<UnmaskPolicy::Kind>(policy, "Kind")
        .value("ancestral_random", UnmaskPolicy::Kind::ancestral_random)
        .value("topk_confidence", UnmaskPolicy::Kind::topk_confidence)
        .value("fixed_left_to_right", UnmaskPolicy::Kind::fixed_left_to_right);
    policy.def_readonly("kind", &UnmaskPolicy::kind)
        .def_readonly("k", &UnmaskPolicy::k)
        .def_static("ancestral", &UnmaskPolicy::ancestral)
        .def_static("topk", &UnmaskPolicy::topk, py::arg("k"))
        .def_static("left_to_right", &UnmaskPolicy::left_to_right, py::arg("tokens_per_step"));

    // ---- model ----

    py::enum_<LoopSampler>(m, "LoopSampler")
        .value("uniform", LoopSampler::uniform)
        .value("fixed", LoopSampler::fixed)
        .value("lognormal_poisson", LoopSampler::lognormal_poisson);

    py::class_<LoopConfig>(m, "LoopConfig",
                           "Layer partition: head [0, loop_start), shared mid-block of n_m "
                           "layers looped S times, then the tail")
        .def(py::init<>())
        .def_readwrite("n_layers_total", &LoopConfig::n_layers_total)
        .def_readwrite("loop_start", &LoopConfig::loop_start)
        .def_readwrite("n_m", &LoopConfig::n_m)
        .def_readwrite("s_max", &LoopConfig::s_max)
        .def_readwrite("loop_sampler", &LoopConfig::loop_sampler)
        .def_readwrite("fixed_s", &LoopConfig::fixed_s)
        .def_readwrite("lognormal_mu", &LoopConfig::lognormal_mu)
        .def_readwrite("lognormal_sigma", &LoopConfig::lognormal_sigma)
        .def_readwrite("mask_noise_std", &LoopConfig::mask_noise_std)
        .def("validate", &LoopConfig::validate);

    m.def("effective_depth", &effective_depth, py::arg("loop"), py::arg("s"));
    m.def("sample_loop_count", &sample_loop_count, py::arg("loop"), py::arg("rng"));

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("vocab", &ModelConfig::vocab)
        .def_readwrite("seq_len", &ModelConfig::seq_len)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("loop", &ModelConfig::loop)
        .def("d_mlp", &ModelConfig::d_mlp)
        .def("validate", &ModelConfig::validate);

    py::class_<ModelParams>(m, "ModelParams", "All learnable state; loop sharing is physical")
        .def_readonly("cfg", &ModelParams::cfg);

    m.def("init_params", &init_params, py::arg("cfg"), py::arg("rng"),
          "Truncated-normal weights with identity blocks: the initial prediction is uniform");
    m.def("randomize_params", &randomize_params, py::arg("params"), py::arg("rng"),
          py::arg("stddev") = real(0.05));
    m.def("param_count", &param_count, py::arg("params"));
    m.def("layer_param_count", &layer_param_count, py::arg("cfg"));
    m.def("total_param_count", &total_param_count, py::arg("cfg"));

    m.def(
        "forward_logits",
        [](const ModelParams& p, const TokenSeq& x_t, real t, int32_t s) {
            ForwardRecord rec;
            {
                py::gil_scoped_release release;
                rec = forward(p, x_t, t, s);
            }
            return logits_array(p, rec.logits);
        },
        py::arg("params"), py::arg("x_t"), py::arg("t"), py::arg("s"),
        "Per-position logits [seq_len x vocab] at loop count s");
    m.def(
        "forward_probs",
        [](const ModelParams& p, const TokenSeq& x_t, real t, int32_t s) {
            Tensor probs_t;
            {
                py::gil_scoped_release release;
                ForwardRecord rec = forward(p, x_t, t, s);
                probs_t = rec.logits;
                probs_t.values() = probs_from_logits(rec.logits);
            }
            return logits_array(p, probs_t);
        },
        py::arg("params"), py::arg("x_t"), py::arg("t"), py::arg("s"),
        "Row-wise softmax of forward_logits");

    // ---- training ----

    py::enum_<PositionRole>(m, "PositionRole")
        .value("normal", PositionRole::normal)
        .value("context", PositionRole::context)
        .value("pause", PositionRole::pause);

    py::class_<TrainExample>(m, "TrainExample")
        .def(py::init([](TokenSeq x0, std::vector<PositionRole> roles) {
                 TrainExample ex;
                 ex.x0 = std::move(x0);
                 ex.roles = std::move(roles);
                 return ex;
             }),
             py::arg("x0"), py::arg("roles") = std::vector<PositionRole>{})
        .def_readwrite("x0", &TrainExample::x0)
        .def_readwrite("roles", &TrainExample::roles);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("total_steps", &TrainConfig::total_steps)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("ema_decay", &TrainConfig::ema_decay)
        .def_readwrite("grad_clip", &TrainConfig::grad_clip)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("flops_match_baseline", &TrainConfig::flops_match_baseline)
        .def("validate", &TrainConfig::validate);

    m.def(
        "nelbo_loss",
        [](const ModelParams& p, const std::vector<TrainExample>& batch, Rng& rng,
           int32_t forced_s) {
            int32_t s_used = 0;
            real loss = 0;
            {
                py::gil_scoped_release release;
                loss = nelbo_loss(p, batch, rng, &s_used, nullptr, forced_s).item();
            }
            return py::make_tuple(loss, s_used);
        },
        py::arg("params"), py::arg("batch"), py::arg("rng"), py::arg("forced_s") = 0,
        "Masked diffusion loss for one batch; returns (loss, loop_count)");

    py::class_<StepMetrics>(m, "StepMetrics")
        .def_readonly("step", &StepMetrics::step)
        .def_readonly("loss", &StepMetrics::loss)
        .def_readonly("lr", &StepMetrics::lr)
        .def_readonly("s", &StepMetrics::s)
        .def_readonly("grad_norm", &StepMetrics::grad_norm)
        .def_readonly("cumulative_flops", &StepMetrics::cumulative_flops);

    py::register_exception<TrainingDiverged>(m, "TrainingDivergedError", PyExc_RuntimeError);

    py::class_<Trainer>(m, "Trainer")
        .def(py::init<ModelParams, TrainConfig>(), py::arg("params"), py::arg("config"))
        .def("train_step", &Trainer::train_step, py::arg("batch"),
             py::call_guard<py::gil_scoped_release>())
        .def("step", &Trainer::step)
        .def("lr_at", &Trainer::lr_at, py::arg("step"))
        .def("planned_steps", &Trainer::planned_steps)
        .def("cumulative_flops", &Trainer::cumulative_flops)
        .def("params", [](const Trainer& tr) { return tr.params(); })
        .def("ema_params", &Trainer::ema_params)
        .def("save_checkpoint", &Trainer::save_checkpoint, py::arg("path"))
        .def_static("load_checkpoint", &Trainer::load_checkpoint, py::arg("path"));

    m.def("save_model", &save_model, py::arg("params"), py::arg("path"));
    m.def("load_model", &load_model, py::arg("path"));
    m.def("load_any_model", &load_any_model, py::arg("path"),
          "Plain model container or trainer checkpoint (EMA weights)");

    py::class_<FlopsReport>(m, "FlopsReport", "6 * params * tokens accounting for one step")
        .def_readonly("f_layer", &FlopsReport::f_layer)
        .def_readonly("f_base", &FlopsReport::f_base)
        .def_readonly("f_loop", &FlopsReport::f_loop)
        .def_readonly("expected_loops", &FlopsReport::expected_loops)
        .def_readonly("n_m", &FlopsReport::n_m)
        .def_readonly("s_max", &FlopsReport::s_max)
        .def_readonly("tokens_per_step", &FlopsReport::tokens_per_step)
        .def_readonly("params_total", &FlopsReport::params_total)
        .def_readonly("params_layer", &FlopsReport::params_layer)
        .def_readonly("params_outside", &FlopsReport::params_outside)
        .def_readonly("matched_steps", &FlopsReport::matched_steps)
        .def("serialize", &FlopsReport::serialize)
        .def_static("parse", &FlopsReport::parse, py::arg("text"));

    m.def("per_step_flops", &per_step_flops, py::arg("cfg"), py::arg("batch_size"));
    m.def("matched_steps", &matched_steps, py::arg("report"), py::arg("baseline_steps"));
    m.def("step_flops", &step_flops, py::arg("report"), py::arg("s"));

    // ---- sampling ----

    py::class_<AdaptiveLoopPolicy> adaptive(m, "AdaptiveLoopPolicy",
                                            "Loop until the relative hidden-state change drops "
                                            "below epsilon or the budget runs out");
    py::enum_<AdaptiveLoopPolicy::NormScope>(adaptive, "NormScope")
        .value("all_positions", AdaptiveLoopPolicy::NormScope::all_positions)
        .value("masked_only", AdaptiveLoopPolicy::NormScope::masked_only);
    adaptive
        .def(py::init([](real epsilon, int32_t s_budget, AdaptiveLoopPolicy::NormScope scope) {
                 AdaptiveLoopPolicy ap;
                 ap.epsilon = epsilon;
                 ap.s_budget = s_budget;
                 ap.norm_scope = scope;
                 ap.validate();
                 return ap;
             }),
             py::arg("epsilon"), py::arg("s_budget"),
             py::arg("norm_scope") = AdaptiveLoopPolicy::NormScope::all_positions)
        .def_readwrite("epsilon", &AdaptiveLoopPolicy::epsilon)
        .def_readwrite("s_budget", &AdaptiveLoopPolicy::s_budget)
        .def_readwrite("norm_scope", &AdaptiveLoopPolicy::norm_scope);

    py::class_<SampleStep>(m, "SampleStep")
        .def_readonly("index", &SampleStep::index)
        .def_readonly("t", &SampleStep::t)
        .def_readonly("loops_used", &SampleStep::loops_used)
        .def_readonly("snapshot", &SampleStep::snapshot)
        .def_readonly("committed_positions", &SampleStep::committed_positions)
        .def_readonly("committed_tokens", &SampleStep::committed_tokens)
        .def_readonly("confidences", &SampleStep::confidences);

    py::class_<Trajectory>(m, "Trajectory")
        .def_readonly("steps", &Trajectory::steps)
        .def("final_sequence", &Trajectory::final_sequence)
        .def("export_lines", &Trajectory::export_lines);

    m.def(
        "generate",
        [](const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps, int32_t s, Rng& rng,
           const TokenSeq* prompt) {
            py::gil_scoped_release release;
            return generate(p, policy, n_steps, s, rng, prompt);
        },
        py::arg("params"), py::arg("policy"), py::arg("n_steps"), py::arg("s"), py::arg("rng"),
        py::arg("prompt") = nullptr);
    m.def(
        "generate",
        [](const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps,
           const AdaptiveLoopPolicy& ap, Rng& rng, const TokenSeq* prompt) {
            py::gil_scoped_release release;
            return generate(p, policy, n_steps, ap, rng, prompt);
        },
        py::arg("params"), py::arg("policy"), py::arg("n_steps"), py::arg("adaptive"),
        py::arg("rng"), py::arg("prompt") = nullptr);
    m.def(
        "generate_batch",
        [](const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps, int32_t s, Rng& rng,
           const std::vector<TokenSeq>& prompts) {
            py::gil_scoped_release release;
            return generate_batch(p, policy, n_steps, s, rng, prompts);
        },
        py::arg("params"), py::arg("policy"), py::arg("n_steps"), py::arg("s"), py::arg("rng"),
        py::arg("prompts"));
    m.def(
        "generate_batch",
        [](const ModelParams& p, const UnmaskPolicy& policy, int32_t n_steps,
           const AdaptiveLoopPolicy& ap, Rng& rng, const std::vector<TokenSeq>& prompts) {
            py::gil_scoped_release release;
            return generate_batch(p, policy, n_steps, ap, rng, prompts);
        },
        py::arg("params"), py::arg("policy"), py::arg("n_steps"), py::arg("adaptive"),
        py::arg("rng"), py::arg("prompts"));
    m.def("mean_loops", &mean_loops, py::arg("trajectories"));

    // ---- tasks ----

    py::class_<SudokuInstance>(m, "SudokuInstance")
        .def_readonly("grid_size", &SudokuInstance::grid_size)
        .def_readonly("givens", &SudokuInstance::givens)
        .def_readonly("solution", &SudokuInstance::solution);

    m.def("sudoku_valid", &sudoku_valid, py::arg("grid_size"), py::arg("cells"));
    m.def("sudoku_count_solutions", &sudoku_count_solutions, py::arg("grid_size"),
          py::arg("givens"), py::arg("limit") = 2);
    m.def("gen_sudoku", &gen_sudoku, py::arg("grid_size"), py::arg("n_instances"),
          py::arg("givens_fraction"), py::arg("rng"), py::call_guard<py::gil_scoped_release>());
    m.def("sudoku_example", &sudoku_example, py::arg("instance"));
    m.def("sudoku_prompt", &sudoku_prompt, py::arg("instance"));
    m.def("sudoku_cells", &sudoku_cells, py::arg("seq"));
    m.def("solve_rate", &solve_rate, py::arg("outputs"), py::arg("instances"));

    m.attr("CLIQUE_VOCAB") = kCliqueVocab;
    py::class_<CliqueInstance>(m, "CliqueInstance")
        .def_readonly("n", &CliqueInstance::n)
        .def_readonly("k", &CliqueInstance::k)
        .def_readonly("adjacency", &CliqueInstance::adjacency)
        .def_readonly("label", &CliqueInstance::label);

    m.def("has_k_clique", &has_k_clique, py::arg("adjacency"), py::arg("n"), py::arg("k"));
    m.def("gen_clique", &gen_clique, py::arg("n"), py::arg("k"), py::arg("n_instances"),
          py::arg("planted_fraction"), py::arg("rng"),
          py::arg("workspace_cap") = kCliqueWorkspaceCap,
          py::call_guard<py::gil_scoped_release>());
    m.def("clique_example", &clique_example, py::arg("instance"),
          py::arg("workspace_supervision") = true, py::arg("padding_free") = false);
    m.def("clique_prompt", &clique_prompt, py::arg("instance"), py::arg("padding_free") = false);
    m.def("clique_accuracy", &clique_accuracy, py::arg("outputs"), py::arg("instances"));

    py::class_<CorpusConfig> corpus_cfg(m, "CorpusConfig");
    py::enum_<CorpusConfig::Source>(corpus_cfg, "Source")
        .value("synthetic_grammar", CorpusConfig::Source::synthetic_grammar)
        .value("text_file", CorpusConfig::Source::text_file);
    corpus_cfg.def(py::init<>())
        .def_readwrite("source", &CorpusConfig::source)
        .def_readwrite("seed", &CorpusConfig::seed)
        .def_readwrite("path", &CorpusConfig::path)
        .def_readwrite("vocab_chars", &CorpusConfig::vocab_chars)
        .def_readwrite("seq_len", &CorpusConfig::seq_len)
        .def("validate", &CorpusConfig::validate);

    py::class_<Corpus>(m, "Corpus")
        .def_readonly("sequences", &Corpus::sequences)
        .def_readonly("vocab_size", &Corpus::vocab_size)
        .def_readonly("sep_token", &Corpus::sep_token)
        .def_readonly("oov_token", &Corpus::oov_token)
        .def_readonly("oov_count", &Corpus::oov_count);

    m.def("load_corpus", &load_corpus, py::arg("cfg"), py::arg("n_sequences") = -1,
          py::call_guard<py::gil_scoped_release>());
    m.def("grammar_vocab", &grammar_vocab);
    m.def("grammar_sep_token", &grammar_sep_token);
    m.def("grammar_entropy_rate", &grammar_entropy_rate, "Nats per token");

    py::class_<DatasetFile>(m, "DatasetFile")
        .def_readonly("task", &DatasetFile::task)
        .def_property_readonly("meta", [](const DatasetFile& df) { return dict_from_kv(df.meta); })
        .def_readonly("examples", &DatasetFile::examples);

    m.def(
        "save_examples",
        [](const std::string& path, const std::string& task, const py::dict& meta,
           const std::vector<TrainExample>& examples) {
            save_examples(path, task, kv_from_dict(meta), examples);
        },
        py::arg("path"), py::arg("task"), py::arg("meta"), py::arg("examples"));
    m.def("load_examples", &load_examples, py::arg("path"));

    // ---- analysis ----

    py::class_<AttentionStats>(m, "AttentionStats")
        .def_readonly("s", &AttentionStats::s)
        .def_readonly("layer", &AttentionStats::layer)
        .def_readonly("loop", &AttentionStats::loop)
        .def_readonly("mass", &AttentionStats::mass)
        .def_readonly("n_samples", &AttentionStats::n_samples)
        .def_readonly("n_skipped", &AttentionStats::n_skipped);

    m.def("mask_attention_profile", &mask_attention_profile, py::arg("params"),
          py::arg("eval_set"), py::arg("t"), py::arg("s_list"), py::arg("seed"),
          py::call_guard<py::gil_scoped_release>(),
          "Mean masked-query to masked-key attention mass per mid-block application");

    py::class_<TimestepProfile>(m, "TimestepProfile")
        .def_readonly("bin_lo", &TimestepProfile::bin_lo)
        .def_readonly("bin_hi", &TimestepProfile::bin_hi)
        .def_readonly("bin_t", &TimestepProfile::bin_t)
        .def_readonly("s_list", &TimestepProfile::s_list)
        .def_readonly("counts", &TimestepProfile::counts)
        .def_readonly("nll", &TimestepProfile::nll)
        .def_readonly("gain", &TimestepProfile::gain)
        .def("n_bins", &TimestepProfile::n_bins)
        .def("nll_at", &TimestepProfile::nll_at, py::arg("bin"), py::arg("s_index"))
        .def("gain_at", &TimestepProfile::gain_at, py::arg("bin"), py::arg("s_index"));

    m.def("timestep_gain_profile", &timestep_gain_profile, py::arg("params"), py::arg("eval_set"),
          py::arg("s_list"), py::arg("n_bins"), py::arg("seed"),
          py::call_guard<py::gil_scoped_release>(),
          "Masked NLL per timestep bin and loop count, plus the gain over S=1");

    py::class_<LoopAllocationProfile>(m, "LoopAllocationProfile")
        .def_readonly("bin_lo", &LoopAllocationProfile::bin_lo)
        .def_readonly("bin_hi", &LoopAllocationProfile::bin_hi)
        .def_readonly("mean_loops", &LoopAllocationProfile::mean_loops)
        .def_readonly("counts", &LoopAllocationProfile::counts)
        .def("n_bins", &LoopAllocationProfile::n_bins);

    m.def("loop_allocation_profile", &loop_allocation_profile, py::arg("trajectories"),
          py::arg("n_bins"), "Mean adaptive loops per pre-transition timestep bin");

    m.def("generative_perplexity", &generative_perplexity, py::arg("generated"),
          py::arg("scorer"), py::arg("s") = 0, py::call_guard<py::gil_scoped_release>(),
          "Leave-one-out perplexity of generated sequences under a frozen scorer");

    py::class_<ChartSeries>(m, "ChartSeries")
        .def(py::init([](std::string label, std::vector<real> x, std::vector<real> y) {
                 ChartSeries cs;
                 cs.label = std::move(label);
                 cs.x = std::move(x);
                 cs.y = std::move(y);
                 return cs;
             }),
             py::arg("label"), py::arg("x"), py::arg("y"))
        .def_readwrite("label", &ChartSeries::label)
        .def_readwrite("x", &ChartSeries::x)
        .def_readwrite("y", &ChartSeries::y);

    m.def("svg_line_chart", &svg_line_chart, py::arg("title"), py::arg("x_label"),
          py::arg("y_label"), py::arg("series"));
}
