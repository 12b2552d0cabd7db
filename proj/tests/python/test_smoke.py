import math

import numpy as np
import pytest

import loopmdm as lm


def tiny_config(vocab=6, seq_len=12, s_max=3):
    cfg = lm.ModelConfig()
    cfg.vocab = vocab
    cfg.seq_len = seq_len
    cfg.d_model = 16
    cfg.n_heads = 2
    cfg.loop.n_layers_total = 3
    cfg.loop.loop_start = 1
    cfg.loop.n_m = 1
    cfg.loop.s_max = s_max
    return cfg


def all_masked(cfg):
    return lm.TokenSeq(cfg.vocab, [cfg.vocab] * cfg.seq_len)


def random_examples(cfg, n, seed):
    rng = lm.Rng(seed)
    out = []
    for _ in range(n):
        tokens = [int(rng.below(cfg.vocab)) for _ in range(cfg.seq_len)]
        out.append(lm.TrainExample(lm.TokenSeq(cfg.vocab, tokens)))
    return out


def test_version_and_rng():
    assert isinstance(lm.code_version(), str) and lm.code_version()
    assert lm.Rng(5).uniform01() == lm.Rng(5).uniform01()
    assert lm.Rng(5).below(10) < 10


def test_schedule():
    sched = lm.NoiseSchedule()
    assert sched.alpha(0.0) == 1.0
    assert sched.alpha(1.0) == 0.0
    assert lm.nelbo_weight(sched, 0.5) == pytest.approx(2.0)
    assert lm.remain_masked_prob(sched, 0.5, 1.0) == 0.5


def test_initial_prediction_is_uniform():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    logits = lm.forward_logits(params, all_masked(cfg), 0.7, cfg.loop.s_max)
    assert logits.shape == (cfg.seq_len, cfg.vocab)
    assert np.all(logits == 0.0)
    probs = lm.forward_probs(params, all_masked(cfg), 0.7, 1)
    assert np.all(probs == 1.0 / cfg.vocab)


def test_loop_count_changes_nothing_at_identity_init():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    x = lm.forward_mask(
        lm.TokenSeq(cfg.vocab, [1] * cfg.seq_len), lm.NoiseSchedule(), 0.5, lm.Rng(2)
    )
    a = lm.forward_logits(params, x, 0.5, 1)
    b = lm.forward_logits(params, x, 0.5, 4)
    assert np.array_equal(a, b)


def test_nelbo_loss_and_forced_loops():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    lm.randomize_params(params, lm.Rng(2))
    batch = random_examples(cfg, 4, seed=3)
    loss, s = lm.nelbo_loss(params, batch, lm.Rng(4))
    assert math.isfinite(loss) and loss > 0
    assert 1 <= s <= cfg.loop.s_max
    loss2, s2 = lm.nelbo_loss(params, batch, lm.Rng(4), forced_s=2)
    assert s2 == 2
    assert math.isfinite(loss2)


def test_flops_accounting_identity():
    cfg = tiny_config(s_max=3)
    rep = lm.per_step_flops(cfg, 8)
    assert rep.expected_loops == pytest.approx(2.0)
    assert rep.f_loop - rep.f_base == (rep.expected_loops - 1) * cfg.loop.n_m * rep.f_layer
    assert lm.matched_steps(rep, 1000) == 1000 * rep.f_base // rep.f_loop
    assert lm.effective_depth(cfg.loop, 4) == cfg.loop.n_layers_total + 3 * cfg.loop.n_m
    parsed = lm.FlopsReport.parse(rep.serialize())
    assert parsed.f_loop == rep.f_loop


def test_parameter_count_ignores_loop_budget():
    small = tiny_config(s_max=1)
    big = tiny_config(s_max=8)
    p_small = lm.init_params(small, lm.Rng(1))
    p_big = lm.init_params(big, lm.Rng(1))
    assert lm.param_count(p_small) == lm.param_count(p_big)


def test_trainer_steps_and_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    tcfg = lm.TrainConfig()
    tcfg.batch_size = 4
    tcfg.total_steps = 10
    tcfg.learning_rate = 1e-3
    tcfg.warmup_steps = 2
    tcfg.ema_decay = 0.99
    tcfg.seed = 7
    trainer = lm.Trainer(lm.init_params(cfg, lm.Rng(1)), tcfg)
    batch = random_examples(cfg, 4, seed=3)
    flops_seen = 0
    for i in range(3):
        metrics = trainer.train_step(batch)
        assert metrics.step == i + 1
        assert math.isfinite(metrics.loss)
        assert 1 <= metrics.s <= cfg.loop.s_max
        assert metrics.cumulative_flops > flops_seen
        flops_seen = metrics.cumulative_flops
    assert trainer.step() == 3

    path = str(tmp_path / "trainer.bin")
    trainer.save_checkpoint(path)
    resumed = lm.Trainer.load_checkpoint(path)
    assert resumed.step() == 3
    x = all_masked(cfg)
    assert np.array_equal(
        lm.forward_logits(trainer.ema_params(), x, 0.5, 2),
        lm.forward_logits(resumed.ema_params(), x, 0.5, 2),
    )

    model_path = str(tmp_path / "model.bin")
    lm.save_model(trainer.ema_params(), model_path)
    reloaded = lm.load_model(model_path)
    assert np.array_equal(
        lm.forward_logits(trainer.ema_params(), x, 0.5, 2),
        lm.forward_logits(reloaded, x, 0.5, 2),
    )
    assert np.array_equal(
        lm.forward_logits(lm.load_any_model(path), x, 0.5, 2),
        lm.forward_logits(reloaded, x, 0.5, 2),
    )


def test_divergence_raises():
    cfg = tiny_config()
    tcfg = lm.TrainConfig()
    tcfg.batch_size = 4
    tcfg.total_steps = 10
    tcfg.learning_rate = 1e308
    tcfg.warmup_steps = 1
    tcfg.ema_decay = 0.99
    trainer = lm.Trainer(lm.init_params(cfg, lm.Rng(1)), tcfg)
    batch = random_examples(cfg, 4, seed=3)
    with pytest.raises(lm.TrainingDivergedError):
        for _ in range(5):
            trainer.train_step(batch)


def test_generation_completes_and_honors_loops():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    lm.randomize_params(params, lm.Rng(2))

    trajs = lm.generate_batch(
        params, lm.UnmaskPolicy.ancestral(), 6, 2, lm.Rng(9), [all_masked(cfg)] * 3
    )
    assert len(trajs) == 3
    for traj in trajs:
        final = traj.final_sequence()
        assert final.count_masked() == 0
        assert all(0 <= tok < cfg.vocab for tok in final.tokens)
        assert all(step.loops_used == 2 for step in traj.steps)

    eager = lm.AdaptiveLoopPolicy(epsilon=0.0, s_budget=3)
    traj = lm.generate(params, lm.UnmaskPolicy.topk(2), 6, eager, lm.Rng(9))
    assert all(step.loops_used == 3 for step in traj.steps)
    lazy = lm.AdaptiveLoopPolicy(epsilon=1e30, s_budget=3)
    traj = lm.generate(params, lm.UnmaskPolicy.topk(2), 6, lazy, lm.Rng(9))
    assert all(step.loops_used == 1 for step in traj.steps)
    assert lm.mean_loops([traj]) == 1.0

    profile = lm.loop_allocation_profile([traj], 4)
    assert profile.n_bins() == 4
    assert sum(profile.counts) == len(traj.steps)


def test_prompt_positions_survive_generation():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    lm.randomize_params(params, lm.Rng(2))
    tokens = [cfg.vocab] * cfg.seq_len
    tokens[0], tokens[5] = 3, 1
    prompt = lm.TokenSeq(cfg.vocab, tokens)
    traj = lm.generate(params, lm.UnmaskPolicy.ancestral(), 5, 2, lm.Rng(4), prompt)
    final = traj.final_sequence()
    assert final.tokens[0] == 3 and final.tokens[5] == 1


def test_sudoku_task():
    instances = lm.gen_sudoku(4, 3, 0.5, lm.Rng(11))
    assert len(instances) == 3
    for inst in instances:
        assert lm.sudoku_valid(4, inst.solution)
        assert lm.sudoku_count_solutions(4, inst.givens) == 1
        ex = lm.sudoku_example(inst)
        assert lm.sudoku_cells(ex.x0) == inst.solution
        roles = ex.roles
        assert lm.PositionRole.context in roles and lm.PositionRole.normal in roles
        prompt = lm.sudoku_prompt(inst)
        assert prompt.count_masked() == sum(1 for g in inst.givens if g == 0)


def test_clique_task():
    instances = lm.gen_clique(4, 2, 4, 0.5, lm.Rng(12))
    assert len(instances) == 4
    for inst in instances:
        assert inst.label == int(lm.has_k_clique(inst.adjacency, inst.n, inst.k))
        ex = lm.clique_example(inst)
        assert len(ex.x0.tokens) == 4 * 4 + 4**2 + 1
        assert ex.x0.vocab == lm.CLIQUE_VOCAB
        answer = ex.x0.tokens[-1]
        assert answer == (3 if inst.label else 2)  # value-1 vs value-0 tokens


def test_grammar_corpus_and_dataset_files(tmp_path):
    cc = lm.CorpusConfig()
    cc.source = lm.CorpusConfig.Source.synthetic_grammar
    cc.seed = 21
    cc.seq_len = 16
    corpus = lm.load_corpus(cc, 5)
    assert corpus.vocab_size == lm.grammar_vocab()
    assert len(corpus.sequences) == 5
    assert all(len(seq) == 16 for seq in corpus.sequences)
    assert lm.grammar_entropy_rate() > 0

    examples = [lm.TrainExample(seq) for seq in corpus.sequences]
    path = str(tmp_path / "data.bin")
    lm.save_examples(path, "grammar", {"seq_len": "16"}, examples)
    loaded = lm.load_examples(path)
    assert loaded.task == "grammar"
    assert loaded.meta["vocab"] == str(lm.grammar_vocab())
    assert loaded.meta["seq_len"] == "16"
    assert [ex.x0.tokens for ex in loaded.examples] == [s.tokens for s in corpus.sequences]


def test_uniform_scorer_perplexity_is_vocab_size():
    cfg = tiny_config(vocab=8, seq_len=16)
    scorer = lm.init_params(cfg, lm.Rng(4))
    cc = lm.CorpusConfig()
    cc.seed = 3
    cc.seq_len = 16
    generated = lm.load_corpus(cc, 4).sequences
    assert lm.generative_perplexity(generated, scorer) == pytest.approx(8.0, abs=1e-11)


def test_analysis_profiles():
    cfg = tiny_config()
    params = lm.init_params(cfg, lm.Rng(1))
    eval_set = [ex.x0 for ex in random_examples(cfg, 6, seed=5)]

    stats = lm.mask_attention_profile(params, eval_set, 0.5, [1, 2], seed=9)
    assert len(stats) == 3  # one application at S=1, two at S=2
    assert all(0.0 <= st.mass <= 1.0 for st in stats)

    profile = lm.timestep_gain_profile(params, eval_set, [1, 2], 4, seed=9)
    assert profile.n_bins() == 4
    populated = [b for b in range(4) if profile.counts[b] > 0]
    assert populated
    for b in populated:
        assert profile.gain_at(b, 0) == 0.0  # the S=1 baseline against itself
        assert profile.nll_at(b, 0) == pytest.approx(math.log(cfg.vocab), abs=1e-12)

    svg = lm.svg_line_chart(
        "gain", "t", "nats", [lm.ChartSeries("S=2", [0.1, 0.5, 0.9], [0.0, 0.1, 0.2])]
    )
    assert svg.startswith("<svg")


def test_error_mapping():
    cfg = tiny_config()
    cfg.n_heads = 5  # does not divide d_model
    with pytest.raises(ValueError):
        cfg.validate()
    with pytest.raises(RuntimeError):
        lm.load_model("/nonexistent/model.bin")
    with pytest.raises(RuntimeError):
        lm.TokenSeq(4, [0, 9])
