import json

import numpy as np
import pytest

from amdvrp import checkpoint as ckpt
from amdvrp.autodiff import weighted_logprob_grad
from amdvrp.instance import generate_instance
from amdvrp.params import Architecture, ModelParams
from amdvrp.rollout import GREEDY, SAMPLE, logprob_of, run_batch, sample_uniforms
from amdvrp.trainer import (
    ConfigError,
    OptimizerState,
    TrainConfig,
    adam_step,
    batch_gradient,
    clip_grad_norm,
    eval_instances,
    evaluate,
    train,
)


def small_config(tmp_path, **kw):
    base = dict(n=5, capacity=10, epochs=1, steps_per_epoch=2, batch_size=2, d_h=8,
                n_layers=1, n_heads=2, eval_count=5, checkpoint_dir=str(tmp_path / "ck"),
                metrics_path=str(tmp_path / "metrics.jsonl"))
    base.update(kw)
    return TrainConfig(**base)


# -- Adam --


def test_adam_zero_gradient_keeps_parameters(tiny_params):
    state = OptimizerState.zeros_like(tiny_params)
    new, state = adam_step(tiny_params, tiny_params.zeros_like(), state, 1e-3)
    assert new == tiny_params and state.step == 1


def test_adam_first_step_is_lr_times_sign(tiny_params):
    gen = np.random.default_rng(0)
    g = ModelParams(tiny_params.arch, {p: gen.normal(size=a.shape) for p, a in tiny_params.items()})
    new, _ = adam_step(tiny_params, g, OptimizerState.zeros_like(tiny_params), 1e-3)
    delta = new.flatten() - tiny_params.flatten()
    np.testing.assert_allclose(delta, -1e-3 * np.sign(g.flatten()), rtol=1e-4, atol=1e-10)


def test_adam_is_deterministic_and_pure(tiny_params):
    g = tiny_params.copy()
    before = tiny_params.flatten().copy()
    s = OptimizerState.zeros_like(tiny_params)
    a, sa = adam_step(tiny_params, g, s, 1e-2)
    b, sb = adam_step(tiny_params, g, s, 1e-2)
    assert a.flatten().tobytes() == b.flatten().tobytes()
    assert s.step == 0 and np.array_equal(tiny_params.flatten(), before)
    a2, _ = adam_step(a, g, sa, 1e-2)
    assert a2 != a


def test_adam_rejects_non_finite(tiny_params):
    g = tiny_params.zeros_like()
    g.tensors["decoder.output.W_K"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="decoder.output.W_K"):
        adam_step(tiny_params, g, OptimizerState.zeros_like(tiny_params), 1e-3)


def test_clip_grad_norm(tiny_params):
    g = tiny_params.copy()
    norm = np.linalg.norm(g.flatten())
    clipped, total = clip_grad_norm(g, norm / 2)
    assert total == pytest.approx(norm)
    assert np.linalg.norm(clipped.flatten()) == pytest.approx(norm / 2)
    same, _ = clip_grad_norm(g, norm * 2)
    assert same is g


# -- policy gradient --


def test_batch_gradient_zero_when_no_choice(tiny_params):
    insts = [generate_instance(1, 10, s) for s in range(4)]
    g, stats = batch_gradient(insts, tiny_params)
    assert stats["mean_advantage"] == 0.0
    assert not np.any(g.flatten())


def test_batch_gradient_matches_weighted_sum(tiny_params):
    insts = [generate_instance(6, 10, s) for s in range(6)]
    g, stats = batch_gradient(insts, tiny_params, seed=3, keys=(7,))
    unif = sample_uniforms(3, 6, 12, (7,))
    s = run_batch(insts, tiny_params, tiny_params.arch, SAMPLE, uniforms=unif)
    gr = run_batch(insts, tiny_params, tiny_params.arch, GREEDY)
    adv = s.lengths() - gr.lengths()
    assert stats["mean_advantage"] == pytest.approx(adv.mean(), abs=1e-12)
    assert stats["mean_advantage"] == pytest.approx(
        stats["mean_sample_len"] - stats["mean_greedy_len"], abs=1e-12
    )
    _, ref = weighted_logprob_grad(insts, tiny_params, s.visits, adv / 6)
    np.testing.assert_allclose(g.flatten(), ref.flatten(), rtol=1e-10, atol=1e-14)


def test_step_on_better_sample_raises_its_probability(tiny_params):
    found = 0
    for s in range(200):
        inst = generate_instance(6, 10, s)
        unif = sample_uniforms(0, 1, 12, (s,))
        samp = run_batch([inst], tiny_params, tiny_params.arch, SAMPLE, uniforms=unif)
        greedy = run_batch([inst], tiny_params, tiny_params.arch, GREEDY)
        if not samp.lengths()[0] < greedy.lengths()[0] - 1e-6:
            continue
        g, stats = batch_gradient([inst], tiny_params, seed=0, keys=(s,))
        assert stats["mean_advantage"] < 0
        new, _ = adam_step(tiny_params, g, OptimizerState.zeros_like(tiny_params), 1e-5)
        before = logprob_of(inst, tiny_params, samp.visits[0])
        assert logprob_of(inst, new, samp.visits[0]) > before
        found += 1
        if found == 3:
            break
    assert found == 3


# -- training loop --


def test_train_smoke(tmp_path):
    cfg = small_config(tmp_path)
    res = train(cfg)
    assert len(res.metrics) == 2 and len(res.checkpoints) == 1
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert [r["step"] for r in recs] == [1, 2]
    assert set(recs[0]) == {"step", "epoch", "mean_sample_len", "mean_greedy_len",
                            "mean_advantage", "wallclock_s"}
    assert res.checkpoints[0].name == "epoch-001.amd"
    assert len(res.heldout) == 2


def test_train_bitwise_reproducible(tmp_path):
    a = train(small_config(tmp_path / "a", steps_per_epoch=3))
    b = train(small_config(tmp_path / "b", steps_per_epoch=3))
    assert a.checkpoints[0].read_bytes() == b.checkpoints[0].read_bytes()
    c = train(small_config(tmp_path / "c", steps_per_epoch=3, seed=1))
    assert a.checkpoints[0].read_bytes() != c.checkpoints[0].read_bytes()


def test_evaluate_matches_trainer_heldout(tmp_path):
    cfg = small_config(tmp_path)
    res = train(cfg)
    ev = evaluate(res.checkpoints[0], cfg.n, cfg.eval_count, seed=cfg.eval_seed,
                  capacity=cfg.capacity)
    assert ev.mean == res.heldout[-1][1]


def test_evaluate_cross_size(tmp_path):
    P = ModelParams.initialize(Architecture(8, 1, 2), 0)
    path = tmp_path / "m.amd"
    ckpt.save(path, P)
    a = evaluate(path, 50, 3, seed=5)
    b = evaluate(path, 50, 3, seed=5)
    assert a.lengths.shape == (3,) and np.array_equal(a.lengths, b.lengths)
    with pytest.raises(ValueError):
        evaluate(path, 20, 0)
    with pytest.raises(ckpt.CheckpointError):
        evaluate(path, 20, 1, arch=Architecture(16, 1, 2))


def test_eval_instances_seeded():
    a = eval_instances(20, 3, 100)
    assert a[1] == generate_instance(20, 30, 101)


# -- checkpoints --


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "p.amd"
    ckpt.save(path, tiny_params)
    back = ckpt.load(path, expect=tiny_params.arch)
    assert back == tiny_params.as_float32()
    assert path.read_bytes()[:4] == b"AMD1"
    assert ckpt.dumps(back) == path.read_bytes()


def test_checkpoint_detects_corruption(tiny_params):
    data = bytearray(ckpt.dumps(tiny_params))
    data[100] ^= 1
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.loads(bytes(data))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"XXXX" + bytes(data[4:]))


# -- configuration --


def test_config_defaults_follow_problem_size():
    assert TrainConfig(n=20).capacity == 30 and TrainConfig(n=20).batch_size == 128
    big = TrainConfig(n=100)
    assert (big.capacity, big.batch_size, big.lr) == (50, 108, 5e-5)
    assert TrainConfig(n=7).capacity == 30


def test_config_text_round_trip():
    cfg = TrainConfig.from_text("# comment\nn = 7\ncapacity = 20  # inline\nreencode = never\n")
    assert (cfg.n, cfg.capacity, cfg.reencode) == (7, 20, "never")
    assert TrainConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text,line,key",
    [
        ("capacity = 20\n", None, "n"),
        ("n = 7\nbogus = 1\n", 2, "bogus"),
        ("n = 7\nlr = fast\n", 2, "lr"),
        ("n = 7\nn = 8\n", 2, "n"),
        ("n = 7\n\ncapacity = 4\n", 3, "capacity"),
        ("n = 7\njust words\n", 2, None),
    ],
)
def test_config_errors(text, line, key):
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_text(text)
    assert info.value.line == line and info.value.key == key
    if key == "n":
        assert "'n'" in str(info.value)
