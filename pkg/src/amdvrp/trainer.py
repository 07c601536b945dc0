"""REINFORCE training with a greedy-rollout baseline, Adam updates and evaluation."""

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import rng as _rng
from .instance import default_capacity, generate_batch, generate_instance
from .params import Architecture, ModelParams
from .rollout import (
    GREEDY,
    ON_DEPOT_RETURN,
    SAMPLE,
    backward,
    check_mode,
    check_reencode,
    construct_many,
    run_batch,
    sample_uniforms,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed training configuration; ``line`` is set when parsing a file."""

    def __init__(self, message, line=None, key=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line
        self.key = key


@dataclass
class TrainConfig:
    n: int
    capacity: int = None
    epochs: int = 30
    steps_per_epoch: int = 10000
    batch_size: int = None
    lr: float = None
    d_h: int = 128
    n_layers: int = 3
    n_heads: int = 8
    clip: float = 10.0
    seed: int = 0
    reencode: str = ON_DEPOT_RETURN
    checkpoint_dir: str = "checkpoints"
    metrics_path: str = "metrics.jsonl"
    eval_count: int = 100
    eval_seed: int = 1_000_000
    max_grad_norm: float = None

    def __post_init__(self):
        if self.capacity is None:
            self.capacity = default_capacity(self.n)
        if self.batch_size is None:
            self.batch_size = 108 if self.n >= 100 else 128
        if self.lr is None:
            self.lr = 5e-5 if self.n >= 100 else 1e-4
        if self.n < 1:
            raise ConfigError("n must be >= 1", key="n")
        if self.capacity < 9:
            raise ConfigError("capacity must be >= 9", key="capacity")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", key="lr")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if self.eval_count < 0:
            raise ConfigError("eval_count must be >= 0", key="eval_count")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be > 0", key="max_grad_norm")
        try:
            self.reencode = check_reencode(self.reencode)
            self.arch
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def arch(self):
        return Architecture(self.d_h, self.n_layers, self.n_heads, self.clip)

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values, lines = {}, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown key {key!r}", lineno, key)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", lineno, key)
            values[key] = _convert(types[key], value, key, lineno)
            lines[key] = lineno
        if "n" not in values:
            raise ConfigError("missing required key 'n'", key="n")
        try:
            return cls(**values)
        except ConfigError as exc:
            if exc.key in lines:
                raise ConfigError(str(exc), lines[exc.key], exc.key) from None
            raise

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self):
        return "".join(
            f"{f.name} = {getattr(self, f.name)}\n"
            for f in fields(self)
            if getattr(self, f.name) is not None
        )


def _convert(typ, value, key, lineno):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}", lineno, key) from None


# -- Adam ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(
            {p: np.zeros_like(a) for p, a in params.items()},
            {p: np.zeros_like(a) for p, a in params.items()},
            **kw,
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update moving *against* ``grads``.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {path}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for path, theta in params.items():
        g = grads[path]
        if g.shape != theta.shape:
            raise ValueError(f"{path}: gradient shape {g.shape} != parameter {theta.shape}")
        m = b1 * state.m[path] + (1.0 - b1) * g
        v = b2 * state.v[path] + (1.0 - b2) * (g * g)
        new_p[path] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[path], new_v[path] = m, v
    return ModelParams(params.arch, new_p), replace(state, m=new_m, v=new_v, step=t)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for _, g in grads.items()))
    if total <= max_norm:
        return grads, total
    scale = max_norm / total
    return ModelParams(grads.arch, {p: g * scale for p, g in grads.items()}), total


# -- REINFORCE -------------------------------------------------------------


def batch_gradient(instances, params, reencode=ON_DEPOT_RETURN, seed=0, keys=()):
    """Policy-gradient estimate with the greedy rollout of the same parameters as baseline.

    Returns ``(GradientSet, stats)``; the baseline is a constant, only the
    sampled trajectories are differentiated.
    """
    b = len(instances)
    if b < 1:
        raise ValueError("batch must contain at least one instance")
    arch = params.arch
    n = instances[0].n
    unif = sample_uniforms(seed, b, 2 * n, keys)
    sampled = run_batch(instances, params, arch, SAMPLE, reencode, uniforms=unif, tape=True)
    greedy = run_batch(instances, params, arch, GREEDY, reencode)
    ls = sampled.lengths()
    lg = greedy.lengths()
    adv = ls - lg
    grads = ModelParams(arch, backward(sampled, params, arch, adv / b))
    stats = {
        "mean_sample_len": float(ls.mean()),
        "mean_greedy_len": float(lg.mean()),
        "mean_advantage": float(adv.mean()),
        "mean_logprob": float(sampled.logprob.mean()),
    }
    return grads, stats


@dataclass
class EvalResult:
    mean: float
    lengths: np.ndarray
    solutions: list = field(default=None, repr=False)

    @property
    def std(self):
        return float(self.lengths.std(ddof=1)) if self.lengths.size > 1 else 0.0


def eval_instances(n, count, seed, capacity=None):
    capacity = default_capacity(n) if capacity is None else capacity
    return [generate_instance(n, capacity, seed + i) for i in range(count)]


def evaluate_params(params, instances, mode=GREEDY, reencode=ON_DEPOT_RETURN, seed=0):
    res = construct_many(instances, params, check_mode(mode), check_reencode(reencode), seed)
    lengths = np.array([r.length for r in res])
    return EvalResult(float(lengths.mean()) if lengths.size else float("nan"), lengths,
                      [r.solution for r in res])


def evaluate(checkpoint, n, count, mode=GREEDY, reencode=ON_DEPOT_RETURN, seed=0,
             capacity=None, arch=None):
    """Mean length of a checkpointed policy on ``count`` instances seeded ``seed + i``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    params = checkpoint if isinstance(checkpoint, ModelParams) else ckpt.load(checkpoint, arch)
    return evaluate_params(params, eval_instances(n, count, seed, capacity), mode, reencode, seed)


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: list
    metrics: list
    heldout: list


def train(cfg, params=None, progress=None):
    """Run the full training loop; fully determined by ``cfg`` (and ``params``, if given)."""
    arch = cfg.arch
    if params is None:
        params = ModelParams.initialize(arch, cfg.seed)
    opt = OptimizerState.zeros_like(params)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(cfg.metrics_path)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    heldout_set = eval_instances(cfg.n, cfg.eval_count, cfg.eval_seed, cfg.capacity)

    def heldout_eval(p):
        if not heldout_set:
            return float("nan")
        # evaluate exactly what a checkpoint would contain
        return evaluate_params(p.as_float32(), heldout_set, GREEDY, cfg.reencode).mean

    heldout = [(0, heldout_eval(params))]
    log.info("step 0 held-out greedy length %.4f", heldout[0][1])
    records, checkpoints = [], []
    start = time.perf_counter()
    step = 0
    with metrics_path.open("w", encoding="utf-8") as mf:
        for epoch in range(cfg.epochs):
            for _ in range(cfg.steps_per_epoch):
                gen = _rng.stream(cfg.seed, _rng.TRAIN_DATA, step)
                batch = generate_batch(cfg.n, cfg.capacity, cfg.batch_size, gen)
                grads, stats = batch_gradient(batch, params, cfg.reencode, cfg.seed, (step,))
                if cfg.max_grad_norm is not None:
                    grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
                params, opt = adam_step(params, grads, opt, cfg.lr)
                step += 1
                rec = {
                    "step": step,
                    "epoch": epoch + 1,
                    "mean_sample_len": stats["mean_sample_len"],
                    "mean_greedy_len": stats["mean_greedy_len"],
                    "mean_advantage": stats["mean_advantage"],
                    "wallclock_s": round(time.perf_counter() - start, 3),
                }
                mf.write(json.dumps(rec) + "\n")
                mf.flush()
                records.append(rec)
                if progress is not None:
                    progress(rec)
            path = ckpt_dir / f"epoch-{epoch + 1:03d}.amd"
            ckpt.save(path, params)
            checkpoints.append(path)
            heldout.append((step, heldout_eval(params)))
            log.info("epoch %d: held-out greedy length %.4f", epoch + 1, heldout[-1][1])
    return TrainResult(params, checkpoints, records, heldout)
