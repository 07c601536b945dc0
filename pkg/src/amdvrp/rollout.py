"""Solution construction with optional re-encoding after each depot return.

A batch of same-size instances is decoded in lock-step. Instances that have
finished drop out of the active set; instances that just returned to the depot
are re-encoded (with their visited customers masked as keys) before the next
decision. When a tape is requested, every encoder call and decoding step keeps
its activations so :func:`backward` can return exact gradients of the summed
log-probabilities.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .decoder import (
    MaskViolationError,
    context_backward,
    context_batch,
    glimpse_backward,
    glimpse_batch,
    output_backward,
    output_batch,
    project_backward,
    project_embeddings,
    selectable_batch,
)
from .encoder import encode_backward, encode_batch
from .instance import Solution, tour_length

GREEDY = "greedy"
SAMPLE = "sample"
ON_DEPOT_RETURN = "on_depot_return"
NEVER = "never"

MODES = (GREEDY, SAMPLE)
REENCODE_MODES = (ON_DEPOT_RETURN, NEVER)


def check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def check_reencode(reencode):
    if reencode is True:
        return ON_DEPOT_RETURN
    if reencode is False:
        return NEVER
    if reencode not in REENCODE_MODES:
        raise ValueError(f"reencode must be one of {REENCODE_MODES}, got {reencode!r}")
    return reencode


@dataclass
class RolloutResult:
    solution: Solution
    logprob: float
    reencode_count: int
    encode_count: int
    trace: list = field(default=None, repr=False)

    @property
    def length(self):
        return self.solution.length


@dataclass
class _Tape:
    feats: np.ndarray
    events: list = field(default_factory=list)


class BatchRollout:
    """Result of :func:`run_batch`; holds per-instance outcomes and the optional tape."""

    def __init__(self, instances, visits, logprob, encode_count, tape, trace):
        self.instances = instances
        self.visits = visits
        self.logprob = logprob
        self.encode_count = encode_count
        self.tape = tape
        self.trace = trace

    def __len__(self):
        return len(self.visits)

    def lengths(self):
        return np.array([tour_length(inst, v) for inst, v in zip(self.instances, self.visits)])

    def results(self):
        out = []
        for i, inst in enumerate(self.instances):
            sol = Solution.from_visits(inst, self.visits[i])
            trace = None
            if self.trace is not None:
                trace = [(step["chosen"], step["logp"]) for step in self.trace[i]]
            out.append(
                RolloutResult(
                    sol,
                    float(self.logprob[i]),
                    int(self.encode_count[i]) - 1,
                    int(self.encode_count[i]),
                    trace,
                )
            )
        return out


def _sample_index(p, u):
    # inverse CDF: first index whose cumulative mass exceeds u
    cdf = np.cumsum(p, axis=1)
    idx = (cdf <= u[:, None]).sum(axis=1)
    over = idx >= p.shape[1]
    if np.any(over):
        last_pos = p.shape[1] - 1 - np.argmax((p > 0)[:, ::-1], axis=1)
        idx = np.where(over, last_pos, idx)
    return idx


def sample_uniforms(seed, count, n_steps, keys=()):
    """One uniform per potential decision, from a dedicated stream per rollout."""
    out = np.empty((count, n_steps))
    for i in range(count):
        out[i] = _rng.stream(seed, _rng.SAMPLE, *keys, i).random(n_steps)
    return out


def run_batch(
    instances,
    P,
    arch,
    mode=GREEDY,
    reencode=ON_DEPOT_RETURN,
    uniforms=None,
    forced=None,
    tape=False,
    trace=False,
):
    """Decode a batch of instances with the same number of customers.

    Exactly one of the selection rules applies: ``forced`` (sequences to
    replay, teacher forcing), ``mode == "sample"`` (needs ``uniforms`` of
    shape ``(B, >= 2n)``), or greedy (argmax, lowest index on ties).
    """
    reencode = check_reencode(reencode)
    b = len(instances)
    if b == 0:
        return BatchRollout([], [], np.zeros(0), np.zeros(0, int), None, None)
    v = instances[0].n + 1
    if any(inst.n + 1 != v for inst in instances):
        raise ValueError("all instances in a batch must have the same size")
    if forced is None:
        check_mode(mode)
        if mode == SAMPLE and (uniforms is None or uniforms.shape[1] < 2 * (v - 1)):
            raise ValueError("sample mode needs uniforms of shape (B, >= 2n)")
    else:
        forced = [tuple(int(x) for x in getattr(f, "visits", f)) for f in forced]
        if len(forced) != b:
            raise ValueError("need one forced sequence per instance")

    feats = np.stack([inst.features() for inst in instances])
    demands = np.stack([inst.demands for inst in instances])
    cap = np.array([inst.capacity for inst in instances])
    d = arch.d_h
    clip = arch.clip

    visited = np.zeros((b, v), dtype=bool)
    remaining = cap.copy()
    last = np.zeros(b, dtype=np.int64)
    done = np.zeros(b, dtype=bool) if v > 1 else np.ones(b, dtype=bool)
    logprob = np.zeros(b)
    encode_count = np.zeros(b, dtype=np.int64)
    visits = [[] for _ in range(b)]
    traces = [[] for _ in range(b)] if trace else None
    rec = _Tape(feats) if tape else None

    H = np.zeros((b, v, d))
    kg = vg = ko = None

    def do_encode(idx, t):
        nonlocal kg, vg, ko
        mask = visited[idx]
        h, caches = encode_batch(feats[idx], mask, P, arch.n_layers)
        pk, pv, po = project_embeddings(h, P)
        if kg is None:
            kg = np.zeros((b,) + pk.shape[1:])
            vg = np.zeros((b,) + pv.shape[1:])
            ko = np.zeros((b,) + po.shape[1:])
        H[idx], kg[idx], vg[idx], ko[idx] = h, pk, pv, po
        encode_count[idx] += 1
        if rec is not None:
            rec.events.append(("encode", idx, h, caches))

    t = 1
    while not done.all():
        if t == 1:
            do_encode(np.arange(b), t)
        elif reencode == ON_DEPOT_RETURN:
            need = np.flatnonzero(~done & (last == 0))
            if need.size:
                do_encode(need, t)
        a = np.flatnonzero(~done)
        Ha = H[a]
        unvisited = ~visited[a]
        ctx, cnt = context_batch(Ha, unvisited, last[a], remaining[a] / cap[a])
        sel = selectable_batch(demands[a], visited[a], remaining[a], last[a])
        kga, vga, koa = kg[a], vg[a], ko[a]
        hc, gcache = glimpse_batch(ctx, kga, vga, sel, P)
        p, logp, ocache = output_batch(hc, koa, sel, P, clip)

        if forced is not None:
            chosen = np.empty(a.size, dtype=np.int64)
            for j, i in enumerate(a):
                if t - 1 >= len(forced[i]):
                    raise MaskViolationError(
                        t, -1, f"instance {i}: sequence ends at step {t} with customers unserved"
                    )
                node = forced[i][t - 1]
                if not 0 <= node < v or not sel[j, node]:
                    raise MaskViolationError(
                        t, node, f"instance {i}, step {t}: node {node} is not selectable"
                    )
                chosen[j] = node
        elif mode == SAMPLE:
            chosen = _sample_index(p, uniforms[a, t - 1])
        else:
            chosen = np.argmax(p, axis=1)

        rows = np.arange(a.size)
        step_logp = logp[rows, chosen]
        logprob[a] += step_logp
        if rec is not None:
            rec.events.append(
                ("step", a, unvisited, cnt, last[a].copy(), kga, vga, koa, gcache, ocache, chosen)
            )
        if traces is not None:
            for j, i in enumerate(a):
                traces[i].append(
                    {"chosen": int(chosen[j]), "logp": float(step_logp[j]), "p": p[j], "mask": sel[j]}
                )

        for j, i in enumerate(a):
            visits[i].append(int(chosen[j]))
        visited[a, chosen] = True
        visited[:, 0] = False
        remaining[a] = np.where(chosen == 0, cap[a], remaining[a] - demands[a, chosen])
        last[a] = chosen
        done = visited[:, 1:].all(axis=1)
        t += 1

    if forced is not None:
        for i in range(b):
            if len(forced[i]) != len(visits[i]):
                raise MaskViolationError(
                    len(visits[i]) + 1,
                    forced[i][len(visits[i])],
                    f"instance {i}: sequence continues after every customer is served",
                )
    return BatchRollout(instances, [tuple(x) for x in visits], logprob, encode_count, rec, traces)


def backward(rollout, P, arch, coeff):
    """Gradient of ``sum_i coeff[i] * logprob[i]`` w.r.t. every parameter path."""
    rec = rollout.tape
    if rec is None:
        raise ValueError("rollout was run without a tape")
    coeff = np.asarray(coeff, dtype=np.float64)
    b = len(rollout)
    d = arch.d_h
    grads = {}
    dH = dkg = dvg = dko = None
    for event in reversed(rec.events):
        if event[0] == "step":
            _, a, unvisited, cnt, last, kga, vga, koa, gcache, ocache, chosen = event
            if dH is None:
                v = unvisited.shape[1]
                dH = np.zeros((b, v, d))
                dkg = np.zeros((b,) + kga.shape[1:])
                dvg = np.zeros((b,) + vga.shape[1:])
                dko = np.zeros((b,) + koa.shape[1:])
            g = coeff[a]
            onehot = np.zeros_like(ocache["p"])
            onehot[np.arange(a.size), chosen] = 1.0
            dlogits = g[:, None] * (onehot - ocache["p"])
            dhc, dko_s = output_backward(dlogits, ocache, koa, P, grads, arch.clip)
            dctx, dkg_s, dvg_s = glimpse_backward(dhc, gcache, kga, vga, P, grads)
            dko[a] += dko_s
            dkg[a] += dkg_s
            dvg[a] += dvg_s
            rows = np.zeros((a.size,) + dH.shape[1:])
            context_backward(dctx, unvisited, cnt, last, d, rows)
            dH[a] += rows
        else:
            _, idx, h, caches = event
            if dH is None:
                continue
            dh_total = dH[idx] + project_backward(h, dkg[idx], dvg[idx], dko[idx], P, grads)
            encode_backward(dh_total, rec.feats[idx], caches, P, grads)
            dH[idx] = 0.0
            dkg[idx] = 0.0
            dvg[idx] = 0.0
            dko[idx] = 0.0
    for path, arr in P.items():
        if path not in grads:
            grads[path] = np.zeros_like(arr)
    return grads


def construct(inst, params, mode=GREEDY, reencode=ON_DEPOT_RETURN, seed=0, trace=False):
    """Build one solution; returns a :class:`RolloutResult`."""
    return construct_many([inst], params, mode, reencode, seed, trace=trace)[0]


def construct_many(instances, params, mode=GREEDY, reencode=ON_DEPOT_RETURN, seed=0,
                   trace=False, batch_size=512):
    """Rollouts for many instances; rollout ``i`` samples from stream ``(seed, i)``.

    Results do not depend on ``batch_size`` beyond floating-point rounding of
    batched matrix products.
    """
    check_mode(mode)
    out = [None] * len(instances)
    groups = {}
    for i, inst in enumerate(instances):
        groups.setdefault(inst.n, []).append(i)
    for n, idxs in groups.items():
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            unif = None
            if mode == SAMPLE:
                unif = np.stack([
                    _rng.stream(seed, _rng.SAMPLE, i).random(2 * n) for i in chunk
                ])
            res = run_batch(
                [instances[i] for i in chunk], params, params.arch, mode, reencode,
                uniforms=unif, trace=trace,
            ).results()
            for i, r in zip(chunk, res):
                out[i] = r
    return out


def logprob_of(inst, params, sol, reencode=ON_DEPOT_RETURN):
    """Log-probability the policy assigns to making exactly the choices in ``sol``."""
    res = run_batch([inst], params, params.arch, reencode=reencode, forced=[sol])
    return float(res.logprob[0])
