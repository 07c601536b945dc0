"""Exact gradients of rollout log-probabilities and a finite-difference checker."""

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .params import ModelParams
from .rollout import ON_DEPOT_RETURN, backward, check_reencode, run_batch


def logprob_grad(inst, params, sol, reencode=ON_DEPOT_RETURN):
    """``(logprob, GradientSet)`` for replaying ``sol``, through every re-encode it triggers."""
    reencode = check_reencode(reencode)
    res = run_batch([inst], params, params.arch, reencode=reencode, forced=[sol], tape=True)
    grads = backward(res, params, params.arch, np.ones(1))
    return float(res.logprob[0]), ModelParams(params.arch, grads)


def weighted_logprob_grad(instances, params, solutions, weights, reencode=ON_DEPOT_RETURN):
    """Gradient of ``sum_i weights[i] * log p(solutions[i] | instances[i])`` in one pass."""
    res = run_batch(
        list(instances), params, params.arch, reencode=reencode, forced=list(solutions), tape=True
    )
    return res.logprob.copy(), ModelParams(params.arch, backward(res, params, params.arch, weights))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_path: str
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(inst, params, sol, n_coords=100, reencode=ON_DEPOT_RETURN, h=1e-5,
                      seed=0, tolerance=1e-4, grads=None, include=()):
    """Compare analytic gradients with central differences on random coordinates.

    ``grads`` overrides the analytic gradient (used to feed a corrupted one);
    ``include`` lists flat coordinates that are always checked.
    """
    if grads is None:
        _, grads = logprob_grad(inst, params, sol, reencode)
    flat = params.flatten()
    g_flat = grads.flatten() if isinstance(grads, ModelParams) else np.asarray(grads)
    gen = _rng.stream(seed, _rng.GRADCHECK)
    coords = gen.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    coords = np.unique(np.concatenate([coords, np.asarray(include, dtype=np.int64)]))
    numeric = np.empty(coords.size)
    for j, c in enumerate(coords):
        up = flat.copy()
        up[c] += h
        dn = flat.copy()
        dn[c] -= h
        f_up = run_batch([inst], params.unflatten(up), params.arch, reencode=reencode, forced=[sol])
        f_dn = run_batch([inst], params.unflatten(dn), params.arch, reencode=reencode, forced=[sol])
        numeric[j] = (f_up.logprob[0] - f_dn.logprob[0]) / (2 * h)
    analytic = g_flat[coords]
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err))
    path, index = params.locate(coords[worst])
    return GradCheckReport(
        float(err[worst]), path, tuple(int(i) for i in index), analytic, numeric, coords, tolerance
    )
