"""One construction step: context, masked glimpse, clipped output head, state update.

As in :mod:`amdvrp.encoder`, the ``*_batch`` kernels work on a leading batch
axis and pair with hand-written backward passes; the remaining functions are
the single-instance interface.
"""

from dataclasses import dataclass

import numpy as np

from .encoder import (
    _add,
    _merge_heads,
    _split_heads,
    heads_matrix,
    lin,
    masked_softmax,
    masked_softmax_backward,
    out_matrix,
    wgrad,
)


class MaskViolationError(ValueError):
    """A node was chosen that the feasibility mask forbids."""

    def __init__(self, step, node, message=None):
        super().__init__(message or f"step {step}: node {node} is not selectable")
        self.step = step
        self.node = node


# -- batched kernels -------------------------------------------------------


def project_embeddings(H, P):
    """Per-encode projections consumed by every decoding step until the next encode."""
    m = P["decoder.glimpse.W_K"].shape[0]
    kg = _split_heads(lin(H, heads_matrix(P["decoder.glimpse.W_K"])), m)
    vg = _split_heads(lin(H, heads_matrix(P["decoder.glimpse.W_V"])), m)
    ko = lin(H, P["decoder.output.W_K"])
    return kg, vg, ko


def project_backward(H, dkg, dvg, dko, P, grads):
    dH = np.zeros_like(H)
    for name, g in (("W_K", dkg), ("W_V", dvg)):
        W = P["decoder.glimpse." + name]
        gm = _merge_heads(g)
        _add(grads, "decoder.glimpse." + name, wgrad(gm, H).reshape(W.shape))
        dH += lin(gm, heads_matrix(W).T)
    _add(grads, "decoder.output.W_K", wgrad(dko, H))
    dH += lin(dko, P["decoder.output.W_K"].T)
    return dH


def context_batch(H, unvisited, last, load_frac):
    """``[mean of unvisited rows (depot included); row of last node; D_t / D]``."""
    b = H.shape[0]
    w = unvisited.astype(np.float64)
    cnt = w.sum(axis=1)
    hbar = (w[:, :, None] * H).sum(axis=1) / cnt[:, None]
    hlast = H[np.arange(b), last]
    return np.concatenate([hbar, hlast, load_frac[:, None]], axis=1), cnt


def context_backward(dctx, unvisited, cnt, last, d, out):
    """Scatter the context gradient back onto embedding rows (accumulates into ``out``)."""
    b = dctx.shape[0]
    w = unvisited.astype(np.float64) / cnt[:, None]
    out += w[:, :, None] * dctx[:, None, :d]
    np.add.at(out, (np.arange(b), last), dctx[:, d : 2 * d])


def glimpse_batch(ctx, kg, vg, selectable, P):
    W_Q = P["decoder.glimpse.W_Q"]
    m = W_Q.shape[0]
    qc = (ctx @ heads_matrix(W_Q).T).reshape(ctx.shape[0], m, -1)
    ug = (kg @ qc[..., None])[..., 0]
    ag = masked_softmax(ug, ~selectable[:, None, :])
    hg = (ag[:, :, None, :] @ vg)[:, :, 0, :]
    hc = hg.reshape(hg.shape[0], -1) @ out_matrix(P["decoder.glimpse.W_O"]).T
    return hc, {"ctx": ctx, "qc": qc, "ag": ag, "hg": hg}


def glimpse_backward(dhc, cache, kg, vg, P, grads):
    """Returns ``(dctx, dkg, dvg)``."""
    W_O = P["decoder.glimpse.W_O"]
    m, d, dv = W_O.shape
    ctx, qc, ag, hg = cache["ctx"], cache["qc"], cache["ag"], cache["hg"]
    b = dhc.shape[0]
    dWo = dhc.T @ hg.reshape(b, -1)
    _add(grads, "decoder.glimpse.W_O", dWo.reshape(d, m, dv).transpose(1, 0, 2))
    dhg = (dhc @ out_matrix(W_O)).reshape(b, m, dv)
    dag = (vg @ dhg[..., None])[..., 0]
    dvg = ag[..., None] * dhg[:, :, None, :]
    dug = masked_softmax_backward(ag, dag)
    dqc = (dug[:, :, None, :] @ kg)[:, :, 0, :]
    dkg = dug[..., None] * qc[:, :, None, :]
    W_Q = P["decoder.glimpse.W_Q"]
    dqf = dqc.reshape(b, -1)
    _add(grads, "decoder.glimpse.W_Q", (dqf.T @ ctx).reshape(W_Q.shape))
    return dqf @ heads_matrix(W_Q), dkg, dvg


def output_batch(hc, ko, selectable, P, clip):
    qo = hc @ P["decoder.output.W_Q"].T
    w = (ko @ qo[..., None])[..., 0]
    tw = np.tanh(w)
    logits = clip * tw
    z = np.where(selectable, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.where(selectable, np.exp(np.where(selectable, logits, 0.0) - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    logp = np.where(selectable, logits - zmax - np.log(s), -np.inf)
    return p, logp, {"hc": hc, "qo": qo, "tw": tw, "p": p}


def output_backward(dlogits, cache, ko, P, grads, clip):
    """Backward from logit gradients; returns ``(dhc, dko)``."""
    hc, qo, tw = cache["hc"], cache["qo"], cache["tw"]
    dw = dlogits * clip * (1.0 - tw * tw)
    dqo = (dw[:, None, :] @ ko)[:, 0, :]
    dko = dw[:, :, None] * qo[:, None, :]
    _add(grads, "decoder.output.W_Q", dqo.T @ hc)
    return dqo @ P["decoder.output.W_Q"], dko


def selectable_batch(demands, visited, remaining, last):
    """Customers unvisited with demand within the remaining load; depot unless just left."""
    sel = (~visited) & (demands <= remaining[:, None])
    sel[:, 0] = last != 0
    return sel


# -- single-instance API ---------------------------------------------------


@dataclass(frozen=True)
class DecodeState:
    """Partial solution, visited customers, remaining load ``D_t`` and step ``t``."""

    partial: tuple
    visited: tuple
    remaining: int
    capacity: int

    @classmethod
    def initial(cls, inst):
        return cls((), (False,) * (inst.n + 1), inst.capacity, inst.capacity)

    @property
    def step(self):
        return len(self.partial) + 1

    @property
    def last(self):
        """Index of the node the vehicle stands at (the depot before the first move)."""
        return self.partial[-1] if self.partial else 0

    @property
    def done(self):
        return all(self.visited[1:])

    def visited_array(self):
        return np.array(self.visited, dtype=bool)


def feasibility_mask(inst, st):
    sel = selectable_batch(
        inst.demands[None],
        st.visited_array()[None],
        np.array([st.remaining]),
        np.array([st.last]),
    )[0]
    return sel


def apply_move(inst, st, chosen):
    chosen = int(chosen)
    if not 0 <= chosen <= inst.n or not feasibility_mask(inst, st)[chosen]:
        raise MaskViolationError(st.step, chosen)
    visited = list(st.visited)
    if chosen == 0:
        remaining = inst.capacity
    else:
        visited[chosen] = True
        remaining = st.remaining - int(inst.demands[chosen])
    return DecodeState(st.partial + (chosen,), tuple(visited), remaining, st.capacity)


def build_context(emb, st):
    """Context input ``[h_bar; h_last; D_t / D]`` of length ``2 * d_h + 1``."""
    if st.done:
        raise ValueError("all customers are visited; construction has terminated")
    H = emb.H if hasattr(emb, "H") else np.asarray(emb)
    unvisited = ~st.visited_array()
    ctx, _ = context_batch(
        H[None], unvisited[None], np.array([st.last]), np.array([st.remaining / st.capacity])
    )
    return ctx[0]


def _emb(emb):
    return emb.H if hasattr(emb, "H") else np.asarray(emb)


def glimpse(ctx, emb, mask, P):
    H = _emb(emb)[None]
    kg, vg, _ = project_embeddings(H, P)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no selectable node")
    hc, _ = glimpse_batch(np.asarray(ctx)[None], kg, vg, mask[None], P)
    return hc[0]


def output_distribution(hc, emb, mask, P, clip=10.0):
    """Node probabilities; masked nodes get exactly 0."""
    H = _emb(emb)[None]
    ko = H @ P["decoder.output.W_K"].T
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no selectable node")
    p, _, _ = output_batch(np.asarray(hc)[None], ko, mask[None], P, clip)
    return p[0]


def output_logits(hc, emb, mask, P, clip=10.0):
    """Clipped compatibilities ``C * tanh(q . k_j)``, ``-inf`` where masked."""
    H = _emb(emb)[None]
    ko = (H @ P["decoder.output.W_K"].T)[0]
    q = P["decoder.output.W_Q"] @ np.asarray(hc)
    return np.where(np.asarray(mask, bool), clip * np.tanh(ko @ q), -np.inf)
