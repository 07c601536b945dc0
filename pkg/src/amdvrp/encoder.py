"""Graph attention encoder with optional visited-node key masking.

Kernels operate on batches: embeddings are ``(B, V, d_h)`` with ``V = n + 1``
and key masks are boolean ``(B, V)`` arrays where ``True`` marks an excluded
(visited) node. Every forward kernel returns the activations its backward
counterpart needs; backward kernels accumulate parameter gradients into a
``dict`` keyed by parameter path and return the gradient w.r.t. their input.

The single-instance functions at the bottom wrap the kernels with ``B = 1``.
"""

from dataclasses import dataclass, field

import numpy as np

MASK_FILL = -1e9


def masked_softmax(u, excluded):
    """Softmax over the last axis, ignoring entries where ``excluded`` is True.

    Excluded entries get weight exactly 0. At least one entry per row must be
    included.
    """
    z = np.where(excluded, MASK_FILL, u)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(excluded, 0.0, e)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(a, da):
    # excluded entries have a == 0 and therefore receive no gradient
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


def _add(grads, path, value):
    if grads is None:
        return
    if path in grads:
        grads[path] += value
    else:
        grads[path] = value.copy() if isinstance(value, np.ndarray) else value


def lin(x, W):
    """``x @ W.T`` over the last axis, flattened to one matrix product."""
    return (x.reshape(-1, x.shape[-1]) @ W.T).reshape(x.shape[:-1] + (W.shape[0],))


def wgrad(g, x):
    """Sum over all leading axes of the outer products ``g_i x_i^T``."""
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def heads_matrix(W):
    """Stack per-head projections ``(M, k, d)`` into one ``(M*k, d)`` matrix."""
    return W.reshape(-1, W.shape[-1])


def out_matrix(W_O):
    """Per-head output maps ``(M, d, d_v)`` laid side by side as ``(d, M*d_v)``."""
    m, d, dv = W_O.shape
    return W_O.transpose(1, 0, 2).reshape(d, m * dv)


def _split_heads(x, m):
    # (B, V, M*k) -> (B, M, V, k)
    b, v, mk = x.shape
    return x.reshape(b, v, m, mk // m).transpose(0, 2, 1, 3)


def _merge_heads(x):
    # (B, M, V, k) -> (B, V, M*k)
    b, m, v, k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, v, m * k)


# -- initial embedding -----------------------------------------------------


def init_embed_batch(feats, P):
    h = lin(feats, P["encoder.init.W"]) + P["encoder.init.b"]
    h[:, 0] = feats[:, 0] @ P["encoder.init.W0"].T + P["encoder.init.b0"]
    return h


def init_embed_backward(feats, dh, grads):
    _add(grads, "encoder.init.W", wgrad(dh[:, 1:], feats[:, 1:]))
    _add(grads, "encoder.init.b", dh[:, 1:].sum(axis=(0, 1)))
    _add(grads, "encoder.init.W0", dh[:, 0].T @ feats[:, 0])
    _add(grads, "encoder.init.b0", dh[:, 0].sum(axis=0))


# -- multi-head attention sublayer -----------------------------------------


def mha_forward(h, key_excluded, P, layer):
    pre = f"encoder.layers.{layer}."
    m = P[pre + "W_Q"].shape[0]
    q = _split_heads(lin(h, heads_matrix(P[pre + "W_Q"])), m)
    k = _split_heads(lin(h, heads_matrix(P[pre + "W_K"])), m)
    v = _split_heads(lin(h, heads_matrix(P[pre + "W_V"])), m)
    u = q @ k.swapaxes(-1, -2)
    a = masked_softmax(u, key_excluded[:, None, None, :])
    heads = _merge_heads(a @ v)
    out = lin(heads, out_matrix(P[pre + "W_O"]))
    cache = {"h": h, "q": q, "k": k, "v": v, "u": u, "a": a, "heads": heads}
    return out, cache


def mha_backward(dout, cache, P, layer, grads):
    pre = f"encoder.layers.{layer}."
    W_O = P[pre + "W_O"]
    m, d, dv = W_O.shape
    h, q, k, v, a = cache["h"], cache["q"], cache["k"], cache["v"], cache["a"]
    dWo = wgrad(dout, cache["heads"])
    _add(grads, pre + "W_O", dWo.reshape(d, m, dv).transpose(1, 0, 2))
    dheads = _split_heads(lin(dout, out_matrix(W_O).T), m)
    da = dheads @ v.swapaxes(-1, -2)
    dv_ = a.swapaxes(-1, -2) @ dheads
    du = masked_softmax_backward(a, da)
    dq = du @ k
    dk = du.swapaxes(-1, -2) @ q
    dh = np.zeros_like(h)
    for name, g in (("W_Q", dq), ("W_K", dk), ("W_V", dv_)):
        W = P[pre + name]
        gm = _merge_heads(g)
        _add(grads, pre + name, wgrad(gm, h).reshape(W.shape))
        dh += lin(gm, heads_matrix(W).T)
    return dh


# -- feed-forward sublayer -------------------------------------------------


def ff_forward(h_in, mha, P, layer):
    pre = f"encoder.layers.{layer}.ff."
    hhat = np.tanh(h_in + mha)
    z = lin(hhat, P[pre + "W0"]) + P[pre + "b0"]
    r = np.maximum(z, 0.0)
    f = lin(r, P[pre + "W1"]) + P[pre + "b1"]
    out = np.tanh(hhat + f)
    return out, {"hhat": hhat, "z": z, "r": r, "out": out}


def ff_backward(dout, cache, P, layer, grads):
    """Gradient w.r.t. the sublayer input ``h_in + mha`` (both summands get the same)."""
    pre = f"encoder.layers.{layer}.ff."
    hhat, z, r, out = cache["hhat"], cache["z"], cache["r"], cache["out"]
    ds = dout * (1.0 - out * out)
    _add(grads, pre + "W1", wgrad(ds, r))
    _add(grads, pre + "b1", ds.sum(axis=(0, 1)))
    dz = lin(ds, P[pre + "W1"].T) * (z > 0)
    _add(grads, pre + "W0", wgrad(dz, hhat))
    _add(grads, pre + "b0", dz.sum(axis=(0, 1)))
    dhhat = ds + lin(dz, P[pre + "W0"].T)
    return dhhat * (1.0 - hhat * hhat)


# -- full encoder ----------------------------------------------------------


def encode_batch(feats, key_excluded, P, n_layers):
    """Encode a batch; returns final embeddings and the per-layer activations."""
    if np.any(key_excluded[:, 0]):
        raise ValueError("the depot can never be masked")
    h = init_embed_batch(feats, P)
    caches = []
    for layer in range(n_layers):
        mha, mc = mha_forward(h, key_excluded, P, layer)
        h, fc = ff_forward(h, mha, P, layer)
        caches.append((mc, fc))
    return h, caches


def encode_backward(dh, feats, caches, P, grads):
    for layer in reversed(range(len(caches))):
        mc, fc = caches[layer]
        ds = ff_backward(dh, fc, P, layer, grads)
        dh = ds + mha_backward(ds, mc, P, layer, grads)
    init_embed_backward(feats, dh, grads)


# -- single-instance API ---------------------------------------------------


@dataclass
class EmbeddingSet:
    """Final (or layer-0) node embeddings for one instance.

    ``mask`` marks nodes excluded as attention keys; their rows are computed
    but never consumed.
    """

    H: np.ndarray
    mask: np.ndarray
    epoch: int = 0
    activations: list = field(default=None, repr=False)


def _features(inst):
    return inst.features()[None]


def _check_arch(P, inst=None):
    d = P["encoder.init.W"].shape[0]
    if P["encoder.init.W"].shape[1] != 3 or P["encoder.init.b"].shape != (d,):
        raise ValueError("initial embedding parameters are inconsistent with d_h")


def init_embed(inst, P):
    _check_arch(P)
    h = init_embed_batch(_features(inst), P)[0]
    return EmbeddingSet(h, np.zeros(inst.n + 1, dtype=bool))


def mha_sublayer(emb, layer, P):
    """Multi-head attention vectors for every node plus the activations used."""
    if np.any(emb.mask[0:1]):
        raise ValueError("the depot can never be masked")
    out, cache = mha_forward(emb.H[None], emb.mask[None], P, layer)
    return out[0], cache


def ff_sublayer(h_in, mha, layer, P):
    out, _ = ff_forward(np.asarray(h_in)[None], np.asarray(mha)[None], P, layer)
    return out[0]


def encode(inst, visited, P, n_layers=None, epoch=0):
    """Encode one instance with ``visited`` nodes excluded as keys."""
    _check_arch(P)
    if n_layers is None:
        n_layers = sum(1 for p in P if p.endswith(".ff.b1"))
    mask = np.zeros(inst.n + 1, dtype=bool) if visited is None else np.asarray(visited, bool)
    if mask.shape != (inst.n + 1,):
        raise ValueError(f"visited mask must have length {inst.n + 1}")
    h, caches = encode_batch(_features(inst), mask[None], P, n_layers)
    return EmbeddingSet(h[0], mask.copy(), epoch, caches)
