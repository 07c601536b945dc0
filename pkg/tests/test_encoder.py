import numpy as np
import pytest

from amdvrp.encoder import (
    encode,
    ff_backward,
    ff_forward,
    ff_sublayer,
    init_embed,
    masked_softmax,
    mha_sublayer,
)
from amdvrp.instance import VrpInstance, generate_instance
from amdvrp.params import Architecture, ModelParams

from conftest import central_diff, scaled_params


def plain_softmax(u):
    e = np.exp(u - u.max())
    return e / e.sum()


def loop_mha(H, P, layer):
    """Straight-line multi-head attention without masking, one query at a time."""
    pre = f"encoder.layers.{layer}."
    WQ, WK, WV, WO = (P[pre + k] for k in ("W_Q", "W_K", "W_V", "W_O"))
    out = np.zeros_like(H)
    for i in range(H.shape[0]):
        for m in range(WQ.shape[0]):
            q = WQ[m] @ H[i]
            u = np.array([q @ (WK[m] @ H[j]) for j in range(H.shape[0])])
            a = plain_softmax(u)
            hm = sum(a[j] * (WV[m] @ H[j]) for j in range(H.shape[0]))
            out[i] += WO[m] @ hm
    return out


def test_init_embed_zero_weights_gives_bias(tiny_arch):
    P = ModelParams.initialize(tiny_arch, 0)
    P.tensors["encoder.init.W"][:] = 0
    c = np.arange(16.0)
    P.tensors["encoder.init.b"][:] = c
    emb = init_embed(generate_instance(5, 20, 1), P)
    np.testing.assert_array_equal(emb.H[1:], np.tile(c, (5, 1)))


def test_init_embed_affine(tiny_params):
    inst = VrpInstance([[0.1, 0.2], [0.2, 0.3], [0.4, 0.1]], [0, 2, 3], 20)
    double = VrpInstance(inst.coords * 2, inst.demands * 2, 20)
    diff = init_embed(double, tiny_params).H - init_embed(inst, tiny_params).H
    x = inst.features()
    np.testing.assert_allclose(diff[1:], x[1:] @ tiny_params["encoder.init.W"].T, atol=1e-12)
    np.testing.assert_allclose(diff[0], tiny_params["encoder.init.W0"] @ x[0], atol=1e-12)


def test_init_embed_depot_uses_own_parameters(tiny_params):
    P = tiny_params.copy()
    P.tensors["encoder.init.W0"][:] = 0
    inst = generate_instance(3, 20, 0)
    np.testing.assert_array_equal(init_embed(inst, P).H[0], P["encoder.init.b0"])


def test_init_embed_dimension_mismatch(tiny_params):
    P = dict(tiny_params.items())
    P["encoder.init.W"] = np.zeros((16, 2))
    with pytest.raises(ValueError):
        init_embed(generate_instance(3, 20, 0), P)


def test_masked_softmax_exact_zero_and_normalised():
    gen = np.random.default_rng(0)
    u = gen.normal(size=(50, 7)) * 30
    excl = gen.random((50, 7)) < 0.5
    excl[:, 0] = False
    a = masked_softmax(u, excl)
    assert np.all(a[excl] == 0.0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_mha_depot_only(tiny_params):
    inst = VrpInstance([[0.3, 0.4]], [0], 20)
    emb = init_embed(inst, tiny_params)
    out, cache = mha_sublayer(emb, 0, tiny_params)
    np.testing.assert_array_equal(cache["a"], np.ones((1, 2, 1, 1)))
    WV, WO = tiny_params["encoder.layers.0.W_V"], tiny_params["encoder.layers.0.W_O"]
    expected = sum(WO[m] @ (WV[m] @ emb.H[0]) for m in range(2))
    np.testing.assert_allclose(out[0], expected, atol=1e-14)


def test_mha_identical_embeddings_uniform_weights(tiny_params):
    inst = generate_instance(5, 20, 2)
    emb = init_embed(inst, tiny_params)
    emb.H[:] = emb.H[1]
    emb.mask = np.array([False, True, False, True, False, False])
    _, cache = mha_sublayer(emb, 1, tiny_params)
    a = cache["a"][0]
    np.testing.assert_allclose(a[..., ~emb.mask], 0.25, atol=1e-15)
    assert np.all(a[..., emb.mask] == 0.0)


def test_mha_matches_loop_oracle(tiny_params):
    inst = generate_instance(5, 20, 4)
    emb = init_embed(inst, tiny_params)
    out, _ = mha_sublayer(emb, 0, tiny_params)
    np.testing.assert_allclose(out, loop_mha(emb.H, tiny_params, 0), atol=1e-12)


def test_mha_masked_equals_subinstance(tiny_params):
    gen = np.random.default_rng(7)
    for trial in range(20):
        inst = generate_instance(5, 20, trial)  # 6 nodes
        emb = init_embed(inst, tiny_params)
        emb.H = gen.normal(size=emb.H.shape)
        mask = gen.random(6) < 0.5
        mask[0] = False
        emb.mask = mask
        out, _ = mha_sublayer(emb, 0, tiny_params)
        keep = np.flatnonzero(~mask)
        ref = loop_mha(emb.H[keep], tiny_params, 0)
        np.testing.assert_allclose(out[keep], ref, atol=1e-12)


def test_mha_rejects_masked_depot(tiny_params):
    emb = init_embed(generate_instance(3, 20, 0), tiny_params)
    emb.mask = np.array([True, False, False, False])
    with pytest.raises(ValueError):
        mha_sublayer(emb, 0, tiny_params)


def test_ff_zero_case():
    arch = Architecture(8, 1, 2)
    P = ModelParams.zeros(arch)
    out = ff_sublayer(np.zeros((3, 8)), np.zeros((3, 8)), 0, P)
    np.testing.assert_array_equal(out, 0.0)


def test_ff_output_bounded(tiny_params):
    gen = np.random.default_rng(1)
    for _ in range(20):
        h = gen.normal(size=(7, 16)) * 10
        out = ff_sublayer(h, gen.normal(size=(7, 16)) * 10, 1, tiny_params)
        assert np.all(np.abs(out) < 1)


def test_ff_backward_matches_central_differences(tiny_params):
    gen = np.random.default_rng(2)
    h_in = gen.normal(size=(1, 4, 16))
    mha = gen.normal(size=(1, 4, 16))
    w = gen.normal(size=(1, 4, 16))

    def f(x):
        out, _ = ff_forward(x, mha, tiny_params, 0)
        return float((w * out).sum())

    out, cache = ff_forward(h_in, mha, tiny_params, 0)
    analytic = ff_backward(w, cache, tiny_params, 0, {})
    numeric = central_diff(f, h_in, 1e-5)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    assert rel.max() < 1e-4


def test_encode_empty_mask_matches_unmasked(tiny_params):
    inst = generate_instance(6, 20, 5)
    a = encode(inst, np.zeros(7, bool), tiny_params)
    b = encode(inst, None, tiny_params)
    np.testing.assert_array_equal(a.H, b.H)


def test_encode_subinstance_equivalence(tiny_params):
    gen = np.random.default_rng(9)
    for trial in range(30):
        n = int(gen.integers(1, 9))
        inst = generate_instance(n, 20, trial)
        visited = np.zeros(n + 1, bool)
        visited[1:] = gen.random(n) < 0.5
        masked = encode(inst, visited, tiny_params)
        keep = np.flatnonzero(~visited)
        reduced = encode(inst.subinstance(keep[1:]), None, tiny_params)
        np.testing.assert_allclose(masked.H[keep], reduced.H, rtol=0, atol=1e-12)


def test_encode_full_size_dimensions():
    arch = Architecture(d_h=128, n_layers=3, n_heads=8)
    assert (arch.d_k, arch.d_v, arch.d_ff) == (16, 16, 512)
    P = ModelParams.initialize(arch, 0)
    emb = encode(generate_instance(20, 30, 0), None, P)
    assert emb.H.shape == (21, 128)


def test_encode_permutation_equivariant(tiny_params):
    inst = generate_instance(6, 20, 8)
    perm = np.array([0, 3, 1, 6, 2, 5, 4])
    shuffled = VrpInstance(inst.coords[perm], inst.demands[perm], inst.capacity)
    np.testing.assert_allclose(
        encode(shuffled, None, tiny_params).H, encode(inst, None, tiny_params).H[perm], atol=1e-12
    )


def test_encode_bounded_and_attention_rows_normalised():
    arch = Architecture(32, 3, 4)
    P = scaled_params(arch, 1, 3.0)
    gen = np.random.default_rng(3)
    for trial in range(10):
        inst = generate_instance(8, 20, trial)
        visited = np.r_[False, gen.random(8) < 0.4]
        emb = encode(inst, visited, P)
        assert np.all(np.abs(emb.H) < 1)
        for mc, _ in emb.activations:
            a = mc["a"][0]
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)
            assert np.all(a[..., visited] == 0.0)


def test_encode_rejects_masked_depot(tiny_params):
    with pytest.raises(ValueError):
        encode(generate_instance(3, 20, 0), np.array([True, False, False, False]), tiny_params)
