import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lencap import nn

finite = st.floats(-20, 20, allow_nan=False)


def test_softmax_values():
    assert np.allclose(nn.softmax(np.zeros(4)), 0.25)
    assert np.allclose(nn.softmax(np.array([2.0, 1.0, 0.0])), [0.6652, 0.2447, 0.0900], atol=1e-4)
    assert np.all(np.isfinite(nn.softmax(np.array([1e4, 0.0]))))


@given(arrays(np.float64, 6, elements=finite), st.floats(-50, 50))
def test_softmax_properties(x, c):
    p = nn.softmax(x)
    assert abs(p.sum() - 1) < 1e-6
    assert np.allclose(nn.softmax(x + c), p, atol=1e-12)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


def test_layer_norm_examples(rng):
    g, b = np.ones(8), np.zeros(8)
    assert np.allclose(nn.layer_norm(np.full(8, 3.0), g, b), 0)
    x = rng.standard_normal(8)
    y = nn.layer_norm(x, g, b)
    assert abs(y.mean()) < 1e-5 and abs(y.var() - 1) < 1e-4
    assert np.allclose(nn.layer_norm(y, g, b), y, atol=1e-5)


def test_attention_examples(rng):
    v = rng.standard_normal((3, 4))
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((3, 4))
    eye = np.eye(3, dtype=bool)
    assert np.allclose(nn.attention(q, k, v, eye), v)
    assert np.allclose(nn.attention(np.zeros((3, 4)), k, v, np.ones((3, 3), bool)),
                       v.mean(axis=0))
    with pytest.raises(ValueError):
        nn.attention(q, k, v, np.zeros((3, 3), bool))


def test_attention_causal_value_perturbation(rng):
    q, k, v = (rng.standard_normal((5, 4)) for _ in range(3))
    causal = np.tril(np.ones((5, 5), bool))
    base = nn.attention(q, k, v, causal)
    v2 = v.copy()
    v2[3] += 10
    out = nn.attention(q, k, v2, causal)
    assert np.array_equal(out[:3], base[:3])


def test_attention_rows_are_convex_combinations(rng):
    q, k, v = (rng.standard_normal((4, 3)) for _ in range(3))
    mask = rng.random((4, 4)) < 0.6
    mask[np.arange(4), rng.integers(0, 4, 4)] = True
    out, (_, _, _, probs, _) = nn.attention_forward(q, k, v, mask)
    assert np.all(probs[~mask] == 0)
    assert np.allclose(probs.sum(-1), 1)
    assert np.allclose(out, probs @ v)


def test_cross_entropy_examples():
    V = 7
    targets = np.array([0, 3, 6])
    assert math.isclose(nn.cross_entropy_masked(np.zeros((3, V)), targets, np.ones(3)), math.log(V))
    logits = np.zeros((3, V))
    logits[np.arange(3), targets] = 30
    assert nn.cross_entropy_masked(logits, targets, np.ones(3)) < 1e-9
    hand = nn.cross_entropy_masked(np.array([[0.0, math.log(3)]]), np.array([1]), np.ones(1))
    assert math.isclose(hand, -math.log(0.75), rel_tol=1e-12)
    assert nn.cross_entropy_masked(np.zeros((2, 3)), np.array([0, 1]), np.zeros(2)) == 0
    with pytest.raises(ValueError):
        nn.cross_entropy_masked(np.zeros((1, 3)), np.array([3]), np.ones(1))


def test_fused_softmax_ce_gradient(rng):
    logits = rng.standard_normal((4, 5))
    targets = np.array([1, 0, 4, 2])
    mask = np.array([1, 0, 1, 1], bool)
    _, cache = nn.cross_entropy_forward(logits, targets, mask)
    grad = nn.cross_entropy_backward(cache)
    expect = (nn.softmax(logits) - np.eye(5)[targets]) / 3
    expect[~mask] = 0
    assert np.allclose(grad, expect)


def _check_primitive(fwd, bwd, inputs, rng):
    """Central-difference check of a primitive through a random linear readout."""
    out, _ = fwd(**inputs)
    w = rng.standard_normal(out.shape)

    def fun(p):
        y, cache = fwd(**p)
        grads = bwd(w, cache)
        return float(np.sum(y * w)), dict(zip(p, grads))

    return nn.grad_check(fun, inputs, eps=1e-6)


def test_primitive_gradients(rng):
    x = rng.standard_normal((3, 6))
    errs = [
        _check_primitive(lambda x, g, b: nn.layer_norm_forward(x, g, b), nn.layer_norm_backward,
                         dict(x=x, g=rng.standard_normal(6), b=rng.standard_normal(6)), rng),
        _check_primitive(lambda x: nn.gelu_forward(x), lambda d, c: (nn.gelu_backward(d, c),),
                         dict(x=x), rng),
    ]
    mask = np.tril(np.ones((3, 3), bool))
    errs.append(_check_primitive(lambda q, k, v: nn.attention_forward(q, k, v, mask),
                                 nn.attention_backward,
                                 dict(q=x[:, :4], k=rng.standard_normal((3, 4)),
                                      v=rng.standard_normal((3, 4))), rng))
    assert max(errs) < 1e-5


def test_grad_check_square():
    err = nn.grad_check(lambda p: (float(p["w"] ** 2), {"w": 2 * p["w"]}), {"w": np.array(3.0)})
    assert err < 1e-8


def test_grad_check_flags_wrong_gradient():
    err = nn.grad_check(lambda p: (float(p["w"] ** 2), {"w": 3 * p["w"]}), {"w": np.array(3.0)})
    assert err > 0.3


def test_grad_check_one_layer_cross_entropy(rng):
    x = rng.standard_normal((5, 4))
    targets = rng.integers(0, 6, 5)
    mask = np.array([1, 1, 0, 1, 1], bool)

    def fun(p):
        logits = x @ p["w"] + p["b"]
        loss, cache = nn.cross_entropy_forward(logits, targets, mask)
        d = nn.cross_entropy_backward(cache)
        return loss, {"w": x.T @ d, "b": d.sum(0)}

    params = {"w": rng.standard_normal((4, 6)), "b": rng.standard_normal(6)}
    assert nn.grad_check(fun, params) < 1e-5


def test_adamw_first_step_closed_form():
    p = {"w": np.array([1.0])}
    opt = nn.AdamW(p, weight_decay=0.0)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    assert abs(p["w"][0] - 0.9) < 1e-6 and opt.t == 1


def test_adamw_zero_gradient_and_pure_decay():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = nn.AdamW(p, weight_decay=0.0)
    opt.step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, 0.1)
    assert np.array_equal(p["w"], np.ones((2, 2)))
    opt = nn.AdamW(p, weight_decay=0.5, decay_filter=lambda n, a: True)
    nn.adamw_step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, opt, 0.1)
    assert np.allclose(p["w"], 0.95) and np.allclose(p["b"], 0.95)


def test_adamw_default_skips_vectors():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = nn.AdamW(p, weight_decay=0.5)
    opt.step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, 0.1)
    assert np.allclose(p["w"], 0.95) and np.array_equal(p["b"], np.ones(2))


def test_adamw_shape_mismatch():
    p = {"w": np.ones(3)}
    with pytest.raises(ValueError):
        nn.AdamW(p).step(p, {"w": np.ones(2)}, 0.1)


def test_adamw_matches_reference_loop(rng):
    w = rng.standard_normal(5)
    p = {"w": w[None].copy()}
    opt = nn.AdamW(p, weight_decay=0.1)
    m = v = np.zeros(5)
    ref = w.copy()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        opt.step(p, {"w": g[None]}, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * 0.1 * ref
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"][0], ref, atol=1e-12)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = nn.clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert math.isclose(nn.global_norm(clipped), 1.0)
    same, _ = nn.clip_by_global_norm(g, 10.0)
    assert same is g


def test_truncated_normal_bounds(rng):
    x = nn.truncated_normal(rng, (200, 200), std=0.02)
    assert np.abs(x).max() <= 0.04 + 1e-9
    assert 0.015 <= x.std() <= 0.025
