from __future__ import annotations

import numpy as np
import pytest

from marlcredit import autodiff as ad
from marlcredit.autodiff import Tensor, backward, gradient_check
from marlcredit.optim import Adam


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Finite-difference oracle: independent of the engine's backward pass."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f()
        flat[j] = orig - h
        down = f()
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return grad


def assert_matches_fd(make_loss, param: Tensor, rtol: float = 1e-6):
    param.zero_grad()
    loss = make_loss()
    backward(loss)
    numeric = central_diff(lambda: make_loss().item(), param.data)
    scale = np.maximum(np.abs(numeric), 1.0)
    np.testing.assert_allclose(param.grad / scale, numeric / scale, atol=rtol)


# ---------------------------------------------------------------------------
# basic examples


def test_sum_grad_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_scalar_chain_rule_by_hand():
    # loss = (w*x - y)^2 at w=2, x=3, y=5 -> dL/dw = 2*(6-5)*3 = 6
    w = Tensor(2.0, requires_grad=True)
    loss = ad.pow_const(w * 3.0 - 5.0, 2.0)
    backward(loss)
    assert w.grad == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_backward_twice_rejected():
    x = Tensor(3.0, requires_grad=True)
    loss = x * x
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_grad_accumulates_across_graphs():
    x = Tensor(3.0, requires_grad=True)
    backward(x * 2.0)
    backward(x * 4.0)
    assert x.grad == pytest.approx(6.0)


def test_unreachable_param_grad_stays_unset():
    x = Tensor(1.0, requires_grad=True)
    y = Tensor(1.0, requires_grad=True)
    backward(x * 2.0)
    assert y.grad is None


# ---------------------------------------------------------------------------
# primitive forward semantics


def test_softmax_symmetry_and_unit_sum():
    out = ad.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])
    x = np.random.default_rng(0).normal(size=(4, 7))
    s = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(3.0, 2.5, size=(5, 16))
    y = ad.layer_norm(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_matmul_identity():
    x = np.random.default_rng(2).normal(size=(2, 2))
    out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_allclose(out.data, x, atol=1e-15)


def test_attention_single_key_passes_value_through():
    q = Tensor(np.random.default_rng(3).normal(size=(1, 4)))
    k = Tensor(np.random.default_rng(4).normal(size=(1, 4)))
    v = Tensor(np.random.default_rng(5).normal(size=(1, 4)))
    out = ad.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.data, v.data, atol=1e-12)


def test_embed_lookup_gathers_rows():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = ad.embed_lookup(table, np.array([2, 0]))
    np.testing.assert_array_equal(out.data, [[6, 7, 8], [0, 1, 2]])


def test_determinism_bitwise():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 5))
    a = ad.gelu(ad.layer_norm(Tensor(x))).data
    b = ad.gelu(ad.layer_norm(Tensor(x))).data
    assert np.array_equal(a, b)


def test_debug_mode_aborts_on_nan():
    ad.DEBUG_CHECKS = True
    try:
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([-1.0]))
    finally:
        ad.DEBUG_CHECKS = False


# ---------------------------------------------------------------------------
# finite-difference agreement for each primitive


@pytest.mark.parametrize(
    "name,builder",
    [
        ("matmul", lambda p: ad.tsum(ad.matmul(p, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))))),
        ("add_broadcast", lambda p: ad.tsum(ad.add(p, Tensor(np.ones(4))) * Tensor(np.linspace(0.5, 2, 12).reshape(3, 4)))),
        ("mul", lambda p: ad.tsum(ad.mul(p, p))),
        ("relu", lambda p: ad.tsum(ad.relu(p))),
        ("gelu", lambda p: ad.tsum(ad.gelu(p))),
        ("tanh", lambda p: ad.tsum(ad.tanh(p))),
        ("exp", lambda p: ad.tsum(ad.exp(p))),
        ("softmax", lambda p: ad.tsum(ad.softmax(p, axis=-1) * Tensor(np.linspace(1, 2, p.size).reshape(p.shape)))),
        ("log_softmax", lambda p: ad.tsum(ad.log_softmax(p, axis=-1) * Tensor(np.linspace(1, 2, p.size).reshape(p.shape)))),
        ("layer_norm", lambda p: ad.tsum(ad.layer_norm(p, axis=-1) * Tensor(np.linspace(1, 2, p.size).reshape(p.shape)))),
        ("mean", lambda p: ad.tsum(ad.tmean(ad.mul(p, p), axis=1))),
        ("concat", lambda p: ad.tsum(ad.concat([p, ad.mul(p, 2.0)], axis=1) * Tensor(np.linspace(-1, 1, p.size * 2).reshape(p.shape[0], -1)))),
        ("slice", lambda p: ad.tsum(ad.slice_axis(p, 1, 1, 3) * Tensor(np.linspace(1, 2, p.shape[0] * 2).reshape(p.shape[0], 2)))),
        ("transpose", lambda p: ad.tsum(ad.transpose(p, (1, 0)) @ Tensor(np.linspace(-1, 1, p.shape[0] * 2).reshape(p.shape[0], 2)))),
        ("reshape", lambda p: ad.tsum(ad.reshape(p, (p.size,)) * Tensor(np.linspace(1, 3, p.size)))),
        ("expand", lambda p: ad.tsum(ad.expand(ad.reshape(p, (p.shape[0], 1, p.shape[1])), (p.shape[0], 5, p.shape[1])) * Tensor(np.linspace(1, 2, p.size * 5).reshape(p.shape[0], 5, p.shape[1])))),
        ("minimum", lambda p: ad.tsum(ad.minimum(p, ad.mul(p, 0.5) + 0.1))),
        ("clip", lambda p: ad.tsum(ad.clip_const(p, -0.5, 0.5) * Tensor(np.linspace(1, 2, p.size).reshape(p.shape)))),
        ("pow", lambda p: ad.tsum(ad.pow_const(p, 2.0))),
    ],
)
def test_primitive_matches_finite_differences(name, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert_matches_fd(lambda: builder(p), p, rtol=1e-6)


def test_embed_lookup_matches_fd():
    rng = np.random.default_rng(11)
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    idx = np.array([[0, 2], [2, 4]])
    weights = Tensor(rng.normal(size=(2, 2, 3)))
    assert_matches_fd(lambda: ad.tsum(ad.embed_lookup(table, idx) * weights), table)


def test_attention_matches_fd():
    rng = np.random.default_rng(12)
    p = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    mask = Tensor(np.where(rng.random((4, 4)) < 0.3, -1e9, 0.0))

    def loss():
        q = ad.slice_axis(p, 1, 0, 2)
        k = ad.slice_axis(p, 1, 2, 4)
        v = ad.slice_axis(p, 1, 4, 6)
        return ad.tsum(ad.scaled_dot_attention(q, k, v, mask) * Tensor(np.linspace(1, 2, 8).reshape(4, 2)))

    assert_matches_fd(loss, p)


def test_gradient_check_utility_passes_on_mlp():
    rng = np.random.default_rng(13)
    params = {
        "W1": Tensor(ad.glorot_uniform(rng, 4, 8), requires_grad=True),
        "b1": Tensor(np.zeros(8), requires_grad=True),
        "W2": Tensor(ad.glorot_uniform(rng, 8, 2), requires_grad=True),
    }
    x = Tensor(rng.normal(size=(5, 4)))
    y = Tensor(rng.normal(size=(5, 2)))

    def loss():
        h = ad.gelu(ad.linear(x, params["W1"], params["b1"]))
        diff = ad.sub(ad.matmul(h, params["W2"]), y)
        return ad.tmean(ad.mul(diff, diff))

    report = gradient_check(loss, params, h=1e-5, tol=1e-4)
    assert report["passed"], report


def test_gradient_check_catches_wrong_gradient():
    p = Tensor(np.array([0.7]), requires_grad=True)

    class Broken:
        def __call__(self):
            t = ad.mul(p, p)
            # corrupt the recorded backward rule
            t._vjps = (lambda g: g * 0.1,)
            return ad.tsum(t)

    report = gradient_check(Broken(), {"p": p}, h=1e-5, tol=1e-4)
    assert not report["passed"]


# ---------------------------------------------------------------------------
# Adam


def make_adam(params, **kw):
    defaults = dict(lr=1e-3)
    defaults.update(kw)
    return Adam(params, **defaults)


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = make_adam({"p": p})
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_constant_gradient_approaches_lr_sign():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = make_adam({"p": p}, lr=1e-3)
    g = np.array([0.35, -1.7])
    last = None
    for _ in range(500):
        before = p.data.copy()
        p.grad = g.copy()
        opt.step()
        last = p.data - before
    np.testing.assert_allclose(last, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_global_norm_clip():
    p = Tensor(np.zeros(4), requires_grad=True)
    opt = make_adam({"p": p}, lr=1.0, grad_clip=10.0)
    p.grad = np.full(4, 10.0)  # norm 20
    norm = opt.step()
    assert norm == pytest.approx(20.0)
    # applied gradient was scaled by 0.5
    np.testing.assert_allclose(opt.m["p"], 0.1 * 5.0 * np.ones(4))


def test_adam_state_roundtrip():
    rng = np.random.default_rng(14)
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    opt = make_adam({"p": p}, lr=1e-2)
    for _ in range(3):
        p.grad = rng.normal(size=(3,))
        opt.step()
    saved = {k: v.copy() for k, v in opt.state_tensors("opt").items()}
    fresh = make_adam({"p": p}, lr=1e-2)
    fresh.load_state_tensors("opt", saved)
    assert fresh.step_count == 3
    np.testing.assert_array_equal(fresh.m["p"], opt.m["p"])
    np.testing.assert_array_equal(fresh.v["p"], opt.v["p"])
