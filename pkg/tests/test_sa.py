import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dasa.sa import SaKernel, SemanticsAdaption, sa_forward, sa_init_identity, sa_param_count


def naive_depthwise(w, x):
    """Loop cross-correlation with zero padding, one kernel per channel."""
    m, k, _ = w.shape
    _, h, wd = x.shape
    r = k // 2
    xp = np.zeros((m, h + 2 * r, wd + 2 * r), dtype=np.float64)
    xp[:, r:r + h, r:r + wd] = x
    out = np.zeros((m, h, wd))
    for c in range(m):
        for i in range(h):
            for j in range(wd):
                out[c, i, j] = np.sum(w[c] * xp[c, i:i + k, j:j + k])
    return out


def test_identity_kernel_3x3():
    k = sa_init_identity(1, 3)
    np.testing.assert_array_equal(k.weights[0], [[0, 0, 0], [0, 1, 0], [0, 0, 0]])


def test_identity_kernel_sums():
    k = sa_init_identity(8, 5)
    assert k.weights.shape == (8, 5, 5)
    np.testing.assert_array_equal(k.weights.sum(axis=(1, 2)), np.ones(8))
    assert np.all(k.weights[:, 2, 2] == 1)


@pytest.mark.parametrize("k", [2, 4, 0, -1])
def test_even_kernel_rejected(k):
    with pytest.raises(ValueError):
        sa_init_identity(4, k)
    with pytest.raises(ValueError):
        SemanticsAdaption(4, k)


def test_kernel_type_rejects_bad_shapes():
    with pytest.raises(ValueError):
        SaKernel(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        SaKernel(np.zeros((3, 3, 5)))


def test_hand_convolution_center_and_corners():
    out = sa_forward(SaKernel(np.ones((1, 3, 3))), np.ones((1, 3, 3)))
    assert out[0, 1, 1] == 9.0
    assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4.0


def test_box_filter_on_constant():
    v = 2.5
    out = sa_forward(SaKernel(np.full((2, 3, 3), 1 / 9)), np.full((2, 6, 5), v))
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], v, rtol=1e-6)
    assert np.all(out[:, 0, :] < v) and np.all(out[:, :, 0] < v)


def test_1x1_is_per_channel_scaling(rng):
    w = rng.normal(size=(4, 1, 1))
    x = rng.normal(size=(4, 7, 5))
    np.testing.assert_allclose(sa_forward(SaKernel(w), x), w * x, rtol=1e-12)


def test_matches_naive_loop(rng):
    for k in (1, 3, 5, 7):
        w = rng.normal(size=(3, k, k))
        x = rng.normal(size=(3, 9, 6))
        np.testing.assert_allclose(sa_forward(SaKernel(w), x), naive_depthwise(w, x), atol=1e-10)


def test_channel_mismatch():
    with pytest.raises(ValueError):
        sa_forward(sa_init_identity(3, 3), np.zeros((4, 5, 5)))


def test_param_count():
    assert sa_param_count(64, 5) == 1600
    assert sa_param_count(26560, 5) == 664000
    assert sa_param_count(26560, 7) == 1301440
    assert 1.9 < sa_param_count(26560, 7) / sa_param_count(26560, 5) < 2.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.sampled_from([1, 3, 5, 7]))
def test_identity_is_bitwise_noop(x, k):
    out = sa_forward(sa_init_identity(x.shape[0], k), x)
    assert out.dtype == x.dtype
    np.testing.assert_array_equal(out, x)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 2**31 - 1))
def test_channel_isolation(m, k, seed):
    r = np.random.default_rng(seed)
    w = SaKernel(r.normal(size=(m, k, k)))
    x = r.normal(size=(m, 6, 5))
    base = sa_forward(w, x)
    for c in range(m):
        x2 = x.copy()
        x2[c] += r.normal(size=x2[c].shape)
        diff = np.abs(sa_forward(w, x2) - base).reshape(m, -1).max(1)
        assert all(diff[o] == 0 for o in range(m) if o != c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    w = SaKernel(r.normal(size=(3, 5, 5)).astype(np.float32))
    x = r.normal(size=(3, 8, 6)).astype(np.float32)
    y = r.normal(size=(3, 8, 6)).astype(np.float32)
    lhs = sa_forward(w, (a * x + b * y).astype(np.float32))
    rhs = a * sa_forward(w, x) + b * sa_forward(w, y)
    scale = np.abs(a * sa_forward(w, np.abs(x)) ).max() + np.abs(b * sa_forward(w, np.abs(y))).max() + 1e-6
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-5


def test_weight_gradient_matches_finite_differences(rng):
    w = torch.tensor(rng.normal(size=(3, 5, 5)), dtype=torch.float64, requires_grad=True)
    x = rng.normal(size=(2, 3, 6, 5))
    target = rng.normal(size=(2, 3, 6, 5))

    def loss_of(wnp):
        return float(np.sum((sa_forward(SaKernel(wnp), x) - target) ** 2))

    from dasa.sa import depthwise_conv

    loss = ((depthwise_conv(torch.from_numpy(x), w) - torch.from_numpy(target)) ** 2).sum()
    loss.backward()
    analytic = w.grad.numpy()
    h = 1e-6
    base = w.detach().numpy()
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        wp, wm = base.copy(), base.copy()
        wp[idx] += h
        wm[idx] -= h
        numeric[idx] = (loss_of(wp) - loss_of(wm)) / (2 * h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)
    assert rel.max() < 1e-4


def test_module_roundtrip():
    m = SemanticsAdaption(6, 3)
    x = torch.randn(2, 6, 5, 4)
    assert torch.equal(m(x), x)
    k = SaKernel(np.random.default_rng(0).normal(size=(6, 3, 3)).astype(np.float32))
    m.load(k)
    np.testing.assert_array_equal(m.export().weights, k.weights)
    m.reset_identity()
    assert torch.equal(m(x), x)
