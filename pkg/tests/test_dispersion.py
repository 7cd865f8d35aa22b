import numpy as np
import pytest

from dipex.dispersion import child_child_loss, combine, parent_child_loss
from dipex.geometry import normalize


def fd_gradient(fn, mat, h=1e-5):
    """Central finite differences of a scalar function of a (K, d) matrix."""
    grad = np.zeros_like(mat)
    for k in range(mat.shape[0]):
        for c in range(mat.shape[1]):
            hi = mat.copy()
            lo = mat.copy()
            hi[k, c] += h
            lo[k, c] -= h
            grad[k, c] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def rel_err(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / scale


def basis(d, i):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def test_parent_child_closed_forms():
    e0 = basis(4, 0)
    value, grads = parent_child_loss(e0[None, :], e0, tau_p=0.1)
    assert value == pytest.approx(-10.0, abs=1e-9)
    # at the minimum the tangential gradient vanishes
    assert np.allclose(grads, 0.0, atol=1e-12)
    value, _ = parent_child_loss(basis(4, 1)[None, :], e0, tau_p=0.1)
    assert value == pytest.approx(0.0, abs=1e-9)


def test_parent_child_averages_over_children():
    e0 = basis(3, 0)
    kids = np.stack([e0, basis(3, 1)])
    value, grads = parent_child_loss(kids, e0, tau_p=0.5)
    # mean of cos 1 and cos 0, scaled by -1/tau
    assert value == pytest.approx(-1.0, abs=1e-12)
    assert grads.shape == (2, 3)


def test_child_child_closed_forms():
    e0 = basis(4, 0)
    value, _ = child_child_loss(np.stack([e0, e0]), tau_c=0.1)
    assert value == pytest.approx(10.0, abs=1e-9)
    value, _ = child_child_loss(np.stack([e0, basis(4, 1)]), tau_c=0.1)
    assert value == pytest.approx(0.0, abs=1e-9)


def test_child_child_survives_extreme_temperature():
    # log-sum-exp with max subtraction: 1/tau of 1000 must not overflow
    e0 = basis(3, 0)
    near = normalize(np.array([1.0, 1e-3, 0.0]))
    value, grads = child_child_loss(np.stack([e0, near]), tau_c=1e-3)
    assert np.isfinite(value)
    assert np.all(np.isfinite(grads))


def test_input_validation():
    e0 = basis(3, 0)
    with pytest.raises(ValueError):
        parent_child_loss(e0[None, :], e0, tau_p=0.0)
    with pytest.raises(ValueError):
        parent_child_loss(e0[None, :], np.zeros(3), tau_p=0.1)
    with pytest.raises(ValueError):
        parent_child_loss(e0[None, :], basis(4, 0), tau_p=0.1)
    with pytest.raises(ValueError):
        child_child_loss(e0[None, :], tau_c=0.1)
    with pytest.raises(ValueError):
        child_child_loss(np.zeros((2, 3)), tau_c=0.1)


def test_parent_child_gradient_matches_finite_differences():
    rng = np.random.default_rng(101)
    for _ in range(20):
        k = int(rng.integers(1, 6))
        d = int(rng.integers(3, 12))
        kids = np.stack([normalize(rng.normal(size=d)) for _ in range(k)])
        parent = normalize(rng.normal(size=d))
        tau = float(rng.uniform(0.05, 1.0))
        _, grads = parent_child_loss(kids, parent, tau)
        numeric = fd_gradient(lambda m: parent_child_loss(m, parent, tau)[0], kids)
        assert rel_err(grads, numeric) < 1e-4


def test_child_child_gradient_matches_finite_differences():
    rng = np.random.default_rng(202)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        d = int(rng.integers(3, 12))
        kids = np.stack([normalize(rng.normal(size=d)) for _ in range(k)])
        tau = float(rng.uniform(0.05, 1.0))
        _, grads = child_child_loss(kids, tau)
        numeric = fd_gradient(lambda m: child_child_loss(m, tau)[0], kids)
        assert rel_err(grads, numeric) < 1e-4


def test_gradients_defined_off_sphere():
    # callers renormalize after stepping, so intermediate vectors may drift
    rng = np.random.default_rng(303)
    kids = rng.normal(size=(3, 5)) * 2.0
    parent = normalize(rng.normal(size=5))
    _, grads = parent_child_loss(kids, parent, 0.2)
    numeric = fd_gradient(lambda m: parent_child_loss(m, parent, 0.2)[0], kids)
    assert rel_err(grads, numeric) < 1e-4
    _, grads = child_child_loss(kids, 0.2)
    numeric = fd_gradient(lambda m: child_child_loss(m, 0.2)[0], kids)
    assert rel_err(grads, numeric) < 1e-4


def test_combine_weights_and_gradients():
    breakdown, grad = combine(
        1.0, 2.0, 3.0, 4.0, 5.0,
        gamma=0.1, gamma_bbox=5.0, gamma_giou=2.0, gamma_cls=1.0,
        grad_parent_child=np.ones((2, 3)),
        grad_child_child=np.full((2, 3), 2.0),
        grad_cls=np.full((2, 3), 3.0),
    )
    assert breakdown.total == pytest.approx(1.0 + 0.2 + 15.0 + 8.0 + 5.0)
    assert breakdown.as_dict()["child_child"] == 2.0
    # 1*1 + 0.1*2 + 1*3
    assert np.allclose(grad, 4.2)


def test_combine_without_gradients():
    breakdown, grad = combine(0.0, 0.0, 1.0, 0.5, 0.0, gamma=1.0)
    assert grad is None
    assert breakdown.total == pytest.approx(5.0 + 1.0)


def test_combine_rejects_mismatched_gradient_shapes():
    with pytest.raises(ValueError):
        combine(
            0.0, 0.0, 0.0, 0.0, 0.0,
            gamma=1.0,
            grad_parent_child=np.ones((2, 3)),
            grad_child_child=np.ones((3, 3)),
        )
