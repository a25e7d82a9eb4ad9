import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sitsclue.affinity import (
    OFFSETS,
    extract_t2c_attention,
    neighbor_index,
    pairwise_affinity,
    propagate,
    propagate_cam,
    reweight,
    tap_loss,
)

f64 = dict(dtype=torch.float64)


# -- temporal-to-class attention ------------------------------------------------


def random_stack(B=2, N=5, heads=3, K=4, T=12, layers=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.softmax(torch.randn(B, N, heads, K + T, K + T, generator=g, **f64), -1) for _ in range(layers)]


def test_a_tilde_shape_and_columns():
    a = extract_t2c_attention(random_stack(), K=4)
    assert a.shape == (2, 12, 4)
    assert torch.allclose(a.sum(-2), torch.ones(2, 4, **f64), atol=1e-12)


def test_a_tilde_constant_attention_is_uniform():
    L = 16
    stack = [torch.full((1, 3, 2, L, L), 1.0 / L, **f64)]
    a = extract_t2c_attention(stack, K=4)
    assert torch.allclose(a, torch.full((1, 12, 4), 1 / 12, **f64))


def test_a_tilde_uses_class_rows_and_time_columns():
    K, T = 2, 3
    att = torch.zeros(1, 1, 1, K + T, K + T, **f64)
    att[0, 0, 0, 1, K + 2] = 5.0  # class 1 query -> timestep 2 key
    att[0, 0, 0, K + 2, 1] = 9.0  # transposed block must be ignored
    a = extract_t2c_attention([att], K)[0]
    expected = torch.softmax(torch.tensor([0.0, 0.0, 5.0], **f64), 0)
    assert torch.allclose(a[:, 1], expected)
    assert torch.allclose(a[:, 0], torch.full((3,), 1 / 3, **f64))


def test_a_tilde_layer_modes():
    stack = random_stack()
    last = extract_t2c_attention(stack, 4, "last")
    mean = extract_t2c_attention(stack, 4, "mean")
    assert torch.allclose(last, extract_t2c_attention(stack[-1:], 4))
    assert not torch.allclose(last, mean)


# -- reweight ---------------------------------------------------------------------


def test_reweight_uniform_is_time_mean():
    z = torch.randn(6, 12, 8, **f64)
    v = reweight(z, torch.full((12, 3), 1 / 12, **f64))
    for k in range(3):
        assert torch.allclose(v[k], z.mean(1))


def test_reweight_one_hot():
    z = torch.randn(6, 5, 8, **f64)
    a = torch.zeros(5, 2, **f64)
    a[3, :] = 1.0
    assert torch.equal(reweight(z, a)[1], z[:, 3])


def test_reweight_two_timesteps():
    z = torch.zeros(1, 2, 2, **f64)
    z[0, 0] = torch.tensor([1.0, 0.0])
    z[0, 1] = torch.tensor([0.0, 1.0])
    v = reweight(z, torch.tensor([[0.25], [0.75]], **f64))
    assert torch.allclose(v[0, 0], torch.tensor([0.25, 0.75], **f64))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_reweight_in_convex_hull(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 6, 3, generator=g, **f64)
    a = torch.softmax(torch.randn(6, 2, generator=g, **f64), 0)
    v = reweight(z, a)
    lo, hi = z.min(1).values, z.max(1).values
    assert (v >= lo - 1e-12).all() and (v <= hi + 1e-12).all()


# -- pairwise affinity ----------------------------------------------------------


def test_neighbors_of_corner_and_centre():
    idx, valid = neighbor_index((3, 3))
    assert valid[4].all()
    assert sorted(idx[4].tolist()) == [0, 1, 2, 3, 5, 6, 7, 8]
    assert valid[0].sum() == 3 and sorted(idx[0][valid[0]].tolist()) == [1, 3, 4]


def test_affinity_hand_oracle_3x3():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(9, 5))
    got = pairwise_affinity(torch.as_tensor(v), (3, 3)).numpy()
    for i in range(9):
        r, c = divmod(i, 3)
        sigma = max(float(np.std(v[i])), 1e-6)
        for slot, (dr, dc) in enumerate(OFFSETS):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < 3 and 0 <= cc < 3):
                assert got[i, slot] == 0.0
                continue
            j = rr * 3 + cc
            cos = float(v[i] @ v[j] / (np.linalg.norm(v[i]) * np.linalg.norm(v[j])))
            assert math.isclose(got[i, slot], math.exp(cos / sigma), rel_tol=1e-12)


def test_affinity_identical_vectors_constant():
    v = torch.tensor([1.0, 2.0, 3.0], **f64).expand(9, 3)
    aff = pairwise_affinity(v, (3, 3))
    _, valid = neighbor_index((3, 3))
    vals = aff[valid]
    assert torch.allclose(vals, vals[0].expand_as(vals))


def test_affinity_orthogonal_is_one():
    v = torch.tensor([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 2.0, -2.0]], **f64)
    aff = pairwise_affinity(v, (1, 2))
    assert aff[0, OFFSETS.index((0, 1))].item() == 1.0


def test_affinity_sigma_floor():
    v = torch.zeros(2, 3, **f64)
    v[:, 0] = 0.0
    v += 1.0  # constant entries: std 0, floored
    aff = pairwise_affinity(v, (1, 2))
    assert not torch.isnan(aff).any()


# -- propagation ------------------------------------------------------------------


def uniform_aff(grid):
    _, valid = neighbor_index(grid)
    return valid.to(torch.float64)


def test_propagate_row_example():
    out = propagate(torch.tensor([0.0, 1.0, 0.0], **f64), uniform_aff((1, 3)), (1, 3), iters=1)
    assert out.tolist() == [1.0, 0.0, 1.0]


def test_propagate_constant_fixed_point():
    cam = torch.full((16,), 0.7, **f64)
    aff = pairwise_affinity(torch.randn(16, 4, **f64), (4, 4))
    assert torch.allclose(propagate(cam, aff, (4, 4), iters=5), cam)


def test_propagate_needs_an_iteration():
    with pytest.raises(Exception):
        propagate(torch.zeros(4, **f64), uniform_aff((2, 2)), (2, 2), iters=0)


@given(arrays(np.float64, (3, 12), elements=st.floats(0, 1)), st.integers(0, 1000), st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_propagate_range_contracts(cam, seed, iters):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(3, 12, 4, generator=g, **f64)
    aff = pairwise_affinity(v, (3, 4))
    c = torch.as_tensor(cam)
    out = propagate(c, aff, (3, 4), iters)
    assert (out.min(-1).values >= c.min(-1).values - 1e-12).all()
    assert (out.max(-1).values <= c.max(-1).values + 1e-12).all()


def test_propagate_cam_per_class():
    cam = torch.rand(2, 6, 3, **f64)
    aff = pairwise_affinity(torch.randn(2, 3, 6, 5, **f64), (2, 3))
    out = propagate_cam(cam, aff, (2, 3))
    for k in range(3):
        assert torch.allclose(out[..., k], propagate(cam[..., k], aff[:, k], (2, 3)))


# -- alignment loss ---------------------------------------------------------------


def test_tap_zero_when_equal():
    m = torch.rand(5, 2, **f64)
    assert tap_loss(m, m.clone(), torch.tensor([1, 1])).item() == 0.0


def test_tap_constant_diff():
    m = torch.rand(5, 1, **f64)
    assert math.isclose(tap_loss(m, m + 0.2, torch.tensor([1])).item(), 0.2, rel_tol=1e-12)


def test_tap_absent_class_ignored():
    m = torch.zeros(5, 2, **f64)
    target = torch.zeros(5, 2, **f64)
    target[:, 1] = 0.9
    assert tap_loss(m, target, torch.tensor([1, 0])).item() == 0.0


def test_tap_gradients():
    g = torch.Generator().manual_seed(1)
    m = torch.rand(2, 9, 3, generator=g, **f64).requires_grad_()
    v = torch.randn(2, 3, 9, 4, generator=g, **f64)
    labels = torch.tensor([[1, 0, 1], [1, 1, 0]])

    # target is a constant of the loss, so hold it fixed for the numerical side
    target = propagate_cam(m.detach(), pairwise_affinity(v, (3, 3)), (3, 3))

    def loss(cam):
        return tap_loss(cam, target, labels)

    assert torch.autograd.gradcheck(loss, (m,), eps=1e-6, atol=1e-8, rtol=1e-4)
    # same cam feeding both sides: gradient equals the fixed-target gradient
    m2 = m.detach().clone().requires_grad_()
    live = tap_loss(m2, propagate_cam(m2, pairwise_affinity(v, (3, 3)), (3, 3)), labels)
    (g_live,) = torch.autograd.grad(live, m2)
    m3 = m.detach().clone().requires_grad_()
    (g_fixed,) = torch.autograd.grad(tap_loss(m3, target, labels), m3)
    assert torch.equal(g_live, g_fixed)
