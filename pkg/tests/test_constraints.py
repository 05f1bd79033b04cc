import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexedit.attention import upsample_nearest
from flexedit.backend import finite_difference_gradient
from flexedit.constraints import (
    ADD, REMOVE, REPLACE, ConstraintConfigError, EmptyObjectError, ObjectGeometry, TargetSpec, combine_losses,
    constraint_loss_and_grad, geometry, loss_pos, loss_sep, loss_size, soft_mask,
)

from conftest import relative_error


def brute_geometry(mask):
    H, W = mask.shape
    total = sx = sy = 0.0
    for h in range(H):
        for w in range(W):
            total += mask[h, w]
            sx += w * mask[h, w]
            sy += h * mask[h, w]
    return (sx / total, sy / total), total / (H * W)


def test_soft_mask_midpoint():
    assert soft_mask(np.array([0.6]), 0.6, 0.05)[0] == pytest.approx(0.5)


def test_soft_mask_closed_form():
    assert soft_mask(np.array([0.7]), 0.6, 0.1)[0] == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-9)
    assert 1 / (1 + np.exp(-1)) == pytest.approx(0.7311, abs=1e-4)


def test_soft_mask_low_temperature_limit():
    values = np.array([0.0, 0.58, 0.59, 0.61, 0.62, 1.0])
    s = soft_mask(values, 0.6, 1e-4)
    assert np.allclose(s, (values >= 0.6).astype(float), atol=1e-12)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_soft_mask_rejects_temperature(temperature):
    with pytest.raises(ValueError):
        soft_mask(np.zeros(3), 0.6, temperature)


def test_geometry_point_mass():
    m = np.zeros((8, 8))
    m[2, 5] = 1
    g = geometry(m)
    assert g.centroid == (5.0, 2.0)
    assert g.size == pytest.approx(1 / 64)


def test_geometry_full_mask():
    g = geometry(np.ones((6, 10)))
    assert g.centroid == pytest.approx((4.5, 2.5))
    assert g.size == pytest.approx(1.0)


def test_geometry_brute_force_soft():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.uniform(size=(16, 16))
        g = geometry(m)
        c, size = brute_geometry(m)
        assert np.abs(np.array(g.centroid) - c).max() <= 1e-6
        assert abs(g.size - size) <= 1e-6


def test_geometry_empty_mask():
    g = geometry(np.zeros((4, 4)))
    assert g.size == 0.0 and g.centroid is None
    with pytest.raises(EmptyObjectError):
        g.normalized_centroid
    with pytest.raises(EmptyObjectError):
        loss_pos(g, TargetSpec((0.5, 0.5)))


def test_geometry_resizes_to_requested_grid():
    m = np.zeros((4, 4))
    m[1, 2] = 1
    g = geometry(m, 8, 8)
    assert g.grid == (8, 8)
    assert g.centroid == pytest.approx((4.5, 2.5))
    assert g.size == pytest.approx(4 / 64)


def test_loss_pos_examples():
    at = ObjectGeometry((3.5, 1.5), 0.1, (4, 8))  # normalized (0.5, 0.5)
    assert loss_pos(at, TargetSpec((0.5, 0.5))) == pytest.approx(0.0)
    assert loss_pos(at, TargetSpec((0.8, 0.9))) == pytest.approx(0.25)
    assert loss_pos(at, TargetSpec(size_star=0.2)) == 0.0


def test_loss_pos_random_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        H, W = rng.integers(2, 40, size=2)
        cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        tx, ty = rng.uniform(size=2)
        dx = (cx + 0.5) / W - tx
        dy = (cy + 0.5) / H - ty
        got = loss_pos(ObjectGeometry((cx, cy), 0.1, (int(H), int(W))), TargetSpec((tx, ty)))
        assert abs(got - (dx * dx + dy * dy)) <= 1e-9


def test_loss_size_examples():
    g = ObjectGeometry((0, 0), 0.5, (4, 4))
    assert loss_size(g, TargetSpec(size_star=0.5)) == 0.0
    assert loss_size(g, TargetSpec(size_star=0.3)) == pytest.approx(0.04)
    rng = np.random.default_rng(2)
    for a, b in rng.uniform(size=(50, 2)):
        assert abs(loss_size(ObjectGeometry((0, 0), a, (4, 4)), TargetSpec(size_star=b)) - (a - b) ** 2) <= 1e-12


def test_loss_sep_examples():
    f = np.zeros(16)
    f[:4] = 1
    assert loss_sep(f, f) == pytest.approx(1.0)
    g = np.zeros(16)
    g[8:12] = 1
    assert loss_sep(f, g) == pytest.approx(0.0)
    # equal-size masks sharing half their support
    h = np.zeros(16)
    h[2:6] = 1
    assert loss_sep(f, h) == pytest.approx(0.5)
    assert loss_sep(np.zeros(16), g) == 0.0


def test_loss_sep_mean_over_existing():
    f = np.zeros(16)
    f[:4] = 1
    g1 = f.copy()
    g2 = np.zeros(16)
    g2[8:] = 1
    assert loss_sep(f, [g1, g2]) == pytest.approx(0.5)


def test_loss_sep_rejects_length_mismatch_and_empty():
    with pytest.raises(ValueError):
        loss_sep(np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        loss_sep(np.ones(4), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_loss_sep_range_symmetry_and_disjointness(seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(size=32) * (rng.uniform(size=32) < 0.5)
    g = (rng.uniform(size=32) < 0.4).astype(float)
    if not g.any() or not f.any():
        return
    s = loss_sep(f, g)
    assert -1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(loss_sep(g, f))
    assert (s == 0) == (not np.any((f > 0) & (g > 0)))


def test_combine_losses():
    assert combine_losses(REMOVE, 1.0, 2.0, 3.0).l_optim == 0
    only_size = combine_losses(REPLACE, l_size=0.04)
    assert only_size.l_optim == pytest.approx(0.04) and only_size.l_pos == 0
    both = combine_losses(REPLACE, l_pos=0.25, l_size=0.04)
    assert both.l_optim == pytest.approx(0.25 + 0.04)
    assert combine_losses(ADD, l_sep=0.3).l_optim == pytest.approx(0.3)
    with pytest.raises(ConstraintConfigError):
        combine_losses(ADD, l_sep=0.3, has_existing=False)
    with pytest.raises(ConstraintConfigError):
        combine_losses("swap")


def test_target_spec_validation():
    with pytest.raises(ValueError):
        TargetSpec((1.2, 0.5))
    with pytest.raises(ValueError):
        TargetSpec(size_star=-0.1)
    assert TargetSpec.from_pixels(3, 1, 8, 4).centroid_star == pytest.approx((0.4375, 0.375))


def test_hard_and_soft_geometry_agree_at_low_temperature():
    rng = np.random.default_rng(3)
    for _ in range(20):
        values = rng.uniform(size=(8, 8))
        # keep a 0.01 margin around beta
        values[np.abs(values - 0.6) < 0.01] += 0.02
        hard = geometry((values >= 0.6).astype(float))
        soft = geometry(soft_mask(values, 0.6, 1e-4))
        assert abs(hard.size - soft.size) <= 1e-3
        assert np.abs(np.array(hard.centroid) - np.array(soft.centroid)).max() <= 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), k=st.integers(2, 4))
def test_losses_invariant_under_resolution_rescaling(seed, k):
    rng = np.random.default_rng(seed)
    m = (rng.uniform(size=(6, 6)) < 0.5).astype(float)
    if not m.any():
        return
    target = TargetSpec(tuple(rng.uniform(size=2)), float(rng.uniform()))
    small = geometry(m)
    big = geometry(upsample_nearest(m, (6 * k, 6 * k)))
    assert loss_pos(small, target) == pytest.approx(loss_pos(big, target), abs=1e-12)
    assert loss_size(small, target) == pytest.approx(loss_size(big, target), abs=1e-12)


def _fd_check(kind, target=None, existing=(), seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=(8, 8))
    losses, grad = constraint_loss_and_grad(values, kind, target, existing)
    fd = finite_difference_gradient(
        lambda v: constraint_loss_and_grad(v, kind, target, existing)[0].l_optim, values, 1e-3)
    return losses, relative_error(grad, fd)


@pytest.mark.parametrize("target", [TargetSpec((0.2, 0.8)), TargetSpec(size_star=0.1),
                                    TargetSpec((0.7, 0.3), 0.4)])
def test_replace_gradient_matches_finite_differences(target):
    for seed in range(4):
        losses, err = _fd_check(REPLACE, target, seed=seed)
        assert err <= 1e-3


def test_add_gradient_matches_finite_differences():
    g = np.zeros((8, 8))
    g[2:6, 1:4] = 1
    for seed in range(4):
        losses, err = _fd_check(ADD, existing=[g], seed=seed)
        assert losses.l_sep > 0
        assert err <= 1e-3


def test_remove_has_zero_loss_and_gradient():
    losses, grad = constraint_loss_and_grad(np.random.default_rng(0).uniform(size=(8, 8)), REMOVE)
    assert losses.l_optim == 0 and not grad.any()
