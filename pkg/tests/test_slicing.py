"""Sliced gradient engine: projection sampling, 1-D fast path, Monte-Carlo estimator."""

import math
import time

import numpy as np
import pytest

from mmdflow.kernels import grad_full, grad_full_conditional
from mmdflow.slicing import (
    _gaussian_directions,
    _grad_1d_rows,
    grad_1d_sorted,
    sample_sphere,
    sliced_grad,
    sliced_grad_conditional,
    slicing_constant,
)


# ---------------------------------------------------------------------------
# slicing_constant
# ---------------------------------------------------------------------------

def test_slicing_constant_low_dims():
    # sqrt(pi)*Gamma(1)/Gamma(1/2) = 1, sqrt(pi)*Gamma(3/2)/Gamma(1) = pi/2,
    # sqrt(pi)*Gamma(2)/Gamma(3/2) = 2
    assert slicing_constant(1).value == pytest.approx(1.0, rel=1e-12)
    assert slicing_constant(2).value == pytest.approx(math.pi / 2, rel=1e-12)
    assert slicing_constant(3).value == pytest.approx(2.0, rel=1e-12)


def test_slicing_constant_large_dims_finite():
    prev = 0.0
    for d in [10, 100, 101, 1000, 10_000]:
        c = slicing_constant(d).value
        assert np.isfinite(c) and c > 0
        assert c > prev  # grows like sqrt(pi*d/2)
        prev = c
    # asymptotic check at large d
    assert slicing_constant(10_000).value == pytest.approx(math.sqrt(math.pi * 10_000 / 2), rel=1e-3)


def test_slicing_constant_log_gamma_branch_continuity():
    # d=100 uses the direct Gamma ratio, d=101 the log-Gamma route; both must
    # agree with the formula to full precision
    direct = math.sqrt(math.pi) * math.gamma(101 / 2) / math.gamma(100 / 2)
    assert slicing_constant(100).value == pytest.approx(direct, rel=1e-12)


def test_slicing_constant_rejects_zero():
    with pytest.raises(ValueError):
        slicing_constant(0)


# ---------------------------------------------------------------------------
# sample_sphere
# ---------------------------------------------------------------------------

def test_sample_sphere_d1_is_sign():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(50):
        proj = sample_sphere(1, rng)
        assert proj.direction.shape == (1,)
        assert proj.direction[0] in (1.0, -1.0)
        seen.add(proj.direction[0])
    assert seen == {1.0, -1.0}


@pytest.mark.parametrize("dim", [2, 3, 7, 50])
def test_sample_sphere_unit_norm(dim):
    rng = np.random.default_rng(1)
    for _ in range(20):
        proj = sample_sphere(dim, rng)
        assert abs(np.linalg.norm(proj.direction) - 1.0) <= 1e-12


def test_sample_sphere_rejects_dim_zero():
    with pytest.raises(ValueError):
        sample_sphere(0, np.random.default_rng(2))


def test_sphere_directions_are_centered():
    rng = np.random.default_rng(3)
    dirs = _gaussian_directions(3, 100_000, rng)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(dirs.mean(axis=0)) < 0.02)


# ---------------------------------------------------------------------------
# grad_1d_sorted
# ---------------------------------------------------------------------------

def test_grad_1d_hand_values():
    np.testing.assert_allclose(
        grad_1d_sorted([0.0, 1.0], [0.5]), [-0.25, 0.25], atol=1e-15
    )


def test_grad_1d_tie_convention():
    # coincident particles: interaction cancels, each feels only the target pull
    np.testing.assert_allclose(
        grad_1d_sorted([0.0, 0.0], [0.5]), [-0.5, -0.5], atol=1e-15
    )


def test_grad_1d_stationary_at_target():
    rng = np.random.default_rng(4)
    p = np.sort(rng.normal(size=33))
    assert np.all(grad_1d_sorted(p.copy(), p.copy()) == 0.0)


def test_grad_1d_matches_grad_full_random_instances():
    # 100 instances with N, M up to 1000, a third of them tie-heavy
    rng = np.random.default_rng(5)
    for trial in range(100):
        n = int(rng.integers(1, 1001))
        m = int(rng.integers(1, 1001))
        if trial % 3 == 0:
            x = rng.integers(-4, 5, size=n).astype(float)
            p = rng.integers(-4, 5, size=m).astype(float)
        else:
            x = rng.normal(size=n)
            p = rng.normal(size=m)
        fast = grad_1d_sorted(x, p)
        brute = grad_full(x.reshape(-1, 1), p.reshape(-1, 1))[:, 0]
        np.testing.assert_allclose(fast, brute, atol=1e-10)


def test_grad_1d_rejects_non_finite():
    with pytest.raises(ValueError):
        grad_1d_sorted([0.0, np.nan], [0.5])


# ---------------------------------------------------------------------------
# batched rows engine vs the reference path
# ---------------------------------------------------------------------------

def test_batched_rows_match_reference_bitwise():
    rng = np.random.default_rng(6)
    for _ in range(10):
        rows, n, m = 16, int(rng.integers(1, 40)), int(rng.integers(1, 40))
        # mix continuous rows with integer-valued (tie-heavy) rows
        vx = np.where(
            rng.random((rows, n)) < 0.5,
            rng.normal(size=(rows, n)),
            rng.integers(-3, 4, size=(rows, n)).astype(float),
        )
        vp = np.where(
            rng.random((rows, m)) < 0.5,
            rng.normal(size=(rows, m)),
            rng.integers(-3, 4, size=(rows, m)).astype(float),
        )
        batched = _grad_1d_rows(vx, vp)
        for r in range(rows):
            assert batched[r].tobytes() == grad_1d_sorted(vx[r], vp[r]).tobytes()


# ---------------------------------------------------------------------------
# sliced_grad
# ---------------------------------------------------------------------------

def test_sliced_grad_d1_exact():
    rng = np.random.default_rng(7)
    for n_proj in [1, 2, 5]:
        x = rng.normal(size=(20, 1))
        p = rng.normal(size=(15, 1))
        est = sliced_grad(x, p, n_proj, np.random.default_rng(100 + n_proj))
        np.testing.assert_allclose(est, grad_full(x, p), atol=1e-10)


def test_sliced_grad_matched_sets_exactly_zero():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(12, 3))
    est = sliced_grad(x, x.copy(), 64, np.random.default_rng(9))
    assert np.all(est == 0.0)


def test_sliced_grad_close_to_full_at_large_projection_count():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(16, 2))
    p = rng.normal(size=(16, 2)) + 0.5
    full = grad_full(x, p)
    est = sliced_grad(x, p, 200_000, np.random.default_rng(11))
    rel = np.linalg.norm(est - full) / np.linalg.norm(full)
    assert rel < 0.02


def test_sliced_grad_error_decays_like_inverse_sqrt():
    # quadrupling P should roughly halve the error (within a factor 1.5)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(16, 3))
    p = rng.normal(size=(16, 3)) + 0.7
    full = grad_full(x, p)
    scale = np.linalg.norm(full)

    def mean_err(n_proj, seed0, draws=20):
        errs = [
            np.linalg.norm(sliced_grad(x, p, n_proj, np.random.default_rng(seed0 + i)) - full)
            / scale
            for i in range(draws)
        ]
        return float(np.mean(errs))

    e_small = mean_err(500, 1000)
    e_big = mean_err(2000, 2000)
    ratio = e_small / e_big
    assert 2.0 / 1.5 <= ratio <= 2.0 * 1.5


def test_sliced_grad_grand_mean_approaches_full():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(10, 2))
    p = rng.normal(size=(10, 2)) + 1.0
    full = grad_full(x, p)
    estimates = [
        sliced_grad(x, p, 1000, np.random.default_rng(500 + i)) for i in range(50)
    ]
    grand = np.mean(estimates, axis=0)
    assert np.linalg.norm(grand - full) / np.linalg.norm(full) < 0.05


def test_sliced_grad_deterministic_bits():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(9, 4))
    p = rng.normal(size=(11, 4))
    a = sliced_grad(x, p, 300, np.random.default_rng(42))
    b = sliced_grad(x, p, 300, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_sliced_grad_rejects_bad_inputs():
    x = np.zeros((3, 2))
    with pytest.raises(ValueError):
        sliced_grad(x, np.zeros((3, 3)), 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sliced_grad(x, np.zeros((3, 2)), 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# sliced_grad_conditional
# ---------------------------------------------------------------------------

def test_conditional_with_no_conditions_equals_sliced():
    rng = np.random.default_rng(15)
    u = rng.normal(size=(14, 2))
    p = rng.normal(size=(10, 2))
    empty = np.zeros((14, 0))
    empty_t = np.zeros((10, 0))
    a = sliced_grad_conditional(u, empty, p, empty_t, 128, np.random.default_rng(3))
    b = sliced_grad(u, p, 128, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_conditional_matched_pairs_zero():
    rng = np.random.default_rng(16)
    u = rng.normal(size=(12, 2))
    q = rng.normal(size=(12, 1))
    est = sliced_grad_conditional(u, q, u.copy(), q.copy(), 64, np.random.default_rng(17))
    assert np.all(est == 0.0)


def test_conditional_matches_joint_brute_force():
    rng = np.random.default_rng(18)
    u = rng.normal(size=(8, 1))
    q = rng.normal(size=(8, 1))
    p = rng.normal(size=(8, 1)) + 0.3
    qt = rng.normal(size=(8, 1))
    xblock = grad_full_conditional(u, q, p, qt)
    est = sliced_grad_conditional(u, q, p, qt, 200_000, np.random.default_rng(19))
    rel = np.linalg.norm(est - xblock) / np.linalg.norm(xblock)
    assert rel < 0.02


def test_conditional_rejects_mismatched_condition_dims():
    with pytest.raises(ValueError):
        sliced_grad_conditional(
            np.zeros((4, 2)), np.zeros((4, 1)), np.zeros((4, 2)), np.zeros((4, 2)),
            8, np.random.default_rng(0),
        )


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------

def test_grad_1d_sorted_near_linear_scaling():
    sizes = [1_000, 10_000, 100_000, 1_000_000]
    times = []
    rng = np.random.default_rng(20)
    for n in sizes:
        x = rng.normal(size=n)
        p = rng.normal(size=n)
        reps = []
        for _ in range(3):
            t0 = time.perf_counter()
            grad_1d_sorted(x, p)
            reps.append(time.perf_counter() - t0)
        times.append(np.median(reps))
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert slope <= 1.2
