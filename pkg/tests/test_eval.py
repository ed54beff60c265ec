import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadrop.eval import (
    NORMS,
    AttackConfig,
    accuracy_ci,
    boundary_project,
    pca_reducer,
    perturbation_norm,
    pgd_attack,
    project,
    random_start,
    steepest_direction,
)
from oracles import CX_DB_EXAMPLE


def test_ci_of_constant_accuracies_is_zero():
    assert accuracy_ci([0.9, 0.9]) == (pytest.approx(0.9), 0.0)


def test_ci_two_episode_hand_computation():
    mean, hw = accuracy_ci([0.0, 1.0])
    assert mean == 0.5
    assert hw == pytest.approx(1.96 * np.sqrt(0.5) / np.sqrt(2), abs=1e-15)
    assert hw == pytest.approx(0.98, abs=1e-12)


def test_ci_reporting_convention_scale():
    acc = np.random.default_rng(0).standard_normal(1000)
    acc = 0.95 + 0.027 * (acc - acc.mean()) / acc.std(ddof=1)
    _, hw = accuracy_ci(acc)
    assert hw == pytest.approx(1.96 * 0.027 / np.sqrt(1000), rel=1e-12)
    assert hw == pytest.approx(0.00167, abs=1e-5)


def test_ci_needs_two_records():
    with pytest.raises(ValueError):
        accuracy_ci([1.0])


def test_ci_halfwidth_shrinks_as_inverse_sqrt_n():
    rng = np.random.default_rng(1)
    ns = np.array([100, 400, 1600, 6400])
    hws = [np.mean([accuracy_ci(rng.random(n))[1] for _ in range(20)]) for n in ns]
    slope = np.polyfit(np.log(ns), np.log(hws), 1)[0]
    assert abs(slope + 0.5) <= 0.05


def _linear_fn(w):
    def fn(x, _):
        return float(np.sum(x @ w)), np.broadcast_to(w, x.shape).copy()

    return fn


@pytest.mark.parametrize("norm", NORMS)
def test_zero_radius_is_identity(norm):
    x = np.random.default_rng(2).random((5, 4))
    out = pgd_attack(_linear_fn(np.ones(4)), x, None, AttackConfig(norm, eps=0.0))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("norm", NORMS)
def test_perturbation_bound_over_many_cases(norm):
    rng = np.random.default_rng(3)
    n, d = 10_000, 6
    x = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    eps = rng.uniform(0.01, 1.0)
    cfg = AttackConfig(norm, eps=eps, steps=5, clip=None)
    out = pgd_attack(_linear_fn(w), x, None, cfg, rng)
    assert np.all(perturbation_norm(out - x, norm) <= eps * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(NORMS), st.floats(0.01, 5.0), st.integers(0, 2**32 - 1))
def test_projection_lands_in_ball_and_is_idempotent(norm, eps, seed):
    delta = 3 * np.random.default_rng(seed).standard_normal((4, 7))
    p = project(delta, norm, eps)
    assert np.all(perturbation_norm(p, norm) <= eps * (1 + 1e-12))
    np.testing.assert_allclose(project(p, norm, eps), p, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(NORMS), st.floats(0.01, 5.0), st.integers(0, 2**32 - 1))
def test_random_start_lies_in_ball(norm, eps, seed):
    rng = np.random.default_rng(seed)

    class Src:
        uniform = staticmethod(rng.random)
        normal = staticmethod(rng.standard_normal)

    d = random_start((50, 5), norm, eps, Src())
    assert np.all(perturbation_norm(d, norm) <= eps * (1 + 1e-12))


def test_l1_direction_breaks_ties_to_lowest_index():
    g = np.array([[0.5, -2.0, 2.0, 1.0]])
    assert steepest_direction(g, "l1").tolist() == [[0.0, -1.0, 0.0, 0.0]]
    assert steepest_direction(np.zeros((1, 3)), "l1").tolist() == [[0.0, 0.0, 0.0]]


def test_directions_have_unit_norm():
    g = np.random.default_rng(4).standard_normal((10, 5))
    for norm, dual in (("l2", "l2"), ("l1", "l1"), ("linf", "linf")):
        np.testing.assert_allclose(perturbation_norm(steepest_direction(g, norm), dual), 1.0, rtol=1e-14)


def test_attack_reduces_linear_classifier_accuracy_monotonically():
    rng = np.random.default_rng(5)
    n = 4000
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 2)) * 0.6 + np.where(y[:, None] == 1, 1.0, -1.0)
    w = np.array([1.0, 1.0])

    def fn(xa, yy):
        s = np.where(yy == 1, -1.0, 1.0)  # ascend the margin loss
        return 0.0, s[:, None] * w[None, :]

    for norm in NORMS:
        accs = []
        for eps in (0.0, 0.05, 0.1, 0.2, 0.4):
            xa = pgd_attack(fn, x, y, AttackConfig(norm, eps, steps=20, clip=None), np.random.default_rng(6))
            accs.append(np.mean((xa @ w > 0) == (y == 1)))
        assert all(b <= a for a, b in zip(accs, accs[1:])), (norm, accs)
        assert accs[-1] < accs[0]


def test_boundary_coordinate_examples():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert boundary_project(np.zeros((1, 2)), W, [0.5, 0.0], 0, 1).cx_db == pytest.approx(CX_DB_EXAMPLE, abs=1e-15)
    assert boundary_project(np.zeros((1, 2)), W, [0.3, 0.3], 0, 1).cx_db == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_boundary_sign_consistency_and_scale_invariance(seed, k):
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((200, 6))
    W = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    p = boundary_project(H, W, b, 0, 2)
    s1, s2 = H @ W[:, 0] + b[0], H @ W[:, 2] + b[2]
    assert np.array_equal(p.cx > p.cx_db, s1 > s2)
    assert np.array_equal(p.predicted == 0, s1 >= s2)
    # Scaling (w1 - w2, b1 - b2) by k > 0 keeps every sign.
    W2, b2 = W.copy(), b.copy()
    W2[:, 0] = W[:, 2] + k * (W[:, 0] - W[:, 2])
    b2[0] = b[2] + k * (b[0] - b[2])
    q = boundary_project(H, W2, b2, 0, 2)
    assert np.array_equal(np.sign(q.cx - q.cx_db), np.sign(p.cx - p.cx_db))


def test_degenerate_pair_is_rejected():
    W = np.ones((3, 2))
    with pytest.raises(ValueError):
        boundary_project(np.zeros((2, 3)), W, [0.0, 0.0], 0, 1)


def test_custom_reducer_hook_and_pca_is_deterministic():
    H = np.random.default_rng(7).standard_normal((30, 4))
    W = np.random.default_rng(8).standard_normal((4, 2))
    p = boundary_project(H, W, [0.0, 0.0], 0, 1, y_reducer=lambda r: r[:, 0])
    assert p.cy.shape == (30,)
    a = boundary_project(H, W, [0.0, 0.0], 0, 1)
    b = boundary_project(H, W, [0.0, 0.0], 0, 1)
    assert np.array_equal(a.cy, b.cy)
    assert np.array_equal(pca_reducer(np.zeros((3, 2))), np.zeros(3))
