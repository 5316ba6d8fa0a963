import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtype import _kernels
from fedtype.conformal import (
    ConformalConfig,
    ConformalModel,
    PredictionSet,
    fit_cmodel,
    fit_cmodel_from_logits,
    g_calibration,
    performance_delta,
    predict_masks,
    predict_set,
    quantile_tau,
    raps_score,
    temperature_scale,
)
from fedtype.losses import log_softmax
from fedtype.nn import DenseNet, init_network


def mean_ce(z, y, T):
    return float(-log_softmax(z / T)[np.arange(len(y)), y].mean())


# --- temperature scaling ---------------------------------------------------


def test_temperature_lr_zero_is_one(rng):
    z = rng.standard_normal((20, 4))
    y = rng.integers(0, 4, 20)
    assert temperature_scale(z, y, lr=0.0, max_iter=10) == 1.0


def test_temperature_saturated_correct_logits_stays_one():
    z = np.array([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0], [0.0, 0.0, 50.0]])
    y = np.array([0, 1, 2])
    assert temperature_scale(z, y, lr=0.01, max_iter=10) == pytest.approx(1.0, abs=1e-12)


def test_temperature_overconfident_moves_up(rng):
    # true labels follow softmax(l), the model reports 4*l: optimum T is near 4
    n, C = 4000, 5
    base = rng.standard_normal((n, C))
    p = np.exp(log_softmax(base))
    y = np.array([rng.choice(C, p=row) for row in p])
    z = 4.0 * base
    grid = np.linspace(0.5, 8.0, 301)
    best = grid[np.argmin([mean_ce(z, y, T) for T in grid])]
    assert best > 1.0
    T = temperature_scale(z, y, lr=0.01, max_iter=10)
    assert T > 1.0
    assert mean_ce(z, y, T) < mean_ce(z, y, 1.0)
    # more iterations keep walking towards the grid optimum
    assert abs(temperature_scale(z, y, lr=0.5, max_iter=500) - best) < 0.05


def test_temperature_empty():
    with pytest.raises(ValueError):
        temperature_scale(np.zeros((0, 3)), np.zeros(0, dtype=int))


# --- scores ------------------------------------------------------------------


def test_raps_uniform_top_label(backend):
    probs = np.full(10, 0.1)
    assert raps_score(probs, 0, u=1.0, penalty=0.0, kappa_reg=5) == pytest.approx(0.1, abs=1e-15)


def test_raps_two_class_runner_up(backend):
    assert raps_score(np.array([0.7, 0.3]), 1, u=1.0, penalty=0.0, kappa_reg=5) == pytest.approx(1.0, abs=1e-15)


def test_raps_rank_penalty(backend):
    probs = np.array([0.5, 0.3, 0.2])
    plain = raps_score(probs, 2, u=0.4, penalty=0.0, kappa_reg=1)
    pen = raps_score(probs, 2, u=0.4, penalty=0.5, kappa_reg=1)
    assert pen - plain == pytest.approx(1.0, abs=1e-15)


def test_raps_errors():
    with pytest.raises(ValueError):
        raps_score(np.array([0.5, 0.5]), 2, 1.0, 0.0, 1)
    with pytest.raises(ValueError):
        raps_score(np.array([0.5, 0.6]), 0, 1.0, 0.0, 1)


def brute_score(probs, y, u, penalty, kappa):
    order = sorted(range(len(probs)), key=lambda k: (-probs[k], k))
    r = order.index(y)
    rho = sum(probs[k] for k in order[:r])
    return rho + probs[y] * u + penalty * max(r + 1 - kappa, 0)


def test_raps_matches_brute_force(backend, rng):
    for _ in range(300):
        C = int(rng.integers(2, 8))
        probs = rng.dirichlet(np.ones(C))
        if rng.random() < 0.3:
            probs = np.round(probs, 1)
            probs /= probs.sum()
        y = int(rng.integers(C))
        u, pen, kap = rng.random(), rng.random(), int(rng.integers(1, 4))
        assert raps_score(probs, y, u, pen, kap) == pytest.approx(brute_score(probs, y, u, pen, kap), abs=1e-12)


def test_kernels_agree_on_sets(rng):
    if not _kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    probs = rng.dirichlet(np.ones(6), size=200)
    u = rng.random(200)
    a = _kernels.raps_set_mask_np(probs, u, 0.3, 2, 0.9)
    b = _kernels.raps_set_mask_nb(probs, u, 0.3, 2, 0.9)
    assert np.array_equal(a, b)
    labels = rng.integers(0, 6, 200)
    np.testing.assert_array_equal(
        _kernels.raps_label_scores_np(probs, labels, u, 0.3, 2),
        _kernels.raps_label_scores_nb(probs, labels, u, 0.3, 2),
    )


# --- quantile ------------------------------------------------------------------


def test_quantile_ten_scores():
    assert quantile_tau(np.arange(1, 11) / 10, 0.1) == 1.0


def test_quantile_hundred_scores(rng):
    s = rng.random(100)
    assert quantile_tau(s, 0.1) == np.sort(s)[90]


def test_quantile_fallback_and_empty():
    assert quantile_tau([0.3], 0.1) == math.inf
    with pytest.raises(ValueError):
        quantile_tau([], 0.1)


def test_quantile_matches_sort_oracle(rng):
    for _ in range(10_000):
        n = int(rng.integers(1, 60))
        theta = float(rng.uniform(0.01, 0.99))
        s = rng.random(n)
        k = math.ceil((1 - theta) * (n + 1))
        expected = math.inf if k > n else sorted(s.tolist())[k - 1]
        assert quantile_tau(s, theta) == expected


# --- calibration function --------------------------------------------------------


def test_g_values():
    assert g_calibration(0.0, 0.5, "g1") == 0.5
    assert g_calibration(-1.0, 0.5, "g1") == pytest.approx(1.0, abs=1e-12)
    assert g_calibration(-0.5, 0.5, "g3") == pytest.approx(0.625, abs=1e-12)
    assert g_calibration(-0.5, 0.5, "g4") == pytest.approx(0.875, abs=1e-12)
    assert g_calibration(-0.7, 0.5, "g2") == 0.5


@pytest.mark.parametrize("variant", ["g1", "g2", "g3", "g4"])
def test_g_nonnegative_delta_returns_lambda(variant):
    for d in np.linspace(0, 1, 11):
        assert g_calibration(d, 0.3, variant) == 0.3


def test_g1_continuous_and_monotone():
    lam = 0.4
    assert g_calibration(-1e-12, lam) == pytest.approx(lam, abs=1e-10)
    vals = [g_calibration(d, lam) for d in np.linspace(-1, 0, 101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_g_clamps_out_of_range(caplog):
    assert g_calibration(-3.0, 0.5) == g_calibration(-1.0, 0.5)
    assert "clamping" in caplog.text


def test_performance_delta():
    assert performance_delta(0.8, 0.8) == 0
    assert performance_delta(0.7, 0.9) == pytest.approx(-0.2)
    assert performance_delta(0.55, None) == 0.0


# --- fitting and prediction ----------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ConformalConfig(theta=1.5)
    with pytest.raises(ValueError):
        ConformalConfig(kappa_reg=0)
    with pytest.raises(ValueError):
        ConformalConfig(lam=-1)
    with pytest.raises(ValueError):
        ConformalConfig(g_variant="g7")


def test_fit_single_sample_gives_full_sets(rng):
    net = init_network([3, 4], seed=0)
    cm = fit_cmodel(net, rng.standard_normal((1, 3)), [2], ConformalConfig(), rng)
    assert cm.tau == math.inf
    assert predict_set(cm, rng.standard_normal(4), 0.0, rng) == PredictionSet((0, 1, 2, 3))


def test_fit_separable_saturated(rng):
    # logits strongly favour the true label: every score is rho=0 + pi*u with rank 1
    net = DenseNet((2, 2), np.array([30.0, -30.0, -30.0, 30.0, 0.0, 0.0]))
    X = np.vstack([rng.normal(3, 0.3, (30, 2)) * [1, -1], rng.normal(3, 0.3, (30, 2)) * [-1, 1]])
    y = np.array([0] * 30 + [1] * 30)
    cfg = ConformalConfig(u_policy="fixed", u_value=1.0, kappa_reg=1)
    cm = fit_cmodel(net, X, y, cfg, None)
    assert cm.tau <= 1.0 + 1e-12
    assert cm.tau > 0.99


def test_fit_deterministic(rng):
    net = init_network([4, 6, 3], seed=1)
    X = rng.standard_normal((40, 4))
    y = rng.integers(0, 3, 40)
    a = fit_cmodel(net, X, y, ConformalConfig(), np.random.default_rng(5))
    b = fit_cmodel(net, X, y, ConformalConfig(), np.random.default_rng(5))
    assert a == b


def test_fit_empty():
    with pytest.raises(ValueError):
        fit_cmodel(init_network([2, 2], seed=0), np.zeros((0, 2)), [], ConformalConfig(), None)


def test_predict_uniform_tau_one_full(backend):
    cm = ConformalModel(1.0, 1.0, ConformalConfig(u_policy="fixed", u_value=1.0, lam=0.0))
    assert len(predict_set(cm, np.zeros(10), 0.0, None)) == 10


def test_predict_infinite_tau(rng):
    cm = ConformalModel(1.0, math.inf, ConformalConfig())
    assert predict_masks(cm, rng.standard_normal((5, 3)), -0.5, rng).all()


def test_predict_negative_delta_shrinks(backend, rng):
    cfg = ConformalConfig(u_policy="fixed", u_value=0.5, kappa_reg=1, lam=0.5)
    cm = ConformalModel(1.0, 1.2, cfg)
    z = rng.standard_normal((500, 6))
    base = predict_masks(cm, z, 0.0, None)
    low = predict_masks(cm, z, -0.5, None)
    assert np.all(low <= base)
    assert (low.sum() < base.sum())


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    pen_lo=st.floats(0, 2),
    extra=st.floats(0, 2),
    tau=st.floats(0.05, 3),
)
def test_penalty_monotonicity(seed, pen_lo, extra, tau):
    r = np.random.default_rng(seed)
    probs = r.dirichlet(np.ones(5), size=20)
    u = r.random(20)
    lo = _kernels.raps_set_mask_np(probs, u, pen_lo, 2, tau)
    hi = _kernels.raps_set_mask_np(probs, u, pen_lo + extra, 2, tau)
    assert np.all(hi <= lo)


def test_sets_are_rank_prefixes(rng):
    cm = ConformalModel(1.3, 0.8, ConformalConfig(kappa_reg=2))
    z = rng.standard_normal((300, 7))
    masks = predict_masks(cm, z, 0.0, rng)
    for zi, m in zip(z, masks):
        order = np.argsort(-zi, kind="stable")
        k = m.sum()
        assert m[order[:k]].all() and not m[order[k:]].any()


def test_prediction_set_helpers():
    s = PredictionSet((3, 1, 1))
    assert s.labels == (1, 3) and len(s) == 2 and 3 in s
    assert (s & PredictionSet((1, 2))).labels == (1,)
    assert (s | PredictionSet((2,))).labels == (1, 2, 3)
    assert s.issubset({1, 2, 3})
    np.testing.assert_array_equal(s.to_mask(4), [False, True, False, True])
    assert PredictionSet.from_mask(np.array([True, False, True])).labels == (0, 2)
