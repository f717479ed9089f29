import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit
from scipy.stats import chi2

from ivdr.errors import SpecError
from ivdr.learners import (
    LearnerSpec, fit_learner, fit_least_squares, fit_logistic, fit_nearest_neighbor,
    fit_spline_basis, fit_stepwise, predict, second_order_pairs,
)


# -- least squares -------------------------------------------------------------


def test_exact_interpolation():
    f = fit_least_squares([[1, 0], [1, 1]], [1, 3])
    np.testing.assert_allclose(f.coef, [1, 2], atol=1e-12)


def test_constant_fit():
    f = fit_least_squares(np.ones((3, 1)), [4, 4, 4])
    np.testing.assert_allclose(f.coef, [4.0])
    np.testing.assert_allclose(predict(f, np.ones((3, 1))) - 4.0, 0.0, atol=1e-12)


def test_normal_equations_oracle():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((50, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.standard_normal(50)
    G = X.T @ X
    # explicit 3x3 inverse by cofactors
    cof = np.array([[(-1) ** (i + j) * np.linalg.det(np.delete(np.delete(G, i, 0), j, 1))
                     for j in range(3)] for i in range(3)])
    oracle = cof.T / np.linalg.det(G) @ (X.T @ y)
    np.testing.assert_allclose(fit_least_squares(X, y).coef, oracle, rtol=1e-10, atol=1e-10)


def test_rank_deficient_min_norm():
    X = np.column_stack([np.ones(6), np.arange(6.0), np.arange(6.0)])
    f = fit_least_squares(X, 2 * np.arange(6.0))
    assert not f.converged
    np.testing.assert_allclose(f.coef, [0, 1, 1], atol=1e-10)


def test_ridge_shrinks_monotonically():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(80), rng.standard_normal((80, 4))])
    y = X @ [1.0, 2.0, -1.0, 0.5, 0.0] + rng.standard_normal(80)
    ls = fit_least_squares(X, y).coef
    norms = [np.linalg.norm(fit_least_squares(X, y, lam).coef[1:]) for lam in (1e-9, 0.1, 1, 10, 100)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    np.testing.assert_allclose(fit_least_squares(X, y, 1e-9).coef, ls, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_orthogonality(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 4))
    y = rng.standard_normal(30) * 5
    f = fit_least_squares(X, y)
    score = X.T @ (y - X @ f.coef)
    assert np.abs(score).max() <= 1e-8 * max(1.0, np.abs(X.T @ y).max())


# -- logistic ------------------------------------------------------------------


def test_all_zero_outcome_clamped():
    f = fit_logistic(np.ones((20, 1)), np.zeros(20))
    assert not f.converged
    assert f.coef[0] == pytest.approx(-15.0)
    assert np.all(predict(f, np.ones((20, 1)), clip=False) < 1e-4)
    assert np.all(predict(f, np.ones((20, 1))) == 0.001)


def test_balanced_intercept_only():
    f = fit_logistic(np.ones((10, 1)), np.tile([0, 1], 5))
    assert f.coef[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(predict(f, np.ones((3, 1))), 0.5)


def gradient_ascent(X, y, lr=4.0, tol=1e-12, max_iter=1_000_000):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        g = X.T @ (y - expit(X @ beta)) / len(y)
        beta = beta + lr * g
        if np.abs(g).max() < tol:
            break
    return beta


def test_irls_matches_gradient_ascent():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(200)
    X = np.column_stack([np.ones(200), x])
    y = (rng.random(200) < expit(0.3 - 0.7 * x)).astype(float)
    f = fit_logistic(X, y)
    assert f.converged
    np.testing.assert_allclose(f.coef, gradient_ascent(X, y), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_logistic_score_zero(seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(100), rng.standard_normal((100, 2))])
    y = (rng.random(100) < expit(X @ [0.2, 1.0, -0.5])).astype(float)
    f = fit_logistic(X, y)
    if f.converged:
        score = X.T @ (y - expit(X @ f.coef))
        assert np.abs(score).max() <= 1e-6 * max(1.0, np.abs(X.T @ y).max())


def test_separation_flagged_not_fatal():
    x = np.linspace(-1, 1, 40)
    X = np.column_stack([np.ones(40), x])
    f = fit_logistic(X, (x > 0).astype(float))
    assert not f.converged
    assert np.all(np.abs(f.coef) <= 15.0)


def test_logistic_needs_binary():
    with pytest.raises(SpecError):
        fit_logistic(np.ones((3, 1)), [0, 1, 2])
    with pytest.raises(SpecError):
        LearnerSpec("logistic", "continuous")


# -- stepwise ------------------------------------------------------------------


def exhaustive_aic(X, y):
    """Best subset by Gaussian AIC, computed independently of the package."""
    n, p = X.shape
    floor = 1e-12 * np.var(y)
    best = None
    for r in range(p + 1):
        for S in itertools.combinations(range(p), r):
            D = np.column_stack([np.ones(n)] + [X[:, j] for j in S])
            beta = np.linalg.lstsq(D, y, rcond=None)[0]
            rss = np.sum((y - D @ beta) ** 2)
            aic = n * np.log(max(rss / n, floor)) + 2 * D.shape[1]
            if best is None or aic < best[0] - 1e-12:
                best = (aic, S)
    return best[1]


def test_stepwise_finds_single_true_column():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((100, 5))
    y = 1.5 + 3.0 * X[:, 2]
    f = fit_stepwise(X, y)
    assert f.selected == (2,)
    assert exhaustive_aic(X, y) == (2,)


def test_stepwise_agrees_with_exhaustive_search():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((120, 4))
        y = 0.4 * X[:, 0] - 0.3 * X[:, 3] + rng.standard_normal(120)
        assert fit_stepwise(X, y).selected == exhaustive_aic(X, y), seed


def _noise_intercept_only_rate(seeds):
    hits = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((200, 3))
        y = rng.standard_normal(200)
        sel = fit_stepwise(X, y).selected
        assert sel == exhaustive_aic(X, y)
        hits += sel == ()
    return hits / len(seeds)


def test_noise_selection_rate_matches_aic_theory():
    # each noise column enters when its LR statistic exceeds 2
    expected = chi2.cdf(2.0, 1) ** 3
    rate = _noise_intercept_only_rate(range(400))
    assert abs(rate - expected) < 3 * np.sqrt(expected * (1 - expected) / 400)


@pytest.mark.xfail(strict=True, reason="AIC admits a noise column with probability 0.157, "
                   "so the intercept-only rate is about 0.59, not >= 0.7")
def test_noise_intercept_only_at_least_seventy_percent():
    assert _noise_intercept_only_rate(range(50)) >= 0.7


def test_stepwise_no_candidates():
    y = np.array([1.0, 2.0, 4.0])
    f = fit_stepwise(np.empty((3, 0)), y)
    assert f.selected == ()
    np.testing.assert_allclose(predict(f, np.empty((2, 0))), y.mean())


def test_stepwise_binary():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((300, 3))
    y = (rng.random(300) < expit(2 * X[:, 1])).astype(float)
    f = fit_stepwise(X, y, family="binary")
    assert 1 in f.selected
    p = predict(f, X)
    assert np.all((p >= 0.001) & (p <= 0.999))


# -- splines -------------------------------------------------------------------


def test_spline_reproduces_line():
    x = np.linspace(-2, 3, 40)[:, None]
    f = fit_spline_basis(x, 1 - 2 * x[:, 0], 3)
    np.testing.assert_allclose(predict(f, x), 1 - 2 * x[:, 0], atol=1e-8)


def test_spline_hinge_in_span():
    x = np.linspace(0, 1, 21)[:, None]
    y = np.maximum(0, x[:, 0] - 0.5)
    f = fit_spline_basis(x, y, 1, knots=[[0.5]])
    np.testing.assert_allclose(predict(f, x), y, atol=1e-10)


def test_spline_beats_line_on_piecewise_truth():
    rng = np.random.default_rng(4)
    x = rng.uniform(-3, 3, (300, 1))
    y = np.abs(x[:, 0]) + 0.1 * rng.standard_normal(300)
    spl = fit_spline_basis(x, y, 2)
    X1 = np.column_stack([np.ones(300), x])
    ls = fit_least_squares(X1, y)
    assert np.mean((y - predict(spl, x)) ** 2) <= np.mean((y - predict(ls, X1)) ** 2)


def test_spline_skips_knots_on_binary_column():
    X = np.column_stack([np.tile([0.0, 1.0], 10), np.linspace(0, 1, 20)])
    f = fit_spline_basis(X, X[:, 1], 3)
    assert f.knots[0] == () and len(f.knots[1]) == 3


# -- nearest neighbours --------------------------------------------------------


def test_knn_global_mean():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((12, 2)), rng.standard_normal(12)
    f = fit_nearest_neighbor(X, y, 12)
    np.testing.assert_allclose(predict(f, rng.standard_normal((5, 2))), y.mean())


def test_knn_exact_match():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((12, 2)), rng.standard_normal(12)
    f = fit_nearest_neighbor(X, y, 1)
    np.testing.assert_allclose(predict(f, X[[4, 7]]), y[[4, 7]])


def brute_knn(X, y, q, k):
    out = []
    for row in q:
        d = [(float(np.sum((row - x) ** 2)), i) for i, x in enumerate(X)]
        d.sort()
        out.append(np.mean([y[i] for _, i in d[:k]]))
    return np.array(out)


def test_knn_brute_force_oracle():
    X = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [2, 2], [-1, 0], [0, -1], [3, 1], [1, 3], [2, 0]], float)
    y = np.arange(10.0) ** 1.5
    q = np.array([[0.5, 0.5], [0, 0], [1, 1], [2.5, 1.5], [0.5, 0]])  # several exact ties
    f = fit_nearest_neighbor(X, y, 3)
    np.testing.assert_allclose(predict(f, q), brute_knn(X, y, q, 3), atol=1e-12)


def test_knn_bad_k():
    with pytest.raises(SpecError):
        fit_nearest_neighbor(np.zeros((3, 1)), np.zeros(3), 4)


# -- predict contract ----------------------------------------------------------


def test_predict_on_training_rows():
    rng = np.random.default_rng(8)
    X = np.column_stack([np.ones(30), rng.standard_normal(30)])
    y = rng.standard_normal(30)
    f = fit_least_squares(X, y)
    np.testing.assert_allclose(predict(f, X), X @ f.coef)


def test_inverse_logit_at_zero():
    f = fit_logistic(np.ones((10, 1)), np.tile([0, 1], 5))
    assert predict(f, np.ones((1, 1)))[0] == pytest.approx(0.5)


def test_clipping_rule():
    x = np.array([[0.0], [1.0]])
    f = fit_logistic(np.column_stack([np.ones(2), x[:, 0]]), [0, 1])
    Xq = np.array([[1.0, 0.0]])
    raw = predict(f, Xq, clip=False)
    assert raw[0] < 0.001
    assert predict(f, Xq)[0] == 0.001
    # raw 0.9999 sits above the upper clip
    g = fit_logistic(np.ones((10000, 1)), np.r_[np.zeros(1), np.ones(9999)])
    assert predict(g, np.ones((1, 1)), clip=False)[0] == pytest.approx(0.9999)
    assert predict(g, np.ones((1, 1)))[0] == 0.999


def test_column_mismatch():
    f = fit_least_squares(np.ones((3, 2)), [1, 2, 3])
    with pytest.raises(SpecError):
        predict(f, np.ones((3, 3)))


def test_second_order_expansion():
    X = np.column_stack([np.tile([0.0, 1.0], 3), np.arange(6.0), np.arange(6.0) ** 0.5])
    pairs = second_order_pairs(X)
    assert (0, 0) not in pairs
    assert len(pairs) == 5  # 3 products + squares of the two non-binary columns


@pytest.mark.parametrize("spec", [
    LearnerSpec("least_squares", expansion="main_plus_second_order"),
    LearnerSpec("ridge", ridge_lambda=1.0),
    LearnerSpec("stepwise", expansion="main_plus_second_order"),
    LearnerSpec("spline_basis", knots=2),
    LearnerSpec("nearest_neighbor", k=5),
    LearnerSpec("logistic", "binary"),
    LearnerSpec("stepwise", "binary"),
    LearnerSpec("spline_basis", "binary"),
])
def test_learners_deterministic_and_bounded(spec):
    rng = np.random.default_rng(9)
    X = rng.standard_normal((80, 3))
    y = (rng.random(80) < expit(X[:, 0])).astype(float) if spec.family == "binary" else X[:, 0] + rng.standard_normal(80)
    a, b = fit_learner(spec, X, y), fit_learner(spec, X, y)
    Xq = rng.standard_normal((10, 3))
    np.testing.assert_array_equal(predict(a, Xq), predict(b, Xq))
    if spec.family == "binary":
        p = predict(a, Xq)
        assert np.all((p >= 0.001) & (p <= 0.999))
