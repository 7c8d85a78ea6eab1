import mpmath
import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from featprobe.simlab import (MEASURES, NOISE_LABEL, UndefinedSimilarityError, average_grids,
                              canonical_correlations, cca_similarities, center_columns,
                              cka_feature_form, cka_gram_form, linear_cka, linreg_r2, similarity,
                              similarity_grid, svcca_similarities, svd_truncation)


def centered_orthonormal(n, k, seed):
    """k orthonormal columns that each sum to zero."""
    a = center_columns(np.random.default_rng(seed).normal(size=(n, k)))
    return np.linalg.qr(a)[0]


def cca_eig_oracle(x, y):
    # rho^2 are the generalized eigenvalues of Sxy Syy^-1 Syx v = rho^2 Sxx v
    x, y = center_columns(x), center_columns(y)
    sxx, syy, sxy = x.T @ x, y.T @ y, x.T @ y
    lhs = sxy @ np.linalg.solve(syy, sxy.T)
    ev = scipy.linalg.eigh(lhs, sxx, eigvals_only=True)
    return np.sqrt(np.clip(np.sort(ev)[::-1], 0, None))


def svcca_mp_oracle(x, y, keep=0.99, dps=40):
    mpmath.mp.dps = dps

    def trunc(m):
        m = mpmath.matrix(center_columns(m).tolist())
        u, s, _ = mpmath.svd_r(m)
        e = [s[i] ** 2 for i in range(len(s))]
        total, acc = sum(e), mpmath.mpf(0)
        for d, v in enumerate(e, start=1):
            acc += v
            if acc / total >= keep:
                return u[:, :d], d
        return u, len(e)

    ux, dx = trunc(x)
    uy, dy = trunc(y)
    s = mpmath.svd_r(uy.T * ux, compute_uv=False)
    rho = [min(max(s[i], 0), 1) for i in range(len(s))]
    d = min(dx, dy)
    return float(sum(r**2 for r in rho) / d), float(sum(rho) / d)


# ---------------------------------------------------------------- centering


def test_center_examples(rng):
    np.testing.assert_array_equal(center_columns(np.array([[1.0], [3.0]])), [[-1.0], [1.0]])
    m = rng.normal(size=(10, 4))
    c = center_columns(m)
    assert np.abs(c.sum(axis=0)).max() < 1e-12
    np.testing.assert_allclose(center_columns(c), c, atol=1e-15)
    with pytest.raises(ValueError):
        center_columns(np.ones((1, 3)))


# ---------------------------------------------------------------- CKA


def test_cka_examples(rng):
    x = rng.normal(size=(30, 6))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    q = ortho_group.rvs(6, random_state=1)
    assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-10)
    a, b = center_columns(rng.normal(size=(20, 5))), center_columns(rng.normal(size=(20, 7)))
    # trace identity computed element by element
    kx, ky = a @ a.T, b @ b.T
    num = sum(kx[i, j] * ky[j, i] for i in range(20) for j in range(20))
    den = np.sqrt(sum(kx[i, j] * kx[j, i] for i in range(20) for j in range(20))
                  * sum(ky[i, j] * ky[j, i] for i in range(20) for j in range(20)))
    assert cka_feature_form(a, b) == pytest.approx(num / den, abs=1e-10)
    assert cka_gram_form(a, b) == pytest.approx(num / den, abs=1e-10)


def test_cka_zero_variance():
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))


def test_cka_wide_uses_gram_form(rng):
    x, y = rng.normal(size=(10, 40)), rng.normal(size=(10, 50))
    cx, cy = center_columns(x), center_columns(y)
    assert linear_cka(x, y) == pytest.approx(cka_feature_form(cx, cy), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 60), st.integers(3, 60),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cka_invariances(seed, p1, p2, alpha, beta):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(40, p1)), r.normal(size=(40, p2))
    base = linear_cka(x, y)
    assert linear_cka(y, x) == pytest.approx(base, abs=1e-12)
    assert linear_cka(alpha * x, beta * y) == pytest.approx(base, abs=1e-10)
    q = ortho_group.rvs(p1, random_state=seed % 2**32) if p1 > 1 else np.eye(1)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-10)
    assert -1e-9 <= base <= 1 + 1e-9


def test_cka_not_invariant_to_general_linear_map(rng):
    x, y = rng.normal(size=(40, 5)), rng.normal(size=(40, 5))
    y[:, 0] += 3 * x[:, 0]
    t = np.diag([10.0, 1, 1, 1, 1]) + np.triu(np.ones((5, 5)), 1)
    assert abs(np.linalg.det(t)) > 0
    assert abs(linear_cka(x @ t, y) - linear_cka(x, y)) > 0.01


# ---------------------------------------------------------------- regression / CCA / SVCCA


def test_linreg_examples(rng):
    x = rng.normal(size=(30, 4))
    assert linreg_r2(x, x) == pytest.approx(1.0, abs=1e-10)
    q = centered_orthonormal(30, 6, 2)
    assert linreg_r2(q[:, :3] @ rng.normal(size=(3, 3)), q[:, 3:]) == pytest.approx(0.0, abs=1e-10)
    x, y = rng.normal(size=(30, 4)), rng.normal(size=(30, 6))
    cx, cy = center_columns(x), center_columns(y)
    beta = np.linalg.solve(cy.T @ cy, cy.T @ cx)
    oracle = 1 - np.linalg.norm(cx - cy @ beta) ** 2 / np.linalg.norm(cx) ** 2
    assert linreg_r2(x, y) == pytest.approx(oracle, abs=1e-9)
    with pytest.raises(UndefinedSimilarityError):
        linreg_r2(np.ones((5, 2)), y[:5])


def test_cca_identity_and_orthogonal(rng):
    x = rng.normal(size=(50, 3))
    assert cca_similarities(x, x) == pytest.approx({"ccaR2": 1.0, "ccaRho": 1.0}, abs=1e-8)
    q = centered_orthonormal(50, 6, 3)
    x, y = q[:, :3] @ rng.normal(size=(3, 3)), q[:, 3:] @ rng.normal(size=(3, 3))
    assert cca_similarities(x, y) == pytest.approx({"ccaR2": 0.0, "ccaRho": 0.0}, abs=1e-8)


def test_cca_matches_eigen_oracle(rng):
    for _ in range(5):
        x, y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        y[:, 1] += x[:, 0]
        np.testing.assert_allclose(canonical_correlations(x, y), cca_eig_oracle(x, y), atol=1e-8)


def test_cca_swap_rescales(rng):
    x, y = rng.normal(size=(50, 3)), rng.normal(size=(50, 5))
    a, b = cca_similarities(x, y), cca_similarities(y, x)
    assert b["ccaR2"] == pytest.approx(a["ccaR2"] * 3 / 5, rel=1e-12)
    assert b["ccaRho"] == pytest.approx(a["ccaRho"] * 3 / 5, rel=1e-12)


def test_svd_truncation_keeps_99_percent_prefix():
    u = centered_orthonormal(40, 6, 4)
    v = ortho_group.rvs(6, random_state=5)
    s = np.sqrt([50.0, 30, 15, 4.5, 0.4, 0.1])
    m = u @ np.diag(s) @ v.T
    kept_u, kept_s = svd_truncation(m)
    assert kept_s.size == 4
    np.testing.assert_allclose(kept_s, s[:4], rtol=1e-12)
    # 95% is reached exactly by three values; ties count as reached
    assert svd_truncation(m, keep=0.95)[1].size == 3
    assert svd_truncation(m, keep=0.951)[1].size == 4
    assert svd_truncation(m, keep=0.5)[1].size == 1


def test_svcca_examples(rng):
    x = rng.normal(size=(40, 6))
    assert svcca_similarities(x, x) == pytest.approx({"svccaR2": 1.0, "svccaRho": 1.0}, abs=1e-8)
    q = ortho_group.rvs(6, random_state=8)
    assert svcca_similarities(x, x @ q) == pytest.approx({"svccaR2": 1.0, "svccaRho": 1.0}, abs=1e-6)


def test_svcca_matches_extended_precision_oracle(rng):
    x = rng.normal(size=(40, 6)) * np.array([5, 3, 2, 1, 0.3, 0.05])
    y = x @ rng.normal(size=(6, 6)) + 0.3 * rng.normal(size=(40, 6))
    got = svcca_similarities(x, y)
    r2, rho = svcca_mp_oracle(x, y)
    assert got["svccaR2"] == pytest.approx(r2, abs=1e-8)
    assert got["svccaRho"] == pytest.approx(rho, abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(MEASURES))
def test_measures_in_unit_interval(seed, measure):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(25, 4)), r.normal(size=(25, 7))
    v = similarity(x, y, measure)
    assert -1e-9 <= v <= 1 + 1e-9


def test_unknown_measure():
    with pytest.raises(ValueError):
        similarity(np.eye(3), np.eye(3), "mutualInfo")


# ---------------------------------------------------------------- grids


def test_grid_self_and_noise(rng):
    x = rng.normal(size=(20, 3))
    g = similarity_grid({"x": x}, {"x": x})
    assert g.values.shape == (1, 1) and g.values[0, 0] == pytest.approx(1.0)
    a = similarity_grid({"x": x}, {"y": x[:, :2]}, noise_seed=7)
    b = similarity_grid({"x": x}, {"y": x[:, :2]}, noise_seed=7, workers=2)
    assert a.col_labels == ["y", NOISE_LABEL]
    np.testing.assert_array_equal(a.values, b.values)
    assert a.to_csv() == b.to_csv()
    with pytest.raises(ValueError):
        similarity_grid({"x": x}, {"y": x[:10]})


def test_average_of_seed_grids(rng):
    cols = {"h": rng.normal(size=(20, 4))}
    grids = [similarity_grid({"deep": rng.normal(size=(20, 5))}, cols) for _ in range(5)]
    avg = average_grids(grids)
    assert avg.values[0, 0] == pytest.approx(np.mean([g.values[0, 0] for g in grids]), abs=1e-15)
    assert avg.cell(0, 0).axes == ("deep", "h")
