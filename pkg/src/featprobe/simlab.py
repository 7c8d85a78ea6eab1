"""Representation similarity: linear CKA, linear-regression R^2, CCA and SVCCA.

All measures take raw ``(n, p)`` matrices over the same examples and center
columns first. Values live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

RANK_TOL = 1e-10
MASS_TOL = 1e-12
MEASURES = ("cka", "lrR2", "ccaR2", "ccaRho", "svccaR2", "svccaRho")


class UndefinedSimilarityError(ValueError):
    """A side has zero variance (or zero rank), so the ratio is 0/0."""


def _as_matrix(m) -> np.ndarray:
    values = getattr(m, "values", m)
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a


def center_columns(m) -> np.ndarray:
    a = _as_matrix(m)
    if a.shape[0] < 2:
        raise ValueError("centering needs at least 2 examples")
    return a - a.mean(axis=0, keepdims=True)


def _pair(x, y, center: bool, zscore: bool = False) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    if center or zscore:
        x, y = center_columns(x), center_columns(y)
    if zscore:
        x = x / np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
        y = y / np.where(y.std(axis=0) > 0, y.std(axis=0), 1.0)
    return x, y


# ---------------------------------------------------------------- CKA


def cka_feature_form(x: np.ndarray, y: np.ndarray) -> float:
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on already-centered inputs."""
    num = np.linalg.norm(y.T @ x, "fro") ** 2
    den = np.linalg.norm(x.T @ x, "fro") * np.linalg.norm(y.T @ y, "fro")
    if den == 0.0:
        raise UndefinedSimilarityError("CKA undefined: a feature set has zero variance")
    return float(num / den)


def cka_gram_form(x: np.ndarray, y: np.ndarray) -> float:
    """tr(Kx Ky) / sqrt(tr(Kx Kx) tr(Ky Ky)) with K = M M^T, on centered inputs."""
    kx = x @ x.T
    ky = y @ y.T
    num = np.sum(kx * ky)
    den = np.sqrt(np.sum(kx * kx) * np.sum(ky * ky))
    if den == 0.0:
        raise UndefinedSimilarityError("CKA undefined: a feature set has zero variance")
    return float(num / den)


def linear_cka(x, y, center: bool = True, zscore: bool = False) -> float:
    x, y = _pair(x, y, center, zscore)
    n = x.shape[0]
    if min(x.shape[1], y.shape[1]) > n:
        return cka_gram_form(x, y)
    return cka_feature_form(x, y)


# ---------------------------------------------------------------- bases


def orthonormal_basis(m: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Q from a column-pivoted QR, keeping columns whose |R_ii| exceeds
    ``tol`` times the leading diagonal."""
    q, r, _ = scipy.linalg.qr(m, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return q[:, :0]
    rank = int(np.sum(diag > tol * diag[0]))
    return q[:, :rank]


def linreg_r2(x, y, center: bool = True) -> float:
    """Fraction of X's variance explained by a linear fit from Y: ||Q_Y^T X||^2 / ||X||^2."""
    x, y = _pair(x, y, center)
    denom = np.linalg.norm(x, "fro") ** 2
    if denom == 0.0:
        raise UndefinedSimilarityError("R^2 undefined: X is identically zero")
    qy = orthonormal_basis(y)
    return float(np.linalg.norm(qy.T @ x, "fro") ** 2 / denom)


def _singular_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(b.T @ a, compute_uv=False)
    return np.clip(s, 0.0, 1.0)


def canonical_correlations(x, y, center: bool = True) -> np.ndarray:
    x, y = _pair(x, y, center)
    qx, qy = orthonormal_basis(x), orthonormal_basis(y)
    if qx.shape[1] == 0 or qy.shape[1] == 0:
        raise UndefinedSimilarityError("CCA undefined: a feature set has rank 0")
    return _singular_overlap(qx, qy)


def cca_similarities(x, y, center: bool = True) -> dict[str, float]:
    """Mean squared and mean canonical correlation, both divided by X's column count."""
    p1 = _as_matrix(x).shape[1]
    rho = canonical_correlations(x, y, center)
    return {"ccaR2": float(np.sum(rho**2) / p1), "ccaRho": float(np.sum(rho) / p1)}


def svd_truncation(m: np.ndarray, keep: float = 0.99) -> tuple[np.ndarray, np.ndarray]:
    """Leading left singular vectors that capture ``keep`` of the squared singular mass."""
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    energy = s**2
    total = energy.sum()
    if total == 0.0:
        raise UndefinedSimilarityError("SVCCA undefined: zero matrix")
    # a prefix that hits ``keep`` up to roundoff counts as reaching it
    d = int(np.searchsorted(np.cumsum(energy) / total, keep - MASS_TOL) + 1)
    d = min(d, s.size)
    return u[:, :d], s[:d]


def svcca_similarities(x, y, keep: float = 0.99, center: bool = True) -> dict[str, float]:
    x, y = _pair(x, y, center)
    ux, _ = svd_truncation(x, keep)
    uy, _ = svd_truncation(y, keep)
    d = min(ux.shape[1], uy.shape[1])
    rho = _singular_overlap(ux, uy)
    return {"svccaR2": float(np.sum(rho**2) / d), "svccaRho": float(np.sum(rho) / d)}


def similarity(x, y, measure: str = "cka", center: bool = True) -> float:
    if measure == "cka":
        return linear_cka(x, y, center)
    if measure == "lrR2":
        return linreg_r2(x, y, center)
    if measure in ("ccaR2", "ccaRho"):
        return cca_similarities(x, y, center)[measure]
    if measure in ("svccaR2", "svccaRho"):
        return svcca_similarities(x, y, center=center)[measure]
    raise ValueError(f"unknown measure {measure!r}; choose from {MEASURES}")


# ---------------------------------------------------------------- grids


@dataclass
class SimilarityReport:
    measure: str
    value: float
    axes: tuple[str, str]
    provenance: dict = field(default_factory=dict)


@dataclass
class SimilarityGrid:
    measure: str
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def cell(self, i: int, j: int) -> SimilarityReport:
        return SimilarityReport(self.measure, float(self.values[i, j]),
                                (self.row_labels[i], self.col_labels[j]), dict(self.provenance))

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow([self.measure] + list(self.col_labels))
        for label, row in zip(self.row_labels, self.values):
            w.writerow([label] + [repr(float(v)) for v in row])
        return buf.getvalue()


NOISE_LABEL = "Random noise"


def noise_baseline(n: int, p: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, p))


def similarity_grid(rows: Mapping[str, object], cols: Mapping[str, object], measure: str = "cka",
                    noise_seed: int | None = None, noise_dim: int | None = None,
                    center: bool = True, workers: int = 1) -> SimilarityGrid:
    """Pairwise similarity of every row feature set against every column set.

    With ``noise_seed`` an extra column of standard-normal noise is appended.
    """
    cols = dict(cols)
    ns = {_as_matrix(m).shape[0] for m in list(rows.values()) + list(cols.values())}
    if len(ns) != 1:
        raise ValueError(f"feature sets disagree on example count: {sorted(ns)}")
    provenance: dict = {"measure": measure}
    if noise_seed is not None:
        n = ns.pop()
        p = noise_dim or max(_as_matrix(m).shape[1] for m in cols.values())
        cols[NOISE_LABEL] = noise_baseline(n, p, noise_seed)
        provenance["noise_seed"] = noise_seed
    rkeys, ckeys = list(rows), list(cols)
    cells = [(i, j) for i in range(len(rkeys)) for j in range(len(ckeys))]

    def one(cell):
        i, j = cell
        return similarity(rows[rkeys[i]], cols[ckeys[j]], measure, center)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            vals = list(pool.map(one, cells))
    else:
        vals = [one(c) for c in cells]
    grid = np.array(vals, dtype=np.float64).reshape(len(rkeys), len(ckeys))
    return SimilarityGrid(measure, rkeys, ckeys, grid, provenance)


def average_grids(grids: Sequence[SimilarityGrid]) -> SimilarityGrid:
    """Cell-wise mean of grids that share labels (e.g. one per initialization)."""
    if not grids:
        raise ValueError("no grids to average")
    first = grids[0]
    for g in grids[1:]:
        if g.row_labels != first.row_labels or g.col_labels != first.col_labels:
            raise ValueError("grids have different labels")
    values = np.mean(np.stack([g.values for g in grids]), axis=0)
    prov = dict(first.provenance, averaged_over=len(grids))
    return SimilarityGrid(first.measure, list(first.row_labels), list(first.col_labels), values, prov)

