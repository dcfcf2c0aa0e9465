"""Identifiability metrics.

MCC matches true and estimated sources one-to-one by maximizing the sum of
absolute correlations (Hungarian algorithm), then averages the matched
absolute correlations. Affine alignment regresses the sufficient-statistic
image of the true sources on that of the estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

TIE_TOL = 1e-12


@dataclass
class EvalReport:
    mcc: float
    correlations: np.ndarray
    assignment: list[int]
    signs: list[int]
    kind: str = "pearson"
    alignment_r2: float | None = None
    notes: dict = field(default_factory=dict)

    @property
    def matched(self) -> np.ndarray:
        return np.abs(self.correlations[np.arange(len(self.assignment)), self.assignment])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["correlations"] = self.correlations.tolist()
        out["matched"] = self.matched.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class AlignmentResult:
    A: np.ndarray
    c: np.ndarray
    r2: np.ndarray
    smallest_singular_value: float
    largest_singular_value: float

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.r2))

    @property
    def condition_ratio(self) -> float:
        """Smallest over largest singular value of A."""
        return self.smallest_singular_value / self.largest_singular_value


def _ranks(a: np.ndarray) -> np.ndarray:
    """Average ranks per column (ties share their mean rank)."""
    out = np.empty_like(a, dtype=np.float64)
    for j in range(a.shape[1]):
        col = a[:, j]
        order = np.argsort(col, kind="mergesort")
        sorted_col = col[order]
        ranks = np.empty(col.size)
        ranks[order] = np.arange(col.size, dtype=np.float64)
        # average tied ranks
        uniq, inv, counts = np.unique(sorted_col, return_inverse=True, return_counts=True)
        if uniq.size != col.size:
            sums = np.bincount(inv, weights=np.arange(col.size, dtype=np.float64))
            ranks[order] = (sums / counts)[inv]
        out[:, j] = ranks
    return out


def correlation_matrix(a, b, kind: str = "pearson") -> np.ndarray:
    """Entry (i, j) is the correlation of column a_i with column b_j."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"correlation_matrix: shapes {a.shape} and {b.shape} do not align")
    if a.shape[0] < 3:
        raise ValueError("correlation_matrix: need at least 3 rows")
    if kind == "spearman":
        a, b = _ranks(a), _ranks(b)
    elif kind != "pearson":
        raise ValueError(f"unknown correlation kind {kind!r}")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt((ac * ac).sum(axis=0))
    nb = np.sqrt((bc * bc).sum(axis=0))
    for name, norms, arr in (("first", na, a), ("second", nb, b)):
        bad = np.flatnonzero(norms <= 1e-12 * (np.abs(arr).max(axis=0) + 1.0) * math.sqrt(arr.shape[0]))
        if bad.size:
            raise ValueError(f"correlation_matrix: column {int(bad[0])} of the {name} argument is constant")
    return np.clip((ac.T @ bc) / np.outer(na, nb), -1.0, 1.0)


def _hungarian_min(cost: np.ndarray) -> list[int]:
    """Row -> column assignment minimizing total cost (shortest augmenting paths, O(n^3))."""
    n = cost.shape[0]
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def assign(corr) -> list[int]:
    """Permutation (row i -> column perm[i]) maximizing sum |corr|.

    Among optimal permutations the one with lowest column indices, taken row
    by row, is returned.
    """
    w = np.abs(np.asarray(corr, dtype=np.float64))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"assign: need a square matrix, got shape {w.shape}")
    n = w.shape[0]
    if n == 0:
        return []
    best_perm = _hungarian_min(-w)
    best = w[np.arange(n), best_perm].sum()
    tol = TIE_TOL * max(1.0, abs(best))
    # tie-break: fix rows in order to their lowest feasible optimal column
    fixed: list[int] = []
    for i in range(n):
        free_rows = list(range(i + 1, n))
        for j in range(n):
            if j in fixed:
                continue
            head = sum(w[r, c] for r, c in enumerate(fixed)) + w[i, j]
            rest_cols = [c for c in range(n) if c not in fixed and c != j]
            if free_rows:
                sub = w[np.ix_(free_rows, rest_cols)]
                tail = sub[np.arange(len(free_rows)), _hungarian_min(-sub)].sum()
            else:
                tail = 0.0
            if head + tail >= best - tol:
                fixed.append(j)
                break
    return fixed


def mcc(z_star, z_hat, kind: str = "pearson") -> EvalReport:
    corr = correlation_matrix(z_star, z_hat, kind)
    perm = assign(corr)
    matched = corr[np.arange(len(perm)), perm]
    signs = [1 if c >= 0 else -1 for c in matched]
    return EvalReport(float(np.mean(np.abs(matched))), corr, perm, signs, kind,
                      notes={"latents": "posterior means unless stated otherwise",
                             "assignment": "maximizes sum of |corr|"})


def affine_align(t_star, t_hat, ridge: float = 1e-8) -> AlignmentResult:
    """Least squares fit of t_star ~ A t_hat + c with per-coordinate R^2."""
    t_star = np.asarray(t_star, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    N, p = t_hat.shape
    if t_star.shape[0] != N:
        raise ValueError("affine_align: row counts differ")
    if N <= p:
        raise ValueError(f"affine_align: need more rows than statistics ({N} <= {p})")
    design = np.column_stack([t_hat, np.ones(N)])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * diag.max():
        raise ValueError("affine_align: rank-deficient design (collinear statistics)")
    if diag.min() <= 1e-6 * diag.max():
        # badly conditioned: ridge-regularized normal equations
        gram = design.T @ design + ridge * np.eye(p + 1)
        coef = np.linalg.solve(gram, design.T @ t_star)
    else:
        coef = np.linalg.solve(r, q.T @ t_star)
    A = coef[:p].T
    c = coef[p]
    resid = t_star - design @ coef
    tss = ((t_star - t_star.mean(axis=0)) ** 2).sum(axis=0)
    r2 = 1.0 - (resid**2).sum(axis=0) / tss
    s = np.linalg.svd(A, compute_uv=False)
    return AlignmentResult(A, c, r2, float(s[-1]), float(s[0]))


class NoKneeError(ValueError):
    code = "no-knee"


KNEE_MIN_BULGE = 0.05


def select_dimension(elbo_by_n: dict) -> int:
    """Latent dimension at the knee of the ELBO curve.

    The curve is made non-decreasing (running maximum, since a larger latent
    space nests a smaller one) and both axes are rescaled to [0, 1]. The knee
    is the point furthest above the chord joining the end points. A raw
    second difference would instead pick the first step whenever the gains
    shrink geometrically, which is the usual shape of ELBO sweeps.
    """
    if len(elbo_by_n) < 4:
        raise ValueError("select_dimension: need at least 4 candidate dimensions")
    dims = np.array(sorted(elbo_by_n), dtype=float)
    vals = np.array([elbo_by_n[k] for k in sorted(elbo_by_n)], dtype=float)
    if not np.isfinite(vals).all():
        raise ValueError("select_dimension: ELBO values must be finite")
    smooth = np.maximum.accumulate(vals)
    span = np.ptp(smooth)
    if span <= 0:
        raise NoKneeError("no-knee")
    bulge = (smooth - smooth[0]) / span - (dims - dims[0]) / np.ptp(dims)
    best = int(np.argmax(bulge))
    if bulge[best] < KNEE_MIN_BULGE:
        raise NoKneeError("no-knee")
    return int(dims[best])
