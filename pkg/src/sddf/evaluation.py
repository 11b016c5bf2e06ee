"""Out-of-sample error measures: directional MSE, radial MSE and K-fold.

Every measure reduces to finding where a line ``p + t * delta`` meets the
estimated frontier.  For hyperplane models each piece of the DDF is affine in
``t``, so the set where the envelope is nonnegative is an interval whose end
points are the only crossings; the crossing nearest ``t = 0`` is taken.
Other models (quadratic, kernel) are handled by a sign-change scan followed
by bisection, which also serves as the oracle for the closed form.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, DataError, Direction, ScaleInfo, normalize
from .estimators import EstimatorSpec, _Hyperplanes

T_RANGE = (-10.0, 10.0)
BISECT_TOL = 1e-10
MAX_FAILURE_RATE = 0.01
SLOPE_EPS = 1e-14


class MetricError(RuntimeError):
    """Too many test points without a frontier crossing."""


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


# ------------------------------------------------------------- crossings

def envelope_crossings(model: _Hyperplanes, X0, Y0, DX, DY, t_range=T_RANGE) -> np.ndarray:
    """Crossing parameter ``t`` for each line ``(X0 + t DX, Y0 + t DY)``.

    Returns NaN where the envelope has no root inside ``t_range``.
    """
    a, B, G = model.pieces()
    X0, Y0, DX, DY = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (X0, Y0, DX, DY))
    V = model.piece_values(X0, Y0)
    W = (DX @ B.T if B.shape[1] else 0.0) - DY @ G.T
    W = np.broadcast_to(W, V.shape)
    tol = SLOPE_EPS * np.maximum(1.0, np.abs(V).max(axis=1, keepdims=True))
    up, down, flat = W > tol, W < -tol, np.abs(W) <= tol
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = -V / W
    t_lo = np.where(up, roots, -np.inf).max(axis=1)
    t_hi = np.where(down, roots, np.inf).min(axis=1)
    blocked = np.any(flat & (V < -1e-12), axis=1) | (t_lo > t_hi + 1e-12)
    lo, hi = t_range
    cand = np.column_stack([t_lo, t_hi])
    ok = np.isfinite(cand) & (cand >= lo) & (cand <= hi)
    dist = np.where(ok, np.abs(cand), np.inf)
    pick = dist.argmin(axis=1)
    t = cand[np.arange(cand.shape[0]), pick]
    t[~np.isfinite(dist.min(axis=1)) | blocked] = np.nan
    return t


def bisect_crossings(func, n_points: int, t_range=T_RANGE, grid: int = 401, tol: float = BISECT_TOL) -> np.ndarray:
    """Root of ``func(t)`` nearest 0 for ``n_points`` lines at once.

    ``func(T, rows)`` maps ``t`` values of shape ``(len(rows), k)`` for the
    lines in ``rows`` (all lines when ``rows`` is None) to implicit-function
    values of the same shape.  A grid scan locates the
    sign change closest to ``t = 0``; bisection then narrows it to ``tol``.
    """
    lo, hi = t_range
    ts = np.unique(np.concatenate([np.linspace(lo, hi, grid), [0.0]]))
    F = func(np.broadcast_to(ts, (n_points, ts.size)))
    sign = np.sign(F)
    t = np.full(n_points, np.nan)
    exact = sign == 0
    change = sign[:, :-1] * sign[:, 1:] < 0
    mid = 0.5 * (ts[:-1] + ts[1:])
    a = np.full(n_points, np.nan)
    b = np.full(n_points, np.nan)
    for i in range(n_points):
        cands = []
        if exact[i].any():
            z = ts[exact[i]]
            cands.append((np.min(np.abs(z)), "exact", z[np.argmin(np.abs(z))]))
        if change[i].any():
            k = np.flatnonzero(change[i])
            j = k[np.argmin(np.abs(mid[k]))]
            cands.append((abs(mid[j]), "bracket", j))
        if not cands:
            continue
        _, kind, val = min(cands, key=lambda c: c[0])
        if kind == "exact":
            t[i] = val
        else:
            a[i], b[i] = ts[val], ts[val + 1]
    todo = np.isfinite(a)
    if todo.any():
        rows = np.flatnonzero(todo)
        fa = func(a[todo, None], rows)[:, 0]
        aa, bb = a[todo], b[todo]
        while np.max(bb - aa) > tol:
            m = 0.5 * (aa + bb)
            fm = func(m[:, None], rows)[:, 0]
            left = np.sign(fm) == np.sign(fa)
            aa = np.where(left, m, aa)
            fa = np.where(left, fm, fa)
            bb = np.where(left, bb, m)
        t[todo] = 0.5 * (aa + bb)
    return t


def _line_function(model, X0, Y0, DX, DY):
    """Implicit frontier function along each line, vectorized over t."""
    def func(T, rows=None):
        m, k = T.shape
        r = slice(None) if rows is None else rows
        X = (X0[r, None, :] + T[:, :, None] * DX[r, None, :]).reshape(m * k, -1)
        Y = (Y0[r, None, :] + T[:, :, None] * DY[r, None, :]).reshape(m * k, -1)
        return np.asarray(model.implicit(X, Y), dtype=float).reshape(m, k)
    return func


def line_crossings(model, X0, Y0, DX, DY, t_range=T_RANGE, method: str = "auto") -> np.ndarray:
    """Crossing parameters, closed form for hyperplane models else bisection."""
    X0, Y0, DX, DY = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (X0, Y0, DX, DY))
    if method not in ("auto", "exact", "bisect"):
        raise ValueError(f"unknown crossing method {method!r}")
    if isinstance(model, _Hyperplanes) and method != "bisect":
        return envelope_crossings(model, X0, Y0, DX, DY, t_range)
    if method == "exact":
        raise DataError("closed-form crossings need a hyperplane model")
    return bisect_crossings(_line_function(model, X0, Y0, DX, DY), X0.shape[0], t_range)


# ------------------------------------------------------------- reports

@dataclass
class MseReport:
    value: float
    sq_distances: np.ndarray
    metric: str
    failures: int = 0
    direction: Optional[list] = None
    beyond_center: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.sq_distances.size)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "n": self.n,
            "failures": self.failures,
            "beyond_center": self.beyond_center,
            "direction": self.direction,
            "sq_distances": [None if not np.isfinite(v) else float(v) for v in self.sq_distances],
            "meta": self.meta,
        }

    CSV_FIELDS = ("metric", "value", "n", "failures", "beyond_center", "direction")

    def csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_FIELDS)
        direction = "" if self.direction is None else " ".join(f"{v:.4g}" for v in self.direction)
        w.writerow([self.metric, f"{self.value:.4g}", self.n, self.failures, self.beyond_center, direction])
        return buf.getvalue()


def _report(t, sq, metric, direction=None, strict=True, beyond=0, meta=None) -> MseReport:
    ok = np.isfinite(t)
    failures = int((~ok).sum())
    sq = np.where(ok, sq, np.nan)
    if ok.sum() == 0:
        raise MetricError(f"{metric} MSE: no test point reached the frontier")
    if strict and failures > MAX_FAILURE_RATE * t.size:
        raise MetricError(f"{metric} MSE: {failures} of {t.size} rays found no crossing")
    return MseReport(value=float(np.nanmean(sq)), sq_distances=sq, metric=metric, failures=failures,
                     direction=direction, beyond_center=beyond, meta=meta or {})


# ------------------------------------------------------------- measures

def directional_mse(model, test_set: Dataset, mse_direction: Direction, strict: bool = True,
                    method: str = "auto") -> MseReport:
    """Mean squared distance to the frontier along ``mse_direction``.

    Each test point moves along ``(-g_x, g_y)`` (in cost mode: outputs up,
    cost down) until it meets the estimated function.
    """
    X0, Y0 = test_set.netputs()
    gx, gy = mse_direction.netput()
    if gx.size != X0.shape[1] or gy.size != Y0.shape[1]:
        raise DataError("MSE direction does not match the test data")
    m = test_set.n
    DX = np.tile(-gx, (m, 1))
    DY = np.tile(gy, (m, 1))
    t = line_crossings(model, X0, Y0, DX, DY, method=method)
    step2 = float(gx @ gx + gy @ gy)
    return _report(t, t ** 2 * step2, "directional", mse_direction.vector.tolist(), strict)


def radial_mse(model, test_set: Dataset, scale_info: ScaleInfo, model_space: str = "original",
               strict: bool = True, method: str = "auto") -> MseReport:
    """Mean squared normalized distance along rays toward ``[0,...,0,1]``.

    ``test_set`` is in original units and is normalized with the training
    ``scale_info``.  ``model_space`` says whether ``model`` was fitted on
    original or on normalized data.  Crossings beyond the center are kept
    but counted in ``beyond_center``.
    """
    if test_set.mode != "cost":
        raise DataError("radial MSE needs cost-mode data")
    if model_space not in ("original", "normalized"):
        raise DataError(f"unknown model space {model_space!r}")
    tn = normalize(test_set, scale_info=scale_info) if not np.any(scale_info.degenerate) else None
    if tn is None:
        raise DataError("radial MSE needs non-degenerate training scale information")
    P = tn.data.columns()  # normalized (y..., c)
    C = np.zeros(P.shape[1])
    C[-1] = 1.0
    D = C - P
    if model_space == "normalized":
        base, step = P, D
    else:
        span = scale_info.span
        base, step = test_set.columns(), D * span
    X0, Y0 = base[:, -1:], base[:, :-1]
    DX, DY = step[:, -1:], step[:, :-1]
    t = line_crossings(model, X0, Y0, DX, DY, method=method)
    sq = t ** 2 * np.einsum("ij,ij->i", D, D)
    beyond = int(np.sum(np.isfinite(t) & (t > 1.0)))
    return _report(t, sq, "radial", None, strict, beyond)


def isoquant_radial_mse(model, test_outputs, center=None, strict: bool = True,
                        method: str = "auto") -> MseReport:
    """Radial MSE on an output level set: rays from each point toward ``center``.

    The center defaults to the origin of output space, the point toward which
    the iso-cost set bulges.
    """
    Y0 = np.atleast_2d(np.asarray(test_outputs, dtype=float))
    c = np.zeros(Y0.shape[1]) if center is None else np.asarray(center, dtype=float)
    DY = c - Y0
    m = Y0.shape[0]
    t = line_crossings(model, np.zeros((m, 0)), Y0, np.zeros((m, 0)), DY, method=method)
    sq = t ** 2 * np.einsum("ij,ij->i", DY, DY)
    beyond = int(np.sum(np.isfinite(t) & (t > 1.0)))
    return _report(t, sq, "radial_isoquant", None, strict, beyond)


# ------------------------------------------------------------- K-fold

@dataclass
class KFoldReport:
    value: float
    fold_values: list
    metric: str
    k: int
    seed: int
    spec: dict
    fold_reports: list = field(default_factory=list)
    directions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "k": self.k,
            "seed": self.seed,
            "estimator": self.spec,
            "fold_values": self.fold_values,
            "fold_directions": self.directions,
            "folds": [r.to_dict() for r in self.fold_reports],
        }


def fold_indices(n: int, k: int, seed: int) -> list:
    """Seeded shuffle cut into ``k`` contiguous blocks."""
    if k < 2:
        raise DataError("k-fold needs k >= 2")
    if n < k:
        raise DataError(f"k-fold needs n >= k (n={n}, k={k})")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def kfold_mse(data: Dataset, k: int, spec: EstimatorSpec, metric: str = "radial", seed: int = 0,
              mse_direction: Optional[Direction] = None, strict: bool = True) -> KFoldReport:
    """Average test-fold MSE over a seeded K-fold split.

    Each training fold is min-max normalized, the estimator (and, for the
    median rule, its direction) is fitted on the normalized training fold,
    and the held-out fold is scored after normalization with the training
    scale.  A directional metric uses ``mse_direction`` in normalized units.
    """
    if metric not in ("radial", "directional"):
        raise DataError(f"unknown metric {metric!r}")
    if metric == "directional" and mse_direction is None:
        raise DataError("directional k-fold needs an MSE direction")
    if data.mode != "cost":
        raise DataError("k-fold MSE is defined for cost-mode data")
    folds = fold_indices(data.n, k, seed)
    values, reports, dirs = [], [], []
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(data.n), test_idx)
        try:
            tr = normalize(data.subset(train_idx), strict=True)
            model = spec.fit(tr.data)
            test = data.subset(test_idx)
            if metric == "radial":
                rep = radial_mse(model, test, tr.scale_info, model_space="normalized", strict=strict)
            else:
                tn = normalize(test, scale_info=tr.scale_info)
                rep = directional_mse(model, tn.data, mse_direction, strict=strict)
        except Exception as exc:  # any failure is reported with its fold index
            raise FoldError(f, exc) from exc
        direction = getattr(model, "direction", None)
        dirs.append(None if direction is None else direction.vector.tolist())
        values.append(rep.value)
        reports.append(rep)
    return KFoldReport(value=float(np.mean(values)), fold_values=values, metric=metric, k=k, seed=seed,
                       spec=spec.as_dict(), fold_reports=reports, directions=dirs)


def squared_cost_error(model, test_set: Dataset) -> float:
    """Plain mean squared cost-prediction error (vertical distances)."""
    c_hat = model.cost(test_set.outputs)
    return float(np.mean((c_hat - test_set.cost) ** 2))


__all__ = [
    "MetricError", "FoldError", "MseReport", "KFoldReport", "envelope_crossings", "bisect_crossings",
    "line_crossings", "directional_mse", "radial_mse", "isoquant_radial_mse", "kfold_mse",
    "fold_indices", "squared_cost_error", "T_RANGE", "BISECT_TOL",
]
