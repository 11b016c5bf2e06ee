"""Scale and marginal-cost diagnostics on fitted cost frontiers.

Any model with a vectorized ``cost(y)`` works.  Hyperplane models (CNLS-d,
parametric DDF) additionally expose the active piece, which gives an exact
subgradient to cross-check finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .data import DataError, Dataset

GRID_POINTS = 512
SCAN_RANGE = (0.01, 3.0)
GOLDEN_TOL = 1e-6
PERCENTILE_METHOD = "midpoint"


class AnalysisError(RuntimeError):
    """The frontier cannot be evaluated where the analysis needs it."""


@dataclass(frozen=True)
class RaySpec:
    """A ray of fixed output mix, with some outputs pinned at fixed levels.

    ``ratio`` has one entry per output; entries for ``held`` outputs are
    ignored.  ``held`` maps output index to a percentile of the training data
    (or use ``held_values`` for explicit levels).  The scanned point at scale
    ``s`` has scanned outputs ``s * ratio / sum(ratio)``, so ``s`` is the
    aggregate scanned output.
    """

    ratio: tuple
    held: Dict[int, float] = field(default_factory=dict)
    held_values: Dict[int, float] = field(default_factory=dict)
    scan: tuple = SCAN_RANGE
    scan_max: Optional[float] = None  # overrides the data-based max scale

    def __post_init__(self):
        r = np.asarray(self.ratio, dtype=float)
        if r.ndim != 1 or r.size == 0 or np.any(r < 0) or not np.all(np.isfinite(r)):
            raise DataError("ray ratio must be a finite nonnegative vector")
        fixed = set(self.held) | set(self.held_values)
        if any(not 0 <= k < r.size for k in fixed):
            raise DataError("held output index out of range")
        if not np.any(np.delete(r, sorted(fixed)) > 0):
            raise DataError("ray ratio has no positive scanned component")
        lo, hi = self.scan
        if not 0 < lo < hi:
            raise DataError("scan range must satisfy 0 < low < high")

    @property
    def scanned(self) -> np.ndarray:
        fixed = set(self.held) | set(self.held_values)
        return np.array([q for q in range(len(self.ratio)) if q not in fixed], dtype=int)

    def unit(self) -> np.ndarray:
        """Scanned mix normalized to sum one (zeros elsewhere)."""
        r = np.zeros(len(self.ratio))
        idx = self.scanned
        r[idx] = np.asarray(self.ratio, dtype=float)[idx]
        return r / r.sum()

    def base(self, outputs: Optional[np.ndarray] = None) -> np.ndarray:
        b = np.zeros(len(self.ratio))
        for q, v in self.held_values.items():
            b[q] = v
        if self.held:
            if outputs is None:
                raise DataError("percentile anchors need training outputs")
            for q, p in self.held.items():
                b[q] = np.percentile(outputs[:, q], p, method=PERCENTILE_METHOD)
        return b

    def max_scale(self, outputs: Optional[np.ndarray] = None) -> float:
        if self.scan_max is not None:
            return float(self.scan_max)
        if outputs is None:
            raise DataError("the scan range needs training outputs or scan_max")
        return float(outputs[:, self.scanned].sum(axis=1).max())

    def points(self, scales, outputs: Optional[np.ndarray] = None) -> np.ndarray:
        s = np.atleast_1d(np.asarray(scales, dtype=float))
        return self.base(outputs)[None, :] + s[:, None] * self.unit()[None, :]


@dataclass
class MpssResult:
    cost_level: float
    scale: float
    aggregate_output: float
    productivity: float
    boundary: bool
    point: np.ndarray

    def to_dict(self) -> dict:
        return {"cost_level": self.cost_level, "scale": self.scale,
                "aggregate_output": self.aggregate_output, "productivity": self.productivity,
                "boundary": self.boundary, "point": self.point.tolist()}


def _costs(model, Y) -> np.ndarray:
    return np.asarray(model.cost(np.atleast_2d(Y)), dtype=float)


def mpss(model, ray: RaySpec, outputs: Optional[np.ndarray] = None, n_grid: int = GRID_POINTS) -> MpssResult:
    """Scale maximizing aggregate scanned output per unit of cost along ``ray``.

    A geometric grid from ``scan[0]`` to ``scan[1]`` times the largest
    aggregate scanned output in ``outputs`` is searched, then refined by
    golden section.  A maximum at either end of the grid is returned
    unrefined with ``boundary=True``.
    """
    smax = ray.max_scale(outputs)
    if not smax > 0:
        raise AnalysisError("the ray has no positive scale in the data")
    lo, hi = ray.scan
    grid = np.geomspace(lo * smax, hi * smax, n_grid)
    c = _costs(model, ray.points(grid, outputs))
    ok = np.isfinite(c) & (c > 0)
    if not ok.any():
        raise AnalysisError("frontier is not finite and positive anywhere along the ray")
    prod = np.where(ok, grid / np.where(ok, c, 1.0), -np.inf)
    k = int(np.argmax(prod))
    boundary = k == 0 or k == n_grid - 1 or not (ok[k - 1] and ok[k + 1])
    s = grid[k]
    if not boundary:
        def neg(t):
            ct = _costs(model, ray.points([t], outputs))[0]
            return -t / ct if np.isfinite(ct) and ct > 0 else np.inf

        res = minimize_scalar(neg, bracket=(grid[k - 1], grid[k], grid[k + 1]), method="golden",
                              tol=GOLDEN_TOL)
        if res.success and -res.fun >= prod[k] and grid[k - 1] <= res.x <= grid[k + 1]:
            s = float(res.x)
    point = ray.points([s], outputs)[0]
    cost = float(_costs(model, point)[0])
    return MpssResult(cost, float(s), float(s), float(s / cost), bool(boundary), point)


@dataclass
class MarginalCost:
    finite_difference: np.ndarray
    subgradient: Optional[np.ndarray]
    step: float

    def to_dict(self) -> dict:
        return {"finite_difference": self.finite_difference.tolist(),
                "subgradient": None if self.subgradient is None else self.subgradient.tolist(),
                "step": self.step}


def _subgradients(model, P: np.ndarray, v: np.ndarray) -> Optional[np.ndarray]:
    """``gamma_k'v / beta_k`` for the active piece at each row of ``P``."""
    if not hasattr(model, "active_piece"):
        return None
    _, B, G = model.pieces()
    k = model.active_piece(P)
    return (G[k] @ v) / B[k, 0]


def marginal_cost(model, point, output_index: int, h: float = 1.0) -> MarginalCost:
    """Cost of one more unit of output ``output_index`` at ``point``.

    Forward difference with step ``h`` (original units), plus the exact slope
    of the active hyperplane when the model has one.
    """
    P = np.atleast_2d(np.asarray(point, dtype=float))
    if not 0 <= output_index < P.shape[1]:
        raise DataError("output index out of range")
    e = np.zeros(P.shape[1])
    e[output_index] = 1.0
    return _directional_mc(model, P, e, h)


def _directional_mc(model, P, v, h):
    c0 = _costs(model, P)
    c1 = _costs(model, P + h * v[None, :])
    if not (np.all(np.isfinite(c0)) and np.all(np.isfinite(c1))):
        raise AnalysisError("frontier is not finite at the evaluation or shifted point")
    return MarginalCost((c1 - c0) / h, _subgradients(model, P, v), h)


def ray_marginal_cost(model, ray: RaySpec, scales, outputs: Optional[np.ndarray] = None,
                      h: float = 1.0) -> MarginalCost:
    """Cost of one more unit of aggregate output along the ray, at each scale."""
    P = ray.points(scales, outputs)
    return _directional_mc(model, P, ray.unit(), h)


# ------------------------------------------------------------ tables

def mpss_table(models: Dict[str, object], data: Dataset, scanned: Sequence[int],
               ratios: Sequence[float], held_percentile: float = 50.0) -> dict:
    """MPSS cost level for each mix ``y[scanned[1]] = r * y[scanned[0]]``.

    Outputs outside ``scanned`` are fixed at ``held_percentile``.
    """
    i, j = scanned
    Q = data.outputs.shape[1]
    held = {q: held_percentile for q in range(Q) if q not in (i, j)}
    rows, flags = [], []
    for r in ratios:
        mix = np.zeros(Q)
        mix[i], mix[j] = 1.0, r
        ray = RaySpec(tuple(mix), held)
        res = [mpss(m, ray, data.outputs) for m in models.values()]
        rows.append([x.cost_level for x in res])
        flags.append([x.boundary for x in res])
    return {"row_labels": [f"{100 * r:g}%" for r in ratios], "columns": list(models),
            "values": rows, "boundary": flags}


def marginal_cost_table(models: Dict[str, object], data: Dataset, scanned: Sequence[int],
                        output_index: int, percentiles: Sequence[float] = (25, 50, 75),
                        held_percentile: float = 50.0) -> dict:
    """Marginal cost of one output on a percentile grid of two scanned outputs."""
    i, j = scanned
    Y = data.outputs
    base = np.percentile(Y, held_percentile, axis=0, method=PERCENTILE_METHOD)
    labels, rows = [], []
    for pi in percentiles:
        for pj in percentiles:
            p = base.copy()
            p[i] = np.percentile(Y[:, i], pi, method=PERCENTILE_METHOD)
            p[j] = np.percentile(Y[:, j], pj, method=PERCENTILE_METHOD)
            labels.append((pi, pj))
            rows.append([float(marginal_cost(m, p, output_index).finite_difference[0])
                         for m in models.values()])
    return {"row_labels": labels, "columns": list(models), "values": rows}
