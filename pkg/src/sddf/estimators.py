"""Directional distance function estimators and comparator regressions.

Sign convention shared by every model here: a hyperplane ``(a, b, g)`` gives
the DDF value ``a + b'x - g'y`` and the residual of observation ``i`` is the
value of its own hyperplane at its own point, so ``g'y_i = a + b'x_i - e_i``.
Positive residuals sit inside the technology; the fitted frontier point is
``(x_i - e_i g_x, y_i + e_i g_y)``.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .data import DataError, Dataset, Direction
from .afriat import AfriatProblem, certify
from .qp import OPTIMAL, KktReport, QpProblem, polish, solve_qp

FEAS_TOL = 1e-6  # "constraint satisfied" on standardized data
MIN_COST_SLOPE = 1e-9


class EstimationError(RuntimeError):
    """The underlying QP did not reach a certified optimum."""


class _Hyperplanes:
    """Lower envelope of affine DDF pieces: ``min_k a_k + b_k'x - g_k'y``."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def pieces(self):
        return np.atleast_1d(self.alpha), np.atleast_2d(self.beta), np.atleast_2d(self.gamma)

    def piece_values(self, x, y) -> np.ndarray:
        a, B, G = self.pieces()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if B.shape[1] == 0:
            return a[None, :] - y @ G.T
        return a[None, :] + x @ B.T - y @ G.T

    def ddf(self, x, y) -> np.ndarray:
        """Envelope DDF value at each row of (x, y)."""
        return self.piece_values(x, y).min(axis=1)

    def implicit(self, x, y) -> np.ndarray:
        return self.ddf(x, y)

    def cost(self, y) -> np.ndarray:
        """Explicit cost frontier ``max_k (g_k'y - a_k) / b_k`` (cost mode).

        Pieces with ``b_k < 1e-9`` are skipped; if such a piece is already
        negative at ``y`` no cost level reaches the frontier and ``inf`` is
        returned ("unbounded along cost").
        """
        a, B, G = self.pieces()
        if B.shape[1] != 1:
            raise DataError("explicit cost frontier needs a cost-mode model")
        y = np.atleast_2d(np.asarray(y, dtype=float))
        b = B[:, 0]
        ok = b >= MIN_COST_SLOPE
        vals = (y @ G[ok].T - a[ok]) / b[ok]
        out = vals.max(axis=1) if ok.any() else np.full(y.shape[0], -np.inf)
        flat = ~ok
        if flat.any():
            blocked = (a[flat][None, :] - y @ G[flat].T) < -1e-12
            out = np.where(blocked.any(axis=1), np.inf, out)
        return out

    def active_piece(self, y) -> np.ndarray:
        """Index of the cost-defining piece at each row of ``y``."""
        a, B, G = self.pieces()
        y = np.atleast_2d(np.asarray(y, dtype=float))
        b = np.where(B[:, 0] >= MIN_COST_SLOPE, B[:, 0], np.nan)
        vals = (y @ G.T - a) / b
        vals = np.where(np.isnan(vals), -np.inf, vals)
        return vals.argmax(axis=1)


@dataclass
class LinearDdfModel(_Hyperplanes):
    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    direction: Direction
    residuals: np.ndarray
    mode: str = "production"
    diagnostics: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return float(self.residuals @ self.residuals)

    def to_dict(self) -> dict:
        return {
            "kind": "parametric",
            "mode": self.mode,
            "direction": self.direction.as_dict(),
            "alpha": float(self.alpha),
            "beta": np.asarray(self.beta).tolist(),
            "gamma": np.asarray(self.gamma).tolist(),
            "residuals": self.residuals.tolist(),
            "diagnostics": self.diagnostics,
        }


@dataclass
class FrontierModel(_Hyperplanes):
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    residuals: np.ndarray
    x: np.ndarray
    y: np.ndarray
    gx: np.ndarray  # per-observation direction, input/cost part
    gy: np.ndarray  # per-observation direction, output part
    mode: str = "production"
    direction: Optional[Direction] = None
    groups: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def objective(self) -> float:
        return float(self.residuals @ self.residuals)

    def fitted_points(self):
        e = self.residuals[:, None]
        return self.x - e * self.gx, self.y + e * self.gy

    def own_values(self) -> np.ndarray:
        """Each hyperplane evaluated at its own observation."""
        return self.alpha + np.einsum("ij,ij->i", self.beta, self.x) - np.einsum("ij,ij->i", self.gamma, self.y)

    def afriat_gap(self) -> np.ndarray:
        """``own_i - h_j(z_i)`` for all pairs; positive entries are violations."""
        vals = self.piece_values(self.x, self.y)  # [i, j] = h_j(z_i)
        own = np.diag(vals).copy()
        gap = own[:, None] - vals
        np.fill_diagonal(gap, -np.inf)
        return gap

    def to_dict(self) -> dict:
        out = {
            "kind": "cnls_d",
            "mode": self.mode,
            "direction": None if self.direction is None else self.direction.as_dict(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "residuals": self.residuals.tolist(),
            "diagnostics": self.diagnostics,
        }
        if self.groups is not None:
            out["groups"] = self.groups.tolist()
            out["group_directions"] = {
                str(int(k)): np.concatenate([self.gx[i], self.gy[i]]).tolist()
                for k, i in ((k, int(np.flatnonzero(self.groups == k)[0])) for k in np.unique(self.groups))
            }
        return out


def model_from_dict(d: dict):
    """Rebuild an evaluable model from its JSON form."""
    if d["kind"] == "parametric":
        return LinearDdfModel(
            alpha=float(d["alpha"]), beta=np.asarray(d["beta"], float), gamma=np.asarray(d["gamma"], float),
            direction=Direction.from_dict(d["direction"]), residuals=np.asarray(d["residuals"], float),
            mode=d.get("mode", "production"), diagnostics=d.get("diagnostics", {}),
        )
    if d["kind"] == "cnls_d":
        alpha = np.asarray(d["alpha"], float)
        k = alpha.size
        beta = np.asarray(d["beta"], float).reshape(k, -1)
        gamma = np.asarray(d["gamma"], float).reshape(k, -1)
        direction = None if d.get("direction") is None else Direction.from_dict(d["direction"])
        empty = np.zeros((k, 0))
        return FrontierModel(
            alpha=alpha, beta=beta, gamma=gamma, residuals=np.asarray(d["residuals"], float),
            x=empty, y=empty, gx=empty, gy=empty, mode=d.get("mode", "production"),
            direction=direction, diagnostics=d.get("diagnostics", {}),
        )
    if d["kind"] == "quadratic":
        return QuadraticModel(float(d["intercept"]), np.asarray(d["linear"], float), np.asarray(d["squared"], float))
    if d["kind"] == "local_linear":
        return KernelModel(np.asarray(d["bandwidths"], float), np.atleast_2d(np.asarray(d["y"], float)),
                           np.asarray(d["c"], float), float(d.get("cv_score", float("nan"))))
    raise DataError(f"unknown model kind {d['kind']!r}")


# ------------------------------------------------------------ standardizing

@dataclass
class _Standardizer:
    mx: np.ndarray
    sx: np.ndarray
    my: np.ndarray
    sy: np.ndarray

    @classmethod
    def fit(cls, X, Y):
        def stats(M):
            if M.shape[1] == 0:
                return np.zeros(0), np.ones(0)
            m, s = M.mean(axis=0), M.std(axis=0)
            s = np.where(s > 0, s, 1.0)
            return m, s
        mx, sx = stats(X)
        my, sy = stats(Y)
        return cls(mx, sx, my, sy)

    def data(self, X, Y):
        return (X - self.mx) / self.sx, (Y - self.my) / self.sy

    def directions(self, GX, GY):
        # change of variables leaves residuals untouched when g scales with 1/s
        return GX / self.sx, GY / self.sy

    def slopes_back(self, Bs, Gs):
        return Bs / self.sx, Gs / self.sy


# ---------------------------------------------------------- parametric DDF

def fit_parametric_ddf(data: Dataset, direction: Direction, tol: float = 1e-8) -> LinearDdfModel:
    """Linear DDF by least squares along ``direction`` (single hyperplane)."""
    X, Y = data.netputs()
    gx, gy = _direction_parts(direction, X.shape[1], Y.shape[1])
    n, d = X.shape
    Q = Y.shape[1]
    if n <= d + Q + 1:
        raise DataError(f"parametric DDF needs n > d + Q + 1 (n={n}, d+Q={d + Q})")
    st = _Standardizer.fit(X, Y)
    Xs, Ys = st.data(X, Y)
    gxs, gys = st.directions(gx, gy)
    nv = 1 + d + Q + n
    ia, ib, ig, ie = 0, slice(1, 1 + d), slice(1 + d, 1 + d + Q), slice(1 + d + Q, nv)
    E = np.zeros((n + 1, nv))
    E[:n, ia] = -1.0
    E[:n, ib] = -Xs
    E[:n, ig] = Ys
    E[:n, ie] = np.eye(n)
    E[n, ib] = gxs
    E[n, ig] = gys
    b = np.zeros(n + 1)
    b[n] = 1.0
    P = np.zeros((nv, nv))
    P[ie, ie] = 2.0 * np.eye(n)
    sol = solve_qp(QpProblem(P, np.zeros(nv), eq_matrix=E, eq_rhs=b), tol=tol)
    if sol.status != OPTIMAL:
        raise EstimationError(f"parametric DDF QP ended with status {sol.status}")
    z = sol.primal
    bs, gs = z[ib], z[ig]
    beta, gamma = bs / st.sx, gs / st.sy
    alpha = z[ia] - beta @ st.mx + gamma @ st.my
    eps = alpha + X @ beta - Y @ gamma
    return LinearDdfModel(
        alpha=float(alpha), beta=beta, gamma=gamma, direction=direction, residuals=eps,
        mode=data.mode,
        diagnostics={"objective": float(z[ie] @ z[ie]), "kkt": sol.kkt_report.as_dict(), "iterations": sol.iterations},
    )


def _direction_parts(direction: Direction, d: int, Q: int):
    gx, gy = direction.netput()
    if gx.size != d or gy.size != Q:
        raise DataError(f"direction has ({gx.size}, {gy.size}) components, data has ({d}, {Q})")
    return gx, gy


# ------------------------------------------------------------------- CNLS-d

def fit_cnls_d(data: Dataset, direction: Direction, slope_bound: Optional[float] = None,
               tol: float = 1e-8, bound_kind: str = "coefficients") -> FrontierModel:
    """CNLS-d with one common direction (production or cost mode).

    ``slope_bound`` caps every beta and gamma component when ``bound_kind``
    is ``"coefficients"``.  With ``"cost_slope"`` it caps the slopes of the
    implied cost frontier instead, ``gamma_q <= bound * beta`` (one input or
    cost column only); that cap is always feasible.
    """
    X, Y = data.netputs()
    gx, gy = _direction_parts(direction, X.shape[1], Y.shape[1])
    n = X.shape[0]
    if n < 1:
        raise DataError("CNLS-d needs at least one observation")
    model = _afriat_fit(X, Y, np.tile(gx, (n, 1)), np.tile(gy, (n, 1)), slope_bound=slope_bound, tol=tol,
                        bound_kind=bound_kind)
    model.mode = data.mode
    model.direction = direction
    return model


def fit_cnls_d_isoquant(outputs, direction: Direction, tol: float = 1e-8) -> FrontierModel:
    """CNLS-d on an iso-cost (or iso-input) level set: outputs only."""
    Y = np.atleast_2d(np.asarray(outputs, dtype=float))
    if direction.g_x.size or direction.g_c is not None:
        raise DataError("isoquant fits need an output-space direction")
    if direction.g_y.size != Y.shape[1]:
        raise DataError("direction length does not match the number of outputs")
    n = Y.shape[0]
    model = _afriat_fit(np.zeros((n, 0)), Y, np.zeros((n, 0)), np.tile(direction.g_y, (n, 1)), tol=tol)
    model.mode = "isoquant"
    model.direction = direction
    return model


def fit_cnls_d_multidir(outputs, groups, directions: Sequence[Direction], tol: float = 1e-8) -> FrontierModel:
    """Isoquant CNLS-d where each group normalizes along its own direction.

    ``groups[i]`` indexes into ``directions``.  Afriat inequalities still run
    over all pairs of observations.
    """
    Y = np.atleast_2d(np.asarray(outputs, dtype=float))
    groups = np.asarray(groups, dtype=int)
    n, Q = Y.shape
    if groups.shape != (n,):
        raise DataError("one group label per observation is required")
    if groups.min(initial=0) < 0 or groups.max(initial=0) >= len(directions):
        raise DataError("group labels must index the directions list")
    for k in range(len(directions)):
        if not np.any(groups == k):
            raise DataError(f"group {k} is empty")
        if directions[k].g_y.size != Q or directions[k].g_x.size or directions[k].g_c is not None:
            raise DataError(f"direction {k} is not an output-space direction of length {Q}")
    GY = np.vstack([directions[k].g_y for k in groups])
    model = _afriat_fit(np.zeros((n, 0)), Y, np.zeros((n, 0)), GY, tol=tol)
    model.mode = "isoquant"
    model.groups = groups
    return model


def _initial_pairs(Zs: np.ndarray, k: int) -> np.ndarray:
    n = Zs.shape[0]
    if n <= k + 1:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return np.column_stack([i, j])
    d2 = ((Zs[:, None, :] - Zs[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.argpartition(d2, k, axis=1)[:, :k]
    i = np.repeat(np.arange(n), k)
    j = nn.ravel()
    pairs = np.concatenate([np.column_stack([i, j]), np.column_stack([j, i])])
    return np.unique(pairs, axis=0)


BOUND_KINDS = ("coefficients", "cost_slope")


def _afriat_fit(X, Y, GX, GY, slope_bound=None, tol=1e-8, max_rounds=60, neighbors=None,
                bound_kind="coefficients") -> FrontierModel:
    t0 = time.perf_counter()
    n, d = X.shape
    Q = Y.shape[1]
    if np.any(np.einsum("ij->i", np.abs(GX)) + np.einsum("ij->i", np.abs(GY)) <= 0):
        raise DataError("degenerate (all-zero) direction")
    st = _Standardizer.fit(X, Y)
    Xs, Ys = st.data(X, Y)
    GXs, GYs = st.directions(GX, GY)
    # one common rescale to unit typical length; residuals and slopes scale by kappa
    kappa = float(np.median(np.sqrt(np.einsum("ij,ij->i", GXs, GXs) + np.einsum("ij,ij->i", GYs, GYs))))
    GXs, GYs = GXs / kappa, GYs / kappa
    upper = rows = None
    if bound_kind not in BOUND_KINDS:
        raise DataError(f"unknown bound kind {bound_kind!r}")
    if slope_bound is not None and bound_kind == "cost_slope":
        if slope_bound <= 0:
            raise DataError("slope_bound must be positive")
        if d != 1:
            raise DataError("a cost-slope bound needs exactly one input (or cost) column")
        # gamma_q - B beta <= 0 in original units, scaled by sy_q in standardized ones
        rows = (np.hstack([-slope_bound * st.sy[:, None] / st.sx[0], np.eye(Q)]), np.zeros(Q))
    elif slope_bound is not None:
        if slope_bound <= 0:
            raise DataError("slope_bound must be positive")
        # translation needs b'gx + g'gy = 1 with every coefficient in [0, bound]
        reach = slope_bound * (np.maximum(GX, 0).sum(axis=1) + np.maximum(GY, 0).sum(axis=1))
        if np.any(reach < 1.0 - 1e-12):
            raise DataError(f"slope_bound {slope_bound} cannot satisfy the translation constraint for "
                            f"this direction (needs bound * sum of positive components >= 1, got "
                            f"{reach.min():.4g})")
        upper = (kappa * slope_bound * st.sx, kappa * slope_bound * st.sy)
    prob = AfriatProblem(Xs, Ys, GXs, GYs, upper, rows)

    if n == 1:
        pairs = np.zeros((0, 2), dtype=int)
    else:
        k = neighbors or min(n - 1, 3 * (d + Q) + 4)
        pairs = _initial_pairs(np.hstack([Xs, Ys]), k)
    add_tol = tol
    rounds, iters = 0, 0
    sol = None
    max_viol = np.inf
    for rounds in range(1, max_rounds + 1):
        sol = prob.solve(pairs, tol=tol)
        iters += sol.iterations
        if sol.status != OPTIMAL:
            raise EstimationError(f"CNLS-d QP ended with status {sol.status} (round {rounds})")
        if n == 1:
            max_viol = 0.0
            break
        V = prob.violations(sol.e, sol.V)
        max_viol = float(V.max())
        if max_viol <= add_tol:
            break
        bad_i, bad_j = np.nonzero(V > add_tol)
        # most violated first, capped so rounds stay small
        order = np.argsort(-V[bad_i, bad_j])[: max(4 * n, 50)]
        new = np.column_stack([bad_i[order], bad_j[order]])
        pairs = np.concatenate([pairs, new])
    else:
        raise EstimationError(f"CNLS-d working set did not converge in {max_rounds} rounds "
                              f"(max violation {max_viol:.3g})")

    if n > 1:
        pol = polish(prob.qp(pairs), sol, tol)
        if pol is not sol:
            pe, pB, pG = prob.unpack(pol.primal)
            pV = np.hstack([pB, pG])
            pv = float(prob.violations(pe, pV).max())
            if pv <= add_tol:
                pol.e, pol.V = pe, pV
                sol, max_viol = pol, pv
    rep = certify(prob, pairs, sol, tol)
    if sol.status != OPTIMAL:
        raise EstimationError(f"CNLS-d solution failed KKT certification ({rep.max_residual:.3g})")
    e, Bs, Gs = (v / kappa for v in prob.unpack(sol.primal))
    beta, gamma = st.slopes_back(Bs, Gs)
    alpha = e - np.einsum("ij,ij->i", beta, X) + np.einsum("ij,ij->i", gamma, Y)
    full_kkt = KktReport(
        stationarity=rep.stationarity, primal_eq=rep.primal_eq,
        primal_ineq=max(rep.primal_ineq, max(max_viol, 0.0)), dual_sign=rep.dual_sign,
        complementarity=rep.complementarity, tol=tol, scale=rep.scale,
    )
    model = FrontierModel(
        alpha=alpha, beta=beta, gamma=gamma, residuals=e.copy(), x=X, y=Y, gx=GX, gy=GY,
    )
    recomputed = model.own_values()
    model.diagnostics = {
        "objective_qp": float(e @ e),
        "direction_scale": kappa,
        "objective_recovered": float(recomputed @ recomputed),
        "kkt": full_kkt.as_dict(),
        "rounds": rounds,
        "working_pairs": int(pairs.shape[0]),
        "total_pairs": n * (n - 1),
        "iterations": iters,
        "max_afriat_violation": max(max_viol, 0.0),
        "seconds": time.perf_counter() - t0,
        "slope_bound": slope_bound,
        "bound_kind": bound_kind,
        "tol": tol,
    }
    model._problem = prob  # kept for independent KKT checks
    model._solution = sol
    model._pairs = pairs
    return model


# ------------------------------------------------------------- comparators

@dataclass
class QuadraticModel:
    """Cost = a + sum_q b_q y_q + sum_q d_q y_q^2 (no cross products)."""

    intercept: float
    linear: np.ndarray
    squared: np.ndarray

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.linear, self.squared])

    def cost(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.intercept + y @ self.linear + (y ** 2) @ self.squared

    def implicit(self, x, y) -> np.ndarray:
        return np.atleast_2d(x)[:, 0] - self.cost(y)

    def to_dict(self) -> dict:
        return {"kind": "quadratic", "intercept": self.intercept,
                "linear": self.linear.tolist(), "squared": self.squared.tolist()}


def _quadratic_design(Y):
    return np.hstack([np.ones((Y.shape[0], 1)), Y, Y ** 2])


def fit_quadratic(data: Dataset) -> QuadraticModel:
    if data.mode != "cost":
        raise DataError("quadratic regression needs cost-mode data")
    Y, c = data.outputs, data.cost
    Q = Y.shape[1]
    if data.n <= 2 * Q + 1:
        raise DataError(f"quadratic regression needs n > 2Q + 1 (n={data.n})")
    Z = _quadratic_design(Y)
    coef, _, rank, _ = np.linalg.lstsq(Z, c, rcond=None)
    if rank < Z.shape[1]:
        raise DataError("quadratic design matrix is rank deficient")
    return QuadraticModel(float(coef[0]), coef[1:1 + Q], coef[1 + Q:])


RIDGE = 1e-10


def _local_linear_at(Ytr, ctr, h, Yq, exclude_self=False):
    """Local-linear predictions at rows of ``Yq`` (product Gaussian kernel)."""
    D = Ytr[None, :, :] - Yq[:, None, :]           # (m, n, Q)
    W = np.exp(-0.5 * ((D / h) ** 2).sum(axis=2))   # (m, n)
    if exclude_self:
        np.fill_diagonal(W, 0.0)
    Z = np.concatenate([np.ones(D.shape[:2] + (1,)), D], axis=2)  # (m, n, p)
    M = np.einsum("mn,mnp,mnq->mpq", W, Z, Z)
    r = np.einsum("mn,mnp,n->mp", W, Z, ctr)
    p = M.shape[1]
    scale = np.maximum(np.abs(np.einsum("mpp->mp", M)).max(axis=1), 1e-300)
    try:
        sol = np.linalg.solve(M, r[..., None])[..., 0]
        bad = ~np.all(np.isfinite(sol), axis=1)
    except np.linalg.LinAlgError:
        bad = np.ones(M.shape[0], dtype=bool)
        sol = np.zeros((M.shape[0], p))
    cond_bad = np.linalg.cond(M) > 1e12
    bad |= cond_bad
    if bad.any():
        Mr = M[bad] + RIDGE * scale[bad, None, None] * np.eye(p)
        sol[bad] = np.linalg.solve(Mr, r[bad][..., None])[..., 0]
    return sol[:, 0]


@dataclass
class KernelModel:
    bandwidths: np.ndarray
    y: np.ndarray
    c: np.ndarray
    cv_score: float = float("nan")

    def cost(self, y) -> np.ndarray:
        yq = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.empty(yq.shape[0])
        for s in range(0, yq.shape[0], 256):
            out[s:s + 256] = _local_linear_at(self.y, self.c, self.bandwidths, yq[s:s + 256])
        return out

    def implicit(self, x, y) -> np.ndarray:
        return np.atleast_2d(x)[:, 0] - self.cost(y)

    def to_dict(self) -> dict:
        return {"kind": "local_linear", "bandwidths": self.bandwidths.tolist(), "cv_score": self.cv_score,
                "y": self.y.tolist(), "c": self.c.tolist()}


def loo_cv_score(Y, c, h) -> float:
    pred = _local_linear_at(Y, c, np.asarray(h, dtype=float), Y, exclude_self=True)
    return float(np.mean((pred - c) ** 2))


def bandwidth_grid(Y, n_points: int = 20) -> np.ndarray:
    """Per-dimension log grid from 0.1 to 10 times the rule-of-thumb bandwidth."""
    n = Y.shape[0]
    sigma = Y.std(axis=0, ddof=1)
    sigma = np.where(sigma > 0, sigma, 1.0)
    base = sigma * n ** (-1.0 / 5.0)
    factors = np.logspace(-1, 1, n_points)
    return base[:, None] * factors[None, :]


def fit_local_linear(data: Dataset, n_grid: int = 20, max_sweeps: int = 5) -> KernelModel:
    """Local-linear Gaussian-kernel regression of cost on outputs.

    Bandwidths minimize the leave-one-out squared error by coordinate
    descent over each dimension's log grid, starting from the rule of thumb.
    """
    if data.mode != "cost":
        raise DataError("local-linear regression needs cost-mode data")
    if data.n < 10:
        raise DataError("local-linear regression needs at least 10 observations")
    Y, c = data.outputs, data.cost
    grid = bandwidth_grid(Y, n_grid)
    Q = Y.shape[1]
    idx = np.full(Q, n_grid // 2)
    best = loo_cv_score(Y, c, grid[np.arange(Q), idx])
    cache = {tuple(idx): best}
    for _ in range(max_sweeps):
        improved = False
        for q in range(Q):
            for k in range(n_grid):
                trial = idx.copy()
                trial[q] = k
                key = tuple(trial)
                if key not in cache:
                    cache[key] = loo_cv_score(Y, c, grid[np.arange(Q), trial])
                if cache[key] < best - 1e-15 * abs(best):
                    best, idx, improved = cache[key], trial, True
        if not improved:
            break
    return KernelModel(grid[np.arange(Q), idx], Y.copy(), c.copy(), best)


def evaluate_ddf(model, x, y) -> np.ndarray:
    """DDF estimate at arbitrary netput points (lower envelope of hyperplanes)."""
    return model.ddf(x, y)


# ----------------------------------------------------------- spec / factory

ESTIMATOR_KINDS = ("cnls_d", "parametric", "quadratic", "local_linear")


@dataclass(frozen=True)
class EstimatorSpec:
    """What to fit and along which direction.

    ``direction`` is ``"median"``, an angle in radians (two-variable cost
    data), or an explicit component list in CSV column order.
    """

    kind: str = "cnls_d"
    direction: object = "median"
    slope_bound: Optional[float] = None
    bound_kind: str = "coefficients"

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise DataError(f"unknown estimator kind {self.kind!r}; expected one of {ESTIMATOR_KINDS}")
        if self.slope_bound is not None and self.slope_bound <= 0:
            raise DataError("slope_bound must be positive")
        if self.bound_kind not in BOUND_KINDS:
            raise DataError(f"unknown bound kind {self.bound_kind!r}; expected one of {BOUND_KINDS}")

    @property
    def needs_direction(self) -> bool:
        return self.kind in ("cnls_d", "parametric")

    def resolve_direction(self, data: Dataset) -> Optional[Direction]:
        """Direction for ``data``; the median rule expects normalized data."""
        from .data import direction_from_angle, median_direction, NormalizedDataset, ScaleInfo, parse_direction

        if not self.needs_direction:
            return None
        g = self.direction
        if isinstance(g, str):
            if g != "median":
                raise DataError(f"unknown direction source {g!r}")
            dummy = ScaleInfo(np.zeros(data.columns().shape[1]), np.ones(data.columns().shape[1]),
                              np.zeros(data.columns().shape[1], dtype=bool))
            return median_direction(NormalizedDataset(data, dummy)).direction
        if np.isscalar(g):
            if data.mode != "cost" or data.Q != 1:
                raise DataError("angle directions need single-output cost data")
            return direction_from_angle(float(g))
        return parse_direction(g, data)

    def fit(self, data: Dataset, tol: float = 1e-8):
        if self.kind == "quadratic":
            return fit_quadratic(data)
        if self.kind == "local_linear":
            return fit_local_linear(data)
        direction = self.resolve_direction(data)
        if self.kind == "parametric":
            return fit_parametric_ddf(data, direction, tol=tol)
        return fit_cnls_d(data, direction, slope_bound=self.slope_bound, tol=tol, bound_kind=self.bound_kind)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "direction": self.direction, "slope_bound": self.slope_bound,
                "bound_kind": self.bound_kind}
