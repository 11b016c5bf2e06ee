"""Dense (optionally sparse) convex QP solver with KKT certification.

Problems are posed as::

    minimize    0.5 z'Pz + q'z
    subject to  E z  = b
                A z <= d
                lb <= z <= ub

and solved with a Mehrotra predictor-corrector primal-dual interior-point
method.  Constraint matrices may be numpy arrays or scipy.sparse matrices;
sparse input keeps the Newton systems sparse, which is what makes the
CNLS-d working-set fits cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 200
FARKAS_TOL = 1e-6
POLISH_MAX_SIZE = 2000  # larger callers polish explicitly
POLISH_RATIOS = (1.0, 10.0, 100.0)
POLISH_PROX = 1e-8
POLISH_SLACKS = (0.1, 1.0, 10.0)  # multiples of sqrt(tol) for dual-free active sets
NNLS_MAX_ENTRIES = 2_000_000
NNLS_SIGN_GATE = 1e-2  # larger negative multipliers mean a wrong active set, not a degenerate one


class QpError(ValueError):
    """Raised for malformed problems (bad shapes, non-PSD objective)."""


def _as_matrix(m, ncols):
    if m is None:
        return np.zeros((0, ncols))
    if sp.issparse(m):
        return sp.csr_matrix(m, dtype=float)
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1) if m.size else np.zeros((0, ncols))
    return m


def _rows(m):
    return m.shape[0]


@dataclass
class QpProblem:
    objective_matrix: object
    objective_vector: np.ndarray
    eq_matrix: object = None
    eq_rhs: Optional[np.ndarray] = None
    ineq_matrix: object = None
    ineq_rhs: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.objective_vector = np.asarray(self.objective_vector, dtype=float).ravel()
        n = self.objective_vector.size
        P = self.objective_matrix
        self.objective_matrix = sp.csr_matrix(P, dtype=float) if sp.issparse(P) else np.asarray(P, dtype=float)
        if self.objective_matrix.shape != (n, n):
            raise QpError(f"objective matrix shape {self.objective_matrix.shape} != ({n}, {n})")
        self.eq_matrix = _as_matrix(self.eq_matrix, n)
        self.ineq_matrix = _as_matrix(self.ineq_matrix, n)
        self.eq_rhs = np.zeros(0) if self.eq_rhs is None else np.asarray(self.eq_rhs, dtype=float).ravel()
        self.ineq_rhs = np.zeros(0) if self.ineq_rhs is None else np.asarray(self.ineq_rhs, dtype=float).ravel()
        for name, m, rhs in (("eq", self.eq_matrix, self.eq_rhs), ("ineq", self.ineq_matrix, self.ineq_rhs)):
            if m.shape[1] != n:
                raise QpError(f"{name} matrix has {m.shape[1]} columns, expected {n}")
            if _rows(m) != rhs.size:
                raise QpError(f"{name} matrix has {_rows(m)} rows but rhs has {rhs.size}")
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
                setattr(self, name, v)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise QpError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.objective_vector.size

    @property
    def is_sparse(self) -> bool:
        return any(sp.issparse(m) for m in (self.objective_matrix, self.eq_matrix, self.ineq_matrix))

    def objective(self, z) -> float:
        return float(0.5 * z @ (self.objective_matrix @ z) + self.objective_vector @ z)

    def check_psd(self, tol: float = 1e-12) -> None:
        P = self.objective_matrix
        if sp.issparse(P):
            asym = abs(P - P.T).max() if P.nnz else 0.0
            diag_only = (P - sp.diags(P.diagonal())).nnz == 0
            if asym > tol:
                raise QpError(f"objective matrix not symmetric (max asymmetry {asym:.3g})")
            if diag_only:
                if np.any(P.diagonal() < -tol):
                    raise QpError("objective matrix is not positive semidefinite")
                return
            P = P.toarray()
        asym = np.max(np.abs(P - P.T)) if P.size else 0.0
        if asym > tol:
            raise QpError(f"objective matrix not symmetric (max asymmetry {asym:.3g})")
        if P.size:
            lam = np.linalg.eigvalsh(0.5 * (P + P.T))
            scale = max(1.0, np.max(np.abs(lam)))
            if lam[0] < -1e-10 * scale:
                raise QpError(f"objective matrix is not positive semidefinite (min eigenvalue {lam[0]:.3g})")

    def stacked_inequalities(self):
        """Inequalities with bounds appended as rows: (A, d, kinds)."""
        n = self.n
        blocks, rhs = [self.ineq_matrix], [self.ineq_rhs]
        eye = sp.identity(n, format="csr") if self.is_sparse else np.eye(n)
        if self.upper is not None:
            idx = np.flatnonzero(np.isfinite(self.upper))
            blocks.append(eye[idx])
            rhs.append(self.upper[idx])
        if self.lower is not None:
            idx = np.flatnonzero(np.isfinite(self.lower))
            blocks.append(-eye[idx])
            rhs.append(-self.lower[idx])
        if self.is_sparse:
            A = sp.vstack([sp.csr_matrix(b) for b in blocks], format="csr")
        else:
            A = np.vstack(blocks)
        return A, np.concatenate(rhs)


@dataclass
class KktReport:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    dual_sign: float
    complementarity: float
    tol: float
    scale: float = 1.0

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_ineq, self.dual_sign, self.complementarity)

    @property
    def ok(self) -> bool:
        return self.max_residual <= self.tol * self.scale

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "primal_eq": self.primal_eq,
            "primal_ineq": self.primal_ineq,
            "dual_sign": self.dual_sign,
            "complementarity": self.complementarity,
            "tol": self.tol,
            "scale": self.scale,
            "ok": self.ok,
        }


@dataclass
class QpSolution:
    primal: np.ndarray
    dual_eq: np.ndarray
    dual_ineq: np.ndarray
    status: str
    iterations: int
    kkt_report: Optional[KktReport] = None
    objective: float = float("nan")
    dual_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dual_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_violation: float = 0.0
    farkas_residual: float = float("nan")


def _problem_scale(problem: QpProblem) -> float:
    vals = [1.0, np.max(np.abs(problem.objective_vector), initial=0.0)]
    for v in (problem.eq_rhs, problem.ineq_rhs):
        vals.append(np.max(np.abs(v), initial=0.0))
    return float(max(vals))


def verify_kkt(problem: QpProblem, solution: QpSolution, tol: float = DEFAULT_TOL) -> KktReport:
    """Recompute KKT residual norms (infinity norms) for a candidate solution.

    ``scale`` in the report is ``max(1, |q|, |b|, |d|)``; ``ok`` compares the
    residuals against ``tol * scale``.
    """
    z = np.asarray(solution.primal, dtype=float)
    n = problem.n
    if z.size != n:
        raise QpError(f"primal has {z.size} entries, expected {n}")
    E, A = problem.eq_matrix, problem.ineq_matrix
    y = np.asarray(solution.dual_eq, dtype=float).ravel()
    w = np.asarray(solution.dual_ineq, dtype=float).ravel()
    if y.size != _rows(E) or w.size != _rows(A):
        raise QpError("dual vector sizes do not match constraint counts")
    zl = solution.dual_lower if solution.dual_lower.size else np.zeros(n)
    zu = solution.dual_upper if solution.dual_upper.size else np.zeros(n)

    grad = problem.objective_matrix @ z + problem.objective_vector
    if y.size:
        grad = grad + E.T @ y
    if w.size:
        grad = grad + A.T @ w
    grad = grad + zu - zl
    stationarity = float(np.max(np.abs(grad), initial=0.0))

    primal_eq = float(np.max(np.abs(E @ z - problem.eq_rhs), initial=0.0)) if y.size else 0.0
    slack = problem.ineq_rhs - A @ z if w.size else np.zeros(0)
    viol = [np.max(-slack, initial=0.0)]
    comp = [np.max(np.abs(w * slack), initial=0.0)]
    dual_neg = [np.max(-w, initial=0.0)]
    for bound, mult, sign in ((problem.lower, zl, 1.0), (problem.upper, zu, -1.0)):
        if bound is None:
            if np.any(mult != 0):
                dual_neg.append(np.max(np.abs(mult)))
            continue
        fin = np.isfinite(bound)
        s = sign * (z[fin] - bound[fin])
        viol.append(np.max(-s, initial=0.0))
        comp.append(np.max(np.abs(mult[fin] * s), initial=0.0))
        dual_neg.append(np.max(-mult, initial=0.0))
    return KktReport(
        stationarity=stationarity,
        primal_eq=primal_eq,
        primal_ineq=float(max(viol)),
        dual_sign=float(max(dual_neg)),
        complementarity=float(max(comp)),
        tol=tol,
        scale=_problem_scale(problem),
    )


class _KktSystem:
    """Factorizes [[P + A'WA + reg, E'], [E, -reg]] for repeated solves."""

    def __init__(self, P, A, E, w, reg):
        n, me = P.shape[0], _rows(E)
        self.n, self.me = n, me
        if sp.issparse(P) or sp.issparse(A) or sp.issparse(E):
            A = sp.csr_matrix(A)
            H = sp.csr_matrix(P) + (A.T @ sp.diags(w) @ A) + reg * sp.identity(n)
            if me:
                E = sp.csr_matrix(E)
                K = sp.bmat([[H, E.T], [E, -reg * sp.identity(me)]], format="csc")
            else:
                K = sp.csc_matrix(H)
            self.K = K
            self._lu = spla.splu(K, permc_spec="COLAMD")
            self._solve = self._lu.solve
        else:
            H = P + (A.T * w) @ A + reg * np.eye(n)
            if me:
                K = np.block([[H, E.T], [E, -reg * np.eye(me)]])
            else:
                K = H
            self.K = K
            lu = sla.lu_factor(K, check_finite=False)
            self._solve = lambda r: sla.lu_solve(lu, r, check_finite=False)

    def solve(self, r1, r2, exact=None):
        rhs = np.concatenate([r1, r2])
        sol = self._solve(rhs)
        if exact is not None:
            # iterative refinement against the unregularized operator
            for _ in range(2):
                res = rhs - exact(sol)
                sol = sol + self._solve(res)
        return sol[: self.n], sol[self.n:]


def solve_qp(problem: QpProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> QpSolution:
    """Solve a convex QP; returns a KKT-certified solution or a failure status.

    Bounds are folded into the inequality block internally and their
    multipliers are returned separately in ``dual_lower``/``dual_upper``.
    """
    if tol <= 0:
        raise QpError("tol must be positive")
    problem.check_psd()
    n = problem.n
    P, q = problem.objective_matrix, problem.objective_vector
    E, b = problem.eq_matrix, problem.eq_rhs
    A, d = problem.stacked_inequalities()
    me, mi = _rows(E), _rows(A)
    scale = _problem_scale(problem)
    reg = 1e-11

    if mi == 0:
        return _solve_equality_only(problem, tol)

    x = np.zeros(n)
    y = np.zeros(me)
    s = np.ones(mi)
    z = np.ones(mi)
    # start: least-norm point for the equalities, then push slacks positive
    sys0 = _KktSystem(P, A, E, np.ones(mi), 1e-8)
    x, _ = sys0.solve(-q, b)
    r = d - A @ x
    s = np.maximum(r, 1.0)
    z = np.ones(mi)

    status, it = MAX_ITERS, 0
    farkas = float("nan")
    for it in range(1, max_iters + 1):
        rd = P @ x + q + A.T @ z + (E.T @ y if me else 0.0)
        rpe = E @ x - b if me else np.zeros(0)
        rpi = A @ x + s - d
        mu = float(s @ z) / mi

        kkt_ok = (
            np.max(np.abs(rd), initial=0.0) <= tol * scale
            and np.max(np.abs(rpe), initial=0.0) <= tol * scale
            and np.max(np.abs(rpi), initial=0.0) <= tol * scale
            and np.max(s * z, initial=0.0) <= tol * scale
        )
        if kkt_ok:
            status = OPTIMAL
            break

        # Farkas-type certificate: large duals with A'z + E'y ~ 0 and d'z + b'y < 0
        dual_norm = np.linalg.norm(z) + np.linalg.norm(y)
        if dual_norm > 1e8:
            ray = A.T @ z + (E.T @ y if me else 0.0)
            farkas = float(np.max(np.abs(ray)) / dual_norm)
            gap = (d @ z + (b @ y if me else 0.0)) / dual_norm
            if farkas <= FARKAS_TOL and gap < -FARKAS_TOL:
                status = INFEASIBLE
                break

        w = z / s
        try:
            K = _KktSystem(P, A, E, w, reg)
        except (RuntimeError, np.linalg.LinAlgError, ValueError):
            break

        def direction(rc):
            # rc: complementarity residual s*z - sigma*mu (+ corrector)
            r1 = -(rd + A.T @ (w * rpi - rc / s))
            r2 = -rpe
            dx, dy = K.solve(r1, r2)
            dz = w * (A @ dx + rpi) - rc / s
            ds = -(rc + s * dz) / z
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = direction(s * z)
        a_p = _step(s, ds)
        a_d = _step(z, dz)
        mu_aff = float((s + a_p * ds) @ (z + a_d * dz)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        a_p = min(1.0, 0.995 * _step(s, ds))
        a_d = min(1.0, 0.995 * _step(z, dz))
        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        z = z + a_d * dz
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            break

    w_ineq, zu, zl = _split_duals(problem, z)
    sol = QpSolution(
        primal=x, dual_eq=y, dual_ineq=w_ineq, status=status, iterations=it,
        dual_lower=zl, dual_upper=zu, farkas_residual=farkas,
    )
    sol.objective = problem.objective(x)
    sol.kkt_report = verify_kkt(problem, sol, tol)
    sol.max_violation = max(sol.kkt_report.primal_ineq, sol.kkt_report.primal_eq)
    if status == OPTIMAL and n + me + mi <= POLISH_MAX_SIZE:
        sol = polish(problem, sol, tol)
    if status == OPTIMAL and not sol.kkt_report.ok:
        # the interior iterate passed but the recomputed residuals did not
        sol.status = MAX_ITERS
    return sol


def _split_duals(problem: QpProblem, z):
    """Stacked multipliers (ineq, finite upper, finite lower) back to three vectors."""
    n = problem.n
    m0 = _rows(problem.ineq_matrix)
    w_ineq = z[:m0]
    zu, zl = np.zeros(n), np.zeros(n)
    pos = m0
    if problem.upper is not None:
        idx = np.flatnonzero(np.isfinite(problem.upper))
        zu[idx] = z[pos:pos + idx.size]
        pos += idx.size
    if problem.lower is not None:
        idx = np.flatnonzero(np.isfinite(problem.lower))
        zl[idx] = z[pos:pos + idx.size]
    return w_ineq, zu, zl


def _stack_duals(problem: QpProblem, sol: QpSolution):
    parts = [np.asarray(sol.dual_ineq, dtype=float)]
    for bound, mult in ((problem.upper, sol.dual_upper), (problem.lower, sol.dual_lower)):
        if bound is not None:
            idx = np.flatnonzero(np.isfinite(bound))
            parts.append(mult[idx] if mult.size else np.zeros(idx.size))
    return np.concatenate(parts)


def polish(problem: QpProblem, sol: QpSolution, tol: float = DEFAULT_TOL) -> QpSolution:
    """Re-solve with the interior point's active set held as equalities.

    Interior-point iterates stop with complementarity near ``tol``, which on
    degenerate problems leaves primal errors of order ``sqrt(tol)``.  Rows
    whose slack is below ``r`` times their multiplier are taken as active for
    a few ratios ``r``; the candidate with the smallest recomputed KKT
    residual wins, and the input is returned unless some candidate beats it.
    """
    A, d = problem.stacked_inequalities()
    w = _stack_duals(problem, sol)
    slack = d - A @ sol.primal
    best = sol
    best_res = (sol.kkt_report if sol.kkt_report is not None else verify_kkt(problem, sol, tol)).max_residual
    tried = set()
    # degenerate optima (e.g. an exact fit) have all multipliers near zero, so
    # also try rows whose slack alone is within a few sqrt(tol)
    sets = [np.flatnonzero(slack < r * w) for r in POLISH_RATIOS]
    sets += [np.flatnonzero(slack <= f * np.sqrt(tol)) for f in POLISH_SLACKS]
    for act in sets:
        key = act.tobytes()
        if key in tried:
            continue
        tried.add(key)
        cand = _active_set_solve(problem, A, d, act, sol, tol, recover_duals=best is sol)
        if cand is not None and cand.kkt_report.ok and cand.kkt_report.max_residual < best_res:
            best, best_res = cand, cand.kkt_report.max_residual
    return best


def _active_set_solve(problem: QpProblem, A, d, act, sol: QpSolution, tol: float, recover_duals: bool = True):
    """Equality-constrained re-solve with a proximal pull toward ``sol.primal``.

    The proximal weight keeps variables the objective does not pin down
    (e.g. slopes of a sum-of-squares fit) near the feasible interior iterate.
    """
    n = problem.n
    P, q = problem.objective_matrix, problem.objective_vector
    E, b = problem.eq_matrix, problem.eq_rhs
    me = _rows(E)
    rho, reg = POLISH_PROX, 1e-12
    q = q - rho * sol.primal
    if problem.is_sparse:
        M = sp.vstack([sp.csr_matrix(E), sp.csr_matrix(A)[act]], format="csr")
        k = M.shape[0]
        H = sp.csr_matrix(P) + rho * sp.identity(n, format="csr")
        K0 = sp.bmat([[H, M.T], [M, sp.csr_matrix((k, k))]], format="csc")
        Kr = (K0 + sp.diags(np.concatenate([np.zeros(n), np.full(k, -reg)]))).tocsc()
        try:
            solve = spla.splu(Kr, permc_spec="COLAMD").solve
        except RuntimeError:
            return None
    else:
        M = np.vstack([E, A[act]])
        k = M.shape[0]
        K0 = np.block([[P + rho * np.eye(n), M.T], [M, np.zeros((k, k))]])
        Kr = K0 + np.diag(np.concatenate([np.zeros(n), np.full(k, -reg)]))
        try:
            lu = sla.lu_factor(Kr, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        solve = lambda r: sla.lu_solve(lu, r, check_finite=False)
    rhs = np.concatenate([-q, b, d[act]])
    v = solve(rhs)
    for _ in range(3):
        v = v + solve(rhs - K0 @ v)
    if not np.all(np.isfinite(v)):
        return None
    wz = np.zeros(A.shape[0])
    wz[act] = v[n + me:]
    w_ineq, zu, zl = _split_duals(problem, wz)
    cand = QpSolution(primal=v[:n], dual_eq=v[n:n + me], dual_ineq=w_ineq, status=OPTIMAL,
                      iterations=sol.iterations, dual_lower=zl, dual_upper=zu,
                      farkas_residual=sol.farkas_residual)
    cand.kkt_report = verify_kkt(problem, cand, tol)
    rep = cand.kkt_report
    sign_only = (max(rep.stationarity, rep.primal_eq, rep.primal_ineq, rep.complementarity) <= rep.tol * rep.scale
                 and rep.dual_sign <= NNLS_SIGN_GATE * rep.scale)
    if recover_duals and not rep.ok and sign_only and (n + me + act.size) * n <= NNLS_MAX_ENTRIES:
        cand = _nonnegative_duals(problem, A, act, cand, tol)
    cand.objective = problem.objective(cand.primal)
    cand.max_violation = max(cand.kkt_report.primal_ineq, cand.kkt_report.primal_eq)
    return cand


def _nonnegative_duals(problem: QpProblem, A, act, cand: QpSolution, tol: float) -> QpSolution:
    """Refit the multipliers of a rank-deficient active set with ``w >= 0``.

    The equality solve pins the primal point but picks arbitrary multipliers
    when active rows are dependent; nonnegative least squares on the
    stationarity equations picks a sign-feasible set when one exists.
    """
    n = problem.n
    E = problem.eq_matrix
    me = _rows(E)
    dense = lambda M: M.toarray() if sp.issparse(M) else np.asarray(M)
    Ed = dense(E).reshape(me, n)
    Aa = dense(A[act]).reshape(act.size, n)
    grad = problem.objective_matrix @ cand.primal + problem.objective_vector
    C = np.hstack([Ed.T, -Ed.T, Aa.T])
    try:
        y, _ = nnls(C, -np.asarray(grad).ravel(), maxiter=50 * C.shape[1])
    except RuntimeError:
        return cand
    wz = np.zeros(A.shape[0])
    wz[act] = y[2 * me:]
    w_ineq, zu, zl = _split_duals(problem, wz)
    alt = QpSolution(primal=cand.primal, dual_eq=y[:me] - y[me:2 * me], dual_ineq=w_ineq, status=OPTIMAL,
                     iterations=cand.iterations, dual_lower=zl, dual_upper=zu,
                     farkas_residual=cand.farkas_residual)
    alt.kkt_report = verify_kkt(problem, alt, tol)
    return alt if alt.kkt_report.max_residual < cand.kkt_report.max_residual else cand


def _step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_equality_only(problem: QpProblem, tol: float) -> QpSolution:
    n = problem.n
    P, q, E, b = problem.objective_matrix, problem.objective_vector, problem.eq_matrix, problem.eq_rhs
    me = _rows(E)
    reg = 1e-12
    K = _KktSystem(P, np.zeros((0, n)) if not problem.is_sparse else sp.csr_matrix((0, n)), E, np.zeros(0), reg)

    def exact(v):
        vx, vy = v[:n], v[n:]
        top = P @ vx + (E.T @ vy if me else 0.0)
        return np.concatenate([top, E @ vx if me else np.zeros(0)])

    x, y = K.solve(-q, b, exact=exact)
    sol = QpSolution(primal=x, dual_eq=y, dual_ineq=np.zeros(0), status=OPTIMAL, iterations=1,
                     dual_lower=np.zeros(n), dual_upper=np.zeros(n))
    sol.objective = problem.objective(x)
    sol.kkt_report = verify_kkt(problem, sol, tol)
    sol.max_violation = sol.kkt_report.primal_eq
    if not sol.kkt_report.ok:
        sol.status = INFEASIBLE if sol.kkt_report.primal_eq > FARKAS_TOL * _problem_scale(problem) else MAX_ITERS
    return sol
