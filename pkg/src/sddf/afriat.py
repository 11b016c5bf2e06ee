"""Structured interior-point solver for the CNLS-d Afriat QP.

Per observation ``i`` there is a residual ``e_i`` and a slope block
``v_i = (b_i, g_i)`` of length ``p``.  The problem is::

    minimize    sum_i e_i^2
    subject to  e_j - e_i + a_ij' v_i <= 0     for (i, j) in a pair set
                dir_i' v_i = 1                 for every i
                v_i >= 0,  C v_i <= u          (C, u shared by all blocks; optional)

Each inequality touches two residuals and one slope block and each equality
touches one slope block, so the slope blocks can be eliminated one at a time
and the Newton step reduces to a dense ``n x n`` positive definite system in
the residuals.  The method is the same Mehrotra predictor-corrector as the
generic solver; the generic solver on the assembled sparse problem is the
reference for tests.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .qp import MAX_ITERS, OPTIMAL, QpError, QpProblem, QpSolution, _step, verify_kkt


class AfriatProblem:
    """CNLS-d QP on standardized netputs with a given pair set.

    Generic variable layout (for :meth:`qp`): ``[e (n), b (n*d), g (n*Q)]``.
    """

    def __init__(self, Xs, Ys, GXs, GYs, upper=None, block_rows=None):
        self.Xs, self.Ys = np.asarray(Xs, float), np.asarray(Ys, float)
        self.n, self.d = self.Xs.shape
        self.Q = self.Ys.shape[1]
        self.p = self.d + self.Q
        self.Z = np.hstack([self.Xs, self.Ys])
        self.G = np.hstack([GXs, GYs])
        self.sign = np.concatenate([-np.ones(self.d), np.ones(self.Q)])
        # extra rows C v_i <= u per block: componentwise bounds and/or general rows
        C, u = [], []
        if upper is not None:
            C.append(np.eye(self.p))
            u.append(np.concatenate([upper[0], upper[1]]).astype(float))
        if block_rows is not None:
            C.append(np.atleast_2d(np.asarray(block_rows[0], dtype=float)).reshape(-1, self.p))
            u.append(np.asarray(block_rows[1], dtype=float).ravel())
        self.C = np.vstack(C) if C else None
        self.cu = np.concatenate(u) if u else None
        if self.C is not None and self.C.shape[0] != self.cu.size:
            raise ValueError("block rows and their right-hand side differ in length")
        n, d, Q = self.n, self.d, self.Q
        self.nv = n * (1 + d + Q)
        self.ob, self.og = n, n + n * d

    # ---- generic (sparse) form, used for certification and tests
    def afriat_rows(self, pairs):
        n, d, Q = self.n, self.d, self.Q
        i, j = pairs[:, 0], pairs[:, 1]
        m = pairs.shape[0]
        r = np.arange(m)
        dx = self.Xs[j] - self.Xs[i]
        dy = self.Ys[j] - self.Ys[i]
        rows = [r, r, np.repeat(r, d), np.repeat(r, Q)]
        cols = [j, i,
                (self.ob + i[:, None] * d + np.arange(d)[None, :]).ravel(),
                (self.og + i[:, None] * Q + np.arange(Q)[None, :]).ravel()]
        vals = [np.ones(m), -np.ones(m), (-dx).ravel(), dy.ravel()]
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, self.nv)
        )

    def qp(self, pairs) -> QpProblem:
        n, d, Q = self.n, self.d, self.Q
        rows = np.repeat(np.arange(n), d + Q)
        cols = np.concatenate([
            self.ob + np.arange(n)[:, None] * d + np.arange(d)[None, :],
            self.og + np.arange(n)[:, None] * Q + np.arange(Q)[None, :],
        ], axis=1).ravel()
        E = sp.csr_matrix((self.G.ravel(), (rows, cols)), shape=(n, self.nv))
        P = sp.diags(np.concatenate([np.full(n, 2.0), np.zeros(n * (d + Q))])).tocsr()
        lower = np.concatenate([np.full(n, -np.inf), np.zeros(n * (d + Q))])
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        A, rhs = self.afriat_rows(pairs), np.zeros(pairs.shape[0])
        if self.C is not None:
            A = sp.vstack([A, self.block_row_matrix()]).tocsr()
            rhs = np.concatenate([rhs, np.tile(self.cu, n)])
        return QpProblem(P, np.zeros(self.nv), eq_matrix=E, eq_rhs=np.ones(n),
                         ineq_matrix=A, ineq_rhs=rhs, lower=lower)

    def block_row_matrix(self):
        """Rows ``C v_i`` for every block, block-major (row ``i * mc + k``)."""
        n, d, Q, p = self.n, self.d, self.Q, self.p
        mc = self.C.shape[0]
        comp = np.concatenate([self.ob + np.arange(n)[:, None] * d + np.arange(d)[None, :],
                               self.og + np.arange(n)[:, None] * Q + np.arange(Q)[None, :]], axis=1)
        rows = np.repeat(np.arange(n * mc), p)
        cols = np.repeat(comp, mc, axis=0).ravel()
        vals = np.tile(self.C.ravel(), n)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n * mc, self.nv))

    def full_pairs(self):
        i, j = np.nonzero(~np.eye(self.n, dtype=bool))
        return np.column_stack([i, j])

    def pack(self, e, V):
        return np.concatenate([e, V[:, :self.d].ravel(), V[:, self.d:].ravel()])

    def unpack(self, z):
        n, d, Q = self.n, self.d, self.Q
        return z[:n], z[self.ob:self.og].reshape(n, d), z[self.og:].reshape(n, Q)

    def violations(self, e, V) -> np.ndarray:
        """``[i, j]``: amount by which pair (i, j) is violated (all pairs)."""
        W = V * self.sign
        hz = W @ self.Z.T
        own = np.einsum("ij,ij->i", W, self.Z)[:, None]
        Vm = e[None, :] - e[:, None] + (hz - own)
        np.fill_diagonal(Vm, -np.inf)
        return Vm

    # ---- structured solve
    def solve(self, pairs, tol=1e-8, max_iters=200) -> QpSolution:
        return _solve_structured(self, np.asarray(pairs, dtype=int).reshape(-1, 2), tol, max_iters)


def _owner_layout(I, n):
    """Row order grouped by owner plus all within-owner row pairs."""
    order = np.argsort(I, kind="stable")
    counts = np.bincount(I, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    Is = I[order]
    reps = counts[Is]
    total = int(reps.sum())
    rr = np.repeat(np.arange(Is.size), reps)
    first = np.repeat(np.cumsum(reps) - reps, reps)
    rp = starts[Is[rr]] + (np.arange(total) - first)
    return order, counts, starts, rr, rp


def _solve_structured(prob: AfriatProblem, pairs, tol, max_iters) -> QpSolution:
    n, p = prob.n, prob.p
    order, counts, starts, rr, rp = _owner_layout(pairs[:, 0], n)
    pairs = pairs[order]
    I, J = pairs[:, 0], pairs[:, 1]
    m = I.size
    nonempty = counts > 0
    seg_starts = starts[nonempty]
    Arow = (prob.Z[J] - prob.Z[I]) * prob.sign  # coefficient of v_I in each row
    Gd = prob.G
    has_up = prob.C is not None
    C = prob.C
    mc = 0 if C is None else C.shape[0]
    U = np.broadcast_to(prob.cu, (n, mc)) if has_up else None
    reg = 1e-11
    scale = 1.0  # |q| = 0, |b| = 1, |d| = 0 or |u|
    if has_up:
        scale = max(1.0, float(np.max(np.abs(prob.cu))))
    mu_floor = 1e-3 * tol * scale
    # flat indices of the four Schur terms of every within-owner row pair
    own = I[rr]
    ja, jb = J[rr], J[rp]
    sidx = np.concatenate([ja * n + jb, ja * n + own, own * n + jb, own * n + own])
    same = rr == rp

    def seg_sum(vals):
        out = np.zeros((n,) + vals.shape[1:])
        if m:
            out[nonempty] = np.add.reduceat(vals, seg_starts, axis=0)
        return out

    def A_apply(e, V):
        """Stacked inequality rows: afriat, -v <= 0, C v <= u."""
        ra = e[J] - e[I] + np.einsum("rp,rp->r", Arow, V[I])
        return ra, -V, (V @ C.T if has_up else None)

    def AT_apply(za, zl, zu):
        ge = np.bincount(J, za, n) - np.bincount(I, za, n)
        gv = seg_sum(za[:, None] * Arow) - zl
        if has_up:
            gv += zu @ C
        return ge, gv

    # starting point
    e = np.zeros(n)
    V = Gd / np.einsum("ip,ip->i", Gd, Gd)[:, None]
    y = np.zeros(n)
    ra, rl, ru = A_apply(e, V)
    sa = np.maximum(-ra, 1.0)
    sl = np.maximum(-rl, 1.0)
    su = np.maximum(U - ru, 1.0) if has_up else None
    za, zl = np.ones(m), np.ones((n, p))
    zu = np.ones((n, mc)) if has_up else None
    mtot = m + n * (p + mc)

    def flat(*blocks):
        return np.concatenate([np.ravel(b) for b in blocks if b is not None])

    status, it = MAX_ITERS, 0
    for it in range(1, max_iters + 1):
        ge, gv = AT_apply(za, zl, zu)
        rde = 2.0 * e + ge
        rdv = gv + Gd * y[:, None]
        rpe = np.einsum("ip,ip->i", Gd, V) - 1.0
        ra, rl, ru = A_apply(e, V)
        rpa, rpl = ra + sa, rl + sl
        rpu = ru + su - U if has_up else None
        s_all = flat(sa, sl, su)
        z_all = flat(za, zl, zu)
        mu = float(s_all @ z_all) / mtot
        tolS = tol * scale
        if (max(np.max(np.abs(rde)), np.max(np.abs(rdv), initial=0.0)) <= tolS
                and np.max(np.abs(rpe)) <= tolS
                and np.max(np.abs(flat(rpa, rpl, rpu)), initial=0.0) <= tolS
                and np.max(s_all * z_all, initial=0.0) <= tolS):
            status = OPTIMAL
            break

        wa, wl = za / sa, zl / sl
        WA = wa[:, None] * Arow
        Hv = seg_sum(WA[:, :, None] * Arow[:, None, :])
        Hv[:, np.arange(p), np.arange(p)] += wl + reg
        if has_up:
            Hv += np.einsum("ik,ka,kb->iab", zu / su, C, C)
        K = np.zeros((n, p + 1, p + 1))
        K[:, :p, :p] = Hv
        K[:, :p, p] = Gd
        K[:, p, :p] = Gd
        K[:, p, p] = -reg
        try:
            Minv = np.linalg.inv(K)
        except np.linalg.LinAlgError:
            break
        TM = np.einsum("rp,rpq->rq", WA, Minv[I, :p, :p])
        # residual-block Schur complement: 2I + sum over owners of U'(W - W A M A' W)U
        mid = np.where(same, wa[rr], 0.0) - np.einsum("kq,kq->k", TM[rr], WA[rp])
        S = np.bincount(sidx, np.concatenate([mid, -mid, -mid, mid]), n * n).reshape(n, n).astype(float)
        S[np.diag_indices(n)] += 2.0 + reg
        S = 0.5 * (S + S.T)
        try:
            fac = ("cho", sla.cho_factor(S, check_finite=False))
        except np.linalg.LinAlgError:
            fac = ("lu", sla.lu_factor(S, check_finite=False))

        def couple_e(x):
            """sum_i C_i x_i for slope-block vectors x (n, p)."""
            val = np.einsum("rp,rp->r", WA, x[I])
            return np.bincount(J, val, n) - np.bincount(I, val, n)

        def couple_v(de):
            """C_i' de for every block."""
            return seg_sum(WA * (de[J] - de[I])[:, None])

        def reduced_solve(r1e, r1v, r2):
            rhs_blk = np.concatenate([r1v, r2[:, None]], axis=1)
            sol_blk = np.einsum("iab,ib->ia", Minv, rhs_blk)
            rhs_e = r1e - couple_e(sol_blk[:, :p])
            if fac[0] == "cho":
                de = sla.cho_solve(fac[1], rhs_e, check_finite=False)
            else:
                de = sla.lu_solve(fac[1], rhs_e, check_finite=False)
            rhs_blk[:, :p] -= couple_v(de)
            sol_blk = np.einsum("iab,ib->ia", Minv, rhs_blk)
            return de, sol_blk[:, :p], sol_blk[:, p]

        def operator(de, dV, dy):
            dd = de[J] - de[I]
            te = 2.0 * de + reg * de + np.bincount(J, wa * dd, n) - np.bincount(I, wa * dd, n) + couple_e(dV)
            tv = couple_v(de) + np.einsum("ipq,iq->ip", Hv, dV) + Gd * dy[:, None]
            return te, tv, np.einsum("ip,ip->i", Gd, dV) - reg * dy

        def newton(r1e, r1v, r2):
            de, dV, dy = reduced_solve(r1e, r1v, r2)
            ref = 1e-14 * max(1.0, np.max(np.abs(r1e)), np.max(np.abs(r1v), initial=0.0))
            for _ in range(4):
                te, tv, tb = operator(de, dV, dy)
                re, rv, rb = r1e - te, r1v - tv, r2 - tb
                res = max(np.max(np.abs(re)), np.max(np.abs(rv), initial=0.0), np.max(np.abs(rb)))
                if res <= ref:
                    break
                ce, cV, cy = reduced_solve(re, rv, rb)
                de, dV, dy = de + ce, dV + cV, dy + cy
            return de, dV, dy

        def direction(rca, rcl, rcu):
            # r1 = -(rd + A'(w*rpi - rc/s)), ds and dz recovered afterwards
            ta = wa * rpa - rca / sa
            tl = wl * rpl - rcl / sl
            tu = (zu / su) * rpu - rcu / su if has_up else None
            he, hv = AT_apply(ta, tl, tu)
            de, dV, dy = newton(-(rde + he), -(rdv + hv), -rpe)
            aa, al, au = A_apply(de, dV)
            dza = wa * (aa + rpa) - rca / sa
            dzl = wl * (al + rpl) - rcl / sl
            dzu = (zu / su) * (au + rpu) - rcu / su if has_up else None
            dsa = -(rca + sa * dza) / za
            dsl = -(rcl + sl * dzl) / zl
            dsu = -(rcu + su * dzu) / zu if has_up else None
            return de, dV, dy, (dza, dzl, dzu), (dsa, dsl, dsu)

        rc0 = (sa * za, sl * zl, su * zu if has_up else None)
        de, dV, dy, dz, ds = direction(*rc0)
        ds_all, dz_all = flat(*ds), flat(*dz)
        a_p = _step(s_all, ds_all)
        a_d = _step(z_all, dz_all)
        mu_aff = float((s_all + a_p * ds_all) @ (z_all + a_d * dz_all)) / mtot
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # complementarity below a fraction of tol buys nothing but ill-conditioning
        target = max(sigma * mu, mu_floor)
        rc = tuple(None if r is None else r + dsk * dzk - target
                   for r, dsk, dzk in zip(rc0, ds, dz))
        de, dV, dy, dz, ds = direction(*rc)
        a_p = min(1.0, 0.995 * _step(s_all, flat(*ds)))
        a_d = min(1.0, 0.995 * _step(z_all, flat(*dz)))
        e = e + a_p * de
        V = V + a_p * dV
        sa, sl = sa + a_p * ds[0], sl + a_p * ds[1]
        y = y + a_d * dy
        za, zl = za + a_d * dz[0], zl + a_d * dz[1]
        if has_up:
            su, zu = su + a_p * ds[2], zu + a_d * dz[2]
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(V))):
            break

    z = prob.pack(e, V)
    dl = np.concatenate([np.zeros(n), zl[:, :prob.d].ravel(), zl[:, prob.d:].ravel()])
    # multipliers back in the caller's pair order, then block rows block-major
    w_ineq = np.empty(m)
    w_ineq[order] = za
    if has_up:
        w_ineq = np.concatenate([w_ineq, zu.ravel()])
    sol = QpSolution(primal=z, dual_eq=y, dual_ineq=w_ineq, status=status, iterations=it,
                     dual_lower=dl, dual_upper=np.zeros(prob.nv))
    sol.objective = float(e @ e)
    sol.e, sol.V = e, V
    return sol


def certify(prob: AfriatProblem, pairs, sol: QpSolution, tol: float):
    """Recompute KKT residuals of ``sol`` on the assembled sparse problem."""
    problem = prob.qp(pairs)
    if sol.dual_lower.size != problem.n:
        raise QpError("solution layout does not match the problem")
    rep = verify_kkt(problem, sol, tol)
    sol.kkt_report = rep
    sol.max_violation = max(rep.primal_ineq, rep.primal_eq)
    if sol.status == OPTIMAL and not rep.ok:
        sol.status = MAX_ITERS
    return rep
