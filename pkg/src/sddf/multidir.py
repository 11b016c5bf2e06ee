"""Group-specific directions: the concavity condition and shape-violation counts.

With one direction per group, CNLS-d no longer guarantees a concave frontier.
``check_condition`` evaluates the sufficient pairwise condition

    (e_i u_k(i))' (u_k(j) - u_k(i)) >= 0,   u_k = g_k / ||g_k||,

where ``e_i`` is the signed distance of observation ``i`` beyond its fitted
point along its direction (``y_i = yhat_i + e_i u``).  A ``FrontierModel``
stores the opposite sign, see ``distance_beyond``.

``detect_violations`` counts the empirical symptoms on a fitted 2D isoquant:
sorted by the first output, adjacent pairs must slope down and adjacent
triplets must not sag below their chord.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Direction, output_direction_from_angle

VIOLATION_TOL = 1e-7


@dataclass(frozen=True)
class GroupAssignment:
    """``groups[i]`` indexes a row of ``directions``; rows are normalized."""

    groups: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.groups, dtype=int)
        D = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if g.ndim != 1:
            raise DataError("groups must be a 1-D label array")
        if g.size and (g.min() < 0 or g.max() >= D.shape[0]):
            raise DataError("group labels must index the direction rows")
        norms = np.linalg.norm(D, axis=1)
        if np.any(norms <= 0) or not np.all(np.isfinite(D)):
            raise DataError("group directions must be finite and nonzero")
        object.__setattr__(self, "groups", g)
        object.__setattr__(self, "directions", D / norms[:, None])

    @property
    def n(self) -> int:
        return self.groups.size

    def per_observation(self) -> np.ndarray:
        return self.directions[self.groups]

    def as_directions(self):
        return [Direction.outputs(d) for d in self.directions]


def distance_beyond(model) -> np.ndarray:
    """Signed distance of each observation beyond its fitted point (``-residual``)."""
    return -np.asarray(model.residuals, dtype=float)


def _pair_products(eps, assignment: GroupAssignment) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (assignment.n,):
        raise DataError("one residual per observation is required")
    U = assignment.per_observation()
    # [i, j] = e_i u_i'(u_j - u_i)
    M = eps[:, None] * (U @ U.T - np.einsum("ij,ij->i", U, U)[:, None])
    # same direction: the bracket is exactly zero, not a rounding residue
    M[assignment.groups[:, None] == assignment.groups[None, :]] = 0.0
    return M


def check_condition(eps, assignment: GroupAssignment):
    """Per ordered pair flags of the concavity condition, and whether all hold."""
    ok = _pair_products(eps, assignment) >= 0.0
    return ok, bool(ok.all())


def check_condition_convex(eps, assignment: GroupAssignment):
    """Mirror of ``check_condition`` for convex frontiers (products <= 0)."""
    ok = _pair_products(eps, assignment) <= 0.0
    return ok, bool(ok.all())


@dataclass
class ViolationReport:
    pair_count: int
    pair_count_within: int
    pair_count_cross: int
    monotonicity_within: int
    monotonicity_cross: int
    triplet_count: int
    triplet_count_same: int
    triplet_count_mixed: int
    concavity_same: int
    concavity_mixed: int

    @property
    def monotonicity_violations(self) -> int:
        return self.monotonicity_within + self.monotonicity_cross

    @property
    def concavity_violations(self) -> int:
        return self.concavity_same + self.concavity_mixed

    def rates(self) -> dict:
        return pooled_rates(self.counts())

    def counts(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in COUNT_FIELDS], dtype=float)

    @classmethod
    def from_counts(cls, v) -> "ViolationReport":
        v = np.rint(np.asarray(v, dtype=float)).astype(int)
        return cls(**{f: int(x) for f, x in zip(COUNT_FIELDS, v)})

    def __add__(self, other: "ViolationReport") -> "ViolationReport":
        return ViolationReport.from_counts(self.counts() + other.counts())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["monotonicity_violations"] = self.monotonicity_violations
        d["concavity_violations"] = self.concavity_violations
        d["rates"] = self.rates()
        return d


COUNT_FIELDS = tuple(ViolationReport.__dataclass_fields__)


def detect_violations(points, groups=None, tol: float = VIOLATION_TOL) -> ViolationReport:
    """Count downward-slope and concavity failures among sorted fitted points.

    First outputs within ``tol`` of their sorted neighbour form one tie run
    and share the run's smallest value; points are then sorted by first
    output ascending and, inside a run, second output descending.  A tie run
    is a vertical facet of the isoquant, so it passes the slope test and is
    judged by the concavity test alone.  A pair fails when the second output
    rises by more than ``tol``.  A triplet fails when the determinant
    ``(x2 - x1)(y3 - y1) - (y2 - y1)(x3 - x1)`` exceeds ``tol``, i.e. the middle
    point sits below the chord.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 2:
        raise DataError("violation detection needs an (n, 2) array of fitted outputs")
    n = P.shape[0]
    if n < 3:
        raise DataError("violation detection needs at least 3 points")
    g = np.zeros(n, dtype=int) if groups is None else np.asarray(groups, dtype=int)
    if g.shape != (n,):
        raise DataError("one group label per point is required")
    first = np.sort(P[:, 0])
    run = np.concatenate([[0], np.cumsum(np.diff(first) > tol)])
    snapped = np.empty(n)
    snapped[np.argsort(P[:, 0], kind="stable")] = first[np.searchsorted(run, run, side="left")]
    order = np.lexsort((-P[:, 1], snapped))
    x, y, g = snapped[order], P[order, 1], g[order]

    dy = np.diff(y)
    mono_bad = dy > tol
    cross = g[1:] != g[:-1]

    det = (x[1:-1] - x[:-2]) * (y[2:] - y[:-2]) - (y[1:-1] - y[:-2]) * (x[2:] - x[:-2])
    conc_bad = det > tol
    mixed = ~((g[:-2] == g[1:-1]) & (g[1:-1] == g[2:]))

    return ViolationReport(
        pair_count=n - 1,
        pair_count_within=int((~cross).sum()),
        pair_count_cross=int(cross.sum()),
        monotonicity_within=int((mono_bad & ~cross).sum()),
        monotonicity_cross=int((mono_bad & cross).sum()),
        triplet_count=n - 2,
        triplet_count_same=int((~mixed).sum()),
        triplet_count_mixed=int(mixed.sum()),
        concavity_same=int((conc_bad & ~mixed).sum()),
        concavity_mixed=int((conc_bad & mixed).sum()),
    )


# ------------------------------------------------------------ two-group study

STUDY_ANGLES = (math.pi / 8, 3 * math.pi / 8)
STUDY_CONFIGS = ("single pi/8", "single 3pi/8", "two directions")


def split_groups(true_outputs) -> np.ndarray:
    """Group 0 where the true angle is at most pi/4, group 1 otherwise."""
    T = np.asarray(true_outputs, dtype=float)
    return (np.arctan2(T[:, 1], T[:, 0]) > math.pi / 4).astype(int)


def a4_replication(dgp, rng) -> dict:
    """One draw of the two-group study: violation counts for each configuration."""
    from .estimators import fit_cnls_d_isoquant, fit_cnls_d_multidir
    from .simulation import gen_isoquant_2d

    train, _, truth = gen_isoquant_2d(dgp, rng, return_truth=True)
    groups = split_groups(truth)
    dirs = [output_direction_from_angle(a) for a in STUDY_ANGLES]
    rows = []
    for d in dirs:
        model = fit_cnls_d_isoquant(train, d)
        rows.append(detect_violations(model.fitted_points()[1], groups).counts())
    if groups.min() == groups.max():  # one group only: both directions coincide with a single fit
        model = fit_cnls_d_isoquant(train, dirs[groups[0]])
    else:
        model = fit_cnls_d_multidir(train, groups, dirs)
    rows.append(detect_violations(model.fitted_points()[1], groups).counts())
    return {"counts": np.vstack(rows)}


def a4_layout():
    from .simulation import TableLayout

    rows = [(0, "counts", k, lab) for k, lab in enumerate(STUDY_CONFIGS)]
    return TableLayout("a4_counts", "Mean violation counts per replication", ["Directions"],
                       COUNT_FIELDS, rows, 1.0)


def summarize_a4(cell_means) -> dict:
    """Pooled violation rates; mean counts are proportional to pooled totals."""
    counts = cell_means[0].get("counts")
    if counts is None:
        return {}
    return {lab: pooled_rates(counts[k]) for k, lab in enumerate(STUDY_CONFIGS)}


def pooled_rates(counts) -> dict:
    """Violation rates from (summed or averaged) counts in ``COUNT_FIELDS`` order."""
    c = dict(zip(COUNT_FIELDS, np.asarray(counts, dtype=float)))

    def r(a, b):
        return float(a / b) if b else 0.0

    return {
        "monotonicity": r(c["monotonicity_within"] + c["monotonicity_cross"], c["pair_count"]),
        "monotonicity_within": r(c["monotonicity_within"], c["pair_count_within"]),
        "monotonicity_cross": r(c["monotonicity_cross"], c["pair_count_cross"]),
        "concavity": r(c["concavity_same"] + c["concavity_mixed"], c["triplet_count"]),
        "concavity_same": r(c["concavity_same"], c["triplet_count_same"]),
        "concavity_mixed": r(c["concavity_mixed"], c["triplet_count_mixed"]),
    }


def run_a4_study(seed: int = 0, R: int = 100, n: int = 100, threads: int = 1) -> dict:
    """Run the two-group study and return pooled rates per configuration."""
    from .simulation import build_profile, run_grid

    report = run_grid(build_profile("a4", replications=R, seed=seed, n=n), threads=threads)
    if report.failed_cells:
        from .simulation import ExperimentError

        raise ExperimentError(f"two-group study failed: {report.meta.get('first_errors')}")
    return report.summary
