"""Data generating processes and seeded Monte Carlo grids.

Seeding: replication ``r`` of a grid cell draws from
``SeedSequence(entropy=master, spawn_key=(cell_key, r))`` with PCG64, where
``cell_key`` is the CRC-32 of the cell's DGP parameters as canonical JSON.
A cell's draws therefore depend only on (master seed, DGP parameters, r):
reordering cells, adding replications or changing the estimator columns
never changes them, and every estimator column of a cell sees the same data.
"""
from __future__ import annotations

import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import DataError, Dataset, Direction, NoiseModel, direction_from_angle, output_direction_from_angle

HALF_PI = math.pi / 2
ANGLES = (0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2)
ANGLE_LABELS = ("0", "pi/8", "pi/4", "3pi/8", "pi/2")
CELL_FAILURE_RATE = 0.05


class ExperimentError(RuntimeError):
    """A grid cell exceeded the replication failure budget."""


# ------------------------------------------------------------ angles

@dataclass(frozen=True)
class AngleDist:
    """Distribution of the position angle on the true curve, truncated to [0, pi/2].

    ``kind`` is ``uniform``, ``normal`` (``a`` = mean, ``b`` = sd) or
    ``gamma`` (``a`` = shape, ``b`` = scale).  Truncation is by rejection.
    """

    kind: str = "uniform"
    a: float = 0.0
    b: float = HALF_PI

    def __post_init__(self):
        if self.kind not in ("uniform", "normal", "gamma"):
            raise DataError(f"unknown angle distribution {self.kind!r}")
        if self.kind == "uniform" and not (0.0 <= self.a < self.b <= HALF_PI + 1e-12):
            raise DataError("uniform angle bounds must satisfy 0 <= a < b <= pi/2")
        if self.kind in ("normal", "gamma") and self.b <= 0:
            raise DataError("angle distribution scale must be positive")
        if self.kind == "gamma" and self.a <= 0:
            raise DataError("gamma shape must be positive")

    def _raw(self, rng, size):
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, size)
        return rng.gamma(self.a, self.b, size)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return self._raw(rng, n)
        out = np.empty(0)
        batch = max(16, 2 * n)
        for _ in range(10_000):
            draw = self._raw(rng, batch)
            out = np.concatenate([out, draw[(draw >= 0.0) & (draw <= HALF_PI)]])
            if out.size >= n:
                return out[:n]
        raise DataError(f"angle distribution {self} has almost no mass in [0, pi/2]")


# ------------------------------------------------------------ DGP spec

DGP_KINDS = ("linear_2d", "isoquant_2d", "isoquant_3d")


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "isoquant_2d"
    n: int = 100
    lam: float = 0.1
    noise: NoiseModel = field(default_factory=NoiseModel)
    angle_dist: AngleDist = field(default_factory=AngleDist)
    n_test: Optional[int] = None

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise DataError(f"unknown DGP kind {self.kind!r}")
        if self.n < 2:
            raise DataError("DGP needs n >= 2")
        if self.lam < 0:
            raise DataError("noise scale must be nonnegative")

    @property
    def test_size(self) -> int:
        return self.n if self.n_test is None else self.n_test

    def canonical(self) -> dict:
        d = asdict(self)
        d["noise"] = {k: v for k, v in asdict(self.noise).items() if k != "lam"}
        return d

    def cell_key(self) -> int:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=float)
        return zlib.crc32(text.encode("utf-8"))


def replication_rng(master: int, cell_key: int, r: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(int(cell_key), int(r)))
    return np.random.Generator(np.random.PCG64(ss))


def _unit_rows(rng, n, dim):
    while True:
        v = rng.uniform(-1.0, 1.0, (n, dim))
        norms = np.linalg.norm(v, axis=1)
        if np.all(norms > 0):
            return v / norms[:, None]


# ------------------------------------------------------------ linear DGP

def noise_sd_base(y_true, c_true) -> float:
    """Average of the output and cost sample standard deviations (n - 1 divisor)."""
    return 0.5 * (float(np.std(y_true, ddof=1)) + float(np.std(c_true, ddof=1)))


def _linear_noise_vector(noise: NoiseModel) -> np.ndarray:
    """Fixed noise direction in (y, c) coordinates.

    An angle ``theta`` moves outputs up and cost down, ``(cos, -sin)``, the
    same way a DDF direction of that angle moves a point.
    """
    if noise.vector is not None:
        return np.asarray(noise.vector, dtype=float)
    return np.array([math.cos(noise.angle), -math.sin(noise.angle)])


def _linear_draw(spec: DgpSpec, rng, n, with_noise=True):
    y_t = rng.uniform(0.0, 1.0, n)
    c_t = y_t.copy()
    if not with_noise or spec.lam == 0:
        return y_t, c_t, y_t.copy(), c_t.copy(), 0.0
    eps0 = noise_sd_base(y_t, c_t)
    length = rng.normal(0.0, spec.lam * eps0, n)
    if spec.noise.mode == "random":
        v = _unit_rows(rng, n, 2)
    else:
        v = np.tile(_linear_noise_vector(spec.noise), (n, 1))
    e = length[:, None] * v
    return y_t, c_t, y_t + e[:, 0], c_t + e[:, 1], eps0


def _cost_dataset(y, c):
    return Dataset(np.zeros((len(y), 0)), np.asarray(y).reshape(-1, 1), cost=np.asarray(c))


def gen_linear(spec: DgpSpec, rng: np.random.Generator, test: str = "truth", return_truth: bool = False):
    """Single-output linear cost data ``c = y`` plus noise.

    ``test="truth"`` returns noiseless points on the true function as the
    test set; ``test="noisy"`` draws an independent noisy sample.  With
    ``return_truth`` the noiseless training points are returned third.
    """
    if spec.kind != "linear_2d":
        raise DataError("gen_linear needs kind 'linear_2d'")
    if test not in ("truth", "noisy"):
        raise DataError(f"unknown test-set kind {test!r}")
    y0, c0, y, c, _ = _linear_draw(spec, rng, spec.n)
    yt, ct, yn, cn, _ = _linear_draw(spec, rng, spec.test_size, with_noise=(test == "noisy"))
    tr = _cost_dataset(y, c)
    te = _cost_dataset(yt, ct) if test == "truth" else _cost_dataset(yn, cn)
    return (tr, te, _cost_dataset(y0, c0)) if return_truth else (tr, te)


# ------------------------------------------------------------ isoquants

def _isoquant_noise(spec: DgpSpec, rng, n, dim):
    length = rng.normal(0.0, spec.lam, n) if spec.lam > 0 else np.zeros(n)
    if spec.noise.mode == "fixed":
        v = np.tile(spec.noise.fixed_vector(dim), (n, 1))
    elif dim == 2:
        th = rng.uniform(-HALF_PI, HALF_PI, n)
        v = np.column_stack([np.cos(th), np.sin(th)])
    else:
        v = _unit_rows(rng, n, dim)
    return length[:, None] * v


def gen_isoquant_2d(spec: DgpSpec, rng: np.random.Generator, return_truth: bool = False):
    """Outputs on the unit quarter circle plus noise; test points on the circle.

    Test angles come from the same distribution as the training angles.  With
    ``return_truth`` the noiseless training points are returned third.
    """
    if spec.kind != "isoquant_2d":
        raise DataError("gen_isoquant_2d needs kind 'isoquant_2d'")
    th = spec.angle_dist.sample(rng, spec.n)
    truth = np.column_stack([np.cos(th), np.sin(th)])
    train = truth + _isoquant_noise(spec, rng, spec.n, 2)
    th_t = spec.angle_dist.sample(rng, spec.test_size)
    test = np.column_stack([np.cos(th_t), np.sin(th_t)])
    return (train, test, truth) if return_truth else (train, test)


def _sphere_octant(rng, n):
    while True:
        v = rng.uniform(0.0, 1.0, (n, 3))
        norms = np.linalg.norm(v, axis=1)
        if np.all(norms > 0):
            return v / norms[:, None]


def gen_isoquant_3d(spec: DgpSpec, rng: np.random.Generator, return_truth: bool = False):
    """Outputs on the positive octant of the unit sphere plus noise."""
    if spec.kind != "isoquant_3d":
        raise DataError("gen_isoquant_3d needs kind 'isoquant_3d'")
    truth = _sphere_octant(rng, spec.n)
    train = truth + _isoquant_noise(spec, rng, spec.n, 3)
    test = _sphere_octant(rng, spec.test_size)
    return (train, test, truth) if return_truth else (train, test)


def direction_grid_3d(levels: Sequence[float] = (0.0, 0.5, 1.0)) -> np.ndarray:
    """Unit directions from all nonzero level triples, deduplicated and sorted."""
    pts = np.array(np.meshgrid(levels, levels, levels, indexing="ij")).reshape(3, -1).T
    pts = pts[np.any(pts > 0, axis=1)]
    unit = pts / np.linalg.norm(pts, axis=1)[:, None]
    keys = {tuple(np.round(u, 12)): u for u in unit}
    out = np.array([keys[k] for k in sorted(keys)])
    return out


def direction_label(v) -> str:
    return "(" + ",".join(f"{x:.2f}".rstrip("0").rstrip(".") if x else "0" for x in v) + ")"


# ------------------------------------------------------------ cell tasks

def _task_isoquant(dgp: DgpSpec, rng, directions):
    from .estimators import fit_cnls_d_isoquant
    from .evaluation import isoquant_radial_mse

    gen = gen_isoquant_2d if dgp.kind == "isoquant_2d" else gen_isoquant_3d
    train, test = gen(dgp, rng)
    out = []
    for g in directions:
        model = fit_cnls_d_isoquant(train, Direction.outputs(g))
        out.append(isoquant_radial_mse(model, test).value)
    return {"mse": np.array([out])}


def _task_parametric(dgp: DgpSpec, rng, ddf_angles, mse_angles):
    from .estimators import fit_parametric_ddf
    from .evaluation import directional_mse

    train, truth = gen_linear(dgp, rng, test="truth")
    _, _, yn, cn, _ = _linear_draw(dgp, rng, dgp.test_size)
    noisy = _cost_dataset(yn, cn)
    models = [fit_parametric_ddf(train, direction_from_angle(a)) for a in ddf_angles]
    blocks = {"truth": np.empty((len(mse_angles), len(ddf_angles))),
              "oos": np.empty((len(mse_angles), len(ddf_angles)))}
    for i, am in enumerate(mse_angles):
        g = direction_from_angle(am)
        for j, model in enumerate(models):
            blocks["truth"][i, j] = directional_mse(model, truth, g).value
            blocks["oos"][i, j] = directional_mse(model, noisy, g).value
    return blocks


def _task_a4(dgp: DgpSpec, rng):
    from .multidir import a4_replication

    return a4_replication(dgp, rng)


TASKS: Dict[str, Callable] = {
    "isoquant": _task_isoquant,
    "parametric": _task_parametric,
    "a4": _task_a4,
}


# ------------------------------------------------------------ grids

@dataclass(frozen=True)
class Cell:
    """One DGP setting; its task returns named blocks of per-replication values."""

    dgp: DgpSpec
    task: str
    args: dict = field(default_factory=dict)
    label: str = ""


@dataclass(frozen=True)
class TableLayout:
    """A table assembled from cell blocks stacked row-wise.

    ``rows`` lists ``(cell_index, block, block_row, row_label)``.  A block
    name ending in ``_t`` reads rows of the transposed block.
    """

    name: str
    title: str
    row_header: Sequence[str]
    columns: Sequence[str]
    rows: Sequence[tuple]
    scale: float = 1.0


@dataclass(frozen=True)
class ExperimentGrid:
    name: str
    cells: Sequence[Cell]
    tables: Sequence[TableLayout]
    replications: int = 100
    master_seed: int = 0
    meta: dict = field(default_factory=dict)
    summarize: Optional[Callable] = None  # cell means -> dict, module-level for pickling

    def __post_init__(self):
        if self.replications < 1:
            raise DataError("replications must be >= 1")
        if not self.cells:
            raise DataError("experiment grid has no cells")


@dataclass
class ExperimentReport:
    name: str
    tables: Dict[str, dict]
    cell_means: List[Dict[str, np.ndarray]]
    failures: List[int]
    replications: int
    master_seed: int
    failed_cells: List[int]
    meta: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def table_values(self, name: str) -> np.ndarray:
        return np.asarray(self.tables[name]["values"], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "replications": self.replications,
            "master_seed": self.master_seed,
            "failures": self.failures,
            "failed_cells": self.failed_cells,
            "tables": self.tables,
            "summary": self.summary,
            "meta": self.meta,
        }


def run_replication(grid: ExperimentGrid, cell_index: int, r: int):
    cell = grid.cells[cell_index]
    rng = replication_rng(grid.master_seed, cell.dgp.cell_key(), r)
    try:
        return TASKS[cell.task](cell.dgp, rng, **cell.args)
    except Exception as exc:  # recorded per replication, judged per cell
        return exc


def _run_task(args):
    grid, ci, r = args
    return ci, r, run_replication(grid, ci, r)


def run_grid(grid: ExperimentGrid, threads: int = 1, progress: Optional[Callable] = None) -> ExperimentReport:
    """Run every (cell, replication) pair and average per cell.

    Results are combined in canonical (cell, replication) order, so the
    report does not depend on ``threads``.
    """
    jobs = [(grid, ci, r) for ci in range(len(grid.cells)) for r in range(grid.replications)]
    results: Dict[tuple, object] = {}
    if threads <= 1:
        for job in jobs:
            ci, r, res = _run_task(job)
            results[ci, r] = res
            if progress:
                progress(len(results), len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for ci, r, res in ex.map(_run_task, jobs, chunksize=max(1, len(jobs) // (8 * threads))):
                results[ci, r] = res
                if progress:
                    progress(len(results), len(jobs))
    cell_means, failures, failed, errors = [], [], [], {}
    for ci in range(len(grid.cells)):
        ok = [results[ci, r] for r in range(grid.replications) if not isinstance(results[ci, r], Exception)]
        bad = [results[ci, r] for r in range(grid.replications) if isinstance(results[ci, r], Exception)]
        failures.append(len(bad))
        if bad:
            errors[ci] = repr(bad[0])
        if len(bad) > CELL_FAILURE_RATE * grid.replications or not ok:
            failed.append(ci)
        means = {}
        if ok:
            for key in ok[0]:
                acc = np.zeros_like(np.asarray(ok[0][key], dtype=float))
                for res in ok:  # fixed summation order
                    acc = acc + np.asarray(res[key], dtype=float)
                means[key] = acc / len(ok)
        cell_means.append(means)
    tables = {t.name: _assemble(t, cell_means) for t in grid.tables}
    meta = dict(grid.meta)
    if errors:
        meta["first_errors"] = {str(k): v for k, v in errors.items()}
    summary = grid.summarize(cell_means) if grid.summarize else {}
    return ExperimentReport(grid.name, tables, cell_means, failures, grid.replications,
                            grid.master_seed, failed, meta, summary)


def _assemble(layout: TableLayout, cell_means) -> dict:
    vals, labels = [], []
    for ci, block, row, label in layout.rows:
        key = block[:-2] if block.endswith("_t") else block
        m = cell_means[ci].get(key)
        if m is None:
            vals.append(np.full(len(layout.columns), np.nan))
        else:
            m = np.atleast_2d(m)
            vals.append(np.atleast_1d((m.T if block.endswith("_t") else m)[row]))
        labels.append(label)
    return {
        "title": layout.title,
        "row_header": list(layout.row_header),
        "columns": list(layout.columns),
        "row_labels": labels,
        "values": np.vstack(vals).tolist(),
        "scale": layout.scale,
    }


# ------------------------------------------------------------ profiles

def _angle_dirs():
    return [output_direction_from_angle(a).g_y.tolist() for a in ANGLES]


def _iso_cell(lam=0.1, noise=None, dist=None, n=100, label=""):
    dgp = DgpSpec("isoquant_2d", n=n, lam=lam, noise=noise or NoiseModel("random", lam),
                  angle_dist=dist or AngleDist())
    return Cell(dgp, "isoquant", {"directions": _angle_dirs()}, label)


def _fixed_rows(lam):
    return [_iso_cell(lam, NoiseModel("fixed", lam, angle=a), label=lab) for a, lab in zip(ANGLES, ANGLE_LABELS)]


def _row_table(name, title, header, cells, offset=0, scale=1e4):
    rows = [(offset + i, "mse", 0, c.label) for i, c in enumerate(cells)]
    return TableLayout(name, title, header, ANGLE_LABELS, rows, scale)


def build_profile(name: str, replications: int = 100, seed: int = 0, n: int = 100) -> ExperimentGrid:
    """Experiment grids with the row/column layout of the published tables."""
    R = replications
    if name == "exp1":
        cells = [_iso_cell(0.1, n=n, label="Average MSE across simulations")]
        tables = [_row_table("exp1", "Radial MSE, random noise, lambda=0.1", [""], cells)]
    elif name == "exp2":
        cells = _fixed_rows(0.1)
        tables = [_row_table("exp2", "Radial MSE, fixed noise, lambda=0.1", ["Noise Direction Angle"], cells)]
    elif name == "exp3":
        low, high = _fixed_rows(0.05), _fixed_rows(0.2)
        cells = low + high
        tables = [
            _row_table("exp3_lambda0.05", "Radial MSE, fixed noise, lambda=0.05", ["Noise Direction Angle"], low),
            _row_table("exp3_lambda0.2", "Radial MSE, fixed noise, lambda=0.2", ["Noise Direction Angle"], high, 5),
        ]
    elif name == "exp4":
        cells = [_iso_cell(0.1, dist=AngleDist("normal", m, math.pi / 16), label=lab)
                 for m, lab in zip(ANGLES[1:4], ANGLE_LABELS[1:4])]
        tables = [_row_table("exp4", "Radial MSE by mean of the angle distribution",
                             ["Mean of the Normal Distribution"], cells)]
    elif name == "exp5":
        dists = [("Normal", AngleDist("normal", math.pi / 4, math.pi / 16)),
                 ("Gamma_1", AngleDist("gamma", 3.0, math.pi / 2)),
                 ("Gamma_2", AngleDist("gamma", 0.5, math.pi / 24))]
        cells = [_iso_cell(0.1, dist=d, label=lab) for lab, d in dists]
        tables = [_row_table("exp5", "Radial MSE by angle distribution", ["Distribution"], cells)]
    elif name == "exp6":
        grid3 = direction_grid_3d()
        dgp = DgpSpec("isoquant_3d", n=n, lam=0.1, noise=NoiseModel("random", 0.1))
        cells = [Cell(dgp, "isoquant", {"directions": grid3.tolist()}, "3d")]
        rows = [(0, "mse_t", k, direction_label(v)) for k, v in enumerate(grid3)]
        tables = [TableLayout("exp6", "Radial MSE, three outputs", ["CNLS-d Direction"],
                              ["Average of radial MSE"], rows, 1e4)]
        return ExperimentGrid(name, cells, tables, R, seed,
                              {"directions": grid3.tolist(), "profile": name, "n": n, "lambda": 0.1})
    elif name in ("b1-parametric-random", "b1-parametric-fixed"):
        lam = 0.6
        args = {"ddf_angles": list(ANGLES), "mse_angles": list(ANGLES)}
        if name.endswith("random"):
            cells = [Cell(DgpSpec("linear_2d", n=n, lam=lam, noise=NoiseModel("random", lam)), "parametric", args)]
            rows_t = [(0, "truth", i, lab) for i, lab in enumerate(ANGLE_LABELS)]
            rows_o = [(0, "oos", i, lab) for i, lab in enumerate(ANGLE_LABELS)]
            header = ["MSE Dir Angle"]
        else:
            cells = [Cell(DgpSpec("linear_2d", n=n, lam=lam, noise=NoiseModel("fixed", lam, angle=a)),
                          "parametric", args, lab) for a, lab in zip(ANGLES, ANGLE_LABELS)]
            rows_t = [(c, "truth", i, f"{ANGLE_LABELS[c]}|{lab}") for c in range(5) for i, lab in enumerate(ANGLE_LABELS)]
            rows_o = [(c, "oos", i, f"{ANGLE_LABELS[c]}|{lab}") for c in range(5) for i, lab in enumerate(ANGLE_LABELS)]
            header = ["Noise Dir Angle", "MSE Dir Angle"]
        tables = [TableLayout(f"{name}_truth", "Directional MSE against the true function", header,
                              ANGLE_LABELS, rows_t, 1e3),
                  TableLayout(f"{name}_oos", "Directional MSE against a noisy test set", header,
                              ANGLE_LABELS, rows_o, 1e3)]
    elif name == "a4":
        from .multidir import a4_layout, summarize_a4

        dgp = DgpSpec("isoquant_2d", n=n, lam=0.1, noise=NoiseModel("random", 0.1))
        return ExperimentGrid(name, [Cell(dgp, "a4", {}, "a4")], [a4_layout()], R, seed,
                              {"profile": name, "n": n, "lambda": 0.1}, summarize_a4)
    else:
        raise DataError(f"unknown experiment profile {name!r}; known: {', '.join(PROFILES)}")
    meta = {"profile": name, "n": n}
    return ExperimentGrid(name, cells, tables, R, seed, meta)


PROFILES = ("exp1", "exp2", "exp3", "exp4", "exp5", "exp6",
            "b1-parametric-random", "b1-parametric-fixed", "a4")

