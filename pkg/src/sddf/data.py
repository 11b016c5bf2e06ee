"""Datasets, estimation directions and unit-cube normalization."""
from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Invalid dataset, direction or CSV schema."""


def _matrix(a, n=None) -> np.ndarray:
    if a is None:
        return np.zeros((0 if n is None else n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return a


@dataclass(frozen=True)
class Dataset:
    """Observed netputs.

    Production mode uses ``inputs`` (n x d) and ``outputs`` (n x Q).  Cost
    mode has no inputs and a cost vector; estimators treat the cost as the
    single input.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    cost: Optional[np.ndarray] = None
    labels: tuple = ()

    def __post_init__(self):
        Y = _matrix(self.outputs)
        n = Y.shape[0]
        X = _matrix(self.inputs, n)
        c = None if self.cost is None else np.asarray(self.cost, dtype=float).ravel()
        object.__setattr__(self, "outputs", Y)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "cost", c)
        if n < 1:
            raise DataError("dataset needs at least one observation")
        if Y.shape[1] < 1:
            raise DataError("dataset needs at least one output column")
        if X.shape[0] != n:
            raise DataError(f"inputs have {X.shape[0]} rows, outputs have {n}")
        if c is not None:
            if c.size != n:
                raise DataError(f"cost has {c.size} entries, outputs have {n} rows")
            if X.shape[1] != 0:
                raise DataError("cost mode requires no input columns")
        for name, arr in (("inputs", X), ("outputs", Y), ("cost", c)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contain NaN or infinite values")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(default_labels(X.shape[1], Y.shape[1], c is not None)))
        elif len(self.labels) != X.shape[1] + Y.shape[1] + (c is not None):
            raise DataError("label count does not match columns")

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def Q(self) -> int:
        return self.outputs.shape[1]

    @property
    def mode(self) -> str:
        return "cost" if self.cost is not None else "production"

    def netputs(self):
        """(X, Y) as seen by the estimators; cost becomes a one-column X."""
        if self.cost is not None:
            return self.cost.reshape(-1, 1), self.outputs
        return self.inputs, self.outputs

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            inputs=self.inputs[idx],
            outputs=self.outputs[idx],
            cost=None if self.cost is None else self.cost[idx],
            labels=self.labels,
        )

    def columns(self) -> np.ndarray:
        """All columns in CSV order (x..., y..., c)."""
        parts = [self.inputs, self.outputs]
        if self.cost is not None:
            parts.append(self.cost.reshape(-1, 1))
        return np.hstack(parts)


def default_labels(d: int, Q: int, has_cost: bool) -> list:
    labels = [f"x{j + 1}" for j in range(d)] + [f"y{j + 1}" for j in range(Q)]
    if has_cost:
        labels.append("c")
    return labels


@dataclass(frozen=True)
class Direction:
    """Nonnegative estimation direction ``(g_x, g_y)``, or ``(g_y, g_c)`` in cost mode.

    Stored with unit Euclidean norm unless built with ``normalize=False``.
    """

    g_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    g_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    g_c: Optional[float] = None
    normalize: bool = True

    def __post_init__(self):
        gx = np.atleast_1d(np.asarray(self.g_x, dtype=float)).ravel()
        gy = np.atleast_1d(np.asarray(self.g_y, dtype=float)).ravel()
        gc = None if self.g_c is None else float(self.g_c)
        if gc is not None and gx.size:
            raise DataError("a direction has either input components or a cost component")
        parts = np.concatenate([gx, gy, [] if gc is None else [gc]])
        if parts.size == 0 or not np.all(np.isfinite(parts)):
            raise DataError("direction has no finite components")
        if np.any(parts < 0):
            raise DataError("direction components must be nonnegative")
        norm = float(np.linalg.norm(parts))
        if norm == 0.0:
            raise DataError("direction must have at least one positive component")
        if self.normalize:
            gx, gy = gx / norm, gy / norm
            gc = None if gc is None else gc / norm
        object.__setattr__(self, "g_x", gx)
        object.__setattr__(self, "g_y", gy)
        object.__setattr__(self, "g_c", gc)

    @classmethod
    def cost(cls, g_y, g_c, normalize: bool = True) -> "Direction":
        return cls(g_y=g_y, g_c=g_c, normalize=normalize)

    @classmethod
    def outputs(cls, g_y, normalize: bool = True) -> "Direction":
        return cls(g_y=g_y, normalize=normalize)

    @property
    def vector(self) -> np.ndarray:
        """Components in CSV column order (x..., y..., c)."""
        tail = [] if self.g_c is None else [self.g_c]
        return np.concatenate([self.g_x, self.g_y, tail])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def netput(self):
        """(g_x, g_y) as used by the estimators; the cost component is g_x."""
        if self.g_c is not None:
            return np.array([self.g_c]), self.g_y
        return self.g_x, self.g_y

    def scaled(self, factor: float) -> "Direction":
        if factor <= 0:
            raise DataError("direction scale factor must be positive")
        return Direction(self.g_x * factor, self.g_y * factor,
                         None if self.g_c is None else self.g_c * factor, normalize=False)

    def to_original_units(self, scale: "ScaleInfo") -> "Direction":
        """Map a normalized-space direction to the original data units."""
        v = self.vector * scale.span
        return _direction_like(self, v)

    def as_dict(self) -> dict:
        out = {"g_x": self.g_x.tolist(), "g_y": self.g_y.tolist()}
        if self.g_c is not None:
            out["g_c"] = self.g_c
        return out

    @classmethod
    def from_dict(cls, d: dict, normalize: bool = True) -> "Direction":
        return cls(d.get("g_x", []), d.get("g_y", []), d.get("g_c"), normalize=normalize)


def _direction_like(template: Direction, v: np.ndarray, normalize: bool = True) -> Direction:
    dx, dy = template.g_x.size, template.g_y.size
    gc = None if template.g_c is None else v[dx + dy]
    return Direction(v[:dx], v[dx:dx + dy], gc, normalize=normalize)


def direction_from_angle(theta: float) -> Direction:
    """Cost-mode direction ``(g_y, g_c) = (cos theta, sin theta)``."""
    _check_angle(theta)
    return Direction.cost([math.cos(theta)], math.sin(theta))


def output_direction_from_angle(theta: float) -> Direction:
    """Two-output direction ``(cos theta, sin theta)`` for isoquant fits."""
    _check_angle(theta)
    return Direction.outputs([math.cos(theta), math.sin(theta)])


def _check_angle(theta):
    if not (-1e-12 <= theta <= math.pi / 2 + 1e-12):
        raise DataError(f"angle {theta} outside [0, pi/2]")


@dataclass(frozen=True)
class ScaleInfo:
    minimum: np.ndarray
    maximum: np.ndarray
    degenerate: np.ndarray

    @property
    def span(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0, self.maximum - self.minimum)

    def as_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist(),
                "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleInfo":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float),
                   np.asarray(d["degenerate"], bool))


@dataclass(frozen=True)
class NormalizedDataset:
    data: Dataset
    scale_info: ScaleInfo

    @property
    def degenerate_columns(self) -> list:
        return [lab for lab, flag in zip(self.data.labels, self.scale_info.degenerate) if flag]


def _rebuild(template: Dataset, cols: np.ndarray) -> Dataset:
    d, Q = template.d, template.Q
    return Dataset(
        inputs=cols[:, :d],
        outputs=cols[:, d:d + Q],
        cost=None if template.cost is None else cols[:, d + Q],
        labels=template.labels,
    )


def normalize(data: Dataset, strict: bool = False, scale_info: Optional[ScaleInfo] = None) -> NormalizedDataset:
    """Min-max normalize every column to [0, 1].

    Pass ``scale_info`` to reuse a training set's scaling on new data (values
    may then fall outside [0, 1]).  Constant columns map to 0 and are flagged;
    ``strict`` turns them into an error.
    """
    cols = data.columns()
    if scale_info is None:
        if data.n < 2:
            raise DataError("normalization needs at least two observations")
        lo, hi = cols.min(axis=0), cols.max(axis=0)
        degenerate = (hi - lo) <= 0
        scale_info = ScaleInfo(lo, hi, degenerate)
    if np.any(scale_info.degenerate):
        bad = [lab for lab, f in zip(data.labels, scale_info.degenerate) if f]
        if strict:
            raise DataError(f"degenerate (constant) columns: {bad}")
        warnings.warn(f"degenerate (constant) columns mapped to 0: {bad}", stacklevel=2)
    out = (cols - scale_info.minimum) / scale_info.span
    out[:, scale_info.degenerate] = 0.0
    return NormalizedDataset(_rebuild(data, out), scale_info)


def denormalize(norm: NormalizedDataset) -> Dataset:
    s = norm.scale_info
    cols = norm.data.columns() * s.span + s.minimum
    cols[:, s.degenerate] = s.minimum[s.degenerate]
    return _rebuild(norm.data, cols)


@dataclass(frozen=True)
class MedianDirection:
    direction: Direction
    raw: np.ndarray


def median_direction(norm: NormalizedDataset) -> MedianDirection:
    """Direction toward the data median from the unit-cube center [0,...,0,1].

    Components are the output column medians and one minus the cost median
    (even sample sizes use the midpoint of the two central values).  The raw
    vector is kept for reporting; the direction itself is unit-normalized.
    """
    data = norm.data
    if data.mode != "cost":
        raise DataError("median direction is defined for cost-mode data")
    raw = np.concatenate([np.median(data.outputs, axis=0), [1.0 - np.median(data.cost)]])
    if not np.any(raw > 0):
        raise DataError("median direction vector is all zero")
    raw = np.clip(raw, 0.0, None)
    return MedianDirection(Direction.cost(raw[:-1], raw[-1]), raw)


@dataclass(frozen=True)
class NoiseModel:
    """Noise as a scalar length times a unit direction.

    ``mode`` is ``"random"`` (a fresh direction per observation) or
    ``"fixed"`` (one direction for all, given by ``angle`` or ``vector``).
    """

    mode: str = "random"
    lam: float = 0.1
    angle: Optional[float] = None
    vector: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in ("random", "fixed"):
            raise DataError(f"unknown noise mode {self.mode!r}")
        if self.lam < 0:
            raise DataError("noise scale must be nonnegative")
        if self.mode == "fixed":
            if self.vector is None and self.angle is None:
                raise DataError("fixed noise needs an angle or a vector")
            if self.vector is not None:
                v = np.asarray(self.vector, dtype=float)
                nv = np.linalg.norm(v)
                if nv == 0:
                    raise DataError("fixed noise vector must be nonzero")
                object.__setattr__(self, "vector", tuple(v / nv))

    def fixed_vector(self, dim: int = 2) -> np.ndarray:
        if self.vector is not None:
            return np.asarray(self.vector)
        return np.array([math.cos(self.angle), math.sin(self.angle)])


# ---------------------------------------------------------------- CSV I/O

_HEADER = re.compile(r"^(x|y)([1-9][0-9]*)$|^c$")


def read_csv(path) -> Dataset:
    """Read the standard netput CSV (header ``x1..xd, y1..yQ, c``)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for h in header:
        if not _HEADER.match(h):
            raise DataError(f"{path}: unexpected column {h!r}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate columns")
    xs = sorted((h for h in header if h.startswith("x")), key=lambda h: int(h[1:]))
    ys = sorted((h for h in header if h.startswith("y")), key=lambda h: int(h[1:]))
    if xs != [f"x{j + 1}" for j in range(len(xs))] or ys != [f"y{j + 1}" for j in range(len(ys))]:
        raise DataError(f"{path}: columns must be numbered consecutively from 1")
    if not ys:
        raise DataError(f"{path}: at least one output column y1 is required")
    has_cost = "c" in header
    if has_cost and xs:
        raise DataError(f"{path}: cost files cannot also have input columns")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from exc
    if body.ndim != 2 or body.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    if body.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    col = {h: body[:, k] for k, h in enumerate(header)}
    X = np.column_stack([col[h] for h in xs]) if xs else None
    Y = np.column_stack([col[h] for h in ys])
    return Dataset(inputs=X, outputs=Y, cost=col["c"] if has_cost else None)


def write_csv(data: Dataset, path, digits: int = 17) -> None:
    path = Path(path)
    cols = data.columns()
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(default_labels(data.d, data.Q, data.cost is not None))
        for row in cols:
            w.writerow([format(v, f".{digits}g") for v in row])


def parse_direction(spec: Sequence[float], data: Dataset) -> Direction:
    """Direction from a flat component list in CSV column order."""
    v = np.asarray(spec, dtype=float)
    width = data.d + data.Q + (data.cost is not None)
    if v.size != width:
        raise DataError(f"direction has {v.size} components, data has {width} columns")
    if data.cost is not None:
        return Direction.cost(v[:-1], v[-1])
    return Direction(v[:data.d], v[data.d:])
