"""Synthetic hospital-like cost data.

Four right-skewed procedure counts and a cost that is a sum of convex power
terms times lognormal noise.  Counts are lognormal with a shared size factor
(large hospitals do more of everything).  The constants are illustrative:
count medians in the tens to thousands, cost in $M, and an interquartile
cost ratio around 7, as in mid-sized US hospital samples.  Nothing more is
matched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset

OUTPUT_NAMES = ("MajDiag", "MajTher", "MinDiag", "MinTher")


@dataclass(frozen=True)
class HospitalFixtureSpec:
    n: int = 500
    # lognormal (mu, sigma) of each count; medians exp(mu) ~ 70, 1700, 950, 3100
    log_mean: tuple = (4.25, 7.44, 6.86, 8.04)
    log_sd: tuple = (1.0, 1.0, 1.0, 1.0)
    size_share: float = 0.8  # share of each log-variance from the common size factor
    cap_sd: float = 2.5  # capacity: log-counts are capped this many sd above their mean
    # cost in $M: fixed + sum_q a_q * (y_q / scale_q) ** p_q
    fixed_cost: float = 0.0
    weights: tuple = (6.0, 30.0, 8.0, 22.0)
    scales: tuple = (70.0, 1700.0, 950.0, 3100.0)
    powers: tuple = (1.5, 1.5, 1.5, 1.5)
    noise_sd: float = 0.25  # sd of the log multiplicative noise
    seed: int = 0

    def __post_init__(self):
        k = len(OUTPUT_NAMES)
        for name in ("log_mean", "log_sd", "weights", "scales", "powers"):
            if len(getattr(self, name)) != k:
                raise DataError(f"{name} needs {k} entries")
        if self.n < 2:
            raise DataError("fixture needs n >= 2")
        if min(self.log_sd) <= 0 or min(self.scales) <= 0 or min(self.weights) <= 0:
            raise DataError("lognormal sd, scales and weights must be positive")
        if min(self.powers) < 1:
            raise DataError("cost exponents below 1 break convexity")
        if self.cap_sd <= 0:
            raise DataError("cap_sd must be positive")
        if not 0.0 <= self.size_share <= 1.0:
            raise DataError("size_share must lie in [0, 1]")
        if self.noise_sd < 0 or self.fixed_cost < 0:
            raise DataError("noise sd and fixed cost must be nonnegative")


def fixture_cost(spec: HospitalFixtureSpec, Y) -> np.ndarray:
    """Noiseless convex cost rule."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    terms = np.asarray(spec.weights) * (Y / np.asarray(spec.scales)) ** np.asarray(spec.powers)
    return spec.fixed_cost + terms.sum(axis=1)


def gen_hospital_fixture(spec: HospitalFixtureSpec = HospitalFixtureSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    k = len(OUTPUT_NAMES)
    z = np.sqrt(spec.size_share) * rng.normal(size=(spec.n, 1)) + \
        np.sqrt(1.0 - spec.size_share) * rng.normal(size=(spec.n, k))
    Y = np.exp(np.asarray(spec.log_mean) + np.asarray(spec.log_sd) * np.minimum(z, spec.cap_sd))
    Y = np.maximum(np.round(Y), 1.0)
    c = fixture_cost(spec, Y)
    if spec.noise_sd > 0:
        c = c * np.exp(rng.normal(0.0, spec.noise_sd, spec.n))
    return Dataset(np.zeros((spec.n, 0)), Y, cost=c)
