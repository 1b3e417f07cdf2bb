"""Spatial and temporal correlation matrices and the temporal-range bounds.

Spatial: a proper CAR on areal data, F(rho)^-1 = D_w - rho*W, or an
exponential Gaussian-process kernel on point data, F(rho) = exp(-rho*D).
Temporal: AR(1)-type H[t,t'] = psi^|x_t - x_t'| or exponential
H[t,t'] = exp(-psi*|x_t - x_t'|).  The exponential kernel uses a decaying
exponent so that entries stay in (0, 1]; a growing exponent cannot be a
correlation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SpatialStructure
from .errors import (
    DuplicateTimes,
    KindMismatch,
    NonPositiveDefinite,
    SingularPrecision,
)

log = logging.getLogger(__name__)

_JITTER = 1e-10


@dataclass(frozen=True)
class SpatialKernelSpec:
    kind: str  # "car" | "exponential-gp"
    rho: float

    def __post_init__(self):
        if self.kind == "car":
            if not 0 <= self.rho < 1:
                raise ValueError("car kernel requires 0 <= rho < 1")
        elif self.kind == "exponential-gp":
            if not self.rho > 0:
                raise ValueError("exponential-gp kernel requires rho > 0")
        else:
            raise ValueError(f"unknown spatial kernel {self.kind!r}")


@dataclass(frozen=True)
class TemporalKernelSpec:
    kind: str  # "ar1" | "exponential"
    psi: float

    def __post_init__(self):
        if self.kind == "ar1":
            if not abs(self.psi) < 1:
                raise ValueError("ar1 kernel requires |psi| < 1")
        elif self.kind == "exponential":
            if not self.psi > 0:
                raise ValueError("exponential kernel requires psi > 0")
        else:
            raise ValueError(f"unknown temporal kernel {self.kind!r}")


def _check_spd(mat: np.ndarray, err: type[Exception], what: str) -> np.ndarray:
    """Return mat, with a one-shot diagonal jitter retry on factorization failure."""
    try:
        np.linalg.cholesky(mat)
        return mat
    except np.linalg.LinAlgError:
        pass
    jittered = mat + _JITTER * np.eye(mat.shape[0])
    try:
        np.linalg.cholesky(jittered)
        log.warning("%s required a %g diagonal jitter to factorize", what, _JITTER)
        return jittered
    except np.linalg.LinAlgError:
        raise err(f"{what} is not positive-definite")


def spatial_correlation(spec: SpatialKernelSpec, structure: SpatialStructure) -> np.ndarray:
    """Build the m x m spatial correlation matrix F(rho)."""
    if spec.kind == "car":
        if structure.kind != "areal":
            raise KindMismatch("car kernel needs areal structure")
        W = structure.adjacency
        Dw = np.diag(structure.neighbour_counts)
        prec = Dw - spec.rho * W
        try:
            F = np.linalg.inv(_check_spd(prec, SingularPrecision, "CAR precision D_w - rho*W"))
        except SingularPrecision:
            raise
        return _check_spd(0.5 * (F + F.T), SingularPrecision, "CAR correlation")
    if structure.kind != "point":
        raise KindMismatch("exponential-gp kernel needs point structure")
    F = np.exp(-spec.rho * structure.distances)
    return _check_spd(F, NonPositiveDefinite, "exponential spatial correlation")


def spatial_precision(spec: SpatialKernelSpec, structure: SpatialStructure) -> np.ndarray:
    """F(rho)^-1 without forming F first where the precision is the natural object."""
    if spec.kind == "car":
        if structure.kind != "areal":
            raise KindMismatch("car kernel needs areal structure")
        prec = np.diag(structure.neighbour_counts) - spec.rho * structure.adjacency
        return _check_spd(prec, SingularPrecision, "CAR precision D_w - rho*W")
    F = spatial_correlation(spec, structure)
    return np.linalg.inv(F)


def temporal_correlation(spec: TemporalKernelSpec, times: np.ndarray) -> np.ndarray:
    """Build the T x T temporal correlation matrix H(psi)."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise ValueError("times must be a vector")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise DuplicateTimes("times must be strictly increasing")
    gaps = np.abs(times[:, None] - times[None, :])
    if spec.kind == "ar1":
        with np.errstate(invalid="raise"):
            try:
                H = np.power(spec.psi, gaps)
            except FloatingPointError:
                raise NonPositiveDefinite(
                    "ar1 kernel with negative psi is undefined for non-integer gaps")
    else:
        H = np.exp(-spec.psi * gaps)
    np.fill_diagonal(H, 1.0)
    if times.size > 1:
        off = np.abs(H[~np.eye(times.size, dtype=bool)])
        if off.size and off.max() >= 1.0:
            raise NonPositiveDefinite(
                "degenerate temporal correlation: unit off-diagonal entries")
    return _check_spd(H, NonPositiveDefinite, "temporal correlation H(psi)")


def psi_bounds(times: np.ndarray) -> tuple[float, float]:
    """Uniform-prior bounds for the exponential temporal kernel.

    Lower bound keeps correlation 0.95 across the maximum gap; upper bound
    drops it to 0.01 across the minimum gap, so the prior spans the temporal
    range of the data.
    """
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise DuplicateTimes("need at least two times")
    gaps = np.diff(np.sort(times))
    if np.any(gaps == 0):
        raise DuplicateTimes("repeated time values give a zero minimum gap")
    max_gap = float(times.max() - times.min())
    min_gap = float(gaps.min())
    a = -np.log(0.95) / max_gap
    b = -np.log(0.01) / min_gap
    return a, b
