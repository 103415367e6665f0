"""Summary statistics of TACs and the L1 discrepancy between them.

Four kinds are supported: GCV-smoothed spline values, the raw frame
values, raw values compared under a per-frame count-noise scale, and the
4-vector of weighted least squares estimates from a timing-library fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BoundarySmoothingWarning,
    DegenerateFit,
    KindMismatch,
    MissingContext,
)
from .kinetics import InputCurve, Tac, TimeGrid

__all__ = [
    "SummaryKind",
    "SummaryVector",
    "SummaryContext",
    "SplineSmoother",
    "spline_smooth",
    "s3_scales",
    "summarize",
    "distance",
]


class SummaryKind(Enum):
    SPLINE = "spline"
    RAW = "raw"
    SCALED = "scaled"
    WLS_VECTOR = "wls"


# 50-point logarithmic grid of smoothing parameters for GCV, fixed so
# that selections are comparable across curves on the same grid.
DEFAULT_LAMBDA_GRID = np.logspace(-6.0, 8.0, 50)

_MIN_FRAMES_FOR_SPLINE = 8


class SplineSmoother:
    """Natural cubic smoothing spline on fixed knots, GCV-selected smoothing.

    Fitted values minimize sum((y - f)^2) + lam * integral(f'')^2 over
    natural cubic splines with knots at the data abscissae; in matrix
    form f = (I + lam*K)^(-1) y with K the usual second-derivative
    penalty.  K is eigendecomposed once, so fitting whole batches of
    curves costs one matrix product per smoothing value.
    """

    def __init__(self, knots: np.ndarray, lambdas: np.ndarray | None = None):
        knots = np.asarray(knots, dtype=float)
        if knots.size < _MIN_FRAMES_FOR_SPLINE:
            raise ValueError(f"need at least {_MIN_FRAMES_FOR_SPLINE} knots")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        self.knots = knots
        # descending order so that exact GCV ties resolve to the
        # smoothest candidate, never the interpolation limit
        lam = DEFAULT_LAMBDA_GRID if lambdas is None else np.asarray(lambdas, float)
        self.lambdas = np.sort(lam)[::-1]
        s, u = np.linalg.eigh(_penalty_matrix(knots))
        # exact null space (constants and linears): zero the eigenvalue
        # noise so those components are never shrunk at any lambda
        s[s < s.max() * 1e-10] = 0.0
        self._eigvals = s
        self._eigvecs = u

    def fit_batch(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Fit each row of y; returns (fitted rows, selected lambda per row)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n = self.knots.size
        if y.shape[1] != n:
            raise ValueError("curves do not match the knots")
        z = y @ self._eigvecs
        best_fit = np.empty_like(y)
        best_gcv = np.full(y.shape[0], np.inf)
        sel = np.zeros(y.shape[0], dtype=int)
        for j, lam in enumerate(self.lambdas):
            shrink = 1.0 / (1.0 + lam * self._eigvals)
            fit = (z * shrink) @ self._eigvecs.T
            rss = np.square(y - fit).sum(axis=1)
            gcv = n * rss / (n - shrink.sum()) ** 2
            better = gcv < best_gcv
            best_fit[better] = fit[better]
            best_gcv[better] = gcv[better]
            sel[better] = j
        at_edge = (sel == 0) | (sel == self.lambdas.size - 1)
        if np.any(at_edge):
            flat = np.ptp(y, axis=1) == 0
            if np.any((sel == self.lambdas.size - 1) & flat):
                raise DegenerateFit("interpolation limit selected on constant data")
            warnings.warn(
                "GCV selected a boundary of the smoothing grid",
                BoundarySmoothingWarning,
                stacklevel=2,
            )
        return best_fit, self.lambdas[sel]

    def fit(self, y: np.ndarray) -> np.ndarray:
        return self.fit_batch(y[None, :])[0][0]

    def fit_at(self, y: np.ndarray, lam: float) -> np.ndarray:
        """Fitted values for one curve at a fixed smoothing parameter."""
        shrink = 1.0 / (1.0 + lam * self._eigvals)
        return self._eigvecs @ (shrink * (self._eigvecs.T @ np.asarray(y, float)))


def _penalty_matrix(x: np.ndarray) -> np.ndarray:
    """Second-derivative penalty K = Q R^(-1) Q^T for natural cubic splines."""
    n = x.size
    h = np.diff(x)
    q = np.zeros((n, n - 2))
    r = np.zeros((n - 2, n - 2))
    for j in range(1, n - 1):
        q[j - 1, j - 1] = 1.0 / h[j - 1]
        q[j, j - 1] = -1.0 / h[j - 1] - 1.0 / h[j]
        q[j + 1, j - 1] = 1.0 / h[j]
        r[j - 1, j - 1] = (h[j - 1] + h[j]) / 3.0
        if j < n - 2:
            r[j - 1, j] = r[j, j - 1] = h[j] / 6.0
    k = q @ np.linalg.solve(r, q.T)
    return 0.5 * (k + k.T)


_SMOOTHER_CACHE: dict[bytes, SplineSmoother] = {}


def _smoother_for(grid: TimeGrid) -> SplineSmoother:
    key = grid.mids.tobytes()
    if key not in _SMOOTHER_CACHE:
        _SMOOTHER_CACHE[key] = SplineSmoother(grid.mids)
    return _SMOOTHER_CACHE[key]


def spline_smooth(tac: Tac) -> np.ndarray:
    """GCV-smoothed values of a TAC at its frame midpoints."""
    return _smoother_for(tac.grid).fit(tac.values)


@dataclass
class SummaryVector:
    """A summary of one TAC: its kind, the vector, and optional scales.

    `scales` is only populated on summaries of observed data for the
    SCALED kind; distances divide by the observed side's scales.
    """

    kind: SummaryKind
    values: np.ndarray
    scales: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=float)
            if self.scales.shape != self.values.shape:
                raise ValueError("scales must match values")
            if np.any(self.scales <= 0):
                raise ValueError("scales must be positive")


@dataclass
class SummaryContext:
    """Side information some summary kinds need.

    timings/curve/grid feed the WLS-vector kind (the timing library and
    the reference input used to build design matrices); scale_hint is
    the count scale used to form per-frame scales on observed data.
    """

    timings: np.ndarray | None = None  # (n, 3) rows of t_d, t_p, alpha
    curve: InputCurve | None = None
    grid: TimeGrid | None = None
    nonneg: bool = False
    scale_hint: float | None = None
    s3_floor: float | None = None
    extras: dict = field(default_factory=dict)


def s3_scales(tac: Tac, scale_hint: float = 1.0, floor: float | None = None) -> np.ndarray:
    """Per-frame noise scale sqrt(max(v, floor) / scale_hint).

    Under the count-noise model the variance of a frame is v/scale, so
    this is the model-implied standard deviation.  The floor defaults to
    1e-3 of the TAC maximum and keeps zero-activity frames usable.
    """
    v = tac.values
    if floor is None:
        vmax = float(v.max()) if v.size else 0.0
        floor = 1e-3 * vmax if vmax > 0 else 1e-3
    return np.sqrt(np.maximum(v, floor) / scale_hint)


def summarize(tac: Tac, kind: SummaryKind, ctx: SummaryContext | None = None) -> SummaryVector:
    """Compute the requested summary of one TAC.

    SCALED summaries carry per-frame scales only when ctx provides a
    scale_hint (i.e. for observed data); simulated summaries stay plain
    so caches remain functions of the parameters alone.
    """
    if kind is SummaryKind.RAW:
        return SummaryVector(kind, tac.values.copy())
    if kind is SummaryKind.SPLINE:
        if tac.grid.n_frames < _MIN_FRAMES_FOR_SPLINE:
            raise ValueError("spline summaries need at least 8 frames")
        return SummaryVector(kind, spline_smooth(tac))
    if kind is SummaryKind.SCALED:
        scales = None
        if ctx is not None and ctx.scale_hint is not None:
            scales = s3_scales(tac, ctx.scale_hint, ctx.s3_floor)
        return SummaryVector(kind, tac.values.copy(), scales)
    if kind is SummaryKind.WLS_VECTOR:
        if ctx is None or ctx.timings is None or ctx.curve is None:
            raise MissingContext("WLS-vector summaries need timings and a reference curve")
        from .wls import build_basis_library, wls_fit_grid

        lib = build_basis_library(ctx.curve, tac, ctx.timings)
        fit = wls_fit_grid(tac, lib, nonneg=ctx.nonneg)
        return SummaryVector(kind, fit.coefficients.copy())
    raise KindMismatch(f"unknown summary kind {kind!r}")


def distance(obs: SummaryVector, sim: SummaryVector) -> float:
    """L1 discrepancy between two summaries of the same kind.

    For the SCALED kind each component difference is divided by the
    per-frame scale of the observed side.
    """
    if obs.kind is not sim.kind:
        raise KindMismatch(f"cannot compare {obs.kind} with {sim.kind}")
    if obs.values.shape != sim.values.shape:
        raise KindMismatch("summaries have different lengths")
    diff = np.abs(obs.values - sim.values)
    if obs.kind is SummaryKind.SCALED:
        scales = obs.scales if obs.scales is not None else sim.scales
        if scales is None:
            raise MissingContext("scaled distance needs scales on the observed summary")
        diff = diff / scales
    return float(diff.sum())
