"""Compartmental forward models on a two-level time grid.

Simulation happens on a fine uniform grid (sub-minute steps) and is
averaged onto acquisition frames afterwards.  Two forward models are
provided: a one-tissue compartment model driven by an arterial input,
and a reference-tissue model with a transient uptake response whose
operational equation is solved by an implicit trapezoid step.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.integrate import cumulative_trapezoid

from .errors import FormatError, NegativeActivity, SingularStep

__all__ = [
    "TimeGrid",
    "Tac",
    "InputCurve",
    "ResponseTiming",
    "OneTissueParams",
    "LpNtPetParams",
    "default_grid",
    "reference_input",
    "input_curve_from_csv",
    "response_h",
    "convolve",
    "cum_integral",
    "frame_average",
    "one_tissue_forward",
    "lp_ntpet_forward",
    "activation_preset",
    "read_tac_csv",
    "write_tac_csv",
    "simulation_count",
]

PARAM_NAMES = ("r1", "k2", "k2a", "gamma", "t_d", "t_p", "alpha")

# Running total of forward simulations performed by this process.  Cache
# reuse guarantees are asserted against deltas of this counter.
_SIM_COUNT = 0


def simulation_count() -> int:
    """Number of forward model evaluations performed so far (process-wide)."""
    return _SIM_COUNT


def _count_simulations(n: int) -> None:
    global _SIM_COUNT
    _SIM_COUNT += n


class TimeGrid:
    """Acquisition frames plus the fine simulation grid they sit on.

    Parameters
    ----------
    frame_starts, frame_ends : array-like, minutes
        Frame boundaries.  Starts must be strictly increasing, every
        frame must have positive duration and frames must not overlap.
        Frames do not have to be contiguous.
    sub_step : float
        Requested fine-grid step.  The fine grid spans [0, frame_ends[-1]]
        with a uniform step no wider than this (the span is divided into
        an integer number of equal steps).
    """

    def __init__(self, frame_starts, frame_ends, sub_step: float = 0.1):
        starts = np.asarray(frame_starts, dtype=float)
        ends = np.asarray(frame_ends, dtype=float)
        if starts.ndim != 1 or starts.shape != ends.shape or starts.size == 0:
            raise ValueError("frame_starts and frame_ends must be equal-length 1-d arrays")
        if starts[0] < 0:
            raise ValueError("frames must start at t >= 0")
        if np.any(np.diff(starts) <= 0):
            raise ValueError("frame_starts must be strictly increasing")
        if np.any(ends <= starts):
            raise ValueError("every frame needs a positive duration")
        if np.any(starts[1:] < ends[:-1]):
            raise ValueError("frames must not overlap")
        if not (0 < sub_step <= np.min(ends - starts)):
            raise ValueError("sub_step must be positive and at most the shortest frame")
        self.frame_starts = starts
        self.frame_ends = ends
        self.sub_step = float(sub_step)
        self.n_frames = starts.size

    @cached_property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.frame_starts + self.frame_ends)

    @property
    def t_end(self) -> float:
        return float(self.frame_ends[-1])

    @cached_property
    def fine_times(self) -> np.ndarray:
        n = int(math.ceil(self.t_end / self.sub_step - 1e-12))
        return np.linspace(0.0, self.t_end, n + 1)

    @cached_property
    def _avg_matrix(self) -> np.ndarray:
        # rows: frame-mean functionals of a fine curve
        rows = [
            _integral_weights(self.fine_times, a, b) / (b - a)
            for a, b in zip(self.frame_starts, self.frame_ends)
        ]
        return np.array(rows)

    @cached_property
    def _mid_integral_matrix(self) -> np.ndarray:
        # rows: integral of a fine curve from 0 to each frame midpoint
        return np.array([_integral_weights(self.fine_times, 0.0, m) for m in self.mids])

    def key(self) -> str:
        """Stable digest of the grid layout, for provenance records."""
        payload = self.frame_starts.tobytes() + self.frame_ends.tobytes()
        payload += np.float64(self.sub_step).tobytes()
        return hashlib.sha256(payload).hexdigest()[:12]

    def same_frames(self, other: "TimeGrid") -> bool:
        return (
            self.n_frames == other.n_frames
            and np.array_equal(self.frame_starts, other.frame_starts)
            and np.array_equal(self.frame_ends, other.frame_ends)
        )


def default_grid(n_frames: int = 60, frame_minutes: float = 1.0, sub_step: float = 0.1) -> TimeGrid:
    """Contiguous acquisition of `n_frames` equal frames starting at t=0."""
    starts = np.arange(n_frames) * frame_minutes
    return TimeGrid(starts, starts + frame_minutes, sub_step)


def _integral_weights(times: np.ndarray, a: float, b: float) -> np.ndarray:
    """Node weights so that w @ v integrates the linear interpolant of v over [a, b].

    Exact for any piecewise-linear integrand, including partial fine
    intervals at the ends of [a, b].
    """
    w = np.zeros(times.size)
    if b <= a:
        return w
    if a < times[0] - 1e-12 or b > times[-1] + 1e-12:
        raise ValueError("integration range escapes the fine grid")
    i0 = max(int(np.searchsorted(times, a, side="right")) - 1, 0)
    i1 = min(int(np.searchsorted(times, b, side="left")), times.size - 1)
    for i in range(i0, i1):
        lo = max(times[i], a)
        hi = min(times[i + 1], b)
        if hi <= lo:
            continue
        dt = times[i + 1] - times[i]
        width = hi - lo
        w[i] += width * ((times[i + 1] - lo) + (times[i + 1] - hi)) / (2.0 * dt)
        w[i + 1] += width * ((lo - times[i]) + (hi - times[i])) / (2.0 * dt)
    return w


@dataclass
class Tac:
    """A time-activity curve: one activity value per acquisition frame."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_frames,):
            raise ValueError("need exactly one value per frame")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("TAC values must be finite")

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes() + self.grid.key().encode()).hexdigest()[:12]


@dataclass(frozen=True)
class InputCurve:
    """A continuous input function C(t), sampled wherever the solver needs it.

    `fn` must accept an ndarray of times and return matching values.
    Values are clamped to zero for t < 0; negative values for t >= 0 are
    a modeling error and rejected at evaluation time.
    """

    name: str
    kind: str  # "arterial" or "reference", informational
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def values_on(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        vals = np.where(times < 0.0, 0.0, np.asarray(self.fn(times), dtype=float))
        if np.any(vals < 0.0):
            raise NegativeActivity(f"input curve {self.name!r} went negative")
        return vals


def reference_input(
    amplitude: float = 1.0,
    ramp_power: float = 1.0,
    fast_decay: float = 0.12,
    slow_weight: float = 0.3,
    slow_decay: float = 0.02,
    kind: str = "reference",
) -> InputCurve:
    """Built-in gamma-variate times biexponential input curve.

    amplitude * t**ramp_power * (exp(-fast_decay*t) + slow_weight*exp(-slow_decay*t)),
    a smooth bolus-like shape that rises from zero and washes out slowly.
    """

    def fn(t: np.ndarray) -> np.ndarray:
        t = np.maximum(t, 0.0)
        return amplitude * t**ramp_power * (
            np.exp(-fast_decay * t) + slow_weight * np.exp(-slow_decay * t)
        )

    name = f"ref[{amplitude},{ramp_power},{fast_decay},{slow_weight},{slow_decay}]"
    return InputCurve(name=name, kind=kind, fn=fn)


def input_curve_from_csv(path, kind: str = "arterial") -> InputCurve:
    """Load an input curve from a 2-column CSV with header `t,value`.

    Linear interpolation between samples, zero before the first sample,
    constant after the last.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "value"]:
        raise FormatError(f"{path}: expected header 't,value'")
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    if data.shape[0] < 1:
        raise FormatError(f"{path}: no samples")
    t, v = data[:, 0], data[:, 1]
    if np.any(np.diff(t) <= 0):
        raise FormatError(f"{path}: sample times must be strictly increasing")
    if np.any(v < 0):
        raise NegativeActivity(f"{path}: negative activity sample")

    def fn(times: np.ndarray) -> np.ndarray:
        return np.interp(times, t, v, left=0.0)

    return InputCurve(name=f"file[{path}]", kind=kind, fn=fn)


@dataclass(frozen=True)
class ResponseTiming:
    """Timing of the transient uptake response: onset, peak, sharpness."""

    t_d: float
    t_p: float
    alpha: float

    def __post_init__(self):
        if not self.t_p > self.t_d:
            raise ValueError("t_p must exceed t_d")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class OneTissueParams:
    k1: float
    k2: float

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("rate constants must be non-negative")


@dataclass(frozen=True)
class LpNtPetParams:
    """Reference-tissue model parameters plus response timing."""

    r1: float
    k2: float
    k2a: float
    gamma: float
    timing: ResponseTiming

    def __post_init__(self):
        if min(self.r1, self.k2, self.k2a, self.gamma) < 0:
            raise ValueError("r1, k2, k2a and gamma must be non-negative")

    def as_array(self) -> np.ndarray:
        t = self.timing
        return np.array([self.r1, self.k2, self.k2a, self.gamma, t.t_d, t.t_p, t.alpha])

    @classmethod
    def from_array(cls, theta: Sequence[float]) -> "LpNtPetParams":
        r1, k2, k2a, gamma, t_d, t_p, alpha = (float(x) for x in theta)
        return cls(r1, k2, k2a, gamma, ResponseTiming(t_d, t_p, alpha))


_PRESET_BASE = dict(r1=1.0, k2=0.3, k2a=0.1, t_d=20.0, t_p=25.0, alpha=2.0)
_PRESET_GAMMA = {"100": 0.2, "200": 0.4}


def activation_preset(name: str) -> LpNtPetParams:
    """Named ground-truth scenarios; "200" doubles the response magnitude of "100"."""
    if name not in _PRESET_GAMMA:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESET_GAMMA)}")
    b = _PRESET_BASE
    return LpNtPetParams(
        b["r1"], b["k2"], b["k2a"], _PRESET_GAMMA[name],
        ResponseTiming(b["t_d"], b["t_p"], b["alpha"]),
    )


def response_h(timing: ResponseTiming, t) -> np.ndarray:
    """Unit-peak response shape: 0 up to onset, 1 exactly at the peak time.

    Computed in log space, ((t-t_d)/(t_p-t_d))**alpha * exp(alpha*(1-x)),
    which keeps the value in [0, 1] without overflow for any timing.
    """
    t = np.asarray(t, dtype=float)
    x = (t - timing.t_d) / (timing.t_p - timing.t_d)
    if timing.alpha == 0.0:
        h = np.ones_like(x)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.exp(timing.alpha * (np.log(x) + 1.0 - x))
    return np.where(x <= 0.0, 0.0, h)


def cum_integral(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Running trapezoid integral along the grid; starts at 0."""
    return cumulative_trapezoid(values, times, initial=0.0)


def convolve(values: np.ndarray, times: np.ndarray, k2: float) -> np.ndarray:
    """Causal convolution of a fine-grid curve with exp(-k2*t).

    Uses the recursion y_n = e(-k2 dt) y_(n-1) + dt/2 (f_(n-1) e(-k2 dt) + f_n),
    which is algebraically the trapezoid quadrature of the convolution
    integral but never forms growing exponentials.
    """
    values = np.asarray(values, dtype=float)
    y = np.empty_like(values)
    y[0] = 0.0
    for i in range(1, values.size):
        dt = times[i] - times[i - 1]
        decay = math.exp(-k2 * dt)
        y[i] = decay * y[i - 1] + 0.5 * dt * (values[i - 1] * decay + values[i])
    return y


def frame_average(fine_values: np.ndarray, grid: TimeGrid) -> Tac:
    """Average a fine-grid curve over each acquisition frame (trapezoid)."""
    fine_values = np.asarray(fine_values, dtype=float)
    if fine_values.shape != grid.fine_times.shape:
        raise ValueError("fine curve does not match the grid")
    return Tac(grid, grid._avg_matrix @ fine_values)


def one_tissue_forward(params: OneTissueParams, ca: InputCurve, grid: TimeGrid) -> Tac:
    """One-tissue compartment TAC: K1 * (Ca conv exp(-k2 t)), frame-averaged."""
    fine = convolve(ca.values_on(grid.fine_times), grid.fine_times, params.k2)
    _count_simulations(1)
    # scale after averaging so the result is exactly linear in K1
    return Tac(grid, params.k1 * (grid._avg_matrix @ fine))


@njit(cache=True)
def _lp_step_kernel(thetas, times, cr, icr, out, flags):  # pragma: no cover - jitted
    n_b, n_t = out.shape
    for b in range(n_b):
        r1 = thetas[b, 0]
        k2 = thetas[b, 1]
        k2a = thetas[b, 2]
        g = thetas[b, 3]
        td = thetas[b, 4]
        tp = thetas[b, 5]
        al = thetas[b, 6]
        if tp <= td:
            # response peak must trail onset; raw rows can violate this
            flags[b] = 1
            continue
        t0 = times[0]
        if t0 <= td or al == 0.0:
            h_prev = 0.0 if t0 <= td else 1.0
        else:
            x = (t0 - td) / (tp - td)
            h_prev = math.exp(al * (math.log(x) + 1.0 - x))
        c_prev = r1 * cr[0]
        out[b, 0] = c_prev
        ict = 0.0
        icth = 0.0
        for i in range(1, n_t):
            t = times[i]
            dt = times[i] - times[i - 1]
            if t <= td:
                h = 0.0
            elif al == 0.0:
                h = 1.0
            else:
                x = (t - td) / (tp - td)
                h = math.exp(al * (math.log(x) + 1.0 - x))
            rhs = (
                r1 * cr[i]
                + k2 * icr[i]
                - k2a * (ict + 0.5 * dt * c_prev)
                - g * (icth + 0.5 * dt * c_prev * h_prev)
            )
            coef = 1.0 + 0.5 * dt * (k2a + g * h)
            if coef <= 0.0:
                flags[b] = 1
                break
            c = rhs / coef
            ict += 0.5 * dt * (c_prev + c)
            icth += 0.5 * dt * (c_prev * h_prev + c * h)
            c_prev = c
            h_prev = h
            out[b, i] = c


def _forward_fine_batch(thetas: np.ndarray, cr_fine: np.ndarray, icr_fine: np.ndarray,
                        times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the operational equation for a batch of parameter rows.

    The unknown at each step appears linearly in the trapezoid-discretized
    integrals and is solved for algebraically.  Returns (fine curves,
    singular-step flags); flagged rows are partial and must be discarded.
    """
    thetas = np.ascontiguousarray(thetas, dtype=float)
    out = np.zeros((thetas.shape[0], times.size))
    flags = np.zeros(thetas.shape[0], dtype=np.uint8)
    _lp_step_kernel(thetas, times, cr_fine, icr_fine, out, flags)
    _count_simulations(thetas.shape[0])
    return out, flags


def _forward_frames_batch(thetas: np.ndarray, cr: InputCurve, grid: TimeGrid,
                          chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Batch forward simulation, frame-averaged. Returns (frames, flags)."""
    times = grid.fine_times
    cr_fine = cr.values_on(times)
    icr_fine = cum_integral(cr_fine, times)
    n = thetas.shape[0]
    frames = np.empty((n, grid.n_frames))
    flags = np.empty(n, dtype=np.uint8)
    avg_t = grid._avg_matrix.T
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        fine, fl = _forward_fine_batch(thetas[lo:hi], cr_fine, icr_fine, times)
        # divergent solutions overflow to inf; averaging those rows is noise
        with np.errstate(invalid="ignore", over="ignore"):
            frames[lo:hi] = fine @ avg_t
        flags[lo:hi] = fl
    return frames, flags


def lp_ntpet_forward(params: LpNtPetParams, cr: InputCurve, grid: TimeGrid) -> Tac:
    """Reference-tissue TAC with transient response, frame-averaged.

    The operational equation
        C(t) = r1*Cr(t) + k2*I[Cr](t) - k2a*I[C](t) - gamma*I[C h](t)
    (I = integral from 0) is stepped on the fine grid with the trapezoid
    rule, implicit in the newest point.

    Raises
    ------
    SingularStep
        If the algebraic step coefficient 1 + dt/2*(k2a + gamma*h) is <= 0.
    """
    frames, flags = _forward_frames_batch(params.as_array()[None, :], cr, grid)
    if flags[0]:
        raise SingularStep("implicit step coefficient <= 0; reduce sub_step")
    return Tac(grid, frames[0])


def read_tac_csv(path, sub_step: float = 0.1) -> Tac:
    """Read a TAC from CSV with header `t_start,t_end,value` (minutes)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t_start", "t_end", "value"]:
        raise FormatError(f"{path}: expected header 't_start,t_end,value'")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != 3 or data.shape[0] == 0:
        raise FormatError(f"{path}: expected rows of t_start,t_end,value")
    try:
        grid = TimeGrid(data[:, 0], data[:, 1], sub_step=sub_step)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return Tac(grid, data[:, 2])


def write_tac_csv(tac: Tac, path) -> None:
    """Write a TAC in the 3-column format; floats keep full precision."""
    with open(path, "w", newline="") as fh:
        fh.write("t_start,t_end,value\n")
        for a, b, v in zip(tac.grid.frame_starts, tac.grid.frame_ends, tac.values):
            fh.write(f"{float(a)!r},{float(b)!r},{float(v)!r}\n")
