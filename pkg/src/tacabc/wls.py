"""Weighted least squares estimation over a library of response timings.

For a fixed response timing the operational equation is linear in
(r1, k2, k2a, gamma), so those four are estimated by weighted least
squares; the timing itself is handled by brute force over a library of
sampled (t_d, t_p, alpha) triples, keeping the fit with the smallest
weighted residual sum of squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _blockfile
from .errors import FormatError, NoValidFit, RankDeficient
from .kinetics import (
    InputCurve,
    LpNtPetParams,
    ResponseTiming,
    Tac,
    TimeGrid,
    cum_integral,
)

__all__ = [
    "BasisLibrary",
    "WlsFit",
    "weights_from",
    "design_matrix",
    "wls_solve",
    "sample_timing_library",
    "build_basis_library",
    "wls_fit_grid",
    "grid_estimates_batch",
    "design_consistent_tac",
    "save_library",
    "load_library",
]

# Gram matrices with a condition number beyond this are treated as
# singular to working precision.
CONDITION_LIMIT = 1e12

WEIGHT_FLOOR_FRACTION = 1e-3

_MAX_CLAMP_ITERATIONS = 20


def weights_from(obs: Tac, floor_fraction: float = WEIGHT_FLOOR_FRACTION) -> np.ndarray:
    """Inverse-activity weights w = 1 / max(v, floor), floor = frac * max(v)."""
    v = obs.values
    vmax = float(v.max()) if v.size else 0.0
    floor = floor_fraction * vmax if vmax > 0 else 1.0
    return 1.0 / np.maximum(v, floor)


def _interp_matrix(fine_times: np.ndarray, mids: np.ndarray) -> np.ndarray:
    """Linear-interpolation operator from frame-midpoint values to the fine grid.

    Matches np.interp: constant extension outside the midpoint span.
    """
    idx = np.clip(np.searchsorted(mids, fine_times, side="right") - 1, 0, mids.size - 2)
    span = mids[idx + 1] - mids[idx]
    frac = np.clip((fine_times - mids[idx]) / span, 0.0, 1.0)
    p = np.zeros((fine_times.size, mids.size))
    rows = np.arange(fine_times.size)
    p[rows, idx] = 1.0 - frac
    p[rows, idx + 1] = frac
    return p


def _response_matrix(timings: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Response values for every timing row over a time vector, shape (n, len(times))."""
    td = timings[:, 0:1]
    tp = timings[:, 1:2]
    al = timings[:, 2:3]
    x = (times[None, :] - td) / (tp - td)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.exp(al * (np.log(x) + 1.0 - x))
    return np.where(x <= 0.0, 0.0, h)


def sample_timing_library(n: int, priors, seed: int) -> np.ndarray:
    """Draw n response timings (t_d, t_p, alpha) from the prior box.

    t_p is conditionally uniform between t_d + offset and the absolute
    upper bound, mirroring how the sampling box treats it.
    """
    rng = np.random.default_rng(seed)
    t_d = rng.uniform(priors.t_d[0], priors.t_d[1], n)
    t_p = rng.uniform(t_d + priors.t_p[0], priors.t_p[1], n)
    alpha = rng.uniform(priors.alpha[0], priors.alpha[1], n)
    return np.column_stack([t_d, t_p, alpha])


@dataclass
class BasisLibrary:
    """Design-matrix pieces for one observed TAC over a timing library.

    fixed_columns holds the three timing-independent columns evaluated at
    frame midpoints: reference activity, its running integral, and minus
    the running integral of the observed TAC.  response_columns holds,
    per timing, minus the running integral of (observed TAC * response).
    """

    timings: np.ndarray  # (n, 3)
    fixed_columns: np.ndarray  # (m, 3)
    response_columns: np.ndarray  # (n, m)
    curve_id: str = ""
    obs_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        n, m = self.response_columns.shape
        if self.timings.shape != (n, 3) or self.fixed_columns.shape != (m, 3):
            raise ValueError("inconsistent library shapes")


def build_basis_library(curve: InputCurve, obs: Tac, timings: np.ndarray,
                        seed: int | None = None) -> BasisLibrary:
    """Evaluate the design columns of the observed TAC for every timing."""
    grid = obs.grid
    fine = grid.fine_times
    cr_fine = curve.values_on(fine)
    mid_int = grid._mid_integral_matrix
    cr_mid = np.interp(grid.mids, fine, cr_fine)
    icr_mid = mid_int @ cr_fine
    ct_fine = np.interp(fine, grid.mids, obs.values)
    ict_mid = mid_int @ ct_fine
    fixed = np.column_stack([cr_mid, icr_mid, -ict_mid])
    h = _response_matrix(np.asarray(timings, dtype=float), fine)
    response = -(h * ct_fine) @ mid_int.T
    return BasisLibrary(
        timings=np.asarray(timings, dtype=float),
        fixed_columns=fixed,
        response_columns=response,
        curve_id=curve.name,
        obs_id=obs.digest(),
        seed=seed,
    )


def design_matrix(curve: InputCurve, obs: Tac, timing: ResponseTiming) -> np.ndarray:
    """Four design columns of the linearized operational equation.

    Columns at the frame midpoints t_j: reference activity, integral of
    reference activity, minus integral of the observed TAC, minus
    integral of observed TAC times response.  Integrals run from 0 and
    use the fine grid; the observed TAC is linearly interpolated.
    """
    lib = build_basis_library(curve, obs, np.array([[timing.t_d, timing.t_p, timing.alpha]]))
    return np.column_stack([lib.fixed_columns, lib.response_columns[0]])


def wls_solve(a: np.ndarray, weights: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve the weighted normal equations by Cholesky factorization.

    Returns (coefficients, weighted RSS).  Raises RankDeficient when the
    weighted Gram matrix is singular to working precision.
    """
    a = np.asarray(a, dtype=float)
    aw = a * weights[:, None]
    gram = a.T @ aw
    rhs = aw.T @ y
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise RankDeficient(f"normal system condition {cond:.3g} beyond {CONDITION_LIMIT:.0e}")
    try:
        coef = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - cond check fires first
        raise RankDeficient(str(exc)) from exc
    resid = y - a @ coef
    return coef, float(weights @ resid**2)


@dataclass
class WlsFit:
    """Best grid fit: coefficients (r1, k2, k2a, gamma), its timing, and RSS."""

    coefficients: np.ndarray
    timing: ResponseTiming
    timing_index: int
    weighted_rss: float

    def as_params(self) -> LpNtPetParams:
        r1, k2, k2a, gamma = (float(max(c, 0.0)) for c in self.coefficients)
        return LpNtPetParams(r1, k2, k2a, gamma, self.timing)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.coefficients, np.asarray(self.timing_as_row())])

    def timing_as_row(self) -> tuple[float, float, float]:
        return (self.timing.t_d, self.timing.t_p, self.timing.alpha)


def _solve_gram_batch(grams: np.ndarray, rhs: np.ndarray, nonneg: bool) -> tuple[np.ndarray, np.ndarray]:
    """Solve stacked 4x4 weighted normal systems; returns (x, valid mask).

    With nonneg, negative components are clamped to zero and the free
    components re-solved until sign-stable (at most a fixed number of
    passes); clamped entries never re-enter.
    """
    flat_g = grams.reshape(-1, 4, 4)
    flat_r = rhs.reshape(-1, 4)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(flat_g)
    valid = np.isfinite(cond) & (cond <= CONDITION_LIMIT)
    x = np.zeros_like(flat_r)
    if np.any(valid):
        # rhs as (B, 4, 1) so solve treats it as a stack of vectors
        x[valid] = np.linalg.solve(flat_g[valid], flat_r[valid][:, :, None])[:, :, 0]
    if nonneg:
        clamp = np.zeros((flat_g.shape[0], 4), dtype=bool)
        for _ in range(_MAX_CLAMP_ITERATIONS):
            neg = (x < 0) & ~clamp & valid[:, None]
            if not np.any(neg):
                break
            clamp |= neg
            gm = flat_g.copy()
            rm = flat_r.copy()
            for j in range(4):
                rows = clamp[:, j]
                gm[rows, j, :] = 0.0
                gm[rows, :, j] = 0.0
                gm[rows, j, j] = 1.0
                rm[rows, j] = 0.0
            with np.errstate(all="ignore"):
                cond = np.linalg.cond(gm)
            valid &= np.isfinite(cond) & (cond <= CONDITION_LIMIT)
            x = np.zeros_like(flat_r)
            if np.any(valid):
                x[valid] = np.linalg.solve(gm[valid], rm[valid][:, :, None])[:, :, 0]
        x[clamp] = 0.0
    x[~valid] = 0.0
    return x.reshape(rhs.shape), valid.reshape(rhs.shape[:-1])


def _rss_batch(grams: np.ndarray, rhs: np.ndarray, ywy, x: np.ndarray) -> np.ndarray:
    # weighted RSS = y'Wy - 2 x'b + x'Gx, broadcast over leading axes
    quad = np.einsum("...i,...ij,...j->...", x, grams, x)
    lin = np.einsum("...i,...i->...", x, rhs)
    return np.maximum(np.asarray(ywy) - 2.0 * lin + quad, 0.0)


def wls_fit_grid(obs: Tac, lib: BasisLibrary, nonneg: bool = False) -> WlsFit:
    """Fit every timing in the library, keep the smallest weighted RSS.

    Exact RSS ties resolve to the earliest library index.  Raises
    NoValidFit when every timing yields a singular system.
    """
    w = weights_from(obs)
    y = obs.values
    fixed = lib.fixed_columns
    resp = lib.response_columns
    fw = fixed * w[:, None]
    g33 = fixed.T @ fw
    g3r = fw.T @ resp.T  # (3, n)
    grr = (resp**2 * w).sum(axis=1)
    b3 = fw.T @ y
    br = resp @ (w * y)
    n = resp.shape[0]
    grams = np.empty((n, 4, 4))
    grams[:, :3, :3] = g33
    grams[:, :3, 3] = g3r.T
    grams[:, 3, :3] = g3r.T
    grams[:, 3, 3] = grr
    rhs = np.empty((n, 4))
    rhs[:, :3] = b3
    rhs[:, 3] = br
    x, valid = _solve_gram_batch(grams, rhs, nonneg)
    if not np.any(valid):
        raise NoValidFit("every timing in the library is singular for this TAC")
    rss = _rss_batch(grams, rhs, w @ y**2, x)
    rss[~valid] = np.inf
    best = int(np.argmin(rss))
    timing = ResponseTiming(*lib.timings[best])
    return WlsFit(x[best], timing, best, float(rss[best]))


def grid_estimates_batch(
    tacs: np.ndarray,
    grid: TimeGrid,
    curve: InputCurve,
    timings: np.ndarray,
    nonneg: bool = False,
    chunk: int = 128,
) -> np.ndarray:
    """Grid-fit coefficient 4-vectors for many TACs sharing one timing library.

    Row b of the result equals wls_fit_grid on tacs[b] with a library
    built from the same timings.  Vectorized across TACs and timings.
    """
    tacs = np.atleast_2d(np.asarray(tacs, dtype=float))
    timings = np.asarray(timings, dtype=float)
    fine = grid.fine_times
    mids = grid.mids
    cr_fine = curve.values_on(fine)
    mid_int = grid._mid_integral_matrix
    cr_mid = np.interp(mids, fine, cr_fine)
    icr_mid = mid_int @ cr_fine
    p_t = _interp_matrix(fine, mids).T  # (m, F)
    h = _response_matrix(timings, fine)  # (n, F)
    n_t = timings.shape[0]
    m = mids.size
    out = np.empty((tacs.shape[0], 4))
    for lo in range(0, tacs.shape[0], chunk):
        hi = min(lo + chunk, tacs.shape[0])
        y = tacs[lo:hi]
        b = y.shape[0]
        w = 1.0 / np.maximum(y, np.where(y.max(axis=1) > 0, WEIGHT_FLOOR_FRACTION * y.max(axis=1), 1.0)[:, None])
        fine_y = y @ p_t  # (b, F)
        ict = fine_y @ mid_int.T  # (b, m)
        f3 = np.empty((b, m, 3))
        f3[:, :, 0] = cr_mid
        f3[:, :, 1] = icr_mid
        f3[:, :, 2] = -ict
        # response columns: -integral of (interp TAC * response) up to mids
        c4 = -np.einsum("nf,bf,mf->bnm", h, fine_y, mid_int, optimize=True)
        f3w = f3 * w[:, :, None]
        g33 = np.einsum("bmi,bmj->bij", f3w, f3)
        g34 = np.einsum("bmi,bnm->bni", f3w, c4)
        g44 = np.einsum("bnm,bm,bnm->bn", c4, w, c4)
        b3 = np.einsum("bmi,bm->bi", f3w, y)
        b4 = np.einsum("bnm,bm->bn", c4, w * y)
        grams = np.empty((b, n_t, 4, 4))
        grams[:, :, :3, :3] = g33[:, None, :, :]
        grams[:, :, :3, 3] = g34
        grams[:, :, 3, :3] = g34
        grams[:, :, 3, 3] = g44
        rhs = np.empty((b, n_t, 4))
        rhs[:, :, :3] = b3[:, None, :]
        rhs[:, :, 3] = b4
        x, valid = _solve_gram_batch(grams, rhs, nonneg)
        if not np.all(np.any(valid, axis=1)):
            raise NoValidFit("a TAC in the batch has no valid timing")
        ywy = np.einsum("bm,bm->b", w, y**2)
        rss = _rss_batch(grams, rhs, ywy[:, None], x)
        rss[~valid] = np.inf
        best = np.argmin(rss, axis=1)
        out[lo:hi] = x[np.arange(b), best]
    return out


def design_consistent_tac(params: LpNtPetParams, curve: InputCurve, grid: TimeGrid) -> Tac:
    """A TAC that satisfies the linearized operational equation exactly.

    The design-matrix discretization treats frame values as midpoint
    samples and integrates their linear interpolant, so "frame values
    y with design A(y) such that A(y) @ (r1,k2,k2a,gamma) == y" is an
    affine fixed-point problem, solved here as one linear system.  Use
    this to validate estimator consistency; a frame-averaged fine-grid
    simulation only satisfies the same equation up to discretization
    error.
    """
    fine = grid.fine_times
    mids = grid.mids
    cr_fine = curve.values_on(fine)
    mid_int = grid._mid_integral_matrix
    cr_mid = np.interp(mids, fine, cr_fine)
    icr_mid = mid_int @ cr_fine
    p = _interp_matrix(fine, mids)
    h_fine = _response_matrix(
        np.array([[params.timing.t_d, params.timing.t_p, params.timing.alpha]]), fine
    )[0]
    m0 = mid_int @ p
    m1 = mid_int @ (h_fine[:, None] * p)
    lhs = np.eye(mids.size) + params.k2a * m0 + params.gamma * m1
    rhs = params.r1 * cr_mid + params.k2 * icr_mid
    return Tac(grid, np.linalg.solve(lhs, rhs))


def save_library(lib: BasisLibrary, path) -> None:
    """Persist a basis library; arrays round-trip bit-exactly."""
    header = {
        "kind": "basis_library",
        "curve_id": lib.curve_id,
        "obs_id": lib.obs_id,
        "seed": lib.seed,
        "n": int(lib.timings.shape[0]),
    }
    _blockfile.write_blocks(
        path,
        header,
        {
            "timings": lib.timings,
            "fixed_columns": lib.fixed_columns,
            "response_columns": lib.response_columns,
        },
    )


def load_library(path) -> BasisLibrary:
    header, arrays = _blockfile.read_blocks(path)
    if header.get("kind") != "basis_library":
        raise FormatError(f"{path}: not a basis library file")
    return BasisLibrary(
        timings=arrays["timings"],
        fixed_columns=arrays["fixed_columns"],
        response_columns=arrays["response_columns"],
        curve_id=header.get("curve_id", ""),
        obs_id=header.get("obs_id", ""),
        seed=header.get("seed"),
    )
