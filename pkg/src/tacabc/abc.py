"""Cached rejection ABC with tolerance selection and range narrowing.

One simulation cache (parameter draws, their TACs, their summaries) is
built per sampling box and reused across every observed TAC estimated
against it; estimating more voxels never re-runs the forward model.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _blockfile
from .errors import (
    EmptyPosterior,
    EmptyPosteriorWarning,
    FormatError,
    KindMismatch,
    MissingContext,
)
from .kinetics import (
    PARAM_NAMES,
    InputCurve,
    TimeGrid,
    Tac,
    _forward_frames_batch,
)
from .summaries import SummaryContext, SummaryKind, SummaryVector, summarize
from .wls import grid_estimates_batch

__all__ = [
    "UniformBox",
    "default_priors",
    "SimCache",
    "PosteriorSet",
    "build_cache",
    "save_cache",
    "load_cache",
    "abc_reject",
    "abc_best_k",
    "percentile_tolerance",
    "narrow_ranges",
    "narrow_sequence",
    "nearest_rank",
    "NarrowingStage",
]


@dataclass(frozen=True)
class UniformBox:
    """Independent uniform ranges for the seven model parameters.

    Order everywhere is (r1, k2, k2a, gamma, t_d, t_p, alpha).  The t_p
    entry is special: its lower bound is an offset above the sampled t_d
    (peak must trail onset), its upper bound is absolute.
    """

    r1: tuple[float, float]
    k2: tuple[float, float]
    k2a: tuple[float, float]
    gamma: tuple[float, float]
    t_d: tuple[float, float]
    t_p: tuple[float, float]
    alpha: tuple[float, float]

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if name == "t_p":
                continue
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound exceeds upper")
        if self.t_p[0] < 0:
            raise ValueError("t_p offset must be non-negative")
        if self.t_d[1] + self.t_p[0] > self.t_p[1]:
            raise ValueError("t_p upper bound leaves no room above t_d + offset")

    def bounds(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n parameter rows; t_p is conditionally uniform given t_d."""
        cols = []
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if name == "t_p":
                t_d = cols[PARAM_NAMES.index("t_d")]
                cols.append(rng.uniform(t_d + lo, hi, n))
            else:
                cols.append(rng.uniform(lo, hi, n))
        return np.column_stack(cols)

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        ok = np.ones(thetas.shape[0], dtype=bool)
        for i, name in enumerate(PARAM_NAMES):
            lo, hi = getattr(self, name)
            if name == "t_p":
                ok &= (thetas[:, i] >= thetas[:, 4] + lo) & (thetas[:, i] <= hi)
            else:
                ok &= (thetas[:, i] >= lo) & (thetas[:, i] <= hi)
        return ok

    def to_unit(self, thetas: np.ndarray) -> np.ndarray:
        """Map samples onto [0,1]^7; t_p through its conditional range."""
        thetas = np.atleast_2d(thetas)
        out = np.empty_like(thetas, dtype=float)
        for i, name in enumerate(PARAM_NAMES):
            lo, hi = getattr(self, name)
            if name == "t_p":
                low = thetas[:, 4] + lo
                out[:, i] = (thetas[:, i] - low) / (hi - low)
            else:
                width = hi - lo
                out[:, i] = (thetas[:, i] - lo) / width if width > 0 else 0.5
        return out

    def widths(self) -> np.ndarray:
        """Per-parameter range widths; for t_p the widest conditional range."""
        w = self.bounds()[:, 1] - self.bounds()[:, 0]
        w[5] = self.t_p[1] - (self.t_d[0] + self.t_p[0])
        return w

    def contained_in(self, other: "UniformBox") -> bool:
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            olo, ohi = getattr(other, name)
            if name == "t_p":
                if lo < olo or hi > ohi:
                    return False
            elif lo < olo or hi > ohi:
                return False
        return True

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "UniformBox":
        return cls(**{name: tuple(float(x) for x in d[name]) for name in PARAM_NAMES})


def default_priors() -> UniformBox:
    """The sampling ranges used throughout: wide uniforms, late onset window."""
    return UniformBox(
        r1=(0.0, 20.0),
        k2=(0.0, 10.0),
        k2a=(0.0, 10.0),
        gamma=(0.0, 5.0),
        t_d=(15.0, 25.0),
        t_p=(1.0, 35.0),  # offset above t_d, absolute ceiling
        alpha=(0.0, 25.0),
    )


@dataclass
class SimCache:
    """Forward-simulated parameter draws with their frame TACs and summaries."""

    thetas: np.ndarray
    tacs: np.ndarray
    summaries: dict[SummaryKind, np.ndarray]
    grid: TimeGrid
    box: UniformBox
    seed: int
    curve_id: str = ""
    n_resampled: int = 0
    wls_timings: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.thetas.shape[0]


def build_cache(
    n: int,
    box: UniformBox,
    curve: InputCurve,
    grid: TimeGrid,
    kinds: tuple[SummaryKind, ...] = (SummaryKind.RAW,),
    seed: int = 0,
    ctx: SummaryContext | None = None,
) -> SimCache:
    """Sample n parameter rows from the box and simulate each one once.

    Rows whose forward solve hits a singular step are resampled from the
    same stream until the cache holds exactly n valid entries.  Summary
    matrices are computed for every requested kind; the WLS-vector kind
    needs ctx.timings.
    """
    if n <= 0:
        raise ValueError("cache size must be positive")
    rng = np.random.default_rng(seed)
    thetas = box.sample(rng, n)
    frames, flags = _forward_frames_batch(thetas, curve, grid)
    # divergent-but-unflagged solutions (overflow to inf) are just as
    # unusable as singular steps; resample those rows too
    bad_mask = (flags != 0) | ~np.all(np.isfinite(frames), axis=1)
    n_resampled = 0
    while np.any(bad_mask):
        bad = np.flatnonzero(bad_mask)
        n_resampled += bad.size
        thetas[bad] = box.sample(rng, bad.size)
        frames[bad], flags_bad = _forward_frames_batch(thetas[bad], curve, grid)
        bad_mask[bad] = (flags_bad != 0) | ~np.all(np.isfinite(frames[bad]), axis=1)

    summaries: dict[SummaryKind, np.ndarray] = {}
    for kind in kinds:
        if kind in (SummaryKind.RAW, SummaryKind.SCALED):
            summaries[kind] = frames
        elif kind is SummaryKind.SPLINE:
            from .summaries import _smoother_for

            summaries[kind] = _smoother_for(grid).fit_batch(frames)[0]
        elif kind is SummaryKind.WLS_VECTOR:
            if ctx is None or ctx.timings is None:
                raise MissingContext("building WLS-vector summaries needs ctx.timings")
            summaries[kind] = grid_estimates_batch(
                frames, grid, curve, ctx.timings, nonneg=ctx.nonneg
            )
        else:
            raise KindMismatch(f"unknown summary kind {kind!r}")
    return SimCache(
        thetas=thetas,
        tacs=frames,
        summaries=summaries,
        grid=grid,
        box=box,
        seed=seed,
        curve_id=curve.name,
        n_resampled=n_resampled,
        wls_timings=None if ctx is None else ctx.timings,
    )


def save_cache(cache: SimCache, path) -> None:
    header = {
        "kind": "sim_cache",
        "seed": cache.seed,
        "n": cache.n,
        "curve_id": cache.curve_id,
        "grid_key": cache.grid.key(),
        "box": cache.box.to_dict(),
        "n_resampled": cache.n_resampled,
        "summary_kinds": [k.value for k in cache.summaries],
        "sub_step": cache.grid.sub_step,
    }
    arrays = {
        "thetas": cache.thetas,
        "tacs": cache.tacs,
        "frame_starts": cache.grid.frame_starts,
        "frame_ends": cache.grid.frame_ends,
    }
    for kind, mat in cache.summaries.items():
        arrays[f"summary_{kind.value}"] = mat
    if cache.wls_timings is not None:
        arrays["wls_timings"] = cache.wls_timings
    _blockfile.write_blocks(path, header, arrays)


def load_cache(path) -> SimCache:
    header, arrays = _blockfile.read_blocks(path)
    if header.get("kind") != "sim_cache":
        raise FormatError(f"{path}: not a simulation cache")
    grid = TimeGrid(arrays["frame_starts"], arrays["frame_ends"], header["sub_step"])
    summaries = {
        SummaryKind(v): arrays[f"summary_{v}"] for v in header["summary_kinds"]
    }
    return SimCache(
        thetas=arrays["thetas"],
        tacs=arrays["tacs"],
        summaries=summaries,
        grid=grid,
        box=UniformBox.from_dict(header["box"]),
        seed=header["seed"],
        curve_id=header.get("curve_id", ""),
        n_resampled=header.get("n_resampled", 0),
        wls_timings=arrays.get("wls_timings"),
    )


@dataclass
class PosteriorSet:
    """Accepted parameter rows with their summary distances."""

    thetas: np.ndarray
    distances: np.ndarray
    epsilon: float
    kind: SummaryKind | None = None

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for theta, d in zip(self.thetas, self.distances):
                row = {name: float(v) for name, v in zip(PARAM_NAMES, theta)}
                fh.write(json.dumps({"theta": row, "distance": float(d)}) + "\n")

    @classmethod
    def from_jsonl(cls, path, kind: SummaryKind | None = None,
                   epsilon: float | None = None) -> "PosteriorSet":
        thetas, dists = [], []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    thetas.append([row["theta"][name] for name in PARAM_NAMES])
                    dists.append(row["distance"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise FormatError(f"{path}: bad posterior line ({exc})") from exc
        thetas = np.array(thetas, dtype=float).reshape(len(thetas), len(PARAM_NAMES))
        dists = np.array(dists, dtype=float)
        if epsilon is None:
            epsilon = float(dists.max()) if dists.size else math.inf
        return cls(thetas, dists, epsilon, kind)


def _distance_vector(cache: SimCache, obs: SummaryVector) -> np.ndarray:
    """L1 distance from the observed summary to every cache entry."""
    if obs.kind not in cache.summaries:
        raise KindMismatch(f"cache holds no {obs.kind} summaries")
    sims = cache.summaries[obs.kind]
    if sims.shape[1] != obs.values.size:
        raise KindMismatch("cache summaries and observed summary differ in length")
    diff = np.abs(sims - obs.values)
    if obs.kind is SummaryKind.SCALED:
        if obs.scales is None:
            raise MissingContext("scaled distances need scales on the observed summary")
        diff = diff / obs.scales
    return diff.sum(axis=1)


def abc_reject(cache: SimCache, obs: SummaryVector, epsilon: float) -> PosteriorSet:
    """Keep every cache entry with summary distance strictly below epsilon.

    An empty result is returned (with a warning), not raised; downstream
    consumers that need samples raise EmptyPosterior themselves.
    """
    d = _distance_vector(cache, obs)
    keep = np.flatnonzero(d < epsilon)
    if keep.size == 0:
        warnings.warn("no cache entry within tolerance", EmptyPosteriorWarning, stacklevel=2)
    return PosteriorSet(cache.thetas[keep].copy(), d[keep].copy(), float(epsilon), obs.kind)


def abc_best_k(cache: SimCache, obs: SummaryVector, k: int) -> PosteriorSet:
    """Keep the k entries with the smallest distances (ties: cache order).

    The reported epsilon is the largest retained distance.
    """
    if not 0 < k <= cache.n:
        raise ValueError(f"k must be in [1, {cache.n}]")
    d = _distance_vector(cache, obs)
    order = np.argsort(d, kind="stable")[:k]
    return PosteriorSet(
        cache.thetas[order].copy(), d[order].copy(), float(d[order[-1]]), obs.kind
    )


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest of pre-sorted values."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    n = sorted_values.size
    if n == 0:
        raise ValueError("no values")
    rank = min(max(int(math.ceil(q * n)), 1), n)
    return float(sorted_values[rank - 1])


def percentile_tolerance(cache: SimCache, obs: SummaryVector, q: float) -> float:
    """The tolerance that would accept roughly a fraction q of the cache."""
    return nearest_rank(np.sort(_distance_vector(cache, obs)), q)


def narrow_ranges(box: UniformBox, posterior: PosteriorSet, priors: UniformBox) -> UniformBox:
    """Shrink the box to the span of the accepted samples, inside the priors.

    Each parameter's new range is [min, max] over accepted values
    intersected with the prior range; t_p is narrowed on its conditional
    scale (the offset above t_d) with an absolute upper bound.
    """
    if posterior.n == 0:
        raise EmptyPosterior("cannot narrow on an empty posterior")
    th = posterior.thetas
    new = {}
    for i, name in enumerate(PARAM_NAMES):
        plo, phi = getattr(priors, name)
        if name == "t_p":
            offsets = th[:, 5] - th[:, 4]
            new[name] = (max(float(offsets.min()), plo), min(float(th[:, 5].max()), phi))
        else:
            new[name] = (max(float(th[:, i].min()), plo), min(float(th[:, i].max()), phi))
    return UniformBox(**new)


@dataclass
class NarrowingStage:
    epsilon: float
    n_accepted: int
    box: UniformBox


def narrow_sequence(
    obs: Tac,
    kind: SummaryKind,
    schedule: tuple[float, ...],
    n_per_stage: int,
    curve: InputCurve,
    priors: UniformBox,
    seed: int = 0,
    ctx: SummaryContext | None = None,
    stage_seed: "callable" = None,
) -> list[NarrowingStage]:
    """Run the tolerance schedule, re-sampling each stage from the last box.

    Every stage builds a fresh cache from the current box, rejects at the
    stage tolerance and narrows.  Raises EmptyPosterior if a stage
    accepts nothing (the schedule cannot continue).
    """
    obs_summary = summarize(obs, kind, ctx)
    box = priors
    stages: list[NarrowingStage] = []
    for i, eps in enumerate(schedule):
        s = seed + i if stage_seed is None else stage_seed(seed, i)
        cache = build_cache(n_per_stage, box, curve, obs.grid, (kind,), seed=s, ctx=ctx)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyPosteriorWarning)
            post = abc_reject(cache, obs_summary, eps)
        if post.n == 0:
            raise EmptyPosterior(f"schedule stage epsilon={eps} accepted nothing")
        box = narrow_ranges(box, post, priors)
        stages.append(NarrowingStage(epsilon=float(eps), n_accepted=post.n, box=box))
    return stages
