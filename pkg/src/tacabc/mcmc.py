"""Random-walk Metropolis over the seven kinetic parameters.

The likelihood is Gaussian per frame with variance proportional to the
observed activity (floored away from zero), matching the count-noise
scaling used elsewhere.  The prior is the sampling box; proposals that
leave the box are rejected outright.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .abc import UniformBox
from .kinetics import (
    PARAM_NAMES,
    InputCurve,
    Tac,
    _forward_fine_batch,
)
from .wls import WEIGHT_FLOOR_FRACTION

__all__ = [
    "GaussianErrorModel",
    "frame_variances",
    "log_likelihood",
    "default_step_sizes",
    "rw_metropolis",
    "McmcResult",
]


@dataclass(frozen=True)
class GaussianErrorModel:
    """Frame variance = variance_scale * max(observed, floor).

    The floor is floor_fraction times the observed maximum, keeping the
    variance positive on empty early frames.  An infinite variance_scale
    makes the likelihood flat, which turns the sampler into a prior
    sampler (no forward model runs at all in that case).
    """

    variance_scale: float
    floor_fraction: float = WEIGHT_FLOOR_FRACTION

    def __post_init__(self):
        if not self.variance_scale > 0:
            raise ValueError("variance_scale must be positive")
        if not 0 < self.floor_fraction <= 1:
            raise ValueError("floor_fraction must be in (0, 1]")


def frame_variances(model: GaussianErrorModel, obs: Tac) -> np.ndarray:
    v = obs.values
    top = v.max()
    floor = model.floor_fraction * top if top > 0 else 1.0
    return model.variance_scale * np.maximum(v, floor)


def log_likelihood(obs: Tac, model_values: np.ndarray, model: GaussianErrorModel) -> float:
    """Gaussian log density of the observed frames around the model curve."""
    var = frame_variances(model, obs)
    resid = obs.values - model_values
    return float(-0.5 * np.sum(resid * resid / var + np.log(2.0 * math.pi * var)))


def default_step_sizes(box: UniformBox, fraction: float = 0.05) -> np.ndarray:
    """Proposal standard deviations: a fixed fraction of each range width."""
    return fraction * box.widths()


@dataclass
class McmcResult:
    chain: np.ndarray  # (n_steps + 1, 7) including the initial state
    acceptance_rate: float

    @property
    def n_steps(self) -> int:
        return self.chain.shape[0] - 1

    def summary(self) -> dict:
        """Acceptance rate plus per-parameter mean/SD over the second half.

        The first half is discarded as burn-in; with slowly mixing chains
        the halves can still differ, which is informative in itself.
        """
        half = self.chain[self.chain.shape[0] // 2 :]
        stats = {
            name: {
                "mean": float(half[:, i].mean()),
                "sd": float(half[:, i].std(ddof=1)) if half.shape[0] > 1 else 0.0,
            }
            for i, name in enumerate(PARAM_NAMES)
        }
        return {
            "acceptance_rate": self.acceptance_rate,
            "n_steps": self.n_steps,
            "parameters": stats,
        }

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.chain:
                fh.write(json.dumps({n: float(v) for n, v in zip(PARAM_NAMES, row)}) + "\n")


def _log_prior(theta: np.ndarray, box: UniformBox) -> float:
    """Log density of the box prior at theta (up to the fixed constants).

    Only the t_p factor depends on theta: its conditional width varies
    with t_d, so flat-in-box is not flat in joint density.
    """
    if not box.contains(theta[None])[0]:
        return -math.inf
    width = box.t_p[1] - (theta[4] + box.t_p[0])
    if width <= 0:
        return -math.inf
    return -math.log(width)


def rw_metropolis(
    obs: Tac,
    curve: InputCurve,
    error_model: GaussianErrorModel,
    box: UniformBox,
    init: np.ndarray,
    n_steps: int,
    step_sizes: np.ndarray | None = None,
    seed: int = 0,
) -> McmcResult:
    """Symmetric Gaussian random-walk Metropolis; returns the full chain.

    A parameter can be held fixed by passing a zero step size for it.
    Proposals with a failing forward solve are rejected like any other
    bad move.
    """
    init = np.asarray(init, dtype=float).reshape(-1)
    if init.size != len(PARAM_NAMES):
        raise ValueError(f"init must have {len(PARAM_NAMES)} entries")
    if not box.contains(init[None])[0]:
        raise ValueError("initial state lies outside the box")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if step_sizes is None:
        step_sizes = default_step_sizes(box)
    step_sizes = np.asarray(step_sizes, dtype=float).reshape(-1)
    if step_sizes.size != len(PARAM_NAMES) or np.any(step_sizes < 0):
        raise ValueError("step_sizes must be 7 non-negative values")

    grid = obs.grid
    fine = grid.fine_times
    cr_fine = curve.values_on(fine)
    from scipy.integrate import cumulative_trapezoid

    icr_fine = cumulative_trapezoid(cr_fine, fine, initial=0.0)
    avg = grid._avg_matrix
    flat = math.isinf(error_model.variance_scale)

    def frames_for(theta: np.ndarray) -> np.ndarray | None:
        out, flags = _forward_fine_batch(theta[None], cr_fine, icr_fine, fine)
        if flags[0]:
            return None
        return avg @ out[0]

    rng = np.random.default_rng(seed)
    theta = init.copy()
    cur_lp = _log_prior(theta, box)
    if flat:
        cur_ll = 0.0
    else:
        cur_frames = frames_for(theta)
        if cur_frames is None:
            raise ValueError("forward solve fails at the initial state")
        cur_ll = log_likelihood(obs, cur_frames, error_model)

    chain = np.empty((n_steps + 1, len(PARAM_NAMES)))
    chain[0] = theta
    accepted = 0
    for step in range(n_steps):
        prop = theta + rng.normal(0.0, step_sizes)
        prop_lp = _log_prior(prop, box)
        if math.isfinite(prop_lp):
            if flat:
                prop_ll = 0.0
            else:
                frames = frames_for(prop)
                prop_ll = -math.inf if frames is None else log_likelihood(
                    obs, frames, error_model
                )
            log_ratio = (prop_ll + prop_lp) - (cur_ll + cur_lp)
            if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
                theta, cur_ll, cur_lp = prop, prop_ll, prop_lp
                accepted += 1
        chain[step + 1] = theta
    rate = accepted / n_steps if n_steps else 0.0
    return McmcResult(chain=chain, acceptance_rate=rate)
