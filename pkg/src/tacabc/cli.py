"""Command line pipeline: simulate, cache, estimate, compare.

Seed streams: every subcommand derives its working seeds from the global
``--seed`` through ``noise.derive_seed(master, index)`` with fixed index
blocks, so the same master seed always reproduces the same files while
the streams for noise, cache sampling, timing libraries, MCMC and
predictive draws stay independent:

    noise realisation r   index 0x100000 + r
    cache sampling        index 0x200000
    timing library        index 0x300000
    MCMC chain r          index 0x400000 + r
    predictive draws      index 0x500000

Exit codes: 0 success, 2 usage errors, 3 data/format errors, 4 numeric
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .abc import (
    PosteriorSet,
    SimCache,
    UniformBox,
    abc_best_k,
    abc_reject,
    build_cache,
    default_priors,
    load_cache,
    narrow_sequence,
    percentile_tolerance,
    save_cache,
)
from .errors import (
    DegenerateFit,
    EmptyPosterior,
    EmptyPosteriorWarning,
    FormatError,
    GridMismatch,
    KindMismatch,
    MissingContext,
    NegativeActivity,
    NoValidFit,
    RankDeficient,
    SingularStep,
)
from .kinetics import (
    PARAM_NAMES,
    InputCurve,
    LpNtPetParams,
    Tac,
    TimeGrid,
    activation_preset,
    default_grid,
    input_curve_from_csv,
    lp_ntpet_forward,
    read_tac_csv,
    reference_input,
    write_tac_csv,
)
from .mcmc import GaussianErrorModel, rw_metropolis
from .noise import DEFAULT_NOISE_SCALES, NoiseLevel, apply_poisson, derive_seed
from .ppc import coverage, predictive_bands, write_bands_csv
from .summaries import SummaryContext, SummaryKind, summarize
from .wls import build_basis_library, sample_timing_library, wls_fit_grid

__all__ = ["main"]

_VERSION = "0.1.0"

_STREAM_NOISE = 0x100000
_STREAM_CACHE = 0x200000
_STREAM_TIMING = 0x300000
_STREAM_MCMC = 0x400000
_STREAM_PPC = 0x500000

_SCALE_DEFAULTS = {
    "desk": {"cache_n": 100_000, "best_k": 500, "library_n": 3_000, "realisations": 20},
    "paper": {"cache_n": 1_000_000, "best_k": 1_000, "library_n": 100_000, "realisations": 100},
}

_DEFAULT_CONFIG = {
    "activation": "200",
    "noise_level": 2,
    "n_frames": 60,
    "frame_minutes": 1.0,
    "sub_step": 0.1,
}

_KIND_CHOICES = [k.value for k in SummaryKind]

_DATA_ERRORS = (
    FormatError,
    FileNotFoundError,
    IsADirectoryError,
    NegativeActivity,
    GridMismatch,
    KindMismatch,
    MissingContext,
)
_NUMERIC_ERRORS = (SingularStep, RankDeficient, NoValidFit, EmptyPosterior, DegenerateFit)


@dataclass
class Scenario:
    """Config resolved into the objects the pipeline operates on."""

    grid: TimeGrid
    curve: InputCurve
    truth: LpNtPetParams
    noise: NoiseLevel
    priors: UniformBox
    config: dict


def _resolve_scenario(config: dict) -> Scenario:
    cfg = dict(_DEFAULT_CONFIG)
    cfg.update(config)
    grid = default_grid(
        n_frames=int(cfg["n_frames"]),
        frame_minutes=float(cfg["frame_minutes"]),
        sub_step=float(cfg["sub_step"]),
    )
    if "ref_curve_file" in cfg:
        curve = input_curve_from_csv(cfg["ref_curve_file"], kind="reference")
    else:
        curve = reference_input(**cfg.get("ref_curve", {}))
    if "truth" in cfg:
        truth = LpNtPetParams.from_array([cfg["truth"][n] for n in PARAM_NAMES])
    else:
        truth = activation_preset(str(cfg["activation"]))
    scales = None
    if "noise_scales" in cfg:
        scales = {int(k): float(v) for k, v in cfg["noise_scales"].items()}
    level = int(cfg["noise_level"])
    if level == 0:
        # degenerate noiseless scenario: infinite counts, noisy == clean
        noise = NoiseLevel(level=0, scale=math.inf)
    else:
        noise = NoiseLevel.from_level(level, scales)
    priors = UniformBox.from_dict(cfg["priors"]) if "priors" in cfg else default_priors()
    return Scenario(grid=grid, curve=curve, truth=truth, noise=noise, priors=priors, config=cfg)


def _scenario_dict(scen: Scenario) -> dict:
    return {
        "truth": {n: float(v) for n, v in zip(PARAM_NAMES, scen.truth.as_array())},
        "noise_level": int(scen.config["noise_level"]),
        "noise_scale": scen.noise.scale,
        "n_frames": int(scen.config["n_frames"]),
        "frame_minutes": float(scen.config["frame_minutes"]),
        "sub_step": float(scen.config["sub_step"]),
        "curve": scen.curve.name,
        "priors": scen.priors.to_dict(),
    }


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    scen: Scenario, outputs: list[str], extra: dict | None = None) -> Path:
    config_text = json.dumps(scen.config, sort_keys=True)
    manifest = {
        "tool": "tacabc",
        "version": _VERSION,
        "command": command,
        "seed": args.seed,
        "scale": args.scale,
        "config": scen.config,
        "config_digest": hashlib.sha256(config_text.encode()).hexdigest()[:16],
        "options": extra or {},
        "outputs": sorted(outputs),
    }
    path = out_dir / f"{command.replace('-', '_')}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _scale_default(args: argparse.Namespace, key: str) -> int:
    return _SCALE_DEFAULTS[args.scale][key]


def _load_obs(args: argparse.Namespace, scen: Scenario) -> Tac:
    obs = read_tac_csv(args.obs, sub_step=float(scen.config["sub_step"]))
    return obs


def _summary_kind(name: str) -> SummaryKind:
    return SummaryKind(name)


def _context_for(kind: SummaryKind, scen: Scenario, cache: SimCache | None = None,
                 timings: np.ndarray | None = None) -> SummaryContext | None:
    if kind is SummaryKind.SCALED:
        return SummaryContext(scale_hint=scen.noise.scale)
    if kind is SummaryKind.WLS_VECTOR:
        if timings is None and cache is not None:
            timings = cache.wls_timings
        if timings is None:
            raise MissingContext("WLS-vector summaries need a timing library")
        return SummaryContext(timings=timings, curve=scen.curve, grid=scen.grid)
    return None


# --- subcommands ----------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    clean = lp_ntpet_forward(scen.truth, scen.curve, scen.grid)
    noisy = apply_poisson(clean, scen.noise, derive_seed(args.seed, _STREAM_NOISE))
    write_tac_csv(clean, out_dir / "clean.csv")
    write_tac_csv(noisy, out_dir / "noisy.csv")
    scenario_path = out_dir / "scenario.json"
    scenario_path.write_text(json.dumps(_scenario_dict(scen), indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "simulate", args, scen,
                    ["clean.csv", "noisy.csv", "scenario.json"])
    print(f"wrote clean.csv and noisy.csv (noise scale {scen.noise.scale})")
    return 0


def cmd_cache(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    n = args.n if args.n is not None else _scale_default(args, "cache_n")
    kinds = tuple(_summary_kind(k.strip()) for k in args.kinds.split(","))
    ctx = None
    if SummaryKind.WLS_VECTOR in kinds:
        library_n = args.library_n if args.library_n is not None else _scale_default(args, "library_n")
        timings = sample_timing_library(library_n, scen.priors,
                                        derive_seed(args.seed, _STREAM_TIMING))
        ctx = SummaryContext(timings=timings, curve=scen.curve, grid=scen.grid)
    cache = build_cache(n, scen.priors, scen.curve, scen.grid, kinds,
                        seed=derive_seed(args.seed, _STREAM_CACHE), ctx=ctx)
    path = out_dir / args.cache_out
    save_cache(cache, path)
    _write_manifest(out_dir, "cache", args, scen, [args.cache_out],
                    {"n": n, "kinds": [k.value for k in kinds],
                     "n_resampled": cache.n_resampled})
    print(f"cached {cache.n} simulations ({cache.n_resampled} resampled) -> {path}")
    return 0


def cmd_abc(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    cache = load_cache(args.cache)
    obs = _load_obs(args, scen)
    if obs.grid.key() != cache.grid.key():
        raise GridMismatch("observed TAC and cache use different frame grids")
    kind = _summary_kind(args.kind)
    ctx = _context_for(kind, scen, cache=cache)
    obs_summary = summarize(obs, kind, ctx)
    if args.epsilon is not None:
        posterior = abc_reject(cache, obs_summary, args.epsilon)
        mode = {"epsilon": args.epsilon}
    elif args.quantile is not None:
        eps = percentile_tolerance(cache, obs_summary, args.quantile)
        posterior = abc_best_k(cache, obs_summary,
                               max(int(np.ceil(args.quantile * cache.n)), 1))
        mode = {"quantile": args.quantile, "epsilon": eps}
    else:
        k = args.best_k if args.best_k is not None else _scale_default(args, "best_k")
        posterior = abc_best_k(cache, obs_summary, k)
        mode = {"best_k": k, "epsilon": posterior.epsilon}
    posterior.to_jsonl(out_dir / args.posterior_out)
    _write_manifest(out_dir, "abc", args, scen, [args.posterior_out],
                    {"kind": kind.value, "cache_n": cache.n,
                     "accepted": posterior.n, **mode})
    print(f"accepted {posterior.n}/{cache.n} draws (epsilon {posterior.epsilon!r})")
    return 0


def cmd_wls(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    obs = _load_obs(args, scen)
    library_n = args.library_n if args.library_n is not None else _scale_default(args, "library_n")
    timings = sample_timing_library(library_n, scen.priors,
                                    derive_seed(args.seed, _STREAM_TIMING))
    lib = build_basis_library(scen.curve, obs, timings)
    fit = wls_fit_grid(obs, lib, nonneg=args.nonneg)
    estimate = {n: float(v) for n, v in zip(PARAM_NAMES, fit.as_array())}
    estimate["weighted_rss"] = fit.weighted_rss
    estimate["timing_index"] = fit.timing_index
    (out_dir / args.estimate_out).write_text(
        json.dumps(estimate, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "wls", args, scen, [args.estimate_out],
                    {"library_n": library_n, "nonneg": args.nonneg})
    print(f"WLS estimate written to {args.estimate_out} "
          f"(weighted RSS {fit.weighted_rss!r})")
    return 0


def _box_center(box: UniformBox) -> np.ndarray:
    b = box.bounds()
    center = 0.5 * (b[:, 0] + b[:, 1])
    t_d = center[4]
    off_lo, abs_hi = box.t_p
    center[5] = t_d + off_lo + 0.5 * (abs_hi - t_d - off_lo)
    return center


def cmd_mcmc(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    obs = _load_obs(args, scen)
    variance_scale = args.variance_scale
    if variance_scale is None:
        variance_scale = 1.0 / scen.noise.scale
    model = GaussianErrorModel(variance_scale=variance_scale)
    init = _box_center(scen.priors)
    result = rw_metropolis(obs, scen.curve, model, scen.priors, init,
                           n_steps=args.steps,
                           seed=derive_seed(args.seed, _STREAM_MCMC))
    result.to_jsonl(out_dir / args.chain_out)
    summary = result.summary()
    (out_dir / args.summary_out).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "mcmc", args, scen, [args.chain_out, args.summary_out],
                    {"steps": args.steps, "variance_scale": variance_scale})
    print(f"chain of {args.steps} steps, acceptance rate "
          f"{result.acceptance_rate:.3f}")
    return 0


def cmd_narrow(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    obs = _load_obs(args, scen)
    schedule = tuple(float(x) for x in args.schedule.split(","))
    if not schedule:
        raise FormatError("empty tolerance schedule")
    n = args.n if args.n is not None else _scale_default(args, "cache_n")
    kind = _summary_kind(args.kind)
    if kind is SummaryKind.WLS_VECTOR:
        library_n = args.library_n if args.library_n is not None \
            else _scale_default(args, "library_n")
        timings = sample_timing_library(library_n, scen.priors,
                                        derive_seed(args.seed, _STREAM_TIMING))
        ctx = SummaryContext(timings=timings, curve=scen.curve, grid=scen.grid)
    else:
        ctx = _context_for(kind, scen)
    stages = narrow_sequence(
        obs, kind, schedule, n, scen.curve, scen.priors,
        seed=args.seed, ctx=ctx,
        stage_seed=lambda s, i: derive_seed(s, _STREAM_CACHE + 1 + i),
    )
    payload = {
        "priors": scen.priors.to_dict(),
        "stages": [
            {"epsilon": st.epsilon, "n_accepted": st.n_accepted, "box": st.box.to_dict()}
            for st in stages
        ],
    }
    (out_dir / args.ranges_out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "narrow", args, scen, [args.ranges_out],
                    {"schedule": list(schedule), "n": n, "kind": kind.value})
    final = stages[-1].box.to_dict()
    print("final box: " + ", ".join(f"{k}=[{v[0]:.4g},{v[1]:.4g}]" for k, v in final.items()))
    return 0


def cmd_ppc(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    posterior = PosteriorSet.from_jsonl(args.posterior)
    noise = scen.noise if args.with_noise else None
    bands = predictive_bands(posterior, scen.curve, scen.grid, noise=noise,
                             seed=derive_seed(args.seed, _STREAM_PPC))
    write_bands_csv(bands, out_dir / args.bands_out)
    extra = {"n_draws": bands.n_draws, "with_noise": bool(args.with_noise)}
    if args.truth is not None:
        truth_tac = read_tac_csv(args.truth, sub_step=float(scen.config["sub_step"]))
        extra["coverage"] = coverage(bands, truth_tac)
        print(f"coverage of {args.truth}: {extra['coverage']:.3f}")
    _write_manifest(out_dir, "ppc", args, scen, [args.bands_out], extra)
    print(f"bands over {bands.n_draws} draws -> {args.bands_out}")
    return 0


def _estimate_abc(cache: SimCache, obs: Tac, kind: SummaryKind,
                  ctx: SummaryContext | None, k: int) -> np.ndarray:
    obs_summary = summarize(obs, kind, ctx)
    posterior = abc_best_k(cache, obs_summary, k)
    return posterior.thetas.mean(axis=0)


def _estimate_wls(curve: InputCurve, obs: Tac, timings: np.ndarray, nonneg: bool) -> np.ndarray:
    lib = build_basis_library(curve, obs, timings)
    return wls_fit_grid(obs, lib, nonneg=nonneg).as_array()


def _estimate_mcmc(obs: Tac, scen: Scenario, steps: int, seed: int) -> np.ndarray:
    model = GaussianErrorModel(variance_scale=1.0 / scen.noise.scale)
    result = rw_metropolis(obs, scen.curve, model, scen.priors,
                           _box_center(scen.priors), n_steps=steps, seed=seed)
    return result.chain[result.chain.shape[0] // 2 :].mean(axis=0)


def cmd_batch_compare(args: argparse.Namespace, scen: Scenario, out_dir: Path) -> int:
    methods = [m.strip().lower() for m in args.methods.split(",")]
    unknown = set(methods) - {"abc", "wls", "mcmc"}
    if unknown:
        raise FormatError(f"unknown methods: {sorted(unknown)}")
    n_real = args.realisations if args.realisations is not None \
        else _scale_default(args, "realisations")
    if n_real < 2:
        raise FormatError("batch-compare needs at least 2 realisations")
    kind = _summary_kind(args.kind)

    clean = lp_ntpet_forward(scen.truth, scen.curve, scen.grid)
    cache = None
    ctx = None
    if "abc" in methods:
        if args.cache is not None:
            cache = load_cache(args.cache)
            if cache.grid.key() != scen.grid.key():
                raise GridMismatch("cache grid does not match the scenario grid")
        else:
            cache_n = args.cache_n if args.cache_n is not None else _scale_default(args, "cache_n")
            build_ctx = None
            if kind is SummaryKind.WLS_VECTOR:
                library_n = args.library_n if args.library_n is not None \
                    else _scale_default(args, "library_n")
                build_ctx = SummaryContext(
                    timings=sample_timing_library(
                        library_n, scen.priors, derive_seed(args.seed, _STREAM_TIMING)),
                    curve=scen.curve, grid=scen.grid)
            cache = build_cache(cache_n, scen.priors, scen.curve, scen.grid, (kind,),
                                seed=derive_seed(args.seed, _STREAM_CACHE), ctx=build_ctx)
        ctx = _context_for(kind, scen, cache=cache)
    timings = None
    if "wls" in methods:
        library_n = args.library_n if args.library_n is not None \
            else _scale_default(args, "library_n")
        timings = sample_timing_library(library_n, scen.priors,
                                        derive_seed(args.seed, _STREAM_TIMING))
    best_k = args.best_k if args.best_k is not None else _scale_default(args, "best_k")

    estimates: dict[str, list[np.ndarray | None]] = {m: [] for m in methods}
    failures: dict[str, list[str]] = {m: [] for m in methods}
    for r in range(n_real):
        noisy = apply_poisson(clean, scen.noise, derive_seed(args.seed, _STREAM_NOISE + r))
        for m in methods:
            try:
                if m == "abc":
                    est = _estimate_abc(cache, noisy, kind, ctx, best_k)
                elif m == "wls":
                    est = _estimate_wls(scen.curve, noisy, timings, args.nonneg)
                else:
                    est = _estimate_mcmc(noisy, scen, args.steps,
                                         derive_seed(args.seed, _STREAM_MCMC + r))
                estimates[m].append(est)
                failures[m].append("")
            except _NUMERIC_ERRORS + (ValueError,) as exc:
                estimates[m].append(None)
                failures[m].append(type(exc).__name__)

    truth = scen.truth.as_array()
    lines = ["method,parameter,realisation,value,status"]
    for i, name in enumerate(PARAM_NAMES):
        lines.append(f"truth,{name},,{float(truth[i])!r},")
    for m in methods:
        for r in range(n_real):
            est = estimates[m][r]
            for i, name in enumerate(PARAM_NAMES):
                if est is None:
                    lines.append(f"{m},{name},{r},,error:{failures[m][r]}")
                else:
                    lines.append(f"{m},{name},{r},{float(est[i])!r},ok")
        ok = [e for e in estimates[m] if e is not None]
        if len(ok) >= 2:
            arr = np.array(ok)
            bias = arr.mean(axis=0) - truth
            var = arr.var(axis=0, ddof=1)
            for i, name in enumerate(PARAM_NAMES):
                lines.append(f"{m},{name},bias,{float(bias[i])!r},aggregate")
                lines.append(f"{m},{name},variance,{float(var[i])!r},aggregate")
    report_path = out_dir / args.report_out
    report_path.write_text("\n".join(lines) + "\n")
    _write_manifest(out_dir, "batch-compare", args, scen, [args.report_out],
                    {"methods": methods, "realisations": n_real, "kind": kind.value,
                     "best_k": best_k if "abc" in methods else None,
                     "cache_n": cache.n if cache is not None else None})
    n_failed = sum(1 for m in methods for s in failures[m] if s)
    print(f"report over {n_real} realisations -> {args.report_out}"
          + (f" ({n_failed} method runs failed)" if n_failed else ""))
    return 0


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tacabc",
        description="Simulate PET time-activity curves and estimate kinetic "
                    "parameters by cached ABC, WLS and MCMC.",
    )
    parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file overriding scenario defaults")
    parser.add_argument("--out", type=Path, default=Path("."),
                        help="output directory (default current)")
    parser.add_argument("--scale", choices=("desk", "paper"), default="desk",
                        help="size presets for caches, libraries and realisations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write clean and noisy preset TACs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cache", help="build a simulation cache from the priors")
    p.add_argument("--n", type=int, default=None, help="cache size (default from --scale)")
    p.add_argument("--kinds", default="spline,raw",
                   help="comma-separated summary kinds to precompute "
                        f"(choices: {','.join(_KIND_CHOICES)})")
    p.add_argument("--library-n", type=int, default=None,
                   help="timing library size for wls summaries")
    p.add_argument("--cache-out", default="cache.bin")
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("abc", help="rejection ABC against a cache")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--kind", choices=_KIND_CHOICES, default="spline")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--epsilon", type=float, default=None,
                       help="fixed tolerance (inf accepts everything)")
    group.add_argument("--best-k", type=int, default=None,
                       help="keep the k closest draws (default from --scale)")
    group.add_argument("--quantile", type=float, default=None,
                       help="keep the closest fraction q of draws")
    p.add_argument("--posterior-out", default="posterior.jsonl")
    p.set_defaults(func=cmd_abc)

    p = sub.add_parser("wls", help="weighted least squares over a timing library")
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--library-n", type=int, default=None)
    p.add_argument("--nonneg", action="store_true",
                   help="clamp negative coefficients during the fit")
    p.add_argument("--estimate-out", default="wls_estimate.json")
    p.set_defaults(func=cmd_wls)

    p = sub.add_parser("mcmc", help="random-walk Metropolis baseline")
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--variance-scale", type=float, default=None,
                   help="Gaussian frame variance per unit activity "
                        "(default 1/noise scale)")
    p.add_argument("--chain-out", default="chain.jsonl")
    p.add_argument("--summary-out", default="mcmc_summary.json")
    p.set_defaults(func=cmd_mcmc)

    p = sub.add_parser("narrow", help="iterative sampling-range narrowing")
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--schedule", default="200,50,10",
                   help="comma-separated decreasing tolerances")
    p.add_argument("--n", type=int, default=None, help="cache size per stage")
    p.add_argument("--kind", choices=_KIND_CHOICES, default="spline")
    p.add_argument("--library-n", type=int, default=None)
    p.add_argument("--ranges-out", default="narrow.json")
    p.set_defaults(func=cmd_narrow)

    p = sub.add_parser("ppc", help="posterior predictive bands")
    p.add_argument("--posterior", type=Path, required=True)
    p.add_argument("--with-noise", action="store_true",
                   help="add scenario-level count noise to each draw")
    p.add_argument("--truth", type=Path, default=None,
                   help="clean TAC to report band coverage against")
    p.add_argument("--bands-out", default="bands.csv")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("batch-compare", help="method comparison over noise realisations")
    p.add_argument("--methods", default="abc,wls",
                   help="comma-separated subset of abc,wls,mcmc")
    p.add_argument("--realisations", type=int, default=None)
    p.add_argument("--kind", choices=_KIND_CHOICES, default="spline")
    p.add_argument("--cache", type=Path, default=None,
                   help="reuse an existing cache instead of building one")
    p.add_argument("--cache-n", type=int, default=None)
    p.add_argument("--best-k", type=int, default=None)
    p.add_argument("--library-n", type=int, default=None)
    p.add_argument("--nonneg", action="store_true")
    p.add_argument("--steps", type=int, default=20_000,
                   help="MCMC steps per realisation")
    p.add_argument("--report-out", default="report.csv")
    p.set_defaults(func=cmd_batch_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = {}
        if args.config is not None:
            try:
                config = json.loads(Path(args.config).read_text())
            except json.JSONDecodeError as exc:
                raise FormatError(f"{args.config}: invalid JSON ({exc})") from exc
            if not isinstance(config, dict):
                raise FormatError(f"{args.config}: config must be a JSON object")
        scen = _resolve_scenario(config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("always", EmptyPosteriorWarning)
            return args.func(args, scen, out_dir)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # bad values in configs or options (unknown noise level, k > cache size)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
