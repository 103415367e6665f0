"""End-to-end command line tests.

Everything here drives `main(argv)` in process and inspects the files it
leaves behind; nothing shells out.
"""

import hashlib
import json
import math

import numpy as np
import pytest

import tacabc.cli as cli
from tacabc.abc import PosteriorSet, UniformBox, default_priors, load_cache
from tacabc.errors import NoValidFit, SmallPosteriorWarning
from tacabc.kinetics import (
    PARAM_NAMES,
    activation_preset,
    default_grid,
    lp_ntpet_forward,
    read_tac_csv,
    reference_input,
)

MANIFEST_KEYS = {
    "tool", "version", "command", "seed", "scale",
    "config", "config_digest", "options", "outputs",
}


def run(*args):
    return cli.main([str(a) for a in args])


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return path


def read_report(path):
    lines = path.read_text().splitlines()
    return lines[0], [line.split(",") for line in lines[1:]]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("--seed", 0, "--out", out, "simulate") == 0
    return out


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cachecmd")
    assert run("--seed", 0, "--out", out, "cache", "--n", 400) == 0
    return out


class TestSimulate:
    def test_writes_expected_files(self, sim_dir):
        for name in ("clean.csv", "noisy.csv", "scenario.json", "simulate_manifest.json"):
            assert (sim_dir / name).is_file()

    def test_clean_matches_forward_model(self, sim_dir):
        tac = read_tac_csv(sim_dir / "clean.csv")
        assert tac.grid.n_frames == 60
        assert np.array_equal(tac.grid.frame_starts, np.arange(60.0))
        assert np.array_equal(tac.grid.frame_ends, np.arange(1.0, 61.0))
        expected = lp_ntpet_forward(activation_preset("200"), reference_input(), default_grid())
        # repr round-trips floats exactly, so the file is bit-faithful
        assert np.array_equal(tac.values, expected.values)

    def test_scenario_records_truth(self, sim_dir):
        scen = json.loads((sim_dir / "scenario.json").read_text())
        truth = activation_preset("200").as_array()
        assert [scen["truth"][n] for n in PARAM_NAMES] == [float(v) for v in truth]
        assert scen["noise_level"] == 2
        assert scen["noise_scale"] == 1.0

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        assert run("--seed", 0, "--out", tmp_path, "simulate") == 0
        for name in ("clean.csv", "noisy.csv", "scenario.json", "simulate_manifest.json"):
            assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()

    def test_different_seed_changes_noise_only(self, sim_dir, tmp_path):
        assert run("--seed", 1, "--out", tmp_path, "simulate") == 0
        assert (tmp_path / "clean.csv").read_bytes() == (sim_dir / "clean.csv").read_bytes()
        assert (tmp_path / "noisy.csv").read_bytes() != (sim_dir / "noisy.csv").read_bytes()

    def test_noise_has_zero_mean_across_seeds(self, sim_dir, tmp_path):
        clean = read_tac_csv(sim_dir / "clean.csv").values
        diffs = []
        for seed in range(100):
            assert run("--seed", seed, "--out", tmp_path, "simulate") == 0
            diffs.append(read_tac_csv(tmp_path / "noisy.csv").values - clean)
        diffs = np.concatenate(diffs)
        z = abs(diffs.mean()) / (diffs.std(ddof=1) / math.sqrt(diffs.size))
        assert z < 3.0

    def test_zero_noise_level_is_deterministic(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"noise_level": 0})
        assert run("--config", cfg, "--out", tmp_path, "simulate") == 0
        assert (tmp_path / "noisy.csv").read_bytes() == (tmp_path / "clean.csv").read_bytes()
        scen = json.loads((tmp_path / "scenario.json").read_text())
        assert scen["noise_scale"] == math.inf


class TestUsageErrors:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 2

    def test_missing_required_option_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run("abc")
        assert exc.value.code == 2

    def test_exclusive_abc_modes_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("--out", tmp_path, "abc", "--cache", "c.bin", "--obs", "o.csv",
                "--epsilon", 1.0, "--best-k", 5)
        assert exc.value.code == 2

    def test_invalid_kind_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("--out", tmp_path, "abc", "--cache", "c.bin", "--obs", "o.csv",
                "--kind", "wavelet")
        assert exc.value.code == 2

    def test_config_must_be_json(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("not json at all")
        assert run("--config", bad, "--out", tmp_path, "simulate") == 3

    def test_config_must_be_an_object(self, tmp_path):
        bad = write_config(tmp_path / "cfg.json", [1, 2, 3])
        assert run("--config", bad, "--out", tmp_path, "simulate") == 3

    def test_unknown_noise_level_exits_3(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"noise_level": 9})
        assert run("--config", cfg, "--out", tmp_path, "simulate") == 3

    def test_missing_obs_file_exits_3(self, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", tmp_path / "nope.csv", "--epsilon", "inf")
        assert rc == 3

    def test_missing_cache_file_exits_3(self, sim_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", tmp_path / "nope.bin",
                 "--obs", sim_dir / "noisy.csv", "--epsilon", "inf")
        assert rc == 3


class TestCacheCommand:
    def test_cache_loads_with_requested_kinds(self, cache_dir):
        cache = load_cache(cache_dir / "cache.bin")
        assert cache.n == 400
        assert {k.value for k in cache.summaries} == {"spline", "raw"}

    def test_manifest_records_build(self, cache_dir):
        manifest = json.loads((cache_dir / "cache_manifest.json").read_text())
        assert manifest["command"] == "cache"
        assert manifest["options"]["n"] == 400
        assert manifest["options"]["kinds"] == ["spline", "raw"]
        cache = load_cache(cache_dir / "cache.bin")
        assert manifest["options"]["n_resampled"] == cache.n_resampled

    def test_rerun_is_byte_identical(self, cache_dir, tmp_path):
        assert run("--seed", 0, "--out", tmp_path, "cache", "--n", 400) == 0
        assert (tmp_path / "cache.bin").read_bytes() == (cache_dir / "cache.bin").read_bytes()


class TestAbcCommand:
    def test_epsilon_inf_accepts_everything(self, sim_dir, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", sim_dir / "noisy.csv", "--kind", "raw", "--epsilon", "inf")
        assert rc == 0
        lines = (tmp_path / "posterior.jsonl").read_text().splitlines()
        assert len(lines) == 400

    def test_best_k_keeps_k_closest(self, sim_dir, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", sim_dir / "noisy.csv", "--best-k", 50)
        assert rc == 0
        posterior = PosteriorSet.from_jsonl(tmp_path / "posterior.jsonl")
        assert posterior.n == 50
        assert np.all(np.diff(posterior.distances) >= 0)
        manifest = json.loads((tmp_path / "abc_manifest.json").read_text())
        assert manifest["options"]["best_k"] == 50
        assert manifest["options"]["epsilon"] == posterior.distances.max()

    def test_quantile_keeps_fraction(self, sim_dir, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", sim_dir / "noisy.csv", "--kind", "raw", "--quantile", 0.1)
        assert rc == 0
        posterior = PosteriorSet.from_jsonl(tmp_path / "posterior.jsonl")
        assert posterior.n == math.ceil(0.1 * 400)
        manifest = json.loads((tmp_path / "abc_manifest.json").read_text())
        assert manifest["options"]["quantile"] == 0.1
        assert manifest["options"]["epsilon"] > 0

    def test_grid_mismatch_exits_3(self, cache_dir, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", {"n_frames": 30})
        assert run("--config", cfg, "--out", tmp_path, "simulate") == 0
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", tmp_path / "noisy.csv", "--kind", "raw", "--epsilon", "inf")
        assert rc == 3
        assert "grid" in capsys.readouterr().err.lower()

    def test_best_k_larger_than_cache_exits_3(self, sim_dir, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", sim_dir / "noisy.csv", "--best-k", 401)
        assert rc == 3


class TestWlsCommand:
    def test_estimate_fields(self, sim_dir, tmp_path):
        rc = run("--out", tmp_path, "wls", "--obs", sim_dir / "noisy.csv",
                 "--library-n", 60)
        assert rc == 0
        estimate = json.loads((tmp_path / "wls_estimate.json").read_text())
        assert set(estimate) == set(PARAM_NAMES) | {"weighted_rss", "timing_index"}
        assert estimate["weighted_rss"] >= 0
        assert 0 <= estimate["timing_index"] < 60
        assert all(math.isfinite(estimate[n]) for n in PARAM_NAMES)

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            rc = run("--out", out, "wls", "--obs", sim_dir / "noisy.csv",
                     "--library-n", 60)
            assert rc == 0
            outs.append((out / "wls_estimate.json").read_bytes())
        assert outs[0] == outs[1]


class TestMcmcCommand:
    def test_chain_and_summary(self, sim_dir, tmp_path):
        rc = run("--seed", 3, "--out", tmp_path, "mcmc", "--obs", sim_dir / "noisy.csv",
                 "--steps", 200)
        assert rc == 0
        lines = (tmp_path / "chain.jsonl").read_text().splitlines()
        assert len(lines) == 201
        first = json.loads(lines[0])
        # the chain starts at the prior box center
        expected = {"r1": 10.0, "k2": 5.0, "k2a": 5.0, "gamma": 2.5,
                    "t_d": 20.0, "t_p": 28.0, "alpha": 12.5}
        assert first == expected
        summary = json.loads((tmp_path / "mcmc_summary.json").read_text())
        assert summary["n_steps"] == 200
        assert 0 <= summary["acceptance_rate"] <= 1
        assert set(summary["parameters"]) == set(PARAM_NAMES)
        for stats in summary["parameters"].values():
            assert math.isfinite(stats["mean"]) and stats["sd"] >= 0


class TestNarrowCommand:
    def test_stages_form_nested_boxes(self, sim_dir, tmp_path):
        rc = run("--seed", 0, "--out", tmp_path, "narrow", "--obs", sim_dir / "noisy.csv",
                 "--kind", "raw", "--n", 600, "--schedule", "700,350,250")
        assert rc == 0
        payload = json.loads((tmp_path / "narrow.json").read_text())
        assert [st["epsilon"] for st in payload["stages"]] == [700.0, 350.0, 250.0]
        assert all(st["n_accepted"] > 0 for st in payload["stages"])
        boxes = [UniformBox.from_dict(st["box"]) for st in payload["stages"]]
        priors = UniformBox.from_dict(payload["priors"])
        assert priors.to_dict() == default_priors().to_dict()
        assert boxes[0].contained_in(priors)
        assert boxes[1].contained_in(boxes[0])
        assert boxes[2].contained_in(boxes[1])

    def test_unreachable_tolerance_exits_4(self, sim_dir, tmp_path, capsys):
        rc = run("--out", tmp_path, "narrow", "--obs", sim_dir / "noisy.csv",
                 "--kind", "raw", "--n", 200, "--schedule", "1e-9")
        assert rc == 4
        assert "stage" in capsys.readouterr().err.lower()


class TestPpcCommand:
    def test_single_draw_bands_are_degenerate(self, tmp_path):
        theta = activation_preset("200").as_array()
        posterior = PosteriorSet(theta[None, :], np.zeros(1), 0.0, None)
        posterior.to_jsonl(tmp_path / "posterior.jsonl")
        with pytest.warns(SmallPosteriorWarning):
            rc = run("--out", tmp_path, "ppc", "--posterior", tmp_path / "posterior.jsonl")
        assert rc == 0
        rows = (tmp_path / "bands.csv").read_text().splitlines()
        assert rows[0] == "t_mid,mean,lo,hi"
        assert len(rows) == 61
        for row in rows[1:]:
            _, mean, lo, hi = (float(c) for c in row.split(","))
            assert lo == hi == mean
        manifest = json.loads((tmp_path / "ppc_manifest.json").read_text())
        assert manifest["options"] == {"n_draws": 1, "with_noise": False}

    def test_noisy_bands_report_coverage(self, sim_dir, cache_dir, tmp_path):
        rc = run("--out", tmp_path, "abc", "--cache", cache_dir / "cache.bin",
                 "--obs", sim_dir / "noisy.csv", "--kind", "raw", "--best-k", 120)
        assert rc == 0
        rc = run("--out", tmp_path, "ppc", "--posterior", tmp_path / "posterior.jsonl",
                 "--with-noise", "--truth", sim_dir / "clean.csv")
        assert rc == 0
        manifest = json.loads((tmp_path / "ppc_manifest.json").read_text())
        assert manifest["options"]["n_draws"] == 120
        assert manifest["options"]["with_noise"] is True
        assert 0.0 <= manifest["options"]["coverage"] <= 1.0
        for row in (tmp_path / "bands.csv").read_text().splitlines()[1:]:
            _, mean, lo, hi = (float(c) for c in row.split(","))
            assert lo <= mean <= hi


class TestBatchCompare:
    def batch_args(self, out, *extra):
        return ("--seed", 5, "--out", out, "batch-compare", "--kind", "raw",
                "--realisations", 2, "--cache-n", 300, "--best-k", 20,
                "--library-n", 40) + extra

    def test_report_layout(self, tmp_path):
        rc = run(*self.batch_args(tmp_path, "--methods", "abc,wls,mcmc", "--steps", 150))
        assert rc == 0
        header, rows = read_report(tmp_path / "report.csv")
        assert header == "method,parameter,realisation,value,status"
        assert all(len(r) == 5 for r in rows)
        truth = [r for r in rows if r[0] == "truth"]
        assert [r[1] for r in truth] == list(PARAM_NAMES)
        expected = activation_preset("200").as_array()
        assert [float(r[3]) for r in truth] == [float(v) for v in expected]
        ok = [r for r in rows if r[4] == "ok"]
        assert len(ok) == 3 * 2 * 7
        assert all(math.isfinite(float(r[3])) for r in ok)
        agg = [r for r in rows if r[4] == "aggregate"]
        assert len(agg) == 3 * 2 * 7
        assert {r[2] for r in agg} == {"bias", "variance"}
        assert all(float(r[3]) >= 0 for r in agg if r[2] == "variance")

    def test_same_seed_same_report(self, tmp_path):
        blobs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            rc = run(*self.batch_args(out, "--methods", "abc,wls,mcmc", "--steps", 150))
            assert rc == 0
            blobs.append((out / "report.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_zero_noise_estimates_repeat_exactly(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"noise_level": 0})
        rc = run("--config", cfg, *self.batch_args(tmp_path, "--methods", "abc,wls"))
        assert rc == 0
        _, rows = read_report(tmp_path / "report.csv")
        ok = [r for r in rows if r[4] == "ok"]
        values = {}
        for method, name, realisation, value, _ in ok:
            values.setdefault((method, name), []).append(value)
        assert all(len(set(v)) == 1 for v in values.values())
        variances = [float(r[3]) for r in rows if r[2] == "variance"]
        assert variances and all(v == 0.0 for v in variances)

    def test_failed_method_runs_become_error_rows(self, tmp_path, monkeypatch):
        def refuse(*args, **kwargs):
            raise NoValidFit("forced failure")

        monkeypatch.setattr(cli, "wls_fit_grid", refuse)
        rc = run(*self.batch_args(tmp_path, "--methods", "abc,wls"))
        assert rc == 0
        _, rows = read_report(tmp_path / "report.csv")
        wls = [r for r in rows if r[0] == "wls"]
        assert len(wls) == 2 * 7
        assert all(r[3] == "" and r[4] == "error:NoValidFit" for r in wls)
        # no aggregate rows without at least two successful runs
        assert not any(r[4] == "aggregate" for r in wls)
        abc_ok = [r for r in rows if r[0] == "abc" and r[4] == "ok"]
        assert len(abc_ok) == 2 * 7
        assert any(r[0] == "abc" and r[4] == "aggregate" for r in rows)

    def test_cache_reuse(self, sim_dir, cache_dir, tmp_path):
        rc = run("--seed", 5, "--out", tmp_path, "batch-compare", "--methods", "abc",
                 "--kind", "raw", "--realisations", 2, "--best-k", 20,
                 "--cache", cache_dir / "cache.bin")
        assert rc == 0
        manifest = json.loads((tmp_path / "batch_compare_manifest.json").read_text())
        assert manifest["options"]["cache_n"] == 400

    def test_cache_on_wrong_grid_exits_3(self, cache_dir, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"n_frames": 30})
        rc = run("--config", cfg, "--out", tmp_path, "batch-compare", "--methods", "abc",
                 "--kind", "raw", "--realisations", 2, "--best-k", 20,
                 "--cache", cache_dir / "cache.bin")
        assert rc == 3

    def test_one_realisation_exits_3(self, tmp_path):
        rc = run("--out", tmp_path, "batch-compare", "--realisations", 1)
        assert rc == 3

    def test_unknown_method_exits_3(self, tmp_path):
        rc = run("--out", tmp_path, "batch-compare", "--methods", "abc,bogus",
                 "--realisations", 2)
        assert rc == 3


class TestManifests:
    def test_simulate_manifest_is_reproducible_metadata(self, sim_dir):
        manifest = json.loads((sim_dir / "simulate_manifest.json").read_text())
        assert set(manifest) == MANIFEST_KEYS
        assert manifest["tool"] == "tacabc"
        assert manifest["version"] == cli._VERSION
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 0
        assert manifest["scale"] == "desk"
        digest = hashlib.sha256(
            json.dumps(manifest["config"], sort_keys=True).encode()).hexdigest()[:16]
        assert manifest["config_digest"] == digest
        assert manifest["outputs"] == sorted(["clean.csv", "noisy.csv", "scenario.json"])

    def test_manifest_config_echoes_overrides(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"noise_level": 3, "activation": "100"})
        assert run("--config", cfg, "--out", tmp_path, "simulate") == 0
        manifest = json.loads((tmp_path / "simulate_manifest.json").read_text())
        assert manifest["config"]["noise_level"] == 3
        assert manifest["config"]["activation"] == "100"
        # defaults are merged in, so the digest pins the full scenario
        assert manifest["config"]["n_frames"] == 60
