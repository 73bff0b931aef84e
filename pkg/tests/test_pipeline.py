import json

import numpy as np
import pytest
import yaml

from lsmu import cli, pipeline
from lsmu.errors import ConfigError
from lsmu.models import THETA_BOUNDS, read_dataset
from lsmu.sampler import ChainState

SMOKE = {
    "experiment": "smoke",
    "seed": 3,
    "dataset": {"n": 120},
    "observations": {"n_obs": 4},
    "vae": {"epochs": 1, "channels_base": 2, "fc_hidden": 8, "validation": 20},
    "mcmc": {
        "n_sim": 8,
        "n_replicas": 2,
        "stages": [{"n_exchanges": 4, "samples_per_exchange": 10}],
        "burn_in": 10,
        "thin": 3,
    },
    "diagnostics": {"grid_points": 41},
}


def write_cfg(tmp_path, overrides=None, name="cfg.yaml"):
    d = json.loads(json.dumps(SMOKE))
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults_mirror_desk_protocol(self):
        cfg = pipeline.RunConfig.from_dict({})
        r = cfg.remc_config()
        assert r.total_samples == 10_000 and r.n_retained == 300
        assert cfg["mcmc"]["n_sim"] == 64 and cfg["observations"]["n_obs"] == 16

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            pipeline.RunConfig.from_dict({"mcmc": {"nsim": 3}})

    def test_incompatible_likelihood(self):
        with pytest.raises(ConfigError):
            pipeline.RunConfig.from_dict({"simulator": "sequence", "likelihood": {"kind": "theoretical"}})

    def test_seed_override_changes_hash_threads_do_not(self):
        a = pipeline.RunConfig.from_dict({})
        b = pipeline.RunConfig.from_dict({}, seed=5)
        c = pipeline.RunConfig.from_dict({"mcmc": {"n_threads": 4}})
        assert a.hash() != b.hash() and a.hash() == c.hash()

    def test_simulation_stream_values(self):
        with pytest.raises(ConfigError):
            pipeline.RunConfig.from_dict({"mcmc": {"simulation_stream": "sometimes"}})

    def test_obs_grid_configurable(self):
        for n_obs in (4, 128):
            for n_sim in (16, 128):
                cfg = pipeline.RunConfig.from_dict({"observations": {"n_obs": n_obs}, "mcmc": {"n_sim": n_sim}})
                assert cfg["mcmc"]["n_sim"] == n_sim


class TestStages:
    def test_gen_data_shapes(self, tmp_path):
        cfg = pipeline.RunConfig.from_dict({**SMOKE, "dataset": {"n": 10}})
        pipeline.cmd_gen_data(cfg, tmp_path)
        x, meta = read_dataset(tmp_path / "dataset.bin")
        assert x.shape == (10, 2, 1, 512) and x.dtype == np.dtype("<f4")
        assert meta["config_hash"] == cfg.hash() and meta["seed"] == 3
        params, _ = pipeline._read_array(tmp_path / "dataset_params.bin")
        th = params[:, 3:5]
        assert np.all((th >= THETA_BOUNDS[0]) & (th <= THETA_BOUNDS[1]))
        xo, _ = read_dataset(tmp_path / "observations.bin")
        assert xo.shape == (4, 2, 1, 512)

    def test_observations_independent_of_dataset_size(self, tmp_path):
        a = pipeline.observations(pipeline.RunConfig.from_dict({**SMOKE, "dataset": {"n": 10}}))
        b = pipeline.observations(pipeline.RunConfig.from_dict({**SMOKE, "dataset": {"n": 50}}))
        assert np.array_equal(a[0], b[0])

    def test_theoretical_mode_needs_no_vae(self, tmp_path):
        cfg = pipeline.RunConfig.from_dict({**SMOKE, "likelihood": {"kind": "theoretical"}})
        pipeline.cmd_gen_data(cfg, tmp_path)
        path, res = pipeline.cmd_update(cfg, tmp_path)
        assert not (tmp_path / "vae.json").exists()
        assert len(res.samples) == cfg.remc_config().n_retained

    def test_update_without_checkpoint_is_io_error(self, tmp_path):
        cfg = pipeline.RunConfig.from_dict(SMOKE)
        pipeline.cmd_gen_data(cfg, tmp_path)
        with pytest.raises(FileNotFoundError):
            pipeline.cmd_update(cfg, tmp_path)

    def test_distance_baselines_run(self, tmp_path):
        for kind in ("euclidean", "bhattacharyya"):
            cfg = pipeline.RunConfig.from_dict({**SMOKE, "likelihood": {"kind": kind, "epsilon": 0.1, "n_bin": 3}})
            if kind == "euclidean":
                pipeline.cmd_gen_data(cfg, tmp_path)
            path, res = pipeline.cmd_update(cfg, tmp_path)
            assert path.name == f"chain_{kind}.csv"
        rep = pipeline.cmd_diagnose(pipeline.RunConfig.from_dict(SMOKE), tmp_path)
        rows = (rep / "js_divergence.csv").read_text().splitlines()
        assert "euclidean,euclidean,0.0" in rows
        for p in ("mu1", "mu2", "sigma"):
            assert (rep / f"kde_euclidean_{p}.csv").exists()

    def test_sequence_staged_schedule(self, tmp_path):
        cfg = pipeline.RunConfig.from_dict({
            **SMOKE,
            "simulator": "sequence",
            "vae": {**SMOKE["vae"], "latent_dim": 6, "transform": "none"},
            "mcmc": {
                "n_sim": 8, "n_replicas": 2, "burn_in": 30, "thin": 5,
                "stages": [
                    {"n_exchanges": 2, "samples_per_exchange": 12, "blocks": ["means", "stds", "weights", "epistemic"]},
                    {"n_exchanges": 2, "samples_per_exchange": 18},
                ],
            },
            "diagnostics": {"grid_points": 21, "cdf_draws": 200},
        })
        pipeline.cmd_all(cfg, tmp_path)
        names, x, _ = pipeline.read_chain(tmp_path / "chain_latent.csv")
        assert len(names) == 45
        assert len(x) == (24 + 36 - 30) // 5
        table = (tmp_path / "report" / "map_ranges_latent.csv").read_text().splitlines()
        assert len(table) == 46


def test_common_random_numbers_stream():
    def noisy(x, rng):
        return float(rng.standard_normal())

    crn = pipeline.CommonRandomNumbers(noisy, seed=5)
    rng = np.random.default_rng(0)
    first = crn(np.zeros(3), rng)
    assert crn(np.zeros(3), rng) == first
    states = [ChainState(np.zeros(3), 0.0, 1.0, np.random.default_rng(1), np.ones(3)) for _ in range(2)]
    crn.advance(states)
    assert crn.stream == 1
    assert states[0].log_lik == states[1].log_lik == crn(np.zeros(3), rng) != first


class TestCli:
    def test_all_is_byte_identical_across_runs_and_threads(self, tmp_path):
        cfg = write_cfg(tmp_path)
        cfg_threads = write_cfg(tmp_path, {"mcmc": {**SMOKE["mcmc"], "n_threads": 2}}, "cfg2.yaml")
        assert cli.main(["all", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["all", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert cli.main(["all", "--config", str(cfg_threads), "--out", str(tmp_path / "c")]) == 0
        fa, fb, fc = files(tmp_path / "a"), files(tmp_path / "b"), files(tmp_path / "c")
        assert fa == fb
        assert fa == fc
        assert "report/report.json" in fa and "chain_latent.csv" in fa

    def test_seed_flag(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "9"]) == 0
        meta = json.loads((tmp_path / "a" / "dataset.json").read_text())
        assert meta["seed"] == 9

    def test_stage_rerun_is_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        first = (out / "vae.bin").read_bytes()
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "vae.bin").read_bytes() == first
        assert len((out / "loss.csv").read_text().splitlines()) == 2

    def test_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("mcmc: {n_sim: 0}\n")
        assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert cli.main(["gen-data", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
        cfg = write_cfg(tmp_path)
        assert cli.main(["update", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 4
        blocked = tmp_path / "blocked"
        blocked.write_text("not a directory")
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(blocked)]) == 4

    def test_numeric_exit_code(self, tmp_path):
        # every pair integral divergent: the initial vector cannot be evaluated
        cfg = write_cfg(tmp_path, {"mcmc": {**SMOKE["mcmc"], "init": "center"}})
        out = tmp_path / "r"
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        orig = pipeline.LatentTarget.__call__

        def broken(self, x, rng):
            from lsmu.errors import DivergenceError
            raise DivergenceError("forced", dimension=0)

        pipeline.LatentTarget.__call__ = broken
        try:
            assert cli.main(["update", "--config", str(cfg), "--out", str(out)]) == 3
        finally:
            pipeline.LatentTarget.__call__ = orig
