"""Config-driven workflow: dataset -> VAE -> hyperparameter updating -> report.

Every stage reads a :class:`RunConfig` and a working directory, writes its
own files there and never touches another stage's outputs.  Random streams
are derived from the master seed and a fixed per-stage key, so a stage can
be re-run on its own and reproduces its files byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as dg
from .errors import ConfigError, DomainError
from .likelihoods import (
    AbcConfig,
    EncodedSet,
    bhattacharyya_log_likelihood,
    empirical_prior,
    euclidean_log_likelihood,
    invert_features,
    latent_log_likelihood,
    theoretical_log_likelihood_2dof,
)
from .models import (
    BOX,
    GROUND_TRUTH,
    MU_BOUNDS,
    N_ALEATORY,
    N_EPISTEMIC,
    SIGMA_BOUNDS,
    THETA_BOUNDS,
    GaussianHyper,
    ShearFrfSimulator,
    SyntheticSequenceSimulator,
    TruncatedGmm,
    gmm_marginal_cdf,
    gmm_param_names,
    gmm_sample,
    read_dataset,
    sample_gaussian_hyper,
    write_dataset,
)
from .sampler import (
    Param,
    ParamSpace,
    RemcConfig,
    Stage,
    read_chain,
    refresh_states,
    run_remc,
    select_initial,
    write_chain,
)
from .vae import FeatureTransform, VaeConfig, VaeModel, encode, load_checkpoint, reconstruction_error, save_checkpoint, train

log = logging.getLogger(__name__)

STAGE_KEYS = {"dataset": 0, "observations": 1, "train": 2, "update": 3, "diagnose": 4}
LIKELIHOODS = ("latent", "euclidean", "bhattacharyya", "theoretical")
SIMULATORS = ("shear2dof", "sequence")

# ground truth used to synthesise observations of the sequence stand-in
SEQUENCE_TRUTH = {
    "means": [[0.5, 1.4, 1.0, 0.4, 1.2], [1.5, 0.6, 1.2, 1.6, 0.8]],
    "stds": [[0.25, 0.3, 0.2, 0.25, 0.3], [0.2, 0.25, 0.3, 0.2, 0.25]],
    "corrs": [[0.3, 0, 0, 0, 0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0, 0, 0, 0, -0.2]],
    "pi_1": 0.7,
    "e": [0.8, 1.2, 0.5, 1.0],
}
GMM_STD_BOUNDS = (0.05, 3.0)
GMM_MEAN_BOUNDS = BOX

DEFAULTS = {
    "experiment": "twodof",
    "seed": 0,
    "simulator": "shear2dof",
    "dataset": {"n": 10_000, "batch": 4096},
    "observations": {"n_obs": 16, "seed": None},
    "vae": {
        "latent_dim": 3,
        "num_residual_stages": 4,
        "channels_base": 4,
        "kernel_size": 3,
        "fc_hidden": 64,
        "beta_kl": 1.0,
        "decoder_std": "shared",
        "decoder_std_floor": 1.0,
        "transform": "log",
        "epochs": 12,
        "batch_size": 64,
        "lr": 1e-3,
        "validation": 500,
    },
    "likelihood": {"kind": "latent", "epsilon": 0.01, "n_bin": 5, "prior": "standard", "summary": "modal"},
    "mcmc": {
        "n_sim": 64,
        "n_replicas": 4,
        "beta_min": 0.02,
        "stages": [{"n_exchanges": 100, "samples_per_exchange": 100}],
        "burn_in": 1000,
        "thin": 30,
        "init_step": 0.05,
        "tune_interval": 100,
        "refresh_interval": 0,
        "simulation_stream": "per_exchange",
        "init": "select",
        "n_threads": 1,
        "seed": None,
        "name": None,
    },
    "diagnostics": {"bins": 100, "alpha": 0.5, "threshold": 0.1, "grid_points": 201, "cdf_draws": 2000},
}

# keys that may change between runs without changing any output
RUNTIME_KEYS = {("mcmc", "n_threads")}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, d, seed=None):
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        merged = _merge(DEFAULTS, d or {})
        if seed is not None:
            merged["seed"] = int(seed)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path, seed=None):
        try:
            text = Path(path).read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw, seed)

    def __getitem__(self, key):
        return self.data[key]

    def validate(self):
        d = self.data
        if d["simulator"] not in SIMULATORS:
            raise ConfigError(f"simulator must be one of {SIMULATORS}")
        kind = d["likelihood"]["kind"]
        if kind not in LIKELIHOODS:
            raise ConfigError(f"likelihood.kind must be one of {LIKELIHOODS}")
        if kind == "theoretical" and d["simulator"] != "shear2dof":
            raise ConfigError("the theoretical likelihood exists only for the shear2dof simulator")
        if kind in ("euclidean", "bhattacharyya") and d["simulator"] != "shear2dof":
            raise ConfigError("distance baselines are wired up for the shear2dof simulator only")
        if d["likelihood"]["summary"] not in ("modal", "frequencies"):
            raise ConfigError("likelihood.summary must be 'modal' or 'frequencies'")
        if d["likelihood"]["prior"] not in ("standard", "empirical"):
            raise ConfigError("likelihood.prior must be 'standard' or 'empirical'")
        if int(d["dataset"]["n"]) < 1 or int(d["observations"]["n_obs"]) < 1:
            raise ConfigError("dataset.n and observations.n_obs must be positive")
        if int(d["mcmc"]["n_sim"]) < 1:
            raise ConfigError("mcmc.n_sim must be at least 1")
        if d["mcmc"]["simulation_stream"] not in ("fresh", "fixed", "per_exchange"):
            raise ConfigError("mcmc.simulation_stream must be 'fresh', 'fixed' or 'per_exchange'")
        if d["mcmc"]["init"] not in ("select", "center") and not isinstance(d["mcmc"]["init"], list):
            raise ConfigError("mcmc.init must be 'select', 'center' or a list of values")
        AbcConfig(float(d["likelihood"]["epsilon"]), int(d["likelihood"]["n_bin"]))
        self.vae_config()
        self.remc_config()
        a = float(d["diagnostics"]["alpha"])
        if not 0 < a <= 1:
            raise ConfigError("diagnostics.alpha must lie in (0, 1]")

    def vae_config(self):
        v = self.data["vae"]
        channels = 2 if self.data["simulator"] == "shear2dof" else 1
        keys = ("latent_dim", "num_residual_stages", "channels_base", "kernel_size", "fc_hidden",
                "beta_kl", "decoder_std", "decoder_std_floor")
        return VaeConfig(input_channels=channels, input_length=512, **{k: v[k] for k in keys})

    def remc_config(self):
        m = self.data["mcmc"]
        stages = [Stage(**s) for s in m["stages"]]
        return RemcConfig(
            n_replicas=int(m["n_replicas"]),
            beta_min=float(m["beta_min"]),
            stages=stages,
            burn_in=int(m["burn_in"]),
            thin=int(m["thin"]),
            init_step=float(m["init_step"]),
            tune_interval=int(m["tune_interval"]),
            n_threads=int(m["n_threads"]),
            refresh_interval=int(m["refresh_interval"]),
        )

    def abc_config(self):
        lk = self.data["likelihood"]
        return AbcConfig(float(lk["epsilon"]), int(lk["n_bin"]))

    def canonical(self):
        d = copy.deepcopy(self.data)
        for sect, key in RUNTIME_KEYS:
            d[sect].pop(key, None)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def stage_hash(self, *sections):
        """Hash of the sections a stage depends on (plus seed and simulator)."""
        d = json.loads(self.canonical())
        sub = {k: d[k] for k in ("seed", "simulator", *sections)}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def rng(self, stage, override=None):
        seed = self.data["seed"] if override is None else override
        return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STAGE_KEYS[stage],)))

    def stage_seed(self, stage, override=None):
        return int(self.rng(stage, override).integers(2**63))

    def chain_name(self):
        return self.data["mcmc"]["name"] or self.data["likelihood"]["kind"]


def _provenance(cfg: RunConfig, stage, *sections):
    return {"config_hash": cfg.hash(), "stage_hash": cfg.stage_hash(*sections), "seed": cfg["seed"], "stage": stage}


def _write_array(path, arr, meta):
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(arr.tobytes())
    side = dict(meta, shape=list(arr.shape), dtype="<f8")
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def _read_array(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]), meta


def _need(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} is missing; run the stage that produces it first")
    return Path(path)


# ---------------------------------------------------------------------------
# simulators and uncertainty models


def gmm_space():
    names = gmm_param_names()
    params = []
    for n in names:
        if n.startswith("mu"):
            params.append(Param(n, *GMM_MEAN_BOUNDS, "means"))
        elif n.startswith("sigma"):
            params.append(Param(n, *GMM_STD_BOUNDS, "stds"))
        elif n.startswith("rho"):
            params.append(Param(n, -1.0, 1.0, "correlations"))
        else:
            params.append(Param(n, 0.5, 1.0, "weights"))
    params += [Param(f"e{i + 1}", *BOX, "epistemic") for i in range(N_EPISTEMIC)]
    return ParamSpace(params)


def shear_space():
    return ParamSpace(
        [Param("mu1", *MU_BOUNDS, "means"), Param("mu2", *MU_BOUNDS, "means"), Param("sigma", *SIGMA_BOUNDS, "stds")]
    )


def parameter_space(cfg: RunConfig):
    return shear_space() if cfg["simulator"] == "shear2dof" else gmm_space()


def sequence_truth_vector():
    t = SEQUENCE_TRUTH
    return np.concatenate(
        [np.ravel(t["means"]), np.ravel(t["stds"]), np.ravel(t["corrs"]), [t["pi_1"]], t["e"]]
    )


def split_gmm(x):
    x = np.asarray(x, dtype=float)
    return TruncatedGmm.from_vector(x[:-N_EPISTEMIC]), x[-N_EPISTEMIC:]


def gmm_constraint(x):
    try:
        return split_gmm(x)[0].is_valid()
    except DomainError:
        return False


def _shear_summary(modal_vec, kind):
    return modal_vec if kind == "modal" else modal_vec[..., :2]


# ---------------------------------------------------------------------------
# stage: gen-data


def _gen_shear(n, rng, batch):
    """Uniform hyper draws, one theta each, kept when theta lies in the filter box."""
    sim = ShearFrfSimulator()
    hyp, th = [], []
    got = 0
    lo, hi = THETA_BOUNDS
    while got < n:
        mu = rng.uniform(*MU_BOUNDS, (batch, 2))
        sig = rng.uniform(*SIGMA_BOUNDS, (batch, 1))
        theta = mu + sig * rng.standard_normal((batch, 2))
        ok = np.all((theta >= lo) & (theta <= hi), axis=1)
        hyp.append(np.hstack([mu, sig])[ok])
        th.append(theta[ok])
        got += int(ok.sum())
    hyp = np.concatenate(hyp)[:n]
    th = np.concatenate(th)[:n]
    return sim.simulate(th).astype(np.float32), np.hstack([hyp, th])


def _gen_sequence(n, rng, batch):
    sim = SyntheticSequenceSimulator()
    a = rng.uniform(*BOX, (n, N_ALEATORY))
    e = rng.uniform(*BOX, (n, N_EPISTEMIC))
    out = np.empty((n, *sim.feature_shape), dtype=np.float32)
    for s in range(0, n, batch):
        out[s : s + batch] = sim.simulate(a[s : s + batch], e[s : s + batch])
    return out, np.hstack([a, e])


def observations(cfg: RunConfig):
    """Synthetic observations from the ground truth; returns (x, params, modal or None)."""
    n = int(cfg["observations"]["n_obs"])
    rng = cfg.rng("observations", cfg["observations"]["seed"])
    if cfg["simulator"] == "shear2dof":
        sim = ShearFrfSimulator()
        hyper = GaussianHyper((GROUND_TRUTH["mu1"], GROUND_TRUTH["mu2"]), GROUND_TRUTH["sigma"])
        theta = sample_gaussian_hyper(hyper, n, rng)
        return sim.simulate(theta).astype(np.float32), theta, sim.modal(theta).as_vector()
    gmm, e = split_gmm(sequence_truth_vector())
    a = gmm_sample(gmm, n, rng)
    x = SyntheticSequenceSimulator().simulate(a, np.broadcast_to(e, (n, N_EPISTEMIC)))
    return x.astype(np.float32), np.hstack([a, np.broadcast_to(e, (n, N_EPISTEMIC))]), None


def cmd_gen_data(cfg: RunConfig, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = int(cfg["dataset"]["n"])
    batch = int(cfg["dataset"]["batch"])
    rng = cfg.rng("dataset")
    gen = _gen_shear if cfg["simulator"] == "shear2dof" else _gen_sequence
    x, params = gen(n, rng, batch)
    prov = _provenance(cfg, "gen-data", "dataset")
    meta = dict(prov, simulator=cfg["simulator"], n=n)
    if cfg["simulator"] == "shear2dof":
        meta.update(filter_bounds=list(THETA_BOUNDS), freq_grid={"df": 0.02, "n": 512}, param_columns=["mu1", "mu2", "sigma", "theta1", "theta2"])
    else:
        meta.update(param_columns=[f"a{i + 1}" for i in range(N_ALEATORY)] + [f"e{i + 1}" for i in range(N_EPISTEMIC)])
    write_dataset(out / "dataset.bin", x, meta)
    _write_array(out / "dataset_params.bin", params, meta)

    xo, po, modal = observations(cfg)
    ometa = dict(_provenance(cfg, "gen-data", "observations"), simulator=cfg["simulator"])
    write_dataset(out / "observations.bin", xo, ometa)
    _write_array(out / "observations_params.bin", po, ometa)
    if modal is not None:
        _write_array(out / "observations_modal.bin", modal, ometa)
    log.info("wrote %d training samples and %d observations to %s", n, len(xo), out)
    return out / "dataset.bin"


# ---------------------------------------------------------------------------
# stage: train


def cmd_train(cfg: RunConfig, out):
    out = Path(out)
    x, meta = read_dataset(_need(out / "dataset.bin"))
    v = cfg["vae"]
    n_val = min(int(v["validation"]), len(x) // 5)
    train_x, val_x = x[: len(x) - n_val], x[len(x) - n_val :]
    transform = FeatureTransform.fit(train_x, v["transform"])
    seed = cfg.stage_seed("train")
    model = VaeModel.initialize(cfg.vae_config(), seed % 2**32, transform)
    rec0 = reconstruction_error(model, val_x) if n_val else float("nan")
    model, history = train(
        model, train_x, epochs=int(v["epochs"]), batch_size=int(v["batch_size"]), seed=seed, lr=float(v["lr"])
    )
    rec = reconstruction_error(model, val_x) if n_val else float("nan")
    extra = dict(_provenance(cfg, "train", "dataset", "vae"), dataset_hash=meta.get("stage_hash"),
                 reconstruction_untrained=rec0, reconstruction=rec, n_validation=n_val)
    save_checkpoint(model, out / "vae.json", extra)
    dg.write_table(out / "loss.csv", ["epoch", "loss"], [(i, h) for i, h in enumerate(history)])
    log.info("validation reconstruction error %.4f (untrained %.4f)", rec, rec0)
    return out / "vae.json"


# ---------------------------------------------------------------------------
# stage: update


class LatentTarget:
    """Encodes observations once; each call simulates, encodes and scores."""

    def __init__(self, model: VaeModel, obs_x, simulator, n_sim, prior=None):
        self.model = model
        self.obs = EncodedSet(encode(model, obs_x), prior)
        self.simulator = simulator
        self.n_sim = n_sim

    def simulate(self, x, rng):
        if self.simulator == "shear2dof":
            theta = sample_gaussian_hyper(GaussianHyper.from_vector(x), self.n_sim, rng)
            return ShearFrfSimulator().simulate(theta)
        gmm, e = split_gmm(x)
        a = gmm_sample(gmm, self.n_sim, rng)
        return SyntheticSequenceSimulator().simulate(a, np.broadcast_to(e, (self.n_sim, N_EPISTEMIC)))

    def __call__(self, x, rng):
        sims = EncodedSet(encode(self.model, self.simulate(x, rng).astype(np.float32)), self.obs.prior)
        return latent_log_likelihood(self.obs, sims)


class DistanceTarget:
    def __init__(self, obs_summary, kind, abc: AbcConfig, n_sim, summary="modal"):
        self.obs = obs_summary
        self.kind = kind
        self.abc = abc
        self.n_sim = n_sim
        self.summary = summary
        self.sim = ShearFrfSimulator()

    def __call__(self, x, rng):
        theta = sample_gaussian_hyper(GaussianHyper.from_vector(x), self.n_sim, rng)
        s = _shear_summary(self.sim.modal(theta).as_vector(), self.summary)
        if self.kind == "euclidean":
            return euclidean_log_likelihood(self.obs, s, self.abc)
        return bhattacharyya_log_likelihood(self.obs, s, self.abc)


class TheoreticalTarget:
    def __init__(self, obs_modal):
        self.theta_star = invert_features(obs_modal)

    def __call__(self, x, rng):
        return theoretical_log_likelihood_2dof(self.theta_star, GaussianHyper.from_vector(x))


class CommonRandomNumbers:
    """Simulations drawn from a shared stream instead of the replica's RNG.

    Within one stream the simulated set varies smoothly with the
    hyperparameters, which removes the Monte Carlo noise of the likelihood
    estimate between neighbouring proposals.  ``advance`` switches every
    replica to the next stream.
    """

    def __init__(self, target, seed):
        self.target = target
        self.seed = seed
        self.stream = 0

    def __call__(self, x, rng):
        return self.target(x, np.random.default_rng([self.seed, self.stream]))

    def advance(self, states):
        self.stream += 1
        refresh_states(states, self)


def build_target(cfg: RunConfig, out, model=None):
    """The log-target for the configured likelihood plus (obs, candidates) for initialisation."""
    out = Path(out)
    kind = cfg["likelihood"]["kind"]
    n_sim = int(cfg["mcmc"]["n_sim"])
    obs_x, _ = read_dataset(_need(out / "observations.bin"))
    params, _ = _read_array(_need(out / "dataset_params.bin"))
    if kind == "latent":
        model = model or load_checkpoint(_need(out / "vae.json"))
        prior = None
        cand = None
        if cfg["likelihood"]["prior"] == "empirical" or cfg["mcmc"]["init"] == "select":
            data, _ = read_dataset(_need(out / "dataset.bin"))
            cand = encode(model, data)
            if cfg["likelihood"]["prior"] == "empirical":
                prior = empirical_prior(cand)
        target = LatentTarget(model, obs_x, cfg["simulator"], n_sim, prior)
        obs_summary = target.obs.latents.mean
        cand_summary = None if cand is None else cand.mean
    else:
        modal, _ = _read_array(_need(out / "observations_modal.bin"))
        summ = cfg["likelihood"]["summary"]
        if kind == "theoretical":
            target = TheoreticalTarget(modal)
        else:
            target = DistanceTarget(_shear_summary(modal, summ), kind, cfg.abc_config(), n_sim, summ)
        obs_summary = _shear_summary(modal, summ)
        cand_summary = _shear_summary(ShearFrfSimulator().modal(params[:, 3:5]).as_vector(), summ)
    n_hyper = 3 if cfg["simulator"] == "shear2dof" else None
    return target, obs_summary, cand_summary, params, n_hyper


def initial_vector(cfg, space, obs_summary, cand_summary, params, n_hyper):
    init = cfg["mcmc"]["init"]
    if isinstance(init, list):
        x0 = np.asarray(init, dtype=float)
        if x0.shape != (len(space),):
            raise ConfigError(f"mcmc.init needs {len(space)} values")
        return x0
    if init == "center" or cand_summary is None:
        x0 = (space.lower + space.upper) / 2
    elif cfg["simulator"] == "shear2dof":
        x0 = select_initial(obs_summary, cand_summary, params[:, :n_hyper], space)
    else:
        # sequence samples carry (a, e) rather than mixture hyperparameters:
        # centre both components on the nearest sample's a with broad stds
        best = select_initial(obs_summary, cand_summary, params, None)
        a, e = best[:N_ALEATORY], best[N_ALEATORY:]
        x0 = np.concatenate([a, a, np.full(2 * N_ALEATORY, 0.5), np.zeros(20), [0.75], e])
    return np.clip(x0, space.lower, space.upper)


def cmd_update(cfg: RunConfig, out, model=None, callback=None):
    out = Path(out)
    space = parameter_space(cfg)
    target, obs_s, cand_s, params, n_hyper = build_target(cfg, out, model)
    x0 = initial_vector(cfg, space, obs_s, cand_s, params, n_hyper)
    remc = cfg.remc_config()
    if cfg["simulator"] == "sequence":
        # correlation terms start at zero in every stage that freezes them
        for st in remc.stages:
            if st.blocks is not None and "correlations" not in st.blocks:
                st.reset = {n: 0.0 for n in space.names if n.startswith("rho")}
    seed = cfg.stage_seed("update", cfg["mcmc"]["seed"])
    stream = cfg["mcmc"]["simulation_stream"]
    if stream != "fresh" and cfg["likelihood"]["kind"] != "theoretical":
        target = CommonRandomNumbers(target, int(np.random.SeedSequence(seed).generate_state(1)[0]))
        if stream == "per_exchange":
            user_cb = callback

            def callback(counter, states):
                target.advance(states)
                if user_cb is not None:
                    user_cb(counter, states)
    constraint = gmm_constraint if cfg["simulator"] == "sequence" else None
    res = run_remc(space, target, remc, seed, x0=x0, constraint=constraint, callback=callback)
    meta = dict(
        _provenance(cfg, "update", "observations", "vae", "likelihood", "mcmc"),
        likelihood=cfg["likelihood"],
        n_sim=int(cfg["mcmc"]["n_sim"]),
        n_obs=int(cfg["observations"]["n_obs"]),
        x0=x0.tolist(),
        schedule=[{"n_exchanges": s.n_exchanges, "samples_per_exchange": s.samples_per_exchange,
                   "blocks": s.blocks} for s in remc.stages],
        burn_in=remc.burn_in,
        thin=remc.thin,
    )
    path, _ = write_chain(out / f"chain_{cfg.chain_name()}.csv", res, meta)
    return path, res


# ---------------------------------------------------------------------------
# stage: diagnose


def _cdf_factory(cfg: RunConfig, dim):
    n = int(cfg["diagnostics"]["cdf_draws"])
    if cfg["simulator"] == "shear2dof":
        return lambda h, grid: GaussianHyper.from_vector(h).cdf(grid, dim)
    return lambda h, grid: gmm_marginal_cdf(split_gmm(h)[0], grid, dim, n=n, seed=0)


def truth_cdf(cfg: RunConfig, dim, grid):
    if cfg["simulator"] == "shear2dof":
        return GaussianHyper((GROUND_TRUTH["mu1"], GROUND_TRUTH["mu2"]), GROUND_TRUTH["sigma"]).cdf(grid, dim)
    return gmm_marginal_cdf(split_gmm(sequence_truth_vector())[0], grid, dim, n=20_000, seed=0)


def cmd_diagnose(cfg: RunConfig, out, chains=None):
    out = Path(out)
    chains = sorted(out.glob("chain_*.csv")) if chains is None else [Path(c) for c in chains]
    if not chains:
        raise FileNotFoundError(f"no chain files in {out}")
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    d = cfg["diagnostics"]
    space = parameter_space(cfg)
    grid = dg.HistogramGrid(list(zip(space.lower, space.upper)), int(d["bins"]))
    loaded = {}
    for c in chains:
        names, x, ll = read_chain(_need(c))
        if names != space.names:
            raise ConfigError(f"{c} does not match the configured parameter space")
        loaded[c.stem.removeprefix("chain_")] = (x, ll)
    labels = list(loaded)

    rows = []
    for a in labels:
        for b in labels:
            rows.append((a, b, dg.js_divergence(loaded[a][0], loaded[b][0], grid)))
    dg.write_table(rep / "js_divergence.csv", ["chain_a", "chain_b", "js"], rows)
    if "theoretical" in loaded:
        order = sorted(((r[2], r[0]) for r in rows if r[1] == "theoretical" and r[0] != "theoretical"))
        dg.write_table(rep / "js_to_theoretical.csv", ["rank", "chain", "js"],
                       [(str(i + 1), c, v) for i, (v, c) in enumerate(order)])

    summary = {}
    ggrid = np.linspace(BOX[0] if cfg["simulator"] == "sequence" else 0.0, 2.0, int(d["grid_points"]))
    n_dims = 2 if cfg["simulator"] == "shear2dof" else N_ALEATORY
    for label, (x, ll) in loaded.items():
        for k, name in enumerate(space.names):
            try:
                curve = dg.kde_1d(x[:, k])
                g, dens = curve.grid, curve.density
            except (DomainError, ConfigError):
                g, dens = np.array([x[0, k]]), np.array([np.inf])
            dg.write_curve(rep / f"kde_{label}_{name}.csv", {"grid": g, "density": dens})
            if np.all(np.isfinite(dens)):
                dg.write_svg(rep / f"kde_{label}_{name}.svg", g, {"density": dens}, title=f"{label}: {name}")
        map_x, ranges = dg.map_and_ranges(x, ll, space.names, float(d["threshold"]))
        dg.write_table(
            rep / f"map_ranges_{label}.csv",
            ["parameter", "map", "range_lo", "range_hi", "multimodal"],
            [(n, map_x[k], *ranges[n].span, str(ranges[n].multimodal)) for k, n in enumerate(space.names)],
        )
        inside = []
        for dim in range(n_dims):
            pb = dg.pbox(x, ll, float(d["alpha"]), _cdf_factory(cfg, dim), ggrid)
            tc = truth_cdf(cfg, dim, ggrid)
            inside.append(pb.contains_cdf(tc))
            dg.write_curve(rep / f"pbox_{label}_theta{dim + 1}.csv",
                           {"grid": ggrid, "lower": pb.lower, "upper": pb.upper, "truth": tc})
            dg.write_svg(rep / f"pbox_{label}_theta{dim + 1}.svg", ggrid,
                         {"lower": pb.lower, "upper": pb.upper, "truth": tc}, title=f"{label}: p-box dim {dim + 1}")
        summary[label] = {
            "n_samples": int(len(x)),
            "map": dict(zip(space.names, map(float, map_x))),
            "truth_cdf_inside_pbox": inside,
            "median": dict(zip(space.names, map(float, np.median(x, axis=0)))),
        }
    report = dict(_provenance(cfg, "diagnose", "diagnostics"), chains=labels, summary=summary,
                  alpha=float(d["alpha"]), bins=int(d["bins"]))
    (rep / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return rep


def cmd_all(cfg: RunConfig, out):
    cmd_gen_data(cfg, out)
    if cfg["likelihood"]["kind"] == "latent":
        cmd_train(cfg, out)
    cmd_update(cfg, out)
    return cmd_diagnose(cfg, out)
