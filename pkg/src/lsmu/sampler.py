"""Replica-exchange Metropolis-Hastings over box-bounded hyperparameters.

The target is supplied as ``log_target(x, rng) -> float`` returning a
log-likelihood; the prior is uniform on the box so it cancels in every
acceptance ratio.  Targets may be stochastic (simulation based): the current
log-likelihood is carried with the state and never re-evaluated.

Each replica owns an RNG stream spawned from the master seed, so chains are
identical whether replicas are advanced serially or on a thread pool.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Param:
    name: str
    lower: float
    upper: float
    block: str = "all"

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper) and self.upper > self.lower):
            raise ConfigError(f"bad bounds for {self.name}: [{self.lower}, {self.upper}]")


class ParamSpace:
    """Ordered named parameters with box bounds and block labels."""

    def __init__(self, params: Sequence[Param]):
        if not params:
            raise ConfigError("empty parameter space")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.params = list(params)
        self.names = names
        self.lower = np.array([p.lower for p in params])
        self.upper = np.array([p.upper for p in params])
        self.blocks = {}
        for i, p in enumerate(params):
            self.blocks.setdefault(p.block, []).append(i)

    def __len__(self):
        return len(self.params)

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, x):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def reflect(self, x):
        """Fold ``x`` back into the box by mirror reflection at the bounds."""
        w = self.width
        y = np.mod(np.asarray(x, dtype=float) - self.lower, 2 * w)
        y = np.where(y > w, 2 * w - y, y)
        return self.lower + y

    def indices(self, blocks):
        if blocks is None:
            return np.arange(len(self))
        missing = [b for b in blocks if b not in self.blocks]
        if missing:
            raise ConfigError(f"unknown parameter blocks {missing}")
        return np.array(sorted(i for b in blocks for i in self.blocks[b]))


@dataclass
class ChainState:
    x: np.ndarray
    log_lik: float
    beta: float
    rng: np.random.Generator
    steps: np.ndarray
    n_prop: int = 0
    n_acc: int = 0
    n_errors: int = 0

    def __post_init__(self):
        if not np.isfinite(self.log_lik):
            raise NumericError("chain state needs a finite log-likelihood")
        if not self.beta >= 0:
            raise ConfigError("inverse temperature must be non-negative")


def _evaluate(log_target, x, rng):
    """log_target(x) or None when the target reports a numeric/domain failure."""
    try:
        val = float(log_target(x, rng))
    except (NumericError, DomainError):
        return None
    return val if np.isfinite(val) else None


def mh_step(state: ChainState, log_target, space: ParamSpace, idx=None, constraint=None, rng=None):
    """One Metropolis update of the coordinates ``idx`` (default: all).

    Gaussian random walk with per-parameter std ``state.steps``, reflected
    into the box.  Proposals failing ``constraint`` or for which the target
    raises a numeric/divergence error are rejected; the latter are counted in
    ``state.n_errors``.  Returns the (mutated) state.
    """
    rng = rng if rng is not None else state.rng
    idx = np.arange(len(space)) if idx is None else np.asarray(idx)
    prop = state.x.copy()
    prop[idx] = prop[idx] + state.steps[idx] * rng.standard_normal(idx.size)
    prop = space.reflect(prop)
    state.n_prop += 1
    if constraint is not None and not constraint(prop):
        return state
    new = _evaluate(log_target, prop, rng)
    if new is None:
        state.n_errors += 1
        return state
    log_alpha = state.beta * (new - state.log_lik)
    if log_alpha >= 0 or rng.random() < math.exp(log_alpha):
        state.x, state.log_lik = prop, new
        state.n_acc += 1
    return state


def refresh_states(states, log_target):
    """Re-evaluate each state's log-target in order; failures keep the old value."""
    for st in states:
        ll = _evaluate(log_target, st.x, st.rng)
        if ll is not None:
            st.log_lik = ll


def exchange_accept_prob(beta_i, beta_j, loglik_i, loglik_j):
    return min(1.0, math.exp(min(0.0, (beta_i - beta_j) * (loglik_j - loglik_i))))


def exchange_step(si: ChainState, sj: ChainState, rng) -> bool:
    """Swap the configurations of two replicas with the tempering ratio."""
    p = exchange_accept_prob(si.beta, sj.beta, si.log_lik, sj.log_lik)
    if p >= 1.0 or rng.random() < p:
        si.x, sj.x = sj.x, si.x
        si.log_lik, sj.log_lik = sj.log_lik, si.log_lik
        return True
    return False


def geometric_ladder(n, beta_min=0.02):
    if n < 1 or not 0 < beta_min <= 1:
        raise ConfigError("ladder needs n >= 1 and beta_min in (0, 1]")
    if n == 1:
        return np.array([1.0])
    return beta_min ** (np.arange(n) / (n - 1))


@dataclass
class Stage:
    """``n_exchanges`` rounds of ``samples_per_exchange`` MH updates on ``blocks``."""

    n_exchanges: int
    samples_per_exchange: int
    blocks: list | None = None
    reset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_exchanges < 1 or self.samples_per_exchange < 1:
            raise ConfigError("stage sizes must be positive")

    @property
    def n_samples(self):
        return self.n_exchanges * self.samples_per_exchange


@dataclass
class RemcConfig:
    n_replicas: int = 8
    beta_min: float = 0.02
    stages: list = field(default_factory=lambda: [Stage(1000, 100)])
    burn_in: int = 10_000
    thin: int = 30
    init_step: float = 0.05
    tune_interval: int = 100
    target_accept: tuple = (0.25, 0.40)
    n_threads: int = 1
    init_retries: int = 20
    refresh_interval: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if self.n_replicas < 2:
            raise ConfigError("replica exchange needs at least 2 replicas")
        if self.thin < 1 or self.burn_in < 0:
            raise ConfigError("thin must be >= 1 and burn_in >= 0")
        if self.burn_in >= self.total_samples:
            raise ConfigError("burn-in consumes the whole run")
        if not 0 < self.init_step:
            raise ConfigError("init_step must be positive")
        if self.refresh_interval < 0:
            raise ConfigError("refresh_interval must be >= 0")
        lo, hi = self.target_accept
        if not 0 < lo < hi < 1:
            raise ConfigError("target_accept must satisfy 0 < lo < hi < 1")

    @classmethod
    def full_scale(cls, **kw):
        """1,000 exchanges x 100 samples, burn-in 10,000, thin 30."""
        return cls(stages=[Stage(1000, 100)], burn_in=10_000, thin=30, **kw)

    @classmethod
    def desk(cls, **kw):
        return cls(stages=[Stage(100, 100)], burn_in=1_000, thin=30, **kw)

    @property
    def total_samples(self):
        return sum(s.n_samples for s in self.stages)

    @property
    def n_retained(self):
        return (self.total_samples - self.burn_in) // self.thin

    def betas(self):
        return geometric_ladder(self.n_replicas, self.beta_min)


@dataclass
class RemcResult:
    names: list
    samples: np.ndarray
    log_lik: np.ndarray
    betas: np.ndarray
    accept_rate: np.ndarray
    exchange_rate: np.ndarray
    n_errors: np.ndarray
    steps: np.ndarray

    def metadata(self):
        return {
            "betas": self.betas.tolist(),
            "accept_rate": self.accept_rate.tolist(),
            "exchange_rate": self.exchange_rate.tolist(),
            "target_errors": self.n_errors.tolist(),
            "n_samples": int(len(self.samples)),
        }


class _Replica:
    """Chain state plus per-block step multipliers and tuning counters."""

    def __init__(self, state, n_blocks):
        self.state = state
        self.scale = np.ones(n_blocks)
        self.win_prop = np.zeros(n_blocks, int)
        self.win_acc = np.zeros(n_blocks, int)
        self.cursor = 0


def run_remc(
    space: ParamSpace,
    log_target: Callable,
    config: RemcConfig,
    seed: int,
    x0=None,
    constraint=None,
    callback=None,
) -> RemcResult:
    """Run the staged replica-exchange schedule and return the beta=1 chain.

    Retained samples are drawn after ``burn_in`` MH updates (counted over all
    stages) keeping every ``thin``-th.  Step sizes adapt during burn-in only.
    """
    ss = np.random.SeedSequence(seed)
    child = ss.spawn(config.n_replicas + 1)
    xrng = np.random.default_rng(child[0])
    betas = config.betas()
    x0 = (space.lower + space.upper) / 2 if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (len(space),) or not space.contains(x0):
        raise ConfigError("initial vector must lie inside the parameter box")
    if constraint is not None and not constraint(x0):
        raise ConfigError("initial vector violates the parameter constraint")
    base_steps = config.init_step * space.width

    replicas = []
    for r in range(config.n_replicas):
        rng = np.random.default_rng(child[r + 1])
        ll = None
        for _ in range(config.init_retries):
            ll = _evaluate(log_target, x0, rng)
            if ll is not None:
                break
        if ll is None:
            raise NumericError(
                f"log-target failed at the initial vector {dict(zip(space.names, x0))} "
                f"{config.init_retries} times (replica {r}, beta {betas[r]:.3g})"
            )
        state = ChainState(x0.copy(), ll, float(betas[r]), rng, base_steps.copy())
        replicas.append(_Replica(state, len(space.blocks)))

    block_names = list(space.blocks)
    lo_acc, hi_acc = config.target_accept
    n_keep = config.n_retained
    samples = np.empty((n_keep, len(space)))
    log_lik = np.empty(n_keep)
    ex_att = np.zeros(config.n_replicas - 1, int)
    ex_acc = np.zeros(config.n_replicas - 1, int)
    counter = 0
    kept = 0
    round_no = 0

    def advance(rep: _Replica, start, n, active):
        st = rep.state
        for k in range(n):
            b = active[rep.cursor % len(active)]
            rep.cursor += 1
            bi = block_names.index(b)
            idx = np.asarray(space.blocks[b])
            st.steps[idx] = base_steps[idx] * rep.scale[bi]
            before = st.n_acc
            mh_step(st, log_target, space, idx, constraint)
            if start + k < config.burn_in:
                rep.win_prop[bi] += 1
                rep.win_acc[bi] += st.n_acc - before
                if rep.win_prop[bi] >= config.tune_interval:
                    rate = rep.win_acc[bi] / rep.win_prop[bi]
                    if rate < lo_acc:
                        rep.scale[bi] *= 0.7
                    elif rate > hi_acc:
                        rep.scale[bi] *= 1.4
                    rep.win_prop[bi] = rep.win_acc[bi] = 0
            if config.refresh_interval and (start + k + 1) % config.refresh_interval == 0:
                # noisy targets: re-estimate the current value so a lucky draw cannot pin the chain
                ll = _evaluate(log_target, st.x, st.rng)
                if ll is not None:
                    st.log_lik = ll
        return st

    pool = ThreadPoolExecutor(config.n_threads) if config.n_threads > 1 else None
    try:
        for stage in config.stages:
            active = list(block_names) if stage.blocks is None else list(stage.blocks)
            space.indices(active)
            for name, value in stage.reset.items():
                j = space.names.index(name)
                for rep in replicas:
                    rep.state.x[j] = value
            for _ in range(stage.n_exchanges):
                n = stage.samples_per_exchange
                # the beta=1 replica is stepped one sample at a time to record draws
                cold = replicas[0]
                others = replicas[1:]
                futures = (
                    [pool.submit(advance, rep, counter, n, active) for rep in others] if pool else None
                )
                for k in range(n):
                    advance(cold, counter + k, 1, active)
                    post = counter + k - config.burn_in
                    if post >= 0 and (post + 1) % config.thin == 0 and kept < n_keep:
                        samples[kept] = cold.state.x
                        log_lik[kept] = cold.state.log_lik
                        kept += 1
                if pool:
                    for f in futures:
                        f.result()
                else:
                    for rep in others:
                        advance(rep, counter, n, active)
                counter += n
                for i in range(round_no % 2, config.n_replicas - 1, 2):
                    ex_att[i] += 1
                    ex_acc[i] += exchange_step(replicas[i].state, replicas[i + 1].state, xrng)
                round_no += 1
                if callback is not None:
                    callback(counter, [r.state for r in replicas])
    finally:
        if pool:
            pool.shutdown()

    states = [r.state for r in replicas]
    return RemcResult(
        names=list(space.names),
        samples=samples[:kept],
        log_lik=log_lik[:kept],
        betas=betas,
        accept_rate=np.array([s.n_acc / max(s.n_prop, 1) for s in states]),
        exchange_rate=ex_acc / np.maximum(ex_att, 1),
        n_errors=np.array([s.n_errors for s in states]),
        steps=np.array([s.steps for s in states]),
    )


def select_initial(obs_summary, candidate_summaries, candidate_params, space: ParamSpace | None = None):
    """Candidate whose summary is closest to the mean observed summary.

    Summaries are latent means (latent mode) or feature vectors (feature
    mode).  Ties go to the lowest index.  The chosen vector is clipped into
    ``space`` when one is given.
    """
    cand = np.atleast_2d(np.asarray(candidate_summaries, dtype=float))
    params = np.atleast_2d(np.asarray(candidate_params, dtype=float))
    if cand.shape[0] == 0:
        raise ConfigError("no candidates to choose an initial value from")
    if params.shape[0] != cand.shape[0]:
        raise ConfigError("candidate summaries and parameters differ in length")
    target = np.atleast_2d(np.asarray(obs_summary, dtype=float)).mean(axis=0)
    best = int(np.argmin(np.sum((cand - target) ** 2, axis=1)))
    x = params[best].copy()
    if space is not None:
        x = np.clip(x, space.lower, space.upper)
    return x


def write_chain(path, result: RemcResult, meta: dict):
    """Comma-separated chain (header = parameter names + log_lik) and a JSON sidecar."""
    path = Path(path)
    lines = [",".join(result.names + ["log_lik"])]
    for x, ll in zip(result.samples, result.log_lik):
        lines.append(",".join(repr(float(v)) for v in [*x, ll]))
    path.write_text("\n".join(lines) + "\n")
    side = dict(meta)
    side.update(result.metadata())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def read_chain(path):
    path = Path(path)
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return names[:-1], data[:, :-1], data[:, -1]


def stage_summary(config: RemcConfig):
    return [asdict(s) for s in config.stages]
