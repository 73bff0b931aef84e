"""Forward simulators and hyperparameterized uncertainty models.

Two problems live here:

* the 2-story shear spring building (two stiffness factors ``theta``), with
  modal features and the 2x512 frequency-response embedding used as VAE
  input, under an isotropic Gaussian uncertainty model;
* a synthetic stand-in for a black-box time-series subsystem ``y(a, e)``
  driven by five aleatory variables ``a`` (truncated two-component Gaussian
  mixture on ``[0, 2]^5``) and four fixed epistemic variables ``e``.

All functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError

THETA_BOUNDS = (0.1, 2.0)
MU_BOUNDS = (0.1, 2.0)
SIGMA_BOUNDS = (0.0, 0.6)
GROUND_TRUTH = {"mu1": 0.49, "mu2": 0.92, "sigma": 0.1}


# --------------------------------------------------------------------------
# 2-DOF shear building


@dataclass(frozen=True)
class ShearModelConfig:
    m1: float = 16.5  # t
    m2: float = 16.1  # t
    k_bar: float = 29.7  # MN/m
    h1: float = 0.05
    h2: float = 0.05
    n_freq: int = 512
    df: float = 0.02  # Hz

    def __post_init__(self):
        for name in ("m1", "m2", "k_bar", "h1", "h2", "df"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"ShearModelConfig.{name} must be positive")
        if not (self.h1 < 1 and self.h2 < 1):
            raise ConfigError("damping ratios must lie in (0, 1)")

    @property
    def freq_grid(self):
        return self.df * np.arange(self.n_freq)


@dataclass
class ModalFeatures:
    """Natural frequencies (Hz) and participation functions.

    ``participation[..., j, k]`` is the k-th story component of mode j scaled
    by its participation factor.
    """

    f1: np.ndarray
    f2: np.ndarray
    participation: np.ndarray

    def as_vector(self):
        """``[f1, f2, b1phi11, b1phi12, b2phi21, b2phi22]`` along the last axis."""
        p = self.participation
        return np.stack(
            [self.f1, self.f2, p[..., 0, 0], p[..., 0, 1], p[..., 1, 0], p[..., 1, 1]], axis=-1
        )

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        part = np.stack([x[..., 2:4], x[..., 4:6]], axis=-2)
        return cls(x[..., 0], x[..., 1], part)


def eigen_2dof(theta, cfg: ShearModelConfig = ShearModelConfig()) -> ModalFeatures:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != 2:
        raise ConfigError("theta must have a trailing dimension of 2")
    if np.any(~(theta > 0)):
        raise DomainError("stiffness factors must be positive")
    k1 = cfg.k_bar * 1e6 * theta[..., 0]
    k2 = cfg.k_bar * 1e6 * theta[..., 1]
    m1, m2 = cfg.m1 * 1e3, cfg.m2 * 1e3
    # mass-normalised stiffness A = M^-1/2 K M^-1/2
    a = (k1 + k2) / m1
    b = -k2 / np.sqrt(m1 * m2)
    c = k2 / m2
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    lam = np.stack([half_tr - disc, half_tr + disc], axis=-1)
    # eigenvector of A for lam_j is (b, lam_j - a); b != 0 because k2 > 0
    v1 = np.broadcast_to(b[..., None], lam.shape)
    v2 = lam - a[..., None]
    phi1 = v1 / np.sqrt(m1)
    phi2 = v2 / np.sqrt(m2)
    # beta_j = phi_j' M 1 / phi_j' M phi_j
    beta = (m1 * phi1 + m2 * phi2) / (m1 * phi1**2 + m2 * phi2**2)
    part = np.stack([beta * phi1, beta * phi2], axis=-1)
    freq = np.sqrt(lam) / (2 * np.pi)
    return ModalFeatures(freq[..., 0], freq[..., 1], part)


def frf(mod: ModalFeatures, cfg: ShearModelConfig = ShearModelConfig()):
    """Sum-of-moduli frequency response per story, shape ``(..., 2, n_freq)``."""
    f = cfg.freq_grid
    fj = np.stack([mod.f1, mod.f2], axis=-1)[..., None]  # (..., 2 modes, 1)
    h = np.array([cfg.h1, cfg.h2])[:, None]
    ratio = f**2 / (fj**2 - f**2 + 2j * h * fj * f) + 1.0  # (..., mode, freq)
    # |bphi_{j,k} * ratio_j| summed over modes j, for story k
    part = np.abs(mod.participation)  # (..., mode, story)
    return np.einsum("...jk,...jf->...kf", part, np.abs(ratio))


class ShearFrfSimulator:
    """``theta -> |H|`` curves, shape ``(..., 2, 1, n_freq)``."""

    name = "shear2dof"
    n_params = 2

    def __init__(self, cfg: ShearModelConfig = ShearModelConfig()):
        self.cfg = cfg
        self.feature_shape = (2, 1, cfg.n_freq)

    def modal(self, theta):
        return eigen_2dof(theta, self.cfg)

    def simulate(self, theta):
        return frf(eigen_2dof(theta, self.cfg), self.cfg)[..., :, None, :]


# --------------------------------------------------------------------------
# Gaussian uncertainty model for theta


@dataclass(frozen=True)
class GaussianHyper:
    mu: tuple
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if not self.sigma >= 0:
            raise DomainError("sigma must be non-negative")

    @classmethod
    def from_vector(cls, v):
        return cls(mu=(v[0], v[1]), sigma=v[2])

    def as_vector(self):
        return np.array([*self.mu, self.sigma])

    def cdf(self, grid, dim):
        grid = np.asarray(grid, dtype=float)
        if self.sigma == 0:
            return (grid >= self.mu[dim]).astype(float)
        return special.ndtr((grid - self.mu[dim]) / self.sigma)


def sample_gaussian_hyper(hyper: GaussianHyper, n, rng, bounds=THETA_BOUNDS, max_reject=0.999):
    """``n`` iid draws of theta ~ N(mu, sigma^2 I), redrawn until in ``bounds``."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    mu = np.asarray(hyper.mu)
    lo, hi = bounds
    out = np.empty((n, mu.size))
    filled = drawn = 0
    while filled < n:
        batch = max(2 * (n - filled), 16)
        draws = mu + hyper.sigma * rng.standard_normal((batch, mu.size))
        drawn += batch
        ok = draws[np.all((draws >= lo) & (draws <= hi), axis=1)]
        take = min(ok.shape[0], n - filled)
        out[filled : filled + take] = ok[:take]
        filled += take
        if drawn >= 10_000 and filled / drawn < 1.0 - max_reject:
            raise DomainError(f"rejection rate above {max_reject:.1%}; hyperparameters degenerate")
    return out


# --------------------------------------------------------------------------
# Truncated Gaussian mixture for aleatory variables a


N_ALEATORY = 5
N_EPISTEMIC = 4
BOX = (0.0, 2.0)
PAIRS = list(combinations(range(N_ALEATORY), 2))  # (0,1), (0,2), ... (3,4)


def gmm_param_names(n_comp=2, dim=N_ALEATORY):
    names = [f"mu{i + 1}_{k + 1}" for k in range(n_comp) for i in range(dim)]
    names += [f"sigma{i + 1}_{k + 1}" for k in range(n_comp) for i in range(dim)]
    names += [
        f"rho{i + 1}{j + 1}_{k + 1}" for k in range(n_comp) for i, j in combinations(range(dim), 2)
    ]
    names += ["pi_1"]
    return names


@dataclass
class TruncatedGmm:
    """Two-component Gaussian mixture truncated to the box ``[lo, hi]^dim``.

    weights: (K,), means: (K, dim), stds: (K, dim), corrs: (K, dim*(dim-1)/2)
    in row-major upper-triangle order (12, 13, ..., 45).
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    corrs: np.ndarray
    box: tuple = BOX
    n_norm: int = 100_000
    norm_seed: int = 20190
    _z_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=float))
        k, d = self.means.shape
        self.corrs = np.asarray(self.corrs, dtype=float).reshape(k, d * (d - 1) // 2)
        if self.weights.shape != (k,) or self.stds.shape != (k, d):
            raise ConfigError("inconsistent mixture parameter shapes")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise DomainError("mixture weights must be non-negative and sum to 1")
        if np.any(~(self.stds > 0)):
            raise DomainError("component standard deviations must be positive")
        if np.any(np.abs(self.corrs) > 1):
            raise DomainError("correlations must lie in [-1, 1]")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    @classmethod
    def from_vector(cls, v, dim=N_ALEATORY, **kw):
        """Unpack the 41-entry hyperparameter layout of :func:`gmm_param_names`."""
        v = np.asarray(v, dtype=float)
        k = 2
        npair = dim * (dim - 1) // 2
        if v.size != 2 * k * dim + k * npair + 1:
            raise ConfigError(f"expected {2 * k * dim + k * npair + 1} mixture hyperparameters")
        means = v[: k * dim].reshape(k, dim)
        stds = v[k * dim : 2 * k * dim].reshape(k, dim)
        corrs = v[2 * k * dim : 2 * k * dim + k * npair].reshape(k, npair)
        pi1 = v[-1]
        return cls(np.array([pi1, 1 - pi1]), means, stds, corrs, **kw)

    def as_vector(self):
        return np.concatenate(
            [self.means.ravel(), self.stds.ravel(), self.corrs.ravel(), self.weights[:1]]
        )

    def correlation(self, k):
        d = self.dim
        r = np.eye(d)
        iu = np.triu_indices(d, 1)
        r[iu] = self.corrs[k]
        r.T[iu] = self.corrs[k]
        return r

    def covariance(self, k):
        s = self.stds[k]
        return self.correlation(k) * np.outer(s, s)

    def is_valid(self):
        """True when every component covariance is positive definite."""
        for k in range(self.n_components):
            try:
                np.linalg.cholesky(self.covariance(k))
            except np.linalg.LinAlgError:
                return False
        return True

    def _chol(self, k):
        try:
            return np.linalg.cholesky(self.covariance(k))
        except np.linalg.LinAlgError as exc:
            raise DomainError(f"covariance of component {k + 1} is not positive definite") from exc

    def log_normalizer(self, k):
        """log Z_k(A): probability mass of component k inside the box.

        Monte Carlo with a fixed seed and ``n_norm`` draws, cached per
        (mean, covariance), so the estimate is a deterministic function of
        the parameters.
        """
        key = (k, self.means[k].tobytes(), self.stds[k].tobytes(), self.corrs[k].tobytes())
        if key not in self._z_cache:
            rng = np.random.default_rng(self.norm_seed)
            draws = self.means[k] + rng.standard_normal((self.n_norm, self.dim)) @ self._chol(k).T
            frac = np.mean(np.all((draws >= self.box[0]) & (draws <= self.box[1]), axis=1))
            if frac < 1e-3:
                raise DomainError(f"component {k + 1} places <0.1% of its mass in the box")
            self._z_cache[key] = float(np.log(frac))
        return self._z_cache[key]

    def component_logpdf(self, a, k):
        a = np.asarray(a, dtype=float)
        L = self._chol(k)
        diff = a - self.means[k]
        sol = np.linalg.solve(L, diff.reshape(-1, self.dim).T).T.reshape(diff.shape)
        logdet = np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(sol**2, axis=-1) - logdet - 0.5 * self.dim * np.log(2 * np.pi)

    def in_box(self, a):
        return np.all((a >= self.box[0]) & (a <= self.box[1]), axis=-1)


def gmm_logpdf(gmm: TruncatedGmm, a):
    """log p(a) of the truncated mixture; ``-inf`` outside the box."""
    a = np.asarray(a, dtype=float)
    terms = []
    for k in range(gmm.n_components):
        if gmm.weights[k] == 0:
            continue
        terms.append(
            np.log(gmm.weights[k]) + gmm.component_logpdf(a, k) - gmm.log_normalizer(k)
        )
    out = special.logsumexp(np.stack(terms, axis=0), axis=0)
    return np.where(gmm.in_box(a), out, -np.inf)


def gmm_sample(gmm: TruncatedGmm, n, rng):
    """Component by weight, then rejection against the box."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    out = np.empty((n, gmm.dim))
    for k in range(gmm.n_components):
        idx = np.flatnonzero(comp == k)
        if idx.size == 0:
            continue
        L = gmm._chol(k)
        got, drawn = 0, 0
        while got < idx.size:
            batch = max(2 * (idx.size - got), 16)
            draws = gmm.means[k] + rng.standard_normal((batch, gmm.dim)) @ L.T
            drawn += batch
            ok = draws[gmm.in_box(draws)]
            take = min(ok.shape[0], idx.size - got)
            out[idx[got : got + take]] = ok[:take]
            got += take
            if drawn >= 2000 and got / drawn < 1e-3:
                raise DomainError(f"component {k + 1} box acceptance below 0.1%")
    return out


def gmm_marginal_cdf(gmm: TruncatedGmm, grid, dim, n=20_000, seed=0):
    """Monte Carlo marginal CDF of ``a[dim]`` on ``grid`` (fixed seed)."""
    draws = np.sort(gmm_sample(gmm, n, np.random.default_rng(seed))[:, dim])
    return np.searchsorted(draws, np.asarray(grid), side="right") / n


# --------------------------------------------------------------------------
# Synthetic sequence subsystem


class SyntheticSequenceSimulator:
    """Documented stand-in for the black-box ``y(a, e)`` subsystem.

    Output is a sum of three damped sinusoids on ``t = 0, 0.01, ..., 5.0`` s
    (501 steps), left-padded with 11 zeros to 512 samples.  Amplitudes,
    frequencies, damping and phases are smooth functions of ``(a, e)``;
    ``e4`` enters only weakly.  Returns shape ``(..., 1, 1, 512)``.
    """

    name = "sequence"
    n_steps = 501
    n_pad = 11
    dt = 0.01

    def __init__(self):
        self.feature_shape = (1, 1, self.n_steps + self.n_pad)
        self.t = self.dt * np.arange(self.n_steps)

    def simulate(self, a, e):
        a = np.asarray(a, dtype=float)
        e = np.asarray(e, dtype=float)
        if a.shape[-1] != N_ALEATORY or e.shape[-1] != N_EPISTEMIC:
            raise ConfigError("expected a in R^5 and e in R^4")
        if np.any((a < BOX[0]) | (a > BOX[1])) or np.any((e < BOX[0]) | (e > BOX[1])):
            raise DomainError("a and e must lie in [0, 2]")
        a1, a2, a3, a4, a5 = (a[..., i, None] for i in range(5))  # trailing time axis
        e1, e2, e3, e4 = (e[..., i, None] for i in range(4))
        t = self.t
        modes = [
            # amplitude, frequency (Hz), damping ratio, phase
            (1.0 + 0.5 * a3 * e2, 0.6 + 0.4 * a1 + 0.3 * e1, 0.04 + 0.03 * a2, 0.3 * (a2 - e1)),
            (0.6 + 0.3 * a5, 1.8 + 0.5 * a4 + 0.4 * e3, 0.02 + 0.02 * e2, 0.5 * a1 * e3),
            (0.3 + 0.2 * a1 * a4, 3.5 + 0.3 * a2 + 0.1 * e4, 0.03 + 0.01 * e4, 0.2 * a5),
        ]
        y = np.zeros(np.broadcast_shapes(a1.shape, e1.shape)[:-1] + t.shape)
        for amp, freq, zeta, phase in modes:
            w = 2 * np.pi * freq
            y = y + amp * np.exp(-zeta * w * t) * np.sin(w * np.sqrt(1 - zeta**2) * t + phase)
        y = y + 0.1 * np.tanh(a5 - e1) * np.exp(-t)
        pad = np.zeros(y.shape[:-1] + (self.n_pad,))
        return np.concatenate([pad, y], axis=-1)[..., None, None, :]


# --------------------------------------------------------------------------
# dataset files: raw little-endian float32 + JSON sidecar


def write_dataset(path, data, sidecar: dict):
    path = Path(path)
    data = np.ascontiguousarray(data, dtype="<f4")
    path.write_bytes(data.tobytes())
    meta = dict(sidecar)
    meta["shape"] = list(data.shape)
    meta["dtype"] = "<f4"
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype=meta.get("dtype", "<f4"))
    return data.reshape(meta["shape"]), meta


def shear_config_dict(cfg: ShearModelConfig):
    return asdict(cfg)
