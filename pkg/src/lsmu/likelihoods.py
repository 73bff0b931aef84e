"""Likelihood evaluators.

* latent-space likelihood: each observation/simulation pair contributes the
  integral of q(z|x_obs) q(z|x_sim) / q(z), which is Gaussian in z and has a
  closed form per latent dimension;
* ABC baselines built on the Euclidean distance between sample means and the
  Bhattacharyya distance between binned PMFs, both through exp(-d^2/eps^2);
* the theoretical likelihood for the 2DOF shear model, obtained by inverting
  the (one-to-one) modal feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import ConfigError, DivergenceError, DomainError, NumericError
from .models import THETA_BOUNDS, GaussianHyper, ModalFeatures, ShearModelConfig, eigen_2dof
from .vae import LatentGaussian, VaeModel, encode

# ---------------------------------------------------------------------------
# latent-space likelihood


def _pair_terms(m1, s1, m2, s2, m3, s3):
    """Per-dimension log of the pair integral (broadcasting)."""
    v1, v2, v3 = s1 * s1, s2 * s2, s3 * s3
    a = 0.5 / v1 + 0.5 / v2 - 0.5 / v3
    if np.any(~(a > 0)):
        bad = np.argwhere(~(a > 0))[0]
        raise DivergenceError(
            "encoder variance exceeds the prior variance (a <= 0) in latent dimension "
            f"{int(bad[-1])}",
            dimension=int(bad[-1]),
        )
    b = -m1 / v1 - m2 / v2 + m3 / v3
    c = 0.5 * (m1 * m1 / v1 + m2 * m2 / v2 - m3 * m3 / v3)
    log_d = np.log(s3) - np.log(s1) - np.log(s2) - 0.5 * np.log(2 * np.pi)
    return log_d + (b * b / (4 * a) - c) + 0.5 * (np.log(np.pi) - np.log(a))


def log_pair_integral(qobs: LatentGaussian, qsim: LatentGaussian, prior: LatentGaussian):
    """log of the integral over z of q_obs(z) q_sim(z) / q(z)."""
    if not (qobs.dim == qsim.dim == prior.dim):
        raise ConfigError("latent dimensions differ")
    terms = _pair_terms(qobs.mean, qobs.std, qsim.mean, qsim.std, prior.mean, prior.std)
    return np.sum(terms, axis=-1)


def pair_integral(qobs: LatentGaussian, qsim: LatentGaussian, prior: LatentGaussian | None = None):
    """Closed-form pair integral; raises DivergenceError when a <= 0 in some dimension."""
    prior = prior or LatentGaussian.standard(qobs.dim)
    return np.exp(log_pair_integral(qobs, qsim, prior))


@dataclass
class EncodedSet:
    """Batched encoder outputs plus the prior q(z) used as the denominator."""

    latents: LatentGaussian
    prior: LatentGaussian | None = None

    def __post_init__(self):
        if self.latents.mean.ndim == 1:
            self.latents = LatentGaussian(self.latents.mean[None], self.latents.std[None])
        if self.prior is None:
            self.prior = LatentGaussian.standard(self.latents.dim)
        if self.prior.dim != self.latents.dim:
            raise ConfigError("prior and encodings have different latent dimension")

    def __len__(self):
        return self.latents.mean.shape[0]

    @classmethod
    def from_features(cls, model: VaeModel, x, prior=None):
        return cls(encode(model, x), prior)


def empirical_prior(latents: LatentGaussian) -> LatentGaussian:
    """Gaussian moment fit to the aggregate posterior of a set of encodings."""
    mean = latents.mean.mean(axis=0)
    var = latents.mean.var(axis=0) + np.mean(latents.std**2, axis=0)
    return LatentGaussian(mean, np.sqrt(var))


def latent_log_likelihood(obs: EncodedSet, sims: EncodedSet) -> float:
    """sum_i log sum_j l_ij, inner sum in log space (no 1/N_sim factor)."""
    if len(obs) < 1 or len(sims) < 1:
        raise ConfigError("need at least one observation and one simulation")
    prior = obs.prior
    q1, q2 = obs.latents, sims.latents
    if q1.dim != q2.dim:
        raise ConfigError("latent dimensions differ")
    terms = _pair_terms(
        q1.mean[:, None, :], q1.std[:, None, :],
        q2.mean[None, :, :], q2.std[None, :, :],
        prior.mean, prior.std,
    )
    log_l = terms.sum(axis=-1)
    per_obs = special.logsumexp(log_l, axis=1)
    if not np.all(np.isfinite(per_obs)):
        raise NumericError("latent likelihood is not finite")
    return float(np.sum(per_obs))


# ---------------------------------------------------------------------------
# ABC baselines


@dataclass
class AbcConfig:
    epsilon: float = 0.01
    n_bin: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.n_bin < 2:
            raise ConfigError("n_bin must be at least 2")


@dataclass
class BinnedPmf:
    edges: list
    probs: np.ndarray

    def __post_init__(self):
        for e in self.edges:
            if np.any(np.diff(e) <= 0):
                raise ConfigError("bin edges must be strictly increasing")
        if self.probs.ndim != len(self.edges):
            raise ConfigError("pmf rank does not match edges")
        if not np.isclose(self.probs.sum(), 1.0, rtol=0, atol=1e-9):
            raise ConfigError("pmf does not sum to 1")


def pooled_edges(a, b, n_bin):
    """Equal-width edges over the per-dimension min/max of both sample sets."""
    pooled = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    lo, hi = pooled.min(axis=0), pooled.max(axis=0)
    width = hi - lo
    pad = np.where(width > 0, 0.0, 0.5 * np.maximum(np.abs(lo), 1.0) * 1e-9)
    return [np.linspace(l - p, h + p, n_bin + 1) for l, h, p in zip(lo, hi, pad)]


def bin_pmf(samples, edges) -> BinnedPmf:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != len(edges):
        raise ConfigError("sample dimension does not match edges")
    # clip so samples on the top edge (or marginally outside) land in edge bins
    clipped = np.column_stack(
        [np.clip(samples[:, k], e[0], e[-1]) for k, e in enumerate(edges)]
    )
    counts, _ = np.histogramdd(clipped, bins=edges)
    return BinnedPmf(list(edges), counts / counts.sum())


def bhattacharyya_distance(p: BinnedPmf, q: BinnedPmf) -> float:
    """-log sum sqrt(p q); ``inf`` for disjoint supports."""
    if p.probs.shape != q.probs.shape or any(
        not np.array_equal(a, b) for a, b in zip(p.edges, q.edges)
    ):
        raise ConfigError("PMFs must share bin edges")
    bc = float(np.sum(np.sqrt(p.probs * q.probs)))
    if bc <= 0:
        return np.inf
    return max(0.0, -np.log(bc))


def euclidean_distance(obs, sim) -> float:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    sim = np.atleast_2d(np.asarray(sim, dtype=float))
    if obs.shape[1] != sim.shape[1]:
        raise ConfigError("feature dimensions differ")
    return float(np.linalg.norm(obs.mean(axis=0) - sim.mean(axis=0)))


def abc_log_likelihood(d, epsilon) -> float:
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    return -(np.asarray(d, dtype=float) ** 2) / epsilon**2


def bhattacharyya_log_likelihood(obs, sim, cfg: AbcConfig) -> float:
    edges = pooled_edges(obs, sim, cfg.n_bin)
    d = bhattacharyya_distance(bin_pmf(obs, edges), bin_pmf(sim, edges))
    return float(abc_log_likelihood(d, cfg.epsilon))


def euclidean_log_likelihood(obs, sim, cfg: AbcConfig) -> float:
    return float(abc_log_likelihood(euclidean_distance(obs, sim), cfg.epsilon))


# ---------------------------------------------------------------------------
# theoretical likelihood (2DOF)

_GRID = None


def _start_grid(cfg):
    global _GRID
    if _GRID is None or _GRID[0] != cfg:
        g = np.linspace(*THETA_BOUNDS, 40)
        th = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        _GRID = (cfg, th, eigen_2dof(th, cfg).as_vector())
    return _GRID[1], _GRID[2]


def invert_features(x, cfg: ShearModelConfig = ShearModelConfig(), tol=1e-8, n_starts=4):
    """theta* minimising ||h(theta) - x|| for one or more modal feature vectors.

    Starts from the nearest points of a 40x40 grid over the theta box and
    refines with bounded least squares.  Raises DomainError when the best
    residual exceeds ``tol`` or theta* falls outside the box.
    """
    if isinstance(x, ModalFeatures):
        x = x.as_vector()
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 6:
        raise ConfigError("modal feature vectors have 6 entries")
    grid_th, grid_h = _start_grid(cfg)
    lo, hi = THETA_BOUNDS
    out = np.empty((len(x), 2))
    for i, target in enumerate(x):
        dist = np.sum((grid_h - target) ** 2, axis=1)
        best = None
        for j in np.argsort(dist)[:n_starts]:
            res = optimize.least_squares(
                lambda th: eigen_2dof(th, cfg).as_vector() - target,
                grid_th[j],
                bounds=(0.5 * lo, 1.5 * hi),
                xtol=1e-15, ftol=1e-15, gtol=1e-15,
            )
            r = float(np.linalg.norm(res.fun))
            if best is None or r < best[0]:
                best = (r, res.x)
            if r <= tol:
                break
        r, th = best
        if r > tol:
            raise DomainError(f"feature inversion residual {r:.3g} exceeds tolerance {tol:g}")
        if np.any(th < lo - 1e-6) or np.any(th > hi + 1e-6):
            raise DomainError(f"inverted theta {th} lies outside {THETA_BOUNDS}")
        out[i] = th
    return out[0] if single else out


def theoretical_log_likelihood_2dof(theta_star, hyper: GaussianHyper) -> float:
    """sum_i [-||theta*_i - mu||^2 / (2 sigma^2) - N_theta log sigma].

    ``theta_star`` are already-inverted observations (see invert_features);
    constant Jacobian factors are dropped.
    """
    th = np.atleast_2d(np.asarray(theta_star, dtype=float))
    if not hyper.sigma > 0:
        raise DomainError("theoretical likelihood needs sigma > 0")
    sq = np.sum((th - np.asarray(hyper.mu)) ** 2, axis=1)
    return float(np.sum(-sq / (2 * hyper.sigma**2)) - th.size * np.log(hyper.sigma))
