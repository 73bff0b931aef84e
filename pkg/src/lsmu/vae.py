"""Residual 1-D convolutional VAE built on :mod:`lsmu.autodiff`.

Encoder: stem conv, then ``num_residual_stages`` downsampling residual blocks
(each halves the length and doubles the channels), a hidden dense layer and
two dense heads for the latent mean and log-std.  The decoder mirrors it with
transposed convolutions and emits a mean and log-std per input entry.

Inputs are raw feature tensors shaped ``(n, channels, 1, length)``.  A fixed
:class:`FeatureTransform` fitted on the training set maps them to the space the
networks see (channels-last ``(n, length, channels)``).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent space; arrays may carry batch dims."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape:
            raise ConfigError("latent mean and std shapes differ")
        if np.any(~(self.std > 0)) or not np.all(np.isfinite(self.mean)):
            raise NumericError("latent std must be positive and finite")

    @property
    def dim(self):
        return self.mean.shape[-1]

    def __len__(self):
        return 1 if self.mean.ndim == 1 else self.mean.shape[0]

    def __getitem__(self, idx):
        return LatentGaussian(self.mean[idx], self.std[idx])

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))


@dataclass
class VaeConfig:
    input_channels: int = 2
    input_length: int = 512
    latent_dim: int = 3
    num_residual_stages: int = 4
    channels_base: int = 8
    kernel_size: int = 3
    fc_hidden: int = 64
    beta_kl: float = 1.0
    decoder_std_floor: float = 0.0
    decoder_std: str = "entry"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be at least 1")
        if self.num_residual_stages < 0 or self.input_length % (2**self.num_residual_stages):
            raise ConfigError("input_length must be divisible by 2**num_residual_stages")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if min(self.input_channels, self.channels_base, self.fc_hidden) < 1:
            raise ConfigError("channel and layer sizes must be positive")
        if not self.beta_kl > 0:
            raise ConfigError("beta_kl must be positive")
        if self.decoder_std not in ("entry", "shared"):
            raise ConfigError("decoder_std must be 'entry' or 'shared'")
        if self.decoder_std_floor < 0:
            raise ConfigError("decoder_std_floor must be non-negative")

    def encoder_stages(self):
        """``(c_in, c_out, length_out)`` per residual stage of the encoder."""
        out = []
        c, length = self.channels_base, self.input_length
        for _ in range(self.num_residual_stages):
            length //= 2
            out.append((c, 2 * c, length))
            c *= 2
        return out

    def decoder_stages(self):
        out = []
        c = self.channels_base * 2**self.num_residual_stages
        length = self.input_length // 2**self.num_residual_stages
        for _ in range(self.num_residual_stages):
            length *= 2
            out.append((c, c // 2, length))
            c //= 2
        return out

    @property
    def bottleneck(self):
        return (
            self.input_length // 2**self.num_residual_stages,
            self.channels_base * 2**self.num_residual_stages,
        )


@dataclass
class FeatureTransform:
    """``u = (g(x) - offset) / scale`` with ``g`` = log or identity.

    ``offset`` has shape (length, channels); ``scale`` is a scalar.  Stored as
    float32 so checkpoints round-trip exactly.
    """

    kind: str = "none"
    offset: np.ndarray | None = None
    scale: float = 1.0

    @classmethod
    def fit(cls, data, kind="log"):
        g = _forward_map(_channels_last(data), kind).astype(np.float64)
        offset = g.mean(axis=0)
        scale = float(np.std(g - offset)) or 1.0
        return cls(kind, offset.astype(np.float32), float(np.float32(scale)))

    def apply(self, data):
        g = _forward_map(_channels_last(data), self.kind)
        off = 0.0 if self.offset is None else self.offset
        return ((g - off) / np.float32(self.scale)).astype(np.float32)

    def invert(self, u):
        """Model space ``(n, length, channels)`` back to raw ``(n, channels, 1, length)``."""
        off = 0.0 if self.offset is None else self.offset
        g = np.asarray(u, dtype=np.float64) * self.scale + off
        x = np.exp(g) if self.kind == "log" else g
        return np.transpose(x, (0, 2, 1))[:, :, None, :]


def _channels_last(data):
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[2] != 1:
        raise ConfigError(f"expected features shaped (n, channels, 1, length), got {data.shape}")
    return np.transpose(data[:, :, 0, :], (0, 2, 1))


def _forward_map(x, kind):
    if kind == "log":
        if np.any(x <= 0):
            raise ConfigError("log transform needs strictly positive features")
        return np.log(x, dtype=np.float32)
    if kind == "none":
        return x.astype(np.float32)
    raise ConfigError(f"unknown feature transform {kind!r}")


def init_params(cfg: VaeConfig, seed=0, dtype=np.float32):
    """He-normal weights, zero biases; returns an insertion-ordered dict."""
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size
    P = {}

    def conv(name, c_in, c_out, kernel, gain=2.0):
        P[f"{name}.w"] = rng.normal(0, np.sqrt(gain / (c_in * kernel)), (c_in, kernel, c_out))
        P[f"{name}.b"] = np.zeros(c_out)

    def dense(name, n_in, n_out, gain=2.0):
        P[f"{name}.w"] = rng.normal(0, np.sqrt(gain / n_in), (n_in, n_out))
        P[f"{name}.b"] = np.zeros(n_out)

    conv("enc.stem", cfg.input_channels, cfg.channels_base, k)
    for i, (c_in, c_out, _) in enumerate(cfg.encoder_stages()):
        conv(f"enc.s{i}.c1", c_in, c_out, k)
        conv(f"enc.s{i}.c2", c_out, c_out, k, gain=1.0)
        conv(f"enc.s{i}.skip", c_in, c_out, 1, gain=1.0)
    flat = int(np.prod(cfg.bottleneck))
    dense("enc.fc", flat, cfg.fc_hidden)
    dense("enc.mean", cfg.fc_hidden, cfg.latent_dim, gain=1.0)
    dense("enc.logstd", cfg.fc_hidden, cfg.latent_dim, gain=0.01)

    dense("dec.fc1", cfg.latent_dim, cfg.fc_hidden)
    dense("dec.fc2", cfg.fc_hidden, flat)
    for i, (c_in, c_out, _) in enumerate(cfg.decoder_stages()):
        conv(f"dec.s{i}.up", c_in, c_out, k)
        conv(f"dec.s{i}.c2", c_out, c_out, k, gain=1.0)
        conv(f"dec.s{i}.skip", c_in, c_out, 1, gain=1.0)
    conv("dec.mean", cfg.channels_base, cfg.input_channels, k, gain=1.0)
    if cfg.decoder_std == "shared":
        P["dec.logstd.b"] = np.zeros(cfg.input_channels)
    else:
        conv("dec.logstd", cfg.channels_base, cfg.input_channels, k, gain=0.01)
    return {name: np.asarray(v, dtype=dtype) for name, v in P.items()}


def _encoder_graph(cfg, P, u):
    pad = cfg.kernel_size // 2
    h = ad.relu(ad.conv1d(u, P["enc.stem.w"], P["enc.stem.b"], padding=pad))
    for i in range(cfg.num_residual_stages):
        m = ad.relu(ad.conv1d(h, P[f"enc.s{i}.c1.w"], P[f"enc.s{i}.c1.b"], stride=2, padding=pad))
        m = ad.conv1d(m, P[f"enc.s{i}.c2.w"], P[f"enc.s{i}.c2.b"], padding=pad)
        s = ad.conv1d(h, P[f"enc.s{i}.skip.w"], P[f"enc.s{i}.skip.b"], stride=2)
        h = ad.relu(ad.add(m, s))
    h = ad.reshape(h, (h.shape[0], -1))
    h = ad.relu(ad.linear(h, P["enc.fc.w"], P["enc.fc.b"]))
    return ad.linear(h, P["enc.mean.w"], P["enc.mean.b"]), ad.linear(h, P["enc.logstd.w"], P["enc.logstd.b"])


def _decoder_graph(cfg, P, z):
    pad = cfg.kernel_size // 2
    h = ad.relu(ad.linear(z, P["dec.fc1.w"], P["dec.fc1.b"]))
    h = ad.relu(ad.linear(h, P["dec.fc2.w"], P["dec.fc2.b"]))
    h = ad.reshape(h, (h.shape[0], *cfg.bottleneck))
    for i in range(cfg.num_residual_stages):
        m = ad.conv_transpose1d(
            h, P[f"dec.s{i}.up.w"], P[f"dec.s{i}.up.b"], stride=2, padding=pad, output_padding=1
        )
        m = ad.conv1d(ad.relu(m), P[f"dec.s{i}.c2.w"], P[f"dec.s{i}.c2.b"], padding=pad)
        s = ad.conv_transpose1d(h, P[f"dec.s{i}.skip.w"], P[f"dec.s{i}.skip.b"], stride=2, output_padding=1)
        h = ad.relu(ad.add(m, s))
    mean = ad.conv1d(h, P["dec.mean.w"], P["dec.mean.b"], padding=pad)
    if cfg.decoder_std == "shared":
        # one learned log-std per channel, broadcast over positions
        logstd = ad.add(ad.mul(mean, 0.0), P["dec.logstd.b"])
    else:
        logstd = ad.conv1d(h, P["dec.logstd.w"], P["dec.logstd.b"], padding=pad)
    return mean, logstd


def kl_to_standard_normal(mean, logstd):
    """Closed-form KL(N(mean, exp(logstd)^2) || N(0, I)) summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    logstd = np.asarray(logstd, dtype=np.float64)
    return np.sum(0.5 * (np.exp(2 * logstd) + mean**2 - 1.0) - logstd, axis=-1)


def loss_graph(cfg: VaeConfig, P, u, noise):
    """Negative ELBO averaged over the batch, as a scalar Variable.

    ``u``: model-space batch (n, length, channels); ``noise``: (n, latent_dim)
    standard-normal draws for the single reparameterised sample per datum.
    """
    n = u.shape[0]
    z_mean, z_logstd = _encoder_graph(cfg, P, u)
    z = ad.add(z_mean, ad.mul(ad.exp(z_logstd), noise.astype(z_mean.dtype)))
    x_mean, x_head = _decoder_graph(cfg, P, z)
    if cfg.decoder_std_floor > 0:
        x_std = ad.add(ad.exp(x_head), cfg.decoder_std_floor)
        x_logstd = ad.log(x_std)
        resid = ad.div(ad.sub(u, x_mean), x_std)
    else:
        x_logstd = x_head
        resid = ad.mul(ad.sub(u, x_mean), ad.exp(ad.mul(x_head, -1.0)))
    nll = ad.add(ad.sum(x_logstd), ad.mul(ad.sum(ad.square(resid)), 0.5))
    kl = ad.sub(
        ad.add(ad.mul(ad.sum(ad.exp(ad.mul(z_logstd, 2.0))), 0.5), ad.mul(ad.sum(ad.square(z_mean)), 0.5)),
        ad.add(ad.sum(z_logstd), 0.5 * z_mean.value.size),
    )
    const = 0.5 * LOG_2PI * u.shape[1] * u.shape[2]
    total = ad.add(ad.add(nll, ad.mul(kl, cfg.beta_kl)), const * n)
    return ad.mul(total, 1.0 / n)


@dataclass
class VaeModel:
    config: VaeConfig
    params: dict
    transform: FeatureTransform = field(default_factory=FeatureTransform)

    @classmethod
    def initialize(cls, config: VaeConfig, seed=0, transform=None):
        return cls(config, init_params(config, seed), transform or FeatureTransform())

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def architecture(self):
        """(block, input (length, channels), output (length, channels)) rows."""
        cfg = self.config
        rows = [("enc.stem", (cfg.input_length, cfg.input_channels), (cfg.input_length, cfg.channels_base))]
        for i, (c_in, c_out, length) in enumerate(cfg.encoder_stages()):
            rows.append((f"enc.s{i}", (2 * length, c_in), (length, c_out)))
        for i, (c_in, c_out, length) in enumerate(cfg.decoder_stages()):
            rows.append((f"dec.s{i}", (length // 2, c_in), (length, c_out)))
        rows.append(("dec.head", (cfg.input_length, cfg.channels_base), (cfg.input_length, cfg.input_channels)))
        return rows

    def to_model_space(self, x):
        u = self.transform.apply(x)
        cfg = self.config
        if u.shape[1:] != (cfg.input_length, cfg.input_channels):
            raise ConfigError(
                f"features of shape {np.shape(x)[1:]} do not match "
                f"({cfg.input_channels}, 1, {cfg.input_length})"
            )
        return u

    def _vars(self, grad=False):
        make = ad.parameter if grad else ad.Variable
        return {k: make(v, name=k) for k, v in self.params.items()}

    def encode_u(self, u, chunk=512):
        """Encode model-space inputs; returns (mean, std) float64 arrays."""
        P = self._vars()
        means, stds = [], []
        with ad.no_grad():
            for s in range(0, u.shape[0], chunk):
                m, ls = _encoder_graph(self.config, P, ad.Variable(u[s : s + chunk]))
                means.append(m.value.astype(np.float64))
                stds.append(np.exp(ls.value.astype(np.float64)))
        return np.concatenate(means), np.concatenate(stds)

    def checksum(self):
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def encode(model: VaeModel, x) -> LatentGaussian:
    """q(z|x) for raw features ``x`` shaped (n, C, 1, L) or (C, 1, L)."""
    single = np.ndim(x) == 3
    mean, std = model.encode_u(model.to_model_space(x))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise NumericError("encoder produced non-finite output")
    out = LatentGaussian(mean, std)
    return out[0] if single else out


def decode(model: VaeModel, z):
    """Mean and std of p(x|z) in model space, each shaped (n, C, 1, L)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    if z.shape[-1] != model.config.latent_dim:
        raise ConfigError(f"z must have {model.config.latent_dim} entries")
    with ad.no_grad():
        m, ls = _decoder_graph(model.config, model._vars(), ad.Variable(z))
    to_nchw = lambda a: np.transpose(a.astype(np.float64), (0, 2, 1))[:, :, None, :]  # noqa: E731
    std = np.exp(ls.value.astype(np.float64)) + model.config.decoder_std_floor
    return to_nchw(m.value), to_nchw(std)


def vae_loss(model: VaeModel, batch, rng=None, noise=None):
    """Mean negative ELBO of raw ``batch``; one reparameterised draw per datum."""
    u = model.to_model_space(batch)
    if u.shape[0] == 0:
        raise ConfigError("empty batch")
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.standard_normal((u.shape[0], model.config.latent_dim))
    with ad.no_grad():
        val = float(loss_graph(model.config, model._vars(), ad.Variable(u), noise).value)
    if not np.isfinite(val):
        raise NumericError("VAE loss is not finite")
    return val


def reconstruction_error(model: VaeModel, data):
    """Mean relative L2 error of decode(encode-mean(x)) against x in raw units."""
    u = model.to_model_space(data)
    mean, _ = model.encode_u(u)
    x_mean, _ = decode(model, mean)
    rec = model.transform.invert(np.transpose(x_mean[:, :, 0, :], (0, 2, 1)))
    raw = np.asarray(data, dtype=np.float64)
    num = np.linalg.norm((rec - raw).reshape(len(raw), -1), axis=1)
    den = np.linalg.norm(raw.reshape(len(raw), -1), axis=1)
    return float(np.mean(num / den))


class TrainingDiverged(NumericError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def train(model: VaeModel, data, epochs, batch_size=64, seed=0, lr=1e-3, betas=(0.9, 0.999), callback=None):
    """Adam on the negative ELBO with a fixed per-epoch shuffle from ``seed``.

    Returns ``(model, history)`` where history holds the mean batch loss of
    each epoch.  On a non-finite loss or gradient raises
    :class:`TrainingDiverged` carrying the parameters from before the step.
    """
    u_all = model.to_model_space(data)
    if not np.all(np.isfinite(u_all)):
        raise NumericError("training data contain non-finite values")
    if epochs == 0:
        return model, []
    rng = np.random.default_rng(seed)
    names = list(model.params)
    arrays = [model.params[k] for k in names]
    state = ad.AdamState(arrays)
    history = []
    n = u_all.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            noise = rng.standard_normal((idx.size, model.config.latent_dim))
            P = {k: ad.parameter(v, name=k) for k, v in zip(names, arrays)}
            loss = loss_graph(model.config, P, ad.Variable(u_all[idx]), noise)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", _snapshot(model))
            loss.backward()
            grads = [P[k].grad if P[k].grad is not None else np.zeros_like(P[k].value) for k in names]
            good = _snapshot(model) if not all(np.all(np.isfinite(g)) for g in grads) else None
            try:
                ad.adam_step(arrays, grads, state, lr=lr, betas=betas)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), good) from exc
            total += value * idx.size
            count += idx.size
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return model, history


def _snapshot(model):
    return VaeModel(model.config, {k: v.copy() for k, v in model.params.items()}, model.transform)


# --------------------------------------------------------------------------
# checkpoint: JSON manifest + little-endian float32 blob


def save_checkpoint(model: VaeModel, path, extra=None):
    """Write ``path`` (manifest, text) and ``path.with_suffix('.bin')`` (blob)."""
    path = Path(path)
    tensors = dict(model.params)
    if model.transform.offset is not None:
        tensors["transform.offset"] = model.transform.offset
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.size
    manifest = {
        "format": "lsmu-vae/1",
        "config": asdict(model.config),
        "transform": {"kind": model.transform.kind, "scale": model.transform.scale},
        "tensors": entries,
        "n_values": offset,
        "checksum": model.checksum(),
    }
    if extra:
        manifest.update(extra)
    blob_path = path.with_suffix(".bin")
    blob_path.write_bytes(b"".join(blobs))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, blob_path


def load_checkpoint(path) -> VaeModel:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "lsmu-vae/1":
        raise ConfigError(f"{path} is not an lsmu VAE checkpoint")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    if flat.size != manifest["n_values"]:
        raise ConfigError("checkpoint blob size does not match manifest")
    tensors = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"]))
        tensors[e["name"]] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float32)
    offset = tensors.pop("transform.offset", None)
    tr = FeatureTransform(manifest["transform"]["kind"], offset, manifest["transform"]["scale"])
    return VaeModel(VaeConfig(**manifest["config"]), tensors, tr)
