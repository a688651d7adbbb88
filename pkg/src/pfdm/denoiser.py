"""Noise-prediction networks.

Two realisations share one duck-typed contract (``predict(x_t, t, labels)``,
``input_shape``, ``trainable``):

* :class:`OracleDenoiser` computes the exact optimal noise prediction for an
  isotropic Gaussian mixture, so samplers can be validated without training.
* :class:`MLPDenoiser` is a small conditional network with hand-written
  backpropagation, trained by :func:`pfdm.diffusion.train_ddpm`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from ._rng import stream

OPTIMIZERS = ("sgd", "momentum", "adam")
TIME_EMBEDDINGS = ("sinusoidal", "learned")


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    n_steps: int = 1000
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    conditional: bool = False
    time_embedding: str = "sinusoidal"
    time_dim: int = 32
    hidden: Sequence[int] = (128, 128)
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "n_steps", "time_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"time_embedding must be one of {TIME_EMBEDDINGS}")
        if self.time_embedding == "sinusoidal" and self.time_dim % 2:
            raise ValueError("sinusoidal time_dim must be even")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class GaussianMixtureSpec:
    """Isotropic Gaussian mixture ``sum_k w_k N(mu_k, s_k^2 I)``.

    ``labels`` optionally tags each component with a class id; a labelled
    query then only sees the components carrying that label.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None] if self.weights.size == means.size else means[None, :]
        self.means = means
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.size != k:
            raise ValueError("weights, means and variances must agree on component count")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(k)

    @classmethod
    def single(cls, mean, variance):
        return cls([1.0], np.atleast_1d(np.asarray(mean, dtype=np.float64))[None, :], [variance])

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, n, seed=0, label=None):
        rng = stream(seed, "mixture")
        weights = self.weights
        if label is not None and self.labels is not None:
            weights = np.where(self.labels == label, weights, 0.0)
            weights = weights / weights.sum()
        comp = rng.choice(weights.size, size=n, p=weights)
        x = self.means[comp] + np.sqrt(self.variances[comp])[:, None] * rng.standard_normal((n, self.dim))
        labels = None if self.labels is None else self.labels[comp]
        return x, labels

    def diffused(self, alpha_bar):
        """Mixture of the same components pushed through ``q(x_t | x_0)``."""
        return GaussianMixtureSpec(
            self.weights,
            np.sqrt(alpha_bar) * self.means,
            alpha_bar * self.variances + 1.0 - alpha_bar,
            self.labels,
        )


class OracleDenoiser:
    """Exact ``E[z | x_t]`` for data drawn from a Gaussian mixture."""

    trainable = False

    def __init__(self, spec: GaussianMixtureSpec, schedule, input_shape=None):
        self.spec = spec
        self.schedule = schedule
        self.input_shape = tuple(input_shape) if input_shape is not None else (spec.dim,)

    def _alpha(self, t, n):
        t = self.schedule.check_step(t)
        a = self.schedule.alpha_bar(t)
        return np.broadcast_to(np.asarray(a, dtype=np.float64), (n,))[:, None]

    def responsibilities(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.spec.dim)
        a = self._alpha(t, x.shape[0])
        return np.exp(self._log_resp(x, a, labels))

    def _log_resp(self, x, a, labels):
        sp = self.spec
        var = a * sp.variances[None, :] + 1.0 - a  # (n, K)
        diff = x[:, None, :] - np.sqrt(a)[:, :, None] * sp.means[None, :, :]
        sq = np.sum(diff**2, axis=2)
        logp = np.log(sp.weights)[None, :] - 0.5 * sp.dim * np.log(2 * np.pi * var) - sq / (2 * var)
        if labels is not None and sp.labels is not None:
            labels = np.broadcast_to(np.asarray(labels), (x.shape[0],))
            logp = np.where(sp.labels[None, :] == labels[:, None], logp, -np.inf)
        return logp - logsumexp(logp, axis=1, keepdims=True)

    def posterior_mean(self, x, t, labels=None):
        sp = self.spec
        x = np.asarray(x, dtype=np.float64).reshape(-1, sp.dim)
        a = self._alpha(t, x.shape[0])
        r = np.exp(self._log_resp(x, a, labels))
        var = a * sp.variances[None, :] + 1.0 - a
        gain = np.sqrt(a) * sp.variances[None, :] / var  # (n, K)
        diff = x[:, None, :] - np.sqrt(a)[:, :, None] * sp.means[None, :, :]
        comp_means = sp.means[None, :, :] + gain[:, :, None] * diff
        return np.einsum("nk,nkd->nd", r, comp_means)

    def predict(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(x.shape[0], -1)
        a = self._alpha(t, flat.shape[0])
        mean = self.posterior_mean(flat, t, labels)
        return ((flat - np.sqrt(a) * mean) / np.sqrt(1.0 - a)).reshape(x.shape)


def oracle_denoiser(spec: GaussianMixtureSpec, schedule, input_shape=None) -> OracleDenoiser:
    return OracleDenoiser(spec, schedule, input_shape)


def _silu(a):
    s = expit(a)
    return a * s, s


def sinusoidal_features(t, T, dim):
    """``sin``/``cos`` features of ``t / T`` at log-spaced frequencies in [1, 1000]."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), dim // 2))
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)], axis=1)


class MLPDenoiser:
    """Fully connected noise predictor.

    Every hidden layer receives the time features; the label embedding is
    added to the first hidden pre-activation only. Parameters live in the
    ordered dict ``params`` as float64 arrays.
    """

    trainable = True

    def __init__(self, config: TrainingConfig, input_shape, T, n_labels=None, metadata=None):
        if config.conditional and not n_labels:
            raise ValueError("a conditional denoiser needs n_labels >= 1")
        self.config = config
        self.input_shape = tuple(int(s) for s in input_shape)
        self.T = int(T)
        self.n_labels = int(n_labels) if config.conditional else None
        self.metadata = dict(metadata or {})
        self.params = self._init_params(stream(config.seed, "init"))

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    def _init_params(self, rng):
        cfg = self.config
        p = {}
        e = cfg.time_dim
        if cfg.time_embedding == "learned":
            p["time_w"] = rng.standard_normal((1, e))
            p["time_b"] = rng.standard_normal(e)
        widths = (self.dim,) + cfg.hidden
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"w{i}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            p[f"b{i}"] = np.zeros(fan_out)
            p[f"wt{i}"] = rng.standard_normal((e, fan_out)) / np.sqrt(e)
        if self.n_labels:
            p["label_emb"] = 0.1 * rng.standard_normal((self.n_labels, cfg.hidden[0]))
        p["w_out"] = rng.standard_normal((cfg.hidden[-1], self.dim)) / np.sqrt(cfg.hidden[-1])
        p["b_out"] = np.zeros(self.dim)
        return p

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def _time(self, t, n):
        t = np.broadcast_to(np.asarray(t), (n,))
        if self.config.time_embedding == "sinusoidal":
            return sinusoidal_features(t, self.T, self.config.time_dim), None
        s = t.astype(np.float64)[:, None] / self.T
        u = s @ self.params["time_w"] + self.params["time_b"]
        f, sig = _silu(u)
        return f, (s, u, sig)

    def _check_labels(self, labels, n):
        if not self.n_labels:
            return None
        if labels is None:
            raise ValueError("conditional denoiser needs labels")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        if labels.min() < 0 or labels.max() >= self.n_labels:
            raise ValueError(f"labels must lie in [0, {self.n_labels})")
        return labels

    def _forward(self, x, t, labels):
        p = self.params
        n = x.shape[0]
        f, tcache = self._time(t, n)
        labels = self._check_labels(labels, n)
        h = x
        cache = []
        for i in range(len(self.config.hidden)):
            a = h @ p[f"w{i}"] + p[f"b{i}"] + f @ p[f"wt{i}"]
            if i == 0 and labels is not None:
                a = a + p["label_emb"][labels]
            h_next, sig = _silu(a)
            cache.append((h, a, sig))
            h = h_next
        out = h @ p["w_out"] + p["b_out"]
        return out, (cache, h, f, tcache, labels)

    def predict(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.dim:
            raise ValueError(f"expected flat dimension {self.dim}, got {flat.shape[1]}")
        out, _ = self._forward(flat, t, labels)
        return out.reshape(x.shape)

    def loss_and_grad(self, x_t, t, z, labels=None):
        """Batch-mean squared error against ``z`` and its parameter gradients."""
        p = self.params
        x_t = np.asarray(x_t, dtype=np.float64).reshape(-1, self.dim)
        z = np.asarray(z, dtype=np.float64).reshape(x_t.shape)
        n = x_t.shape[0]
        out, (cache, h_last, f, tcache, labels) = self._forward(x_t, t, labels)
        resid = out - z
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        g = {}
        g_out = 2.0 * resid / n
        g["w_out"] = h_last.T @ g_out
        g["b_out"] = g_out.sum(axis=0)
        g_h = g_out @ p["w_out"].T
        g_f = np.zeros_like(f)
        for i in reversed(range(len(cache))):
            h_in, a, sig = cache[i]
            g_a = g_h * (sig + a * sig * (1.0 - sig))
            g[f"w{i}"] = h_in.T @ g_a
            g[f"b{i}"] = g_a.sum(axis=0)
            g[f"wt{i}"] = f.T @ g_a
            g_f += g_a @ p[f"wt{i}"].T
            if i == 0 and labels is not None:
                emb = np.zeros_like(p["label_emb"])
                np.add.at(emb, labels, g_a)
                g["label_emb"] = emb
            if i > 0:
                g_h = g_a @ p[f"w{i}"].T
        if tcache is not None:
            s, u, sig = tcache
            g_u = g_f * (sig + u * sig * (1.0 - sig))
            g["time_w"] = s.T @ g_u
            g["time_b"] = g_u.sum(axis=0)
        return loss, {k: g[k] for k in p}

    def make_optimizer(self, config=None):
        return make_optimizer(config or self.config)


class _Optimizer:
    def __init__(self, config):
        self.lr = config.learning_rate
        self.grad_clip = config.grad_clip

    def _clip(self, grads):
        if self.grad_clip is None:
            return grads
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm <= self.grad_clip:
            return grads
        return {k: g * (self.grad_clip / norm) for k, g in grads.items()}


class SGD(_Optimizer):
    def step(self, params, grads):
        for k, g in self._clip(grads).items():
            params[k] -= self.lr * g


class Momentum(_Optimizer):
    def __init__(self, config):
        super().__init__(config)
        self.beta = config.momentum
        self.velocity = {}

    def step(self, params, grads):
        for k, g in self._clip(grads).items():
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.beta * v + g
            self.velocity[k] = v
            params[k] -= self.lr * v


class Adam(_Optimizer):
    def __init__(self, config, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(config)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in self._clip(grads).items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config):
    return {"sgd": SGD, "momentum": Momentum, "adam": Adam}[config.optimizer](config)


def build_trainable_denoiser(config: TrainingConfig, input_shape, T, n_labels=None, metadata=None) -> MLPDenoiser:
    return MLPDenoiser(config, input_shape, T, n_labels, metadata)


# -- checkpoint format -------------------------------------------------------
#
# magic b"PFDMNET\0" | version u16 | header_len u32 | JSON header | n_tensors u32
# then per tensor: record_len u32 | name_len u16 | name | ndim u8 | dims u32*ndim
#                  | little-endian float32 payload
# All integers little-endian.

CHECKPOINT_MAGIC = b"PFDMNET\x00"
CHECKPOINT_VERSION = 1


def dump_denoiser(denoiser: MLPDenoiser) -> bytes:
    header = json.dumps(
        {
            "config": denoiser.config.to_dict(),
            "input_shape": list(denoiser.input_shape),
            "T": denoiser.T,
            "n_labels": denoiser.n_labels,
            "metadata": denoiser.metadata,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(denoiser.params)))
    for name, value in denoiser.params.items():
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(value, dtype="<f4").tobytes()
        body = struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape) + payload
        buf.write(struct.pack("<I", len(body)))
        buf.write(body)
    return buf.getvalue()


def load_denoiser(blob: bytes) -> MLPDenoiser:
    view = memoryview(blob)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise ValueError("not a denoiser checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<HI", view, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 14
    header = json.loads(bytes(view[pos:pos + header_len]).decode("utf-8"))
    pos += header_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (record_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        end = pos + record_len
        if end > len(view):
            raise ValueError("truncated checkpoint")
        (name_len,) = struct.unpack_from("<H", view, pos)
        name = bytes(view[pos + 2:pos + 2 + name_len]).decode("utf-8")
        q = pos + 2 + name_len
        (ndim,) = struct.unpack_from("<B", view, q)
        dims = struct.unpack_from(f"<{ndim}I", view, q + 1)
        q += 1 + 4 * ndim
        params[name] = np.frombuffer(view[q:end], dtype="<f4").astype(np.float64).reshape(dims)
        pos = end
    config = TrainingConfig(**header["config"])
    den = MLPDenoiser(config, header["input_shape"], header["T"], header["n_labels"], header["metadata"])
    if set(params) != set(den.params):
        raise ValueError("checkpoint tensors do not match the declared architecture")
    for name in den.params:
        if params[name].shape != den.params[name].shape:
            raise ValueError(f"tensor {name} has shape {params[name].shape}, expected {den.params[name].shape}")
        den.params[name] = params[name]
    return den
