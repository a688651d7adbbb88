"""DDPM building blocks: schedules, forward diffusion, the noise-prediction
loss, the training loop and the ancestral reverse sampler.

Time steps are 1-based throughout (``t`` runs from 1 to ``T``) and
``alpha_bar(0)`` is taken to be 1.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._rng import stream

SIGMA_MODES = ("beta", "posterior")
REVERSE_COEFFICIENTS = ("sqrt_one_minus_beta", "alpha")


@dataclass
class SampleBatch:
    """A batch of flattened samples with their original shape.

    ``data`` has layout ``(count, flat_dim)``; ``shape`` is the per-sample
    shape (e.g. ``(1, 28, 28)``).  ``labels`` are public class ids.
    """

    data: np.ndarray
    shape: tuple = None
    labels: Optional[np.ndarray] = None
    client_id: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            data = data.reshape(data.shape[0], -1)
        if data.shape[0] < 1:
            raise ValueError("SampleBatch needs at least one sample")
        if not np.all(np.isfinite(data)):
            raise ValueError("SampleBatch contains non-finite entries")
        self.data = data
        if self.shape is None:
            self.shape = (data.shape[1],)
        self.shape = tuple(int(s) for s in self.shape)
        if int(np.prod(self.shape)) != data.shape[1]:
            raise ValueError(f"shape {self.shape} does not match flat dimension {data.shape[1]}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != data.shape[0]:
                raise ValueError("label count must equal sample count")
            self.labels = labels.astype(np.int64)

    def __len__(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def with_data(self, data):
        return replace(self, data=data)

    def subset(self, index):
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return SampleBatch(self.data[index], self.shape, labels, self.client_id)

    def images(self):
        return self.data.reshape((len(self),) + self.shape)


def as_batch(x, labels=None) -> SampleBatch:
    if isinstance(x, SampleBatch):
        return x
    return SampleBatch(np.asarray(x, dtype=np.float64), labels=labels)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step quantities of a DDPM, stored 0-based, accessed 1-based."""

    betas: np.ndarray
    sigma_mode: str = "beta"
    alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_vars: np.ndarray = field(init=False, repr=False)
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        alpha_bars = np.cumprod(1.0 - betas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior = (1.0 - prev) / (1.0 - alpha_bars) * betas
        sigmas = np.sqrt(betas) if self.sigma_mode == "beta" else np.sqrt(posterior)
        for name, value in (
            ("betas", betas),
            ("alpha_bars", alpha_bars),
            ("posterior_vars", posterior),
            ("sigmas", sigmas),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def check_step(self, t, allow_zero=False):
        t_arr = np.asarray(t)
        lo = 0 if allow_zero else 1
        if not np.issubdtype(t_arr.dtype, np.integer):
            if not np.all(t_arr == np.floor(t_arr)):
                raise ValueError(f"time step must be an integer, got {t!r}")
            t_arr = t_arr.astype(np.int64)
        if np.any(t_arr < lo) or np.any(t_arr > self.T):
            raise ValueError(f"time step {t!r} outside [{lo}, {self.T}]")
        return t_arr

    def beta(self, t):
        return self.betas[self.check_step(t) - 1]

    def alpha_bar(self, t):
        t = self.check_step(t, allow_zero=True)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])

    def sigma(self, t):
        return self.sigmas[self.check_step(t) - 1]

    def fingerprint(self) -> bytes:
        """SHA-256 of the beta table (little-endian float64)."""
        return hashlib.sha256(self.betas.astype("<f8").tobytes()).digest()

    def to_table(self) -> str:
        """Plain-text table ``t beta alpha_bar sigma`` with 17 significant digits."""
        out = io.StringIO()
        out.write(f"# sigma_mode={self.sigma_mode}\n")
        out.write("t beta alpha_bar sigma\n")
        for i in range(self.T):
            out.write(
                f"{i + 1} {self.betas[i]:.17g} {self.alpha_bars[i]:.17g} {self.sigmas[i]:.17g}\n"
            )
        return out.getvalue()

    @classmethod
    def from_table(cls, text: str) -> "NoiseSchedule":
        sigma_mode = "beta"
        betas = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "sigma_mode=" in line:
                    sigma_mode = line.split("sigma_mode=", 1)[1].strip()
                continue
            if line.startswith("t "):
                continue
            parts = line.split()
            if int(parts[0]) != len(betas) + 1:
                raise ValueError(f"schedule table rows out of order at t={parts[0]}")
            betas.append(float(parts[1]))
        return cls(np.array(betas), sigma_mode=sigma_mode)


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02, sigma_mode="beta") -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) * ((beta_end - beta_start) / (T - 1))
    return NoiseSchedule(betas, sigma_mode=sigma_mode)


def _per_row(values, n):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(n, 1)


def diffuse(x0, t, z, schedule: NoiseSchedule) -> SampleBatch:
    """Closed-form forward diffusion ``sqrt(ab_t) x0 + sqrt(1 - ab_t) z``.

    ``t`` may be a scalar or one step per sample.
    """
    x0 = as_batch(x0)
    z = np.asarray(z, dtype=np.float64)
    if z.size != x0.data.size:
        raise ValueError("noise shape must equal the data shape")
    z = z.reshape(x0.data.shape)
    t = schedule.check_step(t)
    ab = _per_row(schedule.alpha_bar(t), len(x0))
    return x0.with_data(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * z)


def ddpm_loss(denoiser, x0, t, z, schedule: NoiseSchedule) -> float:
    """Batch mean of ``||z - z_hat(x_t, t, label)||^2``, summed over coordinates."""
    x0 = as_batch(x0)
    xt = diffuse(x0, t, z, schedule)
    z = np.asarray(z, dtype=np.float64).reshape(xt.data.shape)
    pred = denoiser.predict(xt.data, t, xt.labels)
    return float(np.mean(np.sum((z - pred) ** 2, axis=1)))


@dataclass
class TrainingRun:
    """Result of :func:`train_ddpm`: the denoiser plus its loss trace."""

    denoiser: object
    losses: np.ndarray
    timesteps: list
    epochs: np.ndarray

    def epoch_means(self):
        ids = np.unique(self.epochs)
        return np.array([self.losses[self.epochs == e].mean() for e in ids])


def train_ddpm(dataset, t_max, schedule: NoiseSchedule, denoiser, config) -> TrainingRun:
    """Minimise the noise-prediction loss with ``t ~ Uniform{1..t_max}``.

    Mini-batches come from a per-epoch permutation of the dataset. A
    non-trainable denoiser is returned untouched; its trace holds the
    evaluation-only losses on the same draws.
    """
    dataset = as_batch(dataset)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    t_max = int(schedule.check_step(t_max))
    rng = stream(config.seed, "train")
    n = len(dataset)
    batch = min(config.batch_size, n)
    per_epoch = max(n // batch, 1)
    trainable = getattr(denoiser, "trainable", False)
    optimizer = denoiser.make_optimizer(config) if trainable else None

    losses = np.empty(config.n_steps)
    epochs = np.empty(config.n_steps, dtype=np.int64)
    steps_t = []
    order = None
    for step in range(config.n_steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = rng.permutation(n)
        idx = order[pos * batch:(pos + 1) * batch]
        x0 = dataset.data[idx]
        labels = None if dataset.labels is None else dataset.labels[idx]
        t = rng.integers(1, t_max + 1, size=len(idx))
        z = rng.standard_normal(x0.shape)
        ab = schedule.alpha_bars[t - 1][:, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z
        if trainable:
            loss, grads = denoiser.loss_and_grad(xt, t, z, labels)
        else:
            loss = float(np.mean(np.sum((z - denoiser.predict(xt, t, labels)) ** 2, axis=1)))
        if not math.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss {loss} at step {step} (epoch {epoch}, t in [{t.min()}, {t.max()}]); "
                "lower the learning rate or enable grad_clip"
            )
        if trainable:
            optimizer.step(denoiser.params, grads)
        losses[step] = loss
        epochs[step] = epoch
        steps_t.append(t)
    return TrainingRun(denoiser, losses, steps_t, epochs)


def _labels_for(labels, count):
    if labels is None:
        return None
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 0:
        return np.full(count, int(labels), dtype=np.int64)
    if labels.shape != (count,):
        raise ValueError("need one label per sample")
    return labels


def reverse_step(x_t, t, denoiser, schedule: NoiseSchedule, z=None, coefficient="sqrt_one_minus_beta"):
    """One ancestral step ``x_t -> x_{t-1}``.

    ``z`` is the fresh noise scaled by ``sigma_t``; it must be zero (or None)
    at ``t == 1``. ``coefficient="alpha"`` switches the leading factor to
    ``1 / (1 - beta_t)``.
    """
    batch = as_batch(x_t)
    t = int(schedule.check_step(t))
    if coefficient not in REVERSE_COEFFICIENTS:
        raise ValueError(f"coefficient must be one of {REVERSE_COEFFICIENTS}")
    if z is not None:
        z = np.asarray(z, dtype=np.float64).reshape(batch.data.shape)
        if t == 1 and np.any(z != 0):
            raise ValueError("noise must be zero at the final step t=1")
    beta = schedule.betas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    pred = denoiser.predict(batch.data, t, batch.labels)
    scale = 1.0 / math.sqrt(1.0 - beta) if coefficient == "sqrt_one_minus_beta" else 1.0 / (1.0 - beta)
    out = scale * (batch.data - (beta / math.sqrt(1.0 - ab)) * pred)
    if z is not None and t > 1:
        out = out + schedule.sigmas[t - 1] * z
    return batch.with_data(out)


def reverse_chain(x, t_from, denoiser, schedule, rng, coefficient="sqrt_one_minus_beta", trajectory=None):
    """Run reverse steps from ``t_from`` down to 1, drawing noise from ``rng``."""
    for t in range(t_from, 0, -1):
        z = rng.standard_normal(x.data.shape) if t > 1 else None
        x = reverse_step(x, t, denoiser, schedule, z, coefficient)
        if trajectory is not None:
            trajectory.append((t - 1, x.data.copy()))
    return x


def sample_ddpm(denoiser, schedule: NoiseSchedule, T_start=None, count=1, label=None, seed=0,
                shape: Sequence[int] = None, trajectory=None) -> SampleBatch:
    """Ancestral sampling from ``x_{T_start} ~ N(0, I)`` down to ``x_0``."""
    T_start = schedule.T if T_start is None else int(schedule.check_step(T_start))
    if count < 1:
        raise ValueError("count must be positive")
    shape = tuple(shape if shape is not None else denoiser.input_shape)
    rng = stream(seed, "sample_ddpm")
    dim = int(np.prod(shape))
    x = SampleBatch(rng.standard_normal((count, dim)), shape, _labels_for(label, count))
    return reverse_chain(x, T_start, denoiser, schedule, rng, trajectory=trajectory)
