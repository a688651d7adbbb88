"""Desk-scale sample-quality metrics and the downstream-classifier harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .denoiser import GaussianMixtureSpec


@dataclass
class MetricReport:
    """Per-class values plus an aggregate.

    ``aggregate`` is the count-weighted mean of ``per_class`` unless the
    producing function says otherwise (``combination``).
    """

    metric: str
    per_class: Dict[int, float]
    aggregate: float
    counts: Dict[int, int]
    seed: Optional[int] = None
    config_hash: str = ""
    combination: str = "count-weighted mean"
    extra: Dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("metric", "class", "value", "count", "seed", "config_hash"))
        for k in sorted(self.per_class):
            writer.writerow((self.metric, k, repr(self.per_class[k]), self.counts.get(k, 0), self.seed, self.config_hash))
        writer.writerow((self.metric, "all", repr(self.aggregate), sum(self.counts.values()), self.seed, self.config_hash))
        return out.getvalue()

    def summary(self) -> str:
        lines = [f"{self.metric} ({self.combination}) = {self.aggregate:.4f}"]
        for k in sorted(self.per_class):
            lines.append(f"  class {k}: {self.per_class[k]:.4f}  (n={self.counts.get(k, 0)})")
        for k, v in self.extra.items():
            lines.append(f"  {k}: {v:.4f}")
        return "\n".join(lines)


def gaussian_moment_distance(samples, target: GaussianMixtureSpec) -> float:
    """Squared W2 between a diagonal Gaussian fit and an isotropic target.

    ``||mean_hat - mu||^2 + sum_i (sqrt(var_hat_i) - s)^2``.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    if target.weights.size != 1:
        raise ValueError("target must be a single Gaussian")
    mu = target.means[0]
    s = np.sqrt(target.variances[0])
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), 0.0)
    return float(np.sum((mean - mu) ** 2) + np.sum((np.sqrt(var) - s) ** 2))


def median_bandwidth(a, b) -> float:
    pooled = np.concatenate([a, b])
    d = pdist(pooled)
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def kernel_mmd(samples_a, samples_b, bandwidth=None) -> float:
    """Unbiased squared MMD with ``k(x, y) = exp(-||x - y||^2 / (2 h^2))``.

    ``bandwidth`` defaults to the median pairwise distance of the pooled
    sample. With one sample on a side the within-set term is undefined and
    taken as the kernel's diagonal value 1.
    """
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * h * h)

    def within(x):
        n = len(x)
        if n < 2:
            return 1.0
        k = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
        return (k.sum() - n) / (n * (n - 1))

    cross = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return float(within(a) + within(b) - 2.0 * cross)


# -- classifiers -------------------------------------------------------------


@dataclass
class ClassifierConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    channels: Sequence[int] = (16, 32)
    hidden: int = 64


def _torch():
    import torch

    torch.use_deterministic_algorithms(True)
    return torch


def _build_cnn(torch, shape, n_classes, cfg):
    nn = torch.nn
    c, h, w = shape
    c1, c2 = cfg.channels
    pooled = (h // 2) * (w // 2) * c2
    return nn.Sequential(
        nn.Conv2d(c, c1, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(c1, c2, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(pooled, cfg.hidden),
        nn.ReLU(),
        nn.Linear(cfg.hidden, n_classes),
    )


class CNNClassifier:
    """Two conv layers, one max-pool, two fully connected layers."""

    def __init__(self, shape, n_classes, config: ClassifierConfig = None, seed=0):
        self.shape = tuple(shape)
        self.n_classes = int(n_classes)
        self.config = config or ClassifierConfig()
        self.seed = seed
        self.model = None

    def fit(self, x, y):
        torch = _torch()
        torch.manual_seed(self.seed)
        cfg = self.config
        self.model = _build_cnn(torch, self.shape, self.n_classes, cfg).double()
        xt = torch.from_numpy(np.asarray(x, dtype=np.float64).reshape((-1,) + self.shape))
        yt = torch.from_numpy(np.asarray(y, dtype=np.int64))
        opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        gen = torch.Generator().manual_seed(self.seed)
        n = len(yt)
        for _ in range(cfg.epochs):
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                opt.zero_grad()
                loss = torch.nn.functional.cross_entropy(self.model(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
        return self

    def predict(self, x):
        torch = _torch()
        with torch.no_grad():
            xt = torch.from_numpy(np.asarray(x, dtype=np.float64).reshape((-1,) + self.shape))
            return self.model(xt).argmax(dim=1).numpy()

    def score(self, x, y):
        return float(np.mean(self.predict(x) == np.asarray(y)))


def downstream_accuracy(train_x, train_y, test_x, test_y, shape, classes=None, config=None,
                        seeds=(0, 1, 2), config_hash="") -> MetricReport:
    """Train on (synthetic) data, test on real data, repeat over seeds.

    ``aggregate`` is the mean accuracy over seeds; ``extra["std"]`` the
    standard deviation.  Per-class values are recalls averaged over seeds.
    """
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = sorted(set(test_y.tolist())) if classes is None else list(classes)
    missing = [c for c in classes if c not in set(train_y.tolist())]
    if missing:
        raise ValueError(f"training set has no samples of classes {missing}")
    keep_tr = np.isin(train_y, classes)
    keep_te = np.isin(test_y, classes)
    remap = {c: i for i, c in enumerate(classes)}
    ytr = np.array([remap[c] for c in train_y[keep_tr]])
    yte = np.array([remap[c] for c in test_y[keep_te]])
    xtr = np.asarray(train_x)[keep_tr]
    xte = np.asarray(test_x)[keep_te]
    accs, recalls = [], {c: [] for c in classes}
    for seed in seeds:
        clf = CNNClassifier(shape, len(classes), config, seed).fit(xtr, ytr)
        pred = clf.predict(xte)
        accs.append(float(np.mean(pred == yte)))
        for c in classes:
            mask = yte == remap[c]
            recalls[c].append(float(np.mean(pred[mask] == remap[c])) if mask.any() else float("nan"))
    counts = {c: int(np.sum(test_y == c)) for c in classes}
    return MetricReport(
        "downstream_accuracy",
        {c: float(np.mean(v)) for c, v in recalls.items()},
        float(np.mean(accs)),
        counts,
        seed=seeds[0] if seeds else None,
        config_hash=config_hash,
        combination="mean over seeds of test accuracy",
        extra={"std": float(np.std(accs)), **{f"seed_{s}": a for s, a in zip(seeds, accs)}},
    )


def per_class_report(samples, requested, classifier, config_hash="", seed=None) -> MetricReport:
    """Fraction of samples per requested class that ``classifier`` assigns to that class."""
    requested = np.asarray(requested)
    pred = np.asarray(classifier.predict(samples))
    per, counts = {}, {}
    for c in np.unique(requested):
        mask = requested == c
        per[int(c)] = float(np.mean(pred[mask] == c))
        counts[int(c)] = int(mask.sum())
    agg = float(np.mean(pred == requested))
    return MetricReport("class_agreement", per, agg, counts, seed=seed, config_hash=config_hash)


def sample_grid_png(images, path, rows, cols, pad=1):
    """Save a ``rows x cols`` grid (row = class) of images in [0, 1] as PNG."""
    from PIL import Image

    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    canvas = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(min(n, rows * cols)):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        canvas[:, y:y + h, x:x + w] = images[i]
    canvas = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
    mode_img = canvas[0] if c == 1 else np.transpose(canvas, (1, 2, 0))
    Image.fromarray(mode_img).save(path)
