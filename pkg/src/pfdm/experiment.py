"""Experiment configuration and the end-to-end runners behind ``pfdm run``."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as data_mod
from .denoiser import TrainingConfig, build_trainable_denoiser, dump_denoiser, load_denoiser
from .diffusion import SampleBatch, make_linear_schedule, sample_ddpm, train_ddpm
from .federation import ClientState, pfdm_sample, run_federation
from .metrics import ClassifierConfig, CNNClassifier, downstream_accuracy, kernel_mmd, per_class_report
from .privacy import PrivacyQuery, theorem1_epsilon

logger = logging.getLogger(__name__)

MODES = ("pfdm", "non-collaborative", "non-private")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"

    def build(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end, self.sigma_mode)


@dataclass
class DataConfig:
    source: str = "digits"
    images: str = ""
    labels: str = ""
    cifar_files: List[str] = field(default_factory=list)
    value_range: str = "unit"
    downsample: int = 1
    clusters: List[List[int]] = field(default_factory=lambda: [list(c) for c in data_mod.MNIST_CLUSTERS])
    n_majority: int = 800
    n_minority: int = 8
    n_clients: int = 2
    partition_seed: int = 0


@dataclass
class PrivacyConfig:
    delta: float = 1e-5
    bound_mode: str = "per_coordinate"
    bound: float = 1.0


@dataclass
class EvalConfig:
    client: int = 0
    samples_per_class: int = 100
    classifier_epochs: int = 30
    classifier_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


def _default_local():
    return TrainingConfig(learning_rate=1e-3, batch_size=128, n_steps=3000, optimizer="adam",
                          conditional=True, hidden=(256, 256), grad_clip=1.0)


def _default_global():
    return TrainingConfig(learning_rate=1e-3, batch_size=128, n_steps=6000, optimizer="adam",
                          conditional=True, hidden=(256, 256), grad_clip=1.0)


@dataclass
class ExperimentConfig:
    mode: str = "pfdm"
    t0: int = 100
    seed: int = 0
    coefficient: str = "sqrt_one_minus_beta"
    n_labels: int = 10
    output_dir: str = "pfdm-out"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    local: TrainingConfig = field(default_factory=_default_local)
    global_: TrainingConfig = field(default_factory=_default_global)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.t0 <= self.schedule.T:
            raise ValueError(f"t0={self.t0} must lie in [0, T={self.schedule.T}]")

    def to_dict(self):
        d = asdict(self)
        d["global"] = d.pop("global_")
        for key in ("local", "global"):
            d[key]["hidden"] = list(d[key]["hidden"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        sections = {
            "schedule": ScheduleConfig, "data": DataConfig, "privacy": PrivacyConfig, "eval": EvalConfig,
            "local": TrainingConfig, "global": TrainingConfig,
        }
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key in sections:
                section = sections[key]
                base = asdict(section()) if section is not TrainingConfig else (
                    _default_local() if key == "local" else _default_global()).to_dict()
                unknown = set(value) - set(base)
                if unknown:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(unknown)}")
                base.update(value)
                kwargs["global_" if key == "global" else key] = section(**base)
            elif key in known:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def config_hash(self) -> str:
        canon = self.to_dict()
        canon.pop("output_dir", None)
        blob = json.dumps(canon, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def to_toml(d, prefix="") -> str:
    """Minimal TOML writer for the flat-section configs used here."""
    scalars, tables = [], []
    for key, value in d.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            scalars.append(f"{key} = {_toml_value(value)}")
    out = "\n".join(scalars) + ("\n" if scalars else "")
    for key, value in tables:
        out += f"\n[{prefix}{key}]\n" + to_toml(value, f"{prefix}{key}.")
    return out


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if v is None:
        return '"none"'
    return repr(v)


def load_config(path) -> ExperimentConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib

    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for section in ("local", "global"):
        if raw.get(section, {}).get("grad_clip") == "none":
            raw[section]["grad_clip"] = None
    return ExperimentConfig.from_dict(raw)


# -- data --------------------------------------------------------------------


def load_dataset(cfg: DataConfig) -> SampleBatch:
    if cfg.source == "digits":
        ds = data_mod.load_digits_8x8(cfg.value_range)
    elif cfg.source == "mnist":
        for p in (cfg.images, cfg.labels):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        ds = data_mod.load_mnist_idx(cfg.images, cfg.labels, cfg.value_range)
    elif cfg.source == "cifar10":
        ds = data_mod.load_cifar10_bin(cfg.cifar_files, cfg.value_range)
    else:
        raise ValueError(f"unknown data source {cfg.source!r}")
    if cfg.downsample > 1:
        ds = data_mod.downsample(ds, cfg.downsample)
    return ds


def make_partition(cfg: ExperimentConfig, dataset: SampleBatch):
    spec = data_mod.PartitionSpec.majority_minority(
        cfg.data.clusters, cfg.data.n_majority, cfg.data.n_minority, cfg.data.partition_seed
    )
    if cfg.data.n_clients not in (1, 2):
        raise ValueError("the majority/minority split supports one or two clients")
    spec.clients = spec.clients[:cfg.data.n_clients]
    parts = data_mod.partition_indices(dataset.labels, spec)
    return spec, parts


# -- runners -----------------------------------------------------------------


@dataclass
class RunResult:
    mode: str
    config_hash: str
    schedule: object
    samplers: Dict[int, object]
    checkpoints: Dict[str, bytes]
    client_data: List[SampleBatch]
    held_out: np.ndarray
    audit_log: list = field(default_factory=list)


def _train_full(batch, schedule, tcfg, n_labels, role):
    den = build_trainable_denoiser(tcfg, batch.shape, schedule.T, n_labels if tcfg.conditional else None,
                                   metadata={"role": role, "t_max": schedule.T})
    return train_ddpm(batch, schedule.T, schedule, den, tcfg).denoiser


def _with_seed(tcfg, seed, salt):
    c = copy.deepcopy(tcfg)
    c.seed = int(seed) * 1000 + salt
    return c


def train_models(cfg: ExperimentConfig, dataset=None, resume_dir=None) -> RunResult:
    """Train the models for ``cfg.mode`` and return per-client samplers.

    With ``resume_dir`` set, existing checkpoints stamped with the same config
    hash are reused instead of retrained.
    """
    dataset = load_dataset(cfg.data) if dataset is None else dataset
    schedule = cfg.schedule.build()
    _, parts = make_partition(cfg, dataset)
    clients = [dataset.subset(idx) for idx in parts]
    held = data_mod.held_out_indices(len(dataset), parts)
    chash = cfg.config_hash()
    ckpt_dir = Path(resume_dir) if resume_dir else None

    def cached(name, build):
        path = ckpt_dir / f"{name}.pfdmnet" if ckpt_dir else None
        if path is not None and path.exists():
            den = load_denoiser(path.read_bytes())
            if den.metadata.get("config_hash") == chash:
                logger.info("reusing checkpoint %s", path)
                return den
        den = build()
        den.metadata["config_hash"] = chash
        den.metadata["seed"] = cfg.seed
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(dump_denoiser(den))
        return den

    samplers, ckpts, audit = {}, {}, []
    if cfg.mode == "pfdm":
        local_cfg = _with_seed(cfg.local, cfg.seed, 1)
        global_cfg = _with_seed(cfg.global_, cfg.seed, 2)
        fed = {}

        def federation():
            if "result" not in fed:
                states = [ClientState(m, c, cfg.t0, schedule, seed=cfg.seed * 1000 + 10 + m)
                          for m, c in enumerate(clients)]
                fed["result"] = run_federation(states, local_cfg, global_cfg, n_labels=cfg.n_labels)
            return fed["result"]

        locals_ = [cached(f"local_{m}", lambda m=m: federation().local(m)) for m in range(len(clients))]
        glob = cached("global", lambda: federation().global_denoiser)
        if "result" in fed:
            audit = fed["result"].audit_log
        for m, loc in enumerate(locals_):
            ckpts[f"local_{m}"] = dump_denoiser(loc)
            samplers[m] = ("pfdm", glob, loc)
        ckpts["global"] = dump_denoiser(glob)
    elif cfg.mode == "non-collaborative":
        for m, c in enumerate(clients):
            tcfg = _with_seed(cfg.global_, cfg.seed, 3 + m)
            den = cached(f"client_{m}", lambda c=c, tcfg=tcfg, m=m: _train_full(c, schedule, tcfg, cfg.n_labels, f"client_{m}"))
            ckpts[f"client_{m}"] = dump_denoiser(den)
            samplers[m] = ("ddpm", den, None)
    else:
        pooled = SampleBatch(np.concatenate([c.data for c in clients]), dataset.shape,
                             np.concatenate([c.labels for c in clients]))
        tcfg = _with_seed(cfg.global_, cfg.seed, 2)
        den = cached("pooled", lambda: _train_full(pooled, schedule, tcfg, cfg.n_labels, "pooled"))
        ckpts["pooled"] = dump_denoiser(den)
        for m in range(len(clients)):
            samplers[m] = ("ddpm", den, None)
    return RunResult(cfg.mode, chash, schedule, samplers, ckpts, clients, held, audit)


def generate(run: RunResult, cfg: ExperimentConfig, client: int, labels, seed=0) -> SampleBatch:
    kind, first, second = run.samplers[client]
    labels = np.asarray(labels, dtype=np.int64)
    if kind == "pfdm":
        return pfdm_sample(first, second, run.schedule, cfg.t0, len(labels), labels, seed=seed,
                           coefficient=cfg.coefficient)
    return sample_ddpm(first, run.schedule, run.schedule.T, len(labels), labels, seed=seed)


def reference_classifier(dataset: SampleBatch, epochs=30, seed=0) -> CNNClassifier:
    n_classes = int(dataset.labels.max()) + 1
    return CNNClassifier(dataset.shape, n_classes, ClassifierConfig(epochs=epochs), seed).fit(
        dataset.data, dataset.labels
    )


def evaluate(run: RunResult, cfg: ExperimentConfig, dataset: SampleBatch, classifier=None, seed=0):
    """Minority-cluster agreement, minority-cluster MMD and downstream accuracy for one client."""
    client = cfg.eval.client
    minority = cfg.data.clusters[1 - client] if len(cfg.data.clusters) == 2 else cfg.data.clusters[-1]
    classes = sorted({int(c) for cl in cfg.data.clusters for c in cl})
    labels = np.repeat(classes, cfg.eval.samples_per_class)
    samples = generate(run, cfg, client, labels, seed=seed)
    x = np.clip(samples.data, *((0.0, 1.0) if cfg.data.value_range == "unit" else (-1.0, 1.0)))
    classifier = classifier or reference_classifier(dataset, cfg.eval.classifier_epochs)
    minority_mask = np.isin(labels, minority)
    agreement = per_class_report(x[minority_mask], labels[minority_mask], classifier, run.config_hash, seed)
    real_minority = dataset.data[np.isin(dataset.labels, minority)]
    mmd = kernel_mmd(x[minority_mask], real_minority)
    held = dataset.subset(run.held_out)
    acc = downstream_accuracy(x, labels, held.data, held.labels, dataset.shape, classes,
                              ClassifierConfig(epochs=cfg.eval.classifier_epochs), cfg.eval.classifier_seeds,
                              run.config_hash)
    return {"agreement": agreement, "mmd": mmd, "accuracy": acc, "samples": samples, "labels": labels}


def privacy_of(cfg: ExperimentConfig):
    if cfg.mode != "pfdm" or cfg.t0 == 0:
        return None
    q = PrivacyQuery(cfg.t0, cfg.schedule.build(), cfg.privacy.bound, cfg.privacy.bound_mode, cfg.privacy.delta)
    return theorem1_epsilon(q)


@dataclass
class StudyResult:
    seeds: List[int]
    agreement: Dict[str, List[Dict[int, float]]]
    mmd: Dict[str, List[float]]
    accuracy: Dict[str, List[float]]

    def median_agreement(self, mode):
        rows = self.agreement[mode]
        return {k: float(np.median([r[k] for r in rows])) for k in rows[0]}

    def criteria(self):
        pf, nc = self.median_agreement("pfdm"), self.median_agreement("non-collaborative")
        wins = sum(pf[k] > nc[k] for k in pf)
        return {
            "agreement_wins": wins,
            "n_minority_classes": len(pf),
            "mmd_pfdm": float(np.median(self.mmd["pfdm"])),
            "mmd_noncollab": float(np.median(self.mmd["non-collaborative"])),
            "acc_pfdm": float(np.median(self.accuracy["pfdm"])),
            "acc_noncollab": float(np.median(self.accuracy["non-collaborative"])),
        }

    def passed(self):
        c = self.criteria()
        return (
            c["agreement_wins"] >= c["n_minority_classes"] - 1
            and c["mmd_pfdm"] < c["mmd_noncollab"]
            and c["acc_pfdm"] > c["acc_noncollab"]
        )


def run_study(cfg: ExperimentConfig, seeds=(0, 1, 2), modes=("pfdm", "non-collaborative"), dataset=None) -> StudyResult:
    """PFDM vs baselines on the majority/minority split, repeated over seeds."""
    dataset = load_dataset(cfg.data) if dataset is None else dataset
    classifier = reference_classifier(dataset, cfg.eval.classifier_epochs)
    agreement = {m: [] for m in modes}
    mmd = {m: [] for m in modes}
    acc = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            run_cfg = copy.deepcopy(cfg)
            run_cfg.mode = mode
            run_cfg.seed = int(seed)
            run_cfg.data.partition_seed = int(seed)
            run = train_models(run_cfg, dataset)
            res = evaluate(run, run_cfg, dataset, classifier, seed=seed)
            agreement[mode].append(res["agreement"].per_class)
            mmd[mode].append(res["mmd"])
            acc[mode].append(res["accuracy"].aggregate)
            logger.info("seed %s %s: agreement %.3f mmd %.4f acc %.3f", seed, mode,
                        res["agreement"].aggregate, res["mmd"], res["accuracy"].aggregate)
    return StudyResult(list(seeds), agreement, mmd, acc)
