"""Command line entry point: ``pfdm <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 acceptance check failed (``run --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import experiment as exp
from . import privacy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_ACCEPTANCE = 4

OUTPUT_ENV = "PFDM_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


class StageError(Exception):
    pass


def _output_dir(cfg, override=None):
    root = os.environ.get(OUTPUT_ENV)
    base = Path(override or cfg.output_dir)
    if root and not base.is_absolute():
        base = Path(root) / base
    base.mkdir(parents=True, exist_ok=True)
    return base


def _load(args):
    try:
        cfg = exp.load_config(args.config) if getattr(args, "config", None) else exp.ExperimentConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("mode", "t0", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    try:
        cfg.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# -- account -----------------------------------------------------------------


def cmd_account(args):
    schedule = exp.ScheduleConfig(args.T, args.beta_start, args.beta_end).build()
    if args.group_size > 1 and args.mode != "per_coordinate":
        raise ConfigError("group privacy needs --mode per_coordinate")
    out = []
    if args.sweep:
        reports = privacy.budget_sweep(schedule, args.bound, args.delta, args.mode)
        text = privacy.sweep_csv(reports)
        if args.csv:
            Path(args.csv).write_text(text)
        else:
            out.append(text.rstrip("\n"))
    if args.target_epsilon is not None:
        t0 = privacy.min_t0_for_epsilon(args.target_epsilon, args.bound, args.delta, schedule)
        if t0 is None:
            out.append(f"target epsilon {args.target_epsilon:g} unreachable: even t0={schedule.T} exceeds it")
        else:
            eps = privacy.theorem1_epsilon(privacy.PrivacyQuery(t0, schedule, args.bound, args.mode, args.delta)).epsilon
            out.append(f"smallest t0 = {t0} (epsilon = {eps:.6g} <= {args.target_epsilon:g})")
    if args.t0 is not None:
        try:
            query = privacy.PrivacyQuery(args.t0, schedule, args.bound, args.mode, args.delta, args.group_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        out.append(privacy.account(query).summary())
    if not out and not args.csv:
        raise ConfigError("nothing to do: pass --t0, --sweep or --target-epsilon")
    print("\n".join(out))


# -- partition ---------------------------------------------------------------


def cmd_partition(args):
    cfg = _load(args)
    try:
        dataset = exp.load_dataset(cfg.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        _, parts = exp.make_partition(cfg, dataset)
    except ValueError as exc:
        raise StageError(str(exc)) from exc
    text = data_mod.manifest_csv(dataset.labels, parts)
    dest = Path(args.out) if args.out else _output_dir(cfg) / f"partition-{cfg.config_hash()}.csv"
    dest.write_text(text)
    for cid, idx in enumerate(parts):
        print(f"client {cid}: {len(idx)} samples")
    print(f"manifest written to {dest}")


# -- run / sample / eval -----------------------------------------------------


def cmd_run(args):
    cfg = _load(args)
    out = _output_dir(cfg, args.out)
    chash = cfg.config_hash()
    (out / "config.toml").write_text(f"# config_hash = {chash}\n" + exp.to_toml(cfg.to_dict()))
    try:
        dataset = exp.load_dataset(cfg.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.study:
        result = exp.run_study(cfg, seeds=args.seeds, dataset=dataset)
        crit = result.criteria()
        (out / f"study-{chash}.json").write_text(json.dumps(
            {"config_hash": chash, "seeds": result.seeds, "criteria": crit,
             "agreement": {m: [{str(k): v for k, v in r.items()} for r in rows] for m, rows in result.agreement.items()},
             "mmd": result.mmd, "accuracy": result.accuracy}, indent=2))
        print(json.dumps(crit, indent=2))
        if args.check and not result.passed():
            return EXIT_ACCEPTANCE
        return EXIT_OK
    ckpt_dir = out / "checkpoints"
    try:
        run = exp.train_models(cfg, dataset, resume_dir=ckpt_dir)
    except Exception as exc:
        raise StageError(f"training failed: {exc!r}") from exc
    report = privacy_report = exp.privacy_of(cfg)
    if report is not None:
        (out / "privacy.txt").write_text(f"# config_hash = {chash}\n{privacy_report.summary()}\n")
    if args.no_eval:
        print(f"checkpoints in {ckpt_dir}")
        return EXIT_OK
    res = exp.evaluate(run, cfg, dataset, seed=cfg.seed)
    _write_samples(out / f"samples-client{cfg.eval.client}-{chash}.npz", res["samples"], res["labels"], chash, cfg.seed)
    (out / f"agreement-{chash}.csv").write_text(res["agreement"].to_csv())
    (out / f"accuracy-{chash}.csv").write_text(res["accuracy"].to_csv())
    summary = "\n".join([res["agreement"].summary(), f"minority MMD = {res['mmd']:.6f}", res["accuracy"].summary()])
    (out / f"summary-{chash}.txt").write_text(summary + "\n")
    _grid(out / f"grid-client{cfg.eval.client}-{chash}.png", res["samples"], res["labels"])
    print(summary)
    return EXIT_OK


def _write_samples(path, batch, labels, chash, seed, trajectory=None):
    extra = {}
    if trajectory is not None:
        extra["trajectory_steps"] = np.array([t for _, t, _ in trajectory])
        extra["trajectory"] = np.stack([x for _, _, x in trajectory])
    np.savez(path, samples=batch.data, shape=np.array(batch.shape), labels=np.asarray(labels),
             config_hash=np.array(chash), seed=np.array(seed), **extra)


def _grid(path, batch, labels, per_row=10):
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rows = []
    for c in classes:
        idx = np.flatnonzero(labels == c)[:per_row]
        rows.append(batch.images()[idx])
    if len(batch.shape) != 3:
        return
    imgs = np.concatenate(rows)
    from .metrics import sample_grid_png

    sample_grid_png(imgs, path, len(classes), per_row)


def cmd_sample(args):
    cfg = _load(args)
    out = _output_dir(cfg, args.out)
    ckpt = out / "checkpoints"
    from .denoiser import load_denoiser
    from .diffusion import sample_ddpm
    from .federation import pfdm_sample

    def need(name, stage):
        p = ckpt / f"{name}.pfdmnet"
        if not p.exists():
            raise StageError(f"missing checkpoint {p}; produce it with `pfdm run --no-eval` ({stage} stage)")
        return load_denoiser(p.read_bytes())

    schedule = cfg.schedule.build()
    labels = np.full(args.count, args.label) if args.label is not None else None
    traj = [] if args.trajectory else None
    if cfg.mode == "pfdm":
        glob = need("global", "server training")
        local = need(f"local_{args.client}", "client training") if cfg.t0 > 0 else None
        batch = pfdm_sample(glob, local, schedule, cfg.t0, args.count, labels, seed=cfg.seed,
                            coefficient=cfg.coefficient, trajectory=traj)
    else:
        name = f"client_{args.client}" if cfg.mode == "non-collaborative" else "pooled"
        batch = sample_ddpm(need(name, "training"), schedule, None, args.count, labels, seed=cfg.seed)
    chash = cfg.config_hash()
    dest = Path(args.dest) if args.dest else out / f"samples-{cfg.mode}-client{args.client}-{chash}.npz"
    _write_samples(dest, batch, labels if labels is not None else np.full(args.count, -1), chash, cfg.seed, traj)
    print(f"{args.count} samples written to {dest}")


def cmd_eval(args):
    a = np.load(args.samples_a)
    b = np.load(args.samples_b)
    xa, xb = a["samples"], b["samples"]
    mmd = __import__("pfdm.metrics", fromlist=["kernel_mmd"]).kernel_mmd(xa, xb, args.bandwidth)
    line = f"mmd,{mmd!r}"
    if args.out:
        Path(args.out).write_text("metric,value\n" + line + "\n")
    print(f"kernel MMD^2 = {mmd:.6g}")


def cmd_print_config(args):
    cfg = _load(args)
    print(f"# config_hash = {cfg.config_hash()}")
    print(exp.to_toml(cfg.to_dict()), end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="pfdm", description="Personalized federated diffusion models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("account", help="privacy accounting for a t0 release")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--t0", type=int)
    p.add_argument("--bound", type=float, default=1.0)
    p.add_argument("--mode", choices=privacy.MODES, default="per_sample")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--sweep", action="store_true", help="emit the t0 = 1..T CSV")
    p.add_argument("--csv", help="write the sweep CSV here instead of stdout")
    p.add_argument("--target-epsilon", type=float)
    p.set_defaults(func=cmd_account)

    def with_config(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--mode", choices=exp.MODES)
        p.add_argument("--t0", type=int)
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("partition", help="write the client partition manifest"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    p = with_config(sub.add_parser("run", help="train, sample and evaluate one configuration"))
    p.add_argument("--out")
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--study", action="store_true", help="PFDM vs non-collaborative over several seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--check", action="store_true", help="exit 4 if the study ordering does not hold")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sample", help="sample from saved checkpoints"))
    p.add_argument("--out")
    p.add_argument("--client", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--label", type=int)
    p.add_argument("--trajectory", action="store_true")
    p.add_argument("--dest")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="kernel MMD between two sample files")
    p.add_argument("samples_a")
    p.add_argument("samples_b")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("print-config", help="print the effective configuration"))
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK if code is None else code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
