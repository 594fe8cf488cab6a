"""Command line entry points.

Subcommands: gen-data, train, eval, gradcheck, ablate. Every RunConfig
field is exposed as a flag; a `--config` file supplies defaults and any
flag given on the command line wins over the file. Exit codes: 0 on
success, 1 when a requested check or run fails, 2 for bad usage
(argparse's own convention).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .errors import ConfigMismatch, InvalidConfig, UvmtlError
from .gradsuite import DEFAULT_TOLERANCE, run_gradcheck
from .model import Model
from .params import restore_checkpoint
from .synth import generate, load_dataset, save_dataset
from .train import RunConfig, config_from_mapping, evaluate, parse_config_file, train

_DATA_KEYS = (
    "height",
    "width",
    "image_channels",
    "frames",
    "joints",
    "shared_dim",
    "task_dim",
    "num_classes",
    "label_noise",
    "noise_scale",
)


def thread_cap() -> int:
    """Parallelism limit: UVMTL_THREADS, else the visible CPU count."""
    raw = os.environ.get("UVMTL_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as e:
            raise InvalidConfig(f"UVMTL_THREADS={raw!r} is not an integer") from e
    return os.cpu_count() or 1


def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            sp.add_argument(flag, dest=f.name, action="store_true", default=None)
        else:
            sp.add_argument(flag, dest=f.name, default=None)


def _effective_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = "true" if v is True else str(v)
    return config_from_mapping(values)


def _check_data_compat(run_cfg: RunConfig, file_cfg) -> None:
    for key in _DATA_KEYS:
        ours = getattr(run_cfg, key)
        theirs = getattr(file_cfg, key)
        if isinstance(ours, tuple):
            ours, theirs = tuple(ours), tuple(theirs)
        if ours != theirs:
            raise ConfigMismatch(
                f"dataset {key} = {theirs!r} but run config says {ours!r}"
            )


def _load_split(cfg: RunConfig, path):
    file_cfg, samples = load_dataset(path)
    _check_data_compat(cfg, file_cfg)
    need = cfg.train_samples + cfg.val_samples
    if len(samples) < need:
        raise InvalidConfig(
            f"dataset holds {len(samples)} samples, run needs {need}"
        )
    return samples[: cfg.train_samples], samples[cfg.train_samples : need]


def _cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    n = int(args.num_samples) if args.num_samples else cfg.train_samples + cfg.val_samples
    gen_cfg = cfg.gen_config(n)
    samples = generate(gen_cfg)
    save_dataset(gen_cfg, samples, args.out)
    print(f"wrote {n} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _effective_config(args)
    train_data = val_data = None
    if args.data:
        train_data, val_data = _load_split(cfg, args.data)
    result = train(
        cfg,
        train_data=train_data,
        val_data=val_data,
        metrics_path=args.metrics,
        trace_path=args.trace,
        checkpoint_path=args.checkpoint,
    )
    ev = result.final_eval
    for j, acc in zip(ev.task_ids, ev.accuracies):
        print(f"task{j + 1} acc {acc:.4f}")
    print(f"mAcc {ev.mean_acc:.4f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _effective_config(args)
    file_cfg, samples = load_dataset(args.data)
    _check_data_compat(cfg, file_cfg)
    model = Model(
        cfg.model_config(),
        seed=cfg.seed,
        image_channels=cfg.image_channels,
        joints=cfg.joints,
    )
    restore_checkpoint(model.store, args.checkpoint)
    ev = evaluate(model, samples, cfg)
    for j, acc in zip(ev.task_ids, ev.accuracies):
        print(f"task{j + 1} acc {acc:.4f}")
    print(f"mAcc {ev.mean_acc:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    seeds = tuple(range(int(args.seeds)))
    tol = float(args.tolerance)
    results = run_gradcheck(seeds=seeds, tolerance=tol)
    worst = 0.0
    failed = 0
    for name, seed, err in results:
        ok = err < tol
        worst = max(worst, err)
        if not ok:
            failed += 1
        print(f"{'ok  ' if ok else 'FAIL'} {name:<28s} seed={seed} max_err={err:.3e}")
    print(f"{len(results)} checks, {failed} failures, worst {worst:.3e}, tol {tol:g}")
    return 1 if failed else 0


def _cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    flags = [f.strip() for f in args.flags.split(",") if f.strip()]
    valid = {f.name for f in fields(RunConfig) if isinstance(f.default, bool)}
    for flag in flags:
        if flag not in valid:
            raise InvalidConfig(f"unknown ablation flag {flag!r}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = [("full", ())] + [(flag, (flag,)) for flag in flags]

    jobs = []
    for vname, on in variants:
        for seed in seeds:
            overrides = {flag: "true" for flag in on}
            overrides["seed"] = str(seed)
            jobs.append((vname, seed, config_from_mapping(overrides, base=cfg)))

    workers = min(thread_cap(), len(jobs))
    results = {}
    if workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_run_job, c): (v, s) for v, s, c in jobs}
            for fut in cf.as_completed(futs):
                results[futs[fut]] = fut.result()
    else:
        for vname, seed, c in jobs:
            results[(vname, seed)] = _run_job(c)

    name_w = max(len(v) for v, _ in variants) + 2
    header = "variant".ljust(name_w) + "".join(f"seed{s:<4d}" for s in seeds) + "mean"
    print(header)
    for vname, _ in variants:
        accs = [results[(vname, s)] for s in seeds]
        line = vname.ljust(name_w)
        line += "".join(f"{a:<8.4f}" for a in accs)
        line += f"{float(np.mean(accs)):.4f}"
        print(line)
    return 0


def _run_job(cfg: RunConfig) -> float:
    return train(cfg).final_eval.mean_acc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uvmtl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset file")
    _add_config_flags(sp)
    sp.add_argument("--out", required=True, help="output .uvds path")
    sp.add_argument("--num-samples", default=None, help="sample count override")
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train", help="train and emit metrics/trace/checkpoint")
    _add_config_flags(sp)
    sp.add_argument("--data", help="dataset file; generated on the fly if omitted")
    sp.add_argument("--metrics", help="metrics CSV output path")
    sp.add_argument("--trace", help="per-window trace CSV output path")
    sp.add_argument("--checkpoint", help="checkpoint output path")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--seeds", default="5", help="number of seeds (0..n-1)")
    sp.add_argument("--tolerance", default=str(DEFAULT_TOLERANCE))
    sp.set_defaults(func=_cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run a flag matrix and summarize mAcc")
    _add_config_flags(sp)
    sp.add_argument(
        "--flags",
        default="disable_dbscme,disable_afd",
        help="comma-separated ablation flags to toggle one at a time",
    )
    sp.add_argument("--seeds", default="0", help="comma-separated seed list")
    sp.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UvmtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
