"""Command-line entry point: gen-data, train, eval, gradcheck, scan-oracle, profile."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensorio
from .config import Config, ConfigError, echo, parse_config
from .decoder import scan_oracle_suite
from .gradsuite import BLOCKS, THRESHOLDS, UnusedFaultError, format_table, run_suite
from .metrics import profile
from .model import M2HX
from .synthdata import FRAME_FIELDS, DatasetError, frame_seed, generate_frame, write_dataset
from .tensorio import CorruptContainerError
from .training import (TrainingError, build_trainer, evaluate, heldout_seeds, load_checkpoint, oracle_predictor,
                       predict, run_training, save_checkpoint)

TASK_FILES = {"labels": "sem", "depth": "depth", "normals": "norm", "edges": "edge"}


class Output:
    """Echo to stdout and collect into ``<out>/<name>``."""

    def __init__(self, out: str | None):
        self.dir = Path(out) if out else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def emit(self, text: str, name: str | None = None) -> None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        sys.stdout.flush()
        if self.dir is not None and name:
            with open(self.dir / name, "a", encoding="utf-8") as fh:
                fh.write(text if text.endswith("\n") else text + "\n")


def _config(args) -> Config:
    return parse_config(args.config, args.overrides)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.data.seed
    spec = replace(cfg.data, seed=seed)
    if not args.out:
        raise ConfigError("gen-data needs --out <dir>")
    seeds = [frame_seed(seed, args.split, i) for i in range(args.frames)]
    frames = [generate_frame(replace(spec, seed=s)) for s in seeds]
    write_dataset(args.out, frames, spec, seeds)
    print(f"wrote {len(frames)} frames to {args.out} (seed={seed}, split={args.split})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Output(args.out)
    out.emit(echo(cfg), "config.txt")
    tr = build_trainer(cfg.model_config(), cfg.loss, cfg.train, cfg.data)
    if args.resume:
        load_checkpoint(args.resume, tr)
        out.emit(f"resumed from {args.resume} at step {tr.step_count}")
    res = run_training(cfg.model_config(), cfg.loss, cfg.train, cfg.data, out_dir=args.out,
                       log=lambda line: out.emit(line), trainer=tr)
    if args.out:
        (Path(args.out) / "checkpoint" / "config.txt").write_text(echo(cfg), encoding="utf-8")
    out.emit(res.report.to_text())
    out.emit(f"seconds={res.seconds:.1f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Output(args.out)
    frames = args.frames or cfg.train.eval_frames
    seeds = heldout_seeds(cfg.train.seed, frames)
    k = cfg.heads.num_classes
    if args.oracle:
        report = evaluate(None, cfg.data, seeds, k, predictor=oracle_predictor)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint <dir> (or --oracle)")
        ckpt_cfg = Path(args.checkpoint) / "config.txt"
        if args.config is None and ckpt_cfg.exists():
            cfg = parse_config(ckpt_cfg, args.overrides)
        tr = build_trainer(cfg.model_config(), cfg.loss, cfg.train, cfg.data)
        load_checkpoint(args.checkpoint, tr)
        report = evaluate(tr.model, cfg.data, seeds, k)
        if args.dump and args.out:
            _dump_predictions(tr.model, cfg, seeds, Path(args.out) / "predictions")
    out.emit(report.to_text(), "eval.txt")
    if out.dir is not None:
        tensorio.save(out.dir / "eval.tns", report.to_array())
    return 0


def _dump_predictions(model: M2HX, cfg: Config, seeds, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(seeds):
        fr = generate_frame(replace(cfg.data, seed=s))
        pred = predict(model, fr.rgb[None])
        for key, task in TASK_FILES.items():
            if key in pred:
                tensorio.save(root / f"frame{i:05d}_{task}.tns", np.asarray(pred[key][0], dtype=np.float64))


def cmd_gradcheck(args) -> int:
    out = Output(args.out)
    blocks = args.blocks.split(",") if args.blocks else None
    if blocks and set(blocks) - set(BLOCKS):
        raise ConfigError(f"unknown blocks {sorted(set(blocks) - set(BLOCKS))}")
    if args.inject_fault:
        out.emit(f"fault injected into op '{args.inject_fault}'", "gradcheck.txt")
    results = run_suite(args.seeds, args.dtype, blocks, args.inject_fault)
    out.emit(f"dtype={args.dtype} threshold={THRESHOLDS[args.dtype]:.0e}", "gradcheck.txt")
    out.emit(format_table(results), "gradcheck.txt")
    failed = [r.name for r in results if not r.passed]
    if failed:
        cause = f" (injected fault in op '{args.inject_fault}')" if args.inject_fault else ""
        out.emit(f"FAILED blocks: {', '.join(failed)}{cause}", "gradcheck.txt")
        return 1
    out.emit(f"all {len(results)} blocks passed", "gradcheck.txt")
    return 0


def cmd_scan_oracle(args) -> int:
    out = Output(args.out)
    checks = scan_oracle_suite(args.instances, args.seed)
    lines = [f"{'inst':>5}{'T':>5}{'C':>4}{'N':>4}{'max_abs_err':>14}  causal"]
    bad = 0
    for i, c in enumerate(checks):
        ok = c.max_abs_err <= args.tol and c.causal
        bad += not ok
        if args.verbose or not ok:
            lines.append(f"{i:>5}{c.steps:>5}{c.width:>4}{c.state:>4}{c.max_abs_err:>14.3e}  "
                         f"{'yes' if c.causal else 'NO'}{'' if ok else '  FAIL'}")
    worst = max(c.max_abs_err for c in checks)
    lines.append(f"instances={len(checks)} worst_abs_err={worst:.3e} tol={args.tol:.0e} failures={bad}")
    out.emit("\n".join(lines), "scan_oracle.txt")
    return 1 if bad else 0


def cmd_profile(args) -> int:
    cfg = _config(args)
    out = Output(args.out)
    model = M2HX(cfg.model_config(), seed=cfg.train.seed)
    out.emit(profile(model).to_text(args.top), "profile.txt")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2hx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help="directory for report files")
        if config:
            sp.add_argument("--config", help="config file of 'section.key = value' lines")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset directory"))
    g.add_argument("--frames", type=int, default=64)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.set_defaults(fn=cmd_gen_data)

    t = common(sub.add_parser("train", help="train and evaluate"))
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(fn=cmd_train)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out frames"))
    e.add_argument("--checkpoint")
    e.add_argument("--frames", type=int, default=0)
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--dump", action="store_true", help="write <frame>_<task>.tns predictions")
    e.set_defaults(fn=cmd_eval)

    gc = common(sub.add_parser("gradcheck", help="block-by-block gradient suite"), config=False)
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    gc.add_argument("--blocks", help="comma-separated subset")
    gc.add_argument("--inject-fault", metavar="OP", help="corrupt the backward of one op (self test)")
    gc.set_defaults(fn=cmd_gradcheck)

    so = common(sub.add_parser("scan-oracle", help="vectorised scan vs scalar recurrence"), config=False)
    so.add_argument("--instances", type=int, default=100)
    so.add_argument("--seed", type=int, default=0)
    so.add_argument("--tol", type=float, default=1e-10)
    so.add_argument("--verbose", action="store_true")
    so.set_defaults(fn=cmd_scan_oracle)

    pr = common(sub.add_parser("profile", help="parameter and MAC accounting"))
    pr.add_argument("--top", type=int, default=0, help="list only the N most expensive modules")
    pr.set_defaults(fn=cmd_profile)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # --section.key=value overrides are collected before argparse sees them
    overrides = [a for a in argv if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]]
    rest = [a for a in argv if a not in overrides]
    args = build_parser().parse_args(rest)
    args.overrides = overrides
    if overrides and not hasattr(args, "config"):
        print(f"error: {args.command} takes no config overrides", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, CorruptContainerError, TrainingError, UnusedFaultError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
