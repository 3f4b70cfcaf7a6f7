"""Train the default configuration on the synthetic scenes and print the held-out report.

    python scripts/train_toy.py --out runs/toy [--steps 2000] [--config my.cfg]
"""
import argparse
from dataclasses import replace

from m2hx.config import echo, parse_config
from m2hx.training import run_training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    cfg = parse_config(args.config, [])
    train = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    print(echo(cfg))
    res = run_training(cfg.model_config(), cfg.loss, train, cfg.data, out_dir=args.out, log=print)
    first, last = res.trainer.history[0], res.trainer.history[-1]
    print(f"raw task loss {first.raw_sum():.4f} -> {last.raw_sum():.4f} in {res.seconds / 60:.1f} min")
    print(res.report.to_text())


if __name__ == "__main__":
    main()
