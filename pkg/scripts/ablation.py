"""Train each ablation variant for a short budget and tabulate size and held-out scores.

    python scripts/ablation.py [--steps 200] [--eval-frames 16]
"""
import argparse
from dataclasses import replace

from m2hx.config import Config
from m2hx.decoder import RGMConfig
from m2hx.fusion import CTMConfig, MSCAConfig
from m2hx.metrics import profile
from m2hx.training import run_training

VARIANTS = {
    "full": {},
    "w/o CTM & MSCA": dict(ctm=CTMConfig(enabled=False), msca=MSCAConfig(enabled=False)),
    "+CTM": dict(msca=MSCAConfig(enabled=False)),
    "+MSCA": dict(ctm=CTMConfig(enabled=False)),
    "w/o RGM": dict(rgm=RGMConfig(enabled=False)),
    "w/o reg. feed": dict(rgm=RGMConfig(register_feed=False)),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--eval-frames", type=int, default=16)
    args = ap.parse_args()
    base = Config()
    train = replace(base.train, steps=args.steps, eval_frames=args.eval_frames, eval_every=0)
    print(f"{'variant':<16}{'params':>10}{'mIoU':>8}{'RMSE':>8}{'normal':>8}{'edgeF1':>8}{'min':>6}")
    for name, change in VARIANTS.items():
        model_cfg = replace(base.model_config(), **change)
        res = run_training(model_cfg, base.loss, train, base.data)
        r = res.report
        print(f"{name:<16}{profile(res.trainer.model).total_params:>10}{r.miou:>8.3f}{r.depth_rmse:>8.3f}"
              f"{r.normal_mean:>8.2f}{r.edge_f1:>8.3f}{res.seconds / 60:>6.1f}", flush=True)


if __name__ == "__main__":
    main()
