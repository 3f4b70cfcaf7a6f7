"""Parameter and multiply-accumulate breakdown of a configuration.

    python scripts/profile_model.py [--config my.cfg] [--top 15]
"""
import argparse

from m2hx.config import parse_config
from m2hx.metrics import profile
from m2hx.model import M2HX


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--top", type=int, default=15)
    args = ap.parse_args()
    cfg = parse_config(args.config, [])
    model = M2HX(cfg.model_config(), seed=cfg.train.seed)
    rep = profile(model)
    print(rep.to_text(args.top), end="")
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + p.size
    for g, n in sorted(groups.items(), key=lambda kv: -kv[1]):
        print(f"params.{g}={n} ({100 * n / rep.total_params:.1f}%)")


if __name__ == "__main__":
    main()
