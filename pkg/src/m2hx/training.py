"""Optimiser, training step and loop, evaluation and checkpointing."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from . import tensorio
from .fusion import TASKS
from .metrics import Accumulator, EvalReport
from .model import DTYPES, M2HX, ModelConfig
from .objectives import (LossConfig, LossReport, UncertaintyParams, aux_loss, consistency_losses,
                         task_loss, total_loss)
from .synthdata import SceneSpec, frame_seed, make_batch
from .tensor import Tensor

CKPT_HEADER = "m2hx-checkpoint v1"
NO_DECAY_MARKERS = ("norm", "gate", "log_var", "pos_embed", "registers")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 100
    optimizer: str = "adamw"
    seed: int = 0
    tasks: tuple[str, ...] = TASKS
    dtype: str = "f32"
    deterministic: bool = False     # disables dropout
    eval_every: int = 0             # 0 = only at the end
    eval_frames: int = 32
    log_every: int = 10

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("train.steps must be >= 1")
        if self.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("train.optimizer must be adamw or sgd")
        if self.dtype not in DTYPES:
            raise ValueError(f"train.dtype must be one of {sorted(DTYPES)}")
        if not self.tasks or set(self.tasks) - set(TASKS):
            raise ValueError(f"train.tasks must be a non-empty subset of {TASKS}")


def decays(name: str, p) -> bool:
    """Weight decay applies to weight matrices and kernels, not norms, gates, s_t or biases."""
    if p.ndim < 2 or name.endswith(".bias"):
        return False
    return not any(m in name for m in NO_DECAY_MARKERS)


class AdamW:
    """Decoupled weight decay Adam with linear warmup."""

    def __init__(self, params: list[tuple[str, object]], lr: float, weight_decay: float = 0.01,
                 warmup: int = 0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd, self.warmup = lr, weight_decay, warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}
        self.decay = {k: decays(k, p) for k, p in self.params}

    def current_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (self.t + 1) / self.warmup)

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.decay[k] and self.wd:
                p.data -= lr * self.wd * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]
        self.t = t


class SGD(AdamW):
    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        for k, p in self.params:
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.data.dtype)


@dataclass
class Trainer:
    model: M2HX
    unc: UncertaintyParams | None
    loss_cfg: LossConfig
    train_cfg: TrainConfig
    data: SceneSpec
    optimizer: AdamW = None
    history: list[LossReport] = field(default_factory=list)

    def __post_init__(self):
        if self.train_cfg.deterministic:
            for _, mod in self.model.named_modules():
                if hasattr(mod, "dropout") and isinstance(mod.dropout, float):
                    mod.dropout = 0.0
        if self.optimizer is None:
            kind = AdamW if self.train_cfg.optimizer == "adamw" else SGD
            self.optimizer = kind(self.trainable(), self.train_cfg.lr, self.train_cfg.weight_decay,
                                  self.train_cfg.warmup)

    def trainable(self) -> list[tuple[str, object]]:
        params = [(f"model.{k}", p) for k, p in self.model.trainable_parameters()]
        if self.unc is not None:
            params += [(f"unc.{k}", p) for k, p in self.unc.named_parameters()]
        return params

    @property
    def step_count(self) -> int:
        return self.optimizer.t

    def batch(self, step: int) -> dict[str, np.ndarray]:
        b = self.train_cfg.batch_size
        seeds = [frame_seed(self.train_cfg.seed, "train", step * b + j) for j in range(b)]
        return make_batch(self.data, seeds)

    def step(self, batch: dict[str, np.ndarray] | None = None) -> LossReport:
        batch = self.batch(self.step_count) if batch is None else batch
        return train_step(self, batch)


def compute_losses(fwd, batch: dict[str, np.ndarray], tasks, loss_cfg: LossConfig,
                   unc: UncertaintyParams | None) -> tuple[Tensor, LossReport]:
    b = fwd.bundle
    gt = {"depth": batch["depth"], "sem": batch["labels"], "norm": batch["normals"], "edge": batch["edges"]}
    rep = LossReport()
    per_task: dict[str, Tensor] = {}
    for t in tasks:
        main = task_loss(b.get(t), gt[t], t, loss_cfg)
        aux = aux_loss(b.aux[t], gt[t], t, loss_cfg.aux_weight, loss_cfg)
        per_task[t] = main + aux
        rep.main[t], rep.aux[t], rep.task[t] = main.item(), aux.item(), per_task[t].item()
    dn, se = consistency_losses(b.depth, b.normals, b.edges, b.sem_logits, loss_cfg.lambda_dn, loss_cfg.lambda_se)
    cons = None
    for key, term, lam in (("dn", dn, loss_cfg.lambda_dn), ("se", se, loss_cfg.lambda_se)):
        if term is not None:
            rep.consistency[key] = term.item()
            cons = term * lam if cons is None else cons + term * lam
    if unc is not None:
        rep.sigma2 = unc.sigma2()
    total = total_loss(per_task, unc, cons)
    rep.total = total.item()
    return total, rep


def train_step(tr: Trainer, batch: dict[str, np.ndarray]) -> LossReport:
    """Forward all active heads, backward the total, update trainable parameters."""
    tr.model.train()
    fwd = tr.model.run(batch["rgb"])
    total, rep = compute_losses(fwd, batch, tr.model.tasks.active, tr.loss_cfg, tr.unc)
    rep.step = tr.step_count + 1
    if not np.isfinite(rep.total):
        raise TrainingError(f"non-finite loss at step {rep.step}: {rep.to_line()}")
    for _, p in tr.optimizer.params:
        p.grad = None
    T.backward(total)
    for k, p in tr.optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {k} at step {rep.step}: {rep.to_line()}")
    tr.optimizer.step()
    tr.history.append(rep)
    return rep


# -- evaluation ---------------------------------------------------------------
def predict(model: M2HX, rgb: np.ndarray) -> dict[str, np.ndarray]:
    model.eval()
    try:
        with T.no_grad():
            b = model.forward(rgb)
    finally:
        model.train()
    out = {}
    if b.sem_logits is not None:
        out["labels"] = np.argmax(b.sem_logits.data, axis=1)
    if b.depth is not None:
        out["depth"] = b.depth.data
    if b.normals is not None:
        out["normals"] = b.normals.data
    if b.edges is not None:
        out["edges"] = b.edges.data
    return out


def heldout_seeds(seed: int, count: int) -> list[int]:
    return [frame_seed(seed, "val", i) for i in range(count)]


def evaluate(model: M2HX, data: SceneSpec, seeds: list[int], num_classes: int, batch_size: int = 8,
             predictor: Callable | None = None) -> EvalReport:
    """Dataset-level metrics on the given frames. ``predictor(batch)`` overrides the model."""
    acc = Accumulator(num_classes)
    for i in range(0, len(seeds), batch_size):
        batch = make_batch(data, seeds[i:i + batch_size])
        pred = predictor(batch) if predictor is not None else predict(model, batch["rgb"])
        acc.update(pred, batch)
    return acc.report()


def oracle_predictor(batch: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Feeds ground truth back as the prediction (upper-bound test hook)."""
    return {"labels": batch["labels"], "depth": batch["depth"], "normals": batch["normals"],
            "edges": batch["edges"]}


# -- checkpoints ---------------------------------------------------------------
def _rng_modules(model) -> list[tuple[str, object]]:
    return [(name, mod) for name, mod in model.named_modules() if getattr(mod, "_rng", None) is not None]


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(path: str | os.PathLike, tr: Trainer) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [CKPT_HEADER, f"step={tr.step_count}", f"dtype={np.dtype(tr.model.dtype).name}"]
    for k, p in tr.model.named_parameters():
        lines.append(f"param={k} kind={'frozen' if p.frozen else 'trainable'} shape={','.join(map(str, p.shape))}")
        tensorio.save(root / f"model.{_safe(k)}.tns", p.data)
    if tr.unc is not None:
        for k, p in tr.unc.named_parameters():
            lines.append(f"param=unc.{k} kind=trainable shape=")
            tensorio.save(root / f"unc.{_safe(k)}.tns", p.data)
    for k, v in tr.optimizer.state().items():
        lines.append(f"opt={k}")
        tensorio.save(root / f"opt.{_safe(k)}.tns", v)
    rng_state = {name: mod._rng.bit_generator.state for name, mod in _rng_modules(tr.model)}
    (root / "rng.json").write_text(json.dumps(rng_state, sort_keys=True), encoding="utf-8")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def read_checkpoint_manifest(path: str | os.PathLike) -> dict:
    mf = Path(path) / "manifest.txt"
    if not mf.exists():
        raise TrainingError(f"{path}: missing checkpoint manifest")
    lines = mf.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CKPT_HEADER:
        raise TrainingError(f"{mf}: not a {CKPT_HEADER} manifest")
    info = {"step": 0, "params": {}, "opt": []}
    for line in lines[1:]:
        items = dict(part.split("=", 1) for part in line.split())
        if "param" in items:
            info["params"][items["param"]] = items["kind"]
        elif "opt" in items:
            info["opt"].append(items["opt"])
        elif "step" in items:
            info["step"] = int(items["step"])
        elif "dtype" in items:
            info["dtype"] = items["dtype"]
    return info


def load_checkpoint(path: str | os.PathLike, tr: Trainer) -> Trainer:
    """Restore parameters, optimiser moments, step count and dropout RNG state in place."""
    root = Path(path)
    info = read_checkpoint_manifest(root)
    names = {k for k, _ in tr.model.named_parameters()}
    listed = {k for k in info["params"] if not k.startswith("unc.")}
    if names != listed:
        raise TrainingError(f"checkpoint/model parameter mismatch: {sorted(names ^ listed)[:5]}")
    state = {k: tensorio.load(root / f"model.{_safe(k)}.tns") for k in names}
    try:
        tr.model.load_state_dict(state)
    except ValueError as exc:
        raise TrainingError(str(exc)) from exc
    if tr.unc is not None:
        for k, p in tr.unc.named_parameters():
            p.data[...] = tensorio.load(root / f"unc.{_safe(k)}.tns")
    opt = {k: tensorio.load(root / f"opt.{_safe(k)}.tns") for k in info["opt"]}
    tr.optimizer.load_state(opt, info["step"])
    rng_state = json.loads((root / "rng.json").read_text(encoding="utf-8"))
    for name, mod in _rng_modules(tr.model):
        mod._rng.bit_generator.state = rng_state[name]
    return tr


# -- loop ----------------------------------------------------------------------
def build_trainer(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
                  data: SceneSpec) -> Trainer:
    train_cfg.validate()
    loss_cfg.validate()
    model_cfg = replace(model_cfg, tasks=tuple(train_cfg.tasks))
    dtype = DTYPES[train_cfg.dtype]
    model = M2HX(model_cfg, seed=train_cfg.seed, dtype=dtype)
    unc = UncertaintyParams(model.tasks.active, dtype) if loss_cfg.uncertainty else None
    return Trainer(model, unc, loss_cfg, train_cfg, data)


@dataclass
class RunResult:
    trainer: Trainer
    report: EvalReport
    evals: list[tuple[int, EvalReport]]
    seconds: float


def run_training(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig, data: SceneSpec,
                 out_dir: str | os.PathLike | None = None, log: Callable[[str], None] | None = None,
                 trainer: Trainer | None = None) -> RunResult:
    tr = trainer or build_trainer(model_cfg, loss_cfg, train_cfg, data)
    cfg = tr.train_cfg
    seeds = heldout_seeds(cfg.seed, cfg.eval_frames)
    k = tr.model.cfg.heads.num_classes
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "loss_log.txt", "a", encoding="utf-8")
    evals = []
    t0 = time.perf_counter()
    try:
        while tr.step_count < cfg.steps:
            rep = tr.step()
            if cfg.log_every and (rep.step % cfg.log_every == 0 or rep.step == 1):
                if logf is not None:
                    logf.write(rep.to_line() + "\n")
                if log is not None:
                    log(rep.to_line())
            if cfg.eval_every and rep.step % cfg.eval_every == 0 and rep.step < cfg.steps:
                evals.append((rep.step, evaluate(tr.model, tr.data, seeds, k)))
                if log is not None:
                    log(f"eval step={rep.step} " + evals[-1][1].to_text().replace("\n", " "))
    finally:
        if logf is not None:
            logf.close()
    report = evaluate(tr.model, tr.data, seeds, k)
    evals.append((tr.step_count, report))
    if out is not None:
        save_checkpoint(out / "checkpoint", tr)
        report.write(out)
    return RunResult(tr, report, evals, time.perf_counter() - t0)
