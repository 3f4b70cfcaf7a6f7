"""Procedural orthographic scenes with exact depth, labels, normals and edges.

Scenes are viewed top-down through an orthographic camera with unit pixel
spacing, so a surface ``D(x, y)`` has normal ∝ (-dD/dx, -dD/dy, 1).
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensorio

BACKGROUND, FLOOR, BOX_SMALL, BOX_LARGE = 0, 1, 2, 3
NUM_CLASSES = 4
PALETTE = np.array([
    [0.55, 0.70, 0.90],   # background
    [0.60, 0.45, 0.30],   # floor
    [0.90, 0.25, 0.20],   # small box
    [0.20, 0.75, 0.30],   # large box
])
FORMAT_HEADER = "m2hx-dataset v1"
FRAME_FIELDS = ("rgb", "depth", "labels", "normals", "edges", "surface")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 64
    min_boxes: int = 1
    max_boxes: int = 3
    min_side: int = 12
    max_side: int = 36
    large_area: int = 576         # boxes covering at least this many pixels are "large"
    d_min: float = 0.1
    d_max: float = 8.1
    floor: bool = True
    slope_prob: float = 0.5
    max_slope: float = 0.02       # metres per pixel on sloped box tops
    noise: float = 0.02
    grid: int = 2                 # box corners snap to multiples of this

    def validate(self) -> None:
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ValueError("data.min_boxes must be in [0, data.max_boxes]")
        if not 1 <= self.min_side <= self.max_side <= self.image_size:
            raise ValueError("box sides must satisfy 1 <= data.min_side <= data.max_side <= data.image_size")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("scene depth range must satisfy 0 < data.d_min < data.d_max")
        if self.grid < 1:
            raise ValueError("data.grid must be >= 1")


@dataclass
class Frame:
    rgb: np.ndarray        # (3, H, W) in [0, 1]
    depth: np.ndarray      # (H, W) metres
    labels: np.ndarray     # (H, W) int
    normals: np.ndarray    # (3, H, W) unit
    edges: np.ndarray      # (H, W) {0, 1}
    surface: np.ndarray    # (H, W) int surface id (0 background, 1 floor, 2+ boxes)

    def equals(self, other: "Frame") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in FRAME_FIELDS)


def _plane_normal(gx: float, gy: float) -> np.ndarray:
    n = np.array([-gx, -gy, 1.0])
    return n / np.linalg.norm(n)


def _depth_layout(spec: SceneSpec):
    """Far background depth and the floor plane (rows >= horizon)."""
    span = spec.d_max - spec.d_min
    far = spec.d_min + span * 0.95
    floor_far = spec.d_min + span * 0.85
    floor_near = spec.d_min + span * 0.55
    return far, floor_far, floor_near


def generate_frame(spec: SceneSpec) -> Frame:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    far, floor_far, floor_near = _depth_layout(spec)
    span = spec.d_max - spec.d_min

    depth = np.full((n, n), far)
    labels = np.full((n, n), BACKGROUND, dtype=np.int64)
    surface = np.zeros((n, n), dtype=np.int64)
    normals = np.zeros((3, n, n))
    normals[2] = 1.0

    if spec.floor:
        horizon = int(rng.integers(n // 3, 2 * n // 3))
        top = rng.uniform(floor_far - 0.05 * span, floor_far)
        bottom = rng.uniform(floor_near, floor_near + 0.1 * span)
        gy = (bottom - top) / max(n - 1 - horizon, 1)
        rows = yy >= horizon
        plane = top + gy * (yy - horizon)
        depth[rows] = plane[rows]
        labels[rows] = FLOOR
        surface[rows] = 1
        normals[:, rows] = _plane_normal(0.0, gy)[:, None]

    box_hi = spec.d_min + span * 0.45
    box_lo = spec.d_min + span * 0.1
    count = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
    g = spec.grid
    for i in range(count):
        bw = int(rng.integers(spec.min_side // g, spec.max_side // g + 1)) * g
        bh = int(rng.integers(spec.min_side // g, spec.max_side // g + 1)) * g
        x0 = int(rng.integers(0, (n - bw) // g + 1)) * g
        y0 = int(rng.integers(0, (n - bh) // g + 1)) * g
        base = rng.uniform(box_lo + 0.1 * span, box_hi - 0.1 * span)
        sx = sy = 0.0
        if rng.random() < spec.slope_prob:
            sx, sy = rng.uniform(-spec.max_slope, spec.max_slope, 2)
        cx, cy = x0 + (bw - 1) / 2.0, y0 + (bh - 1) / 2.0
        top_plane = base + sx * (xx - cx) + sy * (yy - cy)
        inside = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
        win = inside & (top_plane < depth)
        depth[win] = top_plane[win]
        labels[win] = BOX_LARGE if bw * bh >= spec.large_area else BOX_SMALL
        surface[win] = 2 + i
        normals[:, win] = _plane_normal(sx, sy)[:, None]

    shade = 1.0 - 0.6 * (depth - spec.d_min) / span
    rgb = PALETTE[labels].transpose(2, 0, 1) * shade[None]
    rgb = np.clip(rgb + rng.normal(0.0, spec.noise, rgb.shape), 0.0, 1.0)
    return Frame(rgb=rgb, depth=depth, labels=labels, normals=normals,
                 edges=derive_edges(labels), surface=surface)


def derive_normals(depth: np.ndarray) -> np.ndarray:
    """Central-difference orthographic normals (one-sided at the border)."""
    dy, dx = np.gradient(np.asarray(depth, dtype=np.float64))
    n = np.stack([-dx, -dy, np.ones_like(dx)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def derive_edges(labels: np.ndarray) -> np.ndarray:
    """1 where any 4-neighbour carries a different label."""
    lab = np.asarray(labels)
    e = np.zeros(lab.shape, dtype=bool)
    e[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    e[:, :-1] |= lab[:, 1:] != lab[:, :-1]
    e[1:, :] |= lab[1:, :] != lab[:-1, :]
    e[:-1, :] |= lab[1:, :] != lab[:-1, :]
    return e.astype(np.float64)


def interior_mask(surface: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbours all exist and lie on the same surface."""
    s = np.asarray(surface)
    m = np.zeros(s.shape, dtype=bool)
    c = s[1:-1, 1:-1]
    m[1:-1, 1:-1] = (c == s[:-2, 1:-1]) & (c == s[2:, 1:-1]) & (c == s[1:-1, :-2]) & (c == s[1:-1, 2:])
    return m


def frame_seed(base: int, split: str, index: int) -> int:
    """Disjoint seed streams per split."""
    offset = {"train": 0, "val": 1, "test": 2}[split]
    return int(np.random.SeedSequence([base, offset, index]).generate_state(1)[0])


def make_batch(spec: SceneSpec, seeds) -> dict[str, np.ndarray]:
    frames = [generate_frame(replace(spec, seed=int(s))) for s in seeds]
    return stack_frames(frames)


def stack_frames(frames: list[Frame]) -> dict[str, np.ndarray]:
    return {f: np.stack([getattr(fr, f) for fr in frames]) for f in FRAME_FIELDS}


# -- dataset IO ---------------------------------------------------------------
class DatasetError(ValueError):
    pass


def write_dataset(path: str | os.PathLike, frames: list[Frame], spec: SceneSpec,
                  seeds: list[int] | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"frame{i:05d}" for i in range(len(frames))]
    seeds = list(seeds) if seeds is not None else [spec.seed] * len(frames)
    lines = [FORMAT_HEADER]
    lines += [f"spec.{k}={v}" for k, v in asdict(spec).items()]
    for name, seed, fr in zip(names, seeds, frames):
        lines.append(f"frame={name} seed={seed}")
        for f in FRAME_FIELDS:
            tensorio.save(root / f"{name}_{f}.tns", np.asarray(getattr(fr, f), dtype=np.float64))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        return raw == "True"
    return type(default)(raw)


def read_manifest(path: str | os.PathLike) -> tuple[SceneSpec, list[tuple[str, int]]]:
    root = Path(path)
    mf = root / "manifest.txt"
    if not mf.exists():
        raise DatasetError(f"{root}: missing manifest")
    lines = mf.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split()[0] != "m2hx-dataset":
        raise DatasetError(f"{mf}: not a dataset manifest")
    if lines[0] != FORMAT_HEADER:
        raise DatasetError(f"{mf}: unsupported version {lines[0]!r}")
    defaults = {f.name: f.default for f in fields(SceneSpec)}
    values, frames = {}, []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("spec."):
            key, raw = line[5:].split("=", 1)
            if key not in defaults:
                raise DatasetError(f"{mf}: unknown spec key {key}")
            values[key] = _parse_value(raw, defaults[key])
        elif line.startswith("frame="):
            try:
                items = dict(part.split("=", 1) for part in line.split())
                frames.append((items["frame"], int(items["seed"])))
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{mf}: malformed frame line {line!r}") from exc
        else:
            raise DatasetError(f"{mf}: unexpected line {line!r}")
    return SceneSpec(**values), frames


def read_dataset(path: str | os.PathLike) -> tuple[SceneSpec, list[Frame]]:
    root = Path(path)
    spec, entries = read_manifest(root)
    frames = []
    for name, _ in entries:
        arrays = {}
        for f in FRAME_FIELDS:
            fp = root / f"{name}_{f}.tns"
            if not fp.exists():
                raise DatasetError(f"{root}: missing {fp.name}")
            arrays[f] = tensorio.load(fp)
        arrays["labels"] = arrays["labels"].astype(np.int64)
        arrays["surface"] = arrays["surface"].astype(np.int64)
        frames.append(Frame(**arrays))
    return spec, frames
