"""Synthetic rectilinear layouts, rasterization, pixel-ILT reference masks and
dataset I/O."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .litho import LithoModel, aerial_image, print_mask, resist
from .metrics import l2_error
from .tensor import Parameter, Tensor, backward

logger = logging.getLogger(__name__)

SHAPES = ("bar", "l_shape", "t_shape", "tip_to_tip", "via_array")

__all__ = [
    "LayoutSpec",
    "LayoutTile",
    "LabeledTile",
    "SHAPES",
    "generate_tiles",
    "rasterize",
    "polygon_area",
    "rect_gap",
    "pixel_ilt_reference",
    "split_of",
    "save_tile",
    "load_tile",
    "save_dataset",
    "load_dataset",
    "build_dataset",
]


@dataclass
class LayoutSpec:
    tile_size: int = 128
    min_width: int = 16
    min_spacing: int = 16
    border: int = 12
    shape_mix: dict = field(default_factory=lambda: {s: 1.0 for s in SHAPES})
    max_shapes: int = 4
    pitch: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.min_width < 4:
            raise ValueError(f"min_width must be >= 4 px, got {self.min_width}")
        if self.min_spacing < 1:
            raise ValueError("min_spacing must be >= 1 px")
        unknown = set(self.shape_mix) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes in mix: {sorted(unknown)}")
        if sum(self.shape_mix.values()) <= 0 or any(v < 0 for v in self.shape_mix.values()):
            raise ValueError("shape_mix weights must be non-negative with a positive sum")
        usable = self.tile_size - 2 * self.border
        if usable < 2 * self.min_width:
            raise ValueError(
                f"infeasible layout spec: usable extent {usable} px cannot hold features of width {self.min_width}"
            )


@dataclass
class LayoutTile:
    id: str
    target: np.ndarray  # uint8 (H, W)
    polygons: list  # list of [(x, y), ...] integer pixel-corner loops
    pitch: float = 4.0


@dataclass
class LabeledTile:
    tile: LayoutTile
    mask_soft: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.tile.id


# ---------------------------------------------------------------- geometry


def rasterize(polygons, size: int | tuple) -> np.ndarray:
    """Even-odd fill of rectilinear loops sampled at pixel centres."""
    H, W = (size, size) if isinstance(size, int) else size
    parity = np.zeros((H, W + 1), dtype=np.uint8)
    for loop in polygons:
        n = len(loop)
        for i in range(n):
            (xa, ya), (xb, yb) = loop[i], loop[(i + 1) % n]
            if xa == xb and ya != yb:
                lo, hi = sorted((ya, yb))
                lo, hi = max(lo, 0), min(hi, H)
                if lo < hi and 0 <= xa <= W:
                    parity[lo:hi, xa] ^= 1
            elif ya != yb:
                raise ValueError(f"non-rectilinear edge {loop[i]} -> {loop[(i + 1) % n]}")
    return np.bitwise_xor.accumulate(parity, axis=1)[:, :W]


def polygon_area(loop) -> int:
    """Shoelace area of an integer vertex loop."""
    s = 0
    n = len(loop)
    for i in range(n):
        (x1, y1), (x2, y2) = loop[i], loop[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return abs(s) // 2


def rect_gap(a, b) -> float:
    """Euclidean distance between two closed boxes (x0, y0, x1, y1)."""
    gx = max(0, max(a[0], b[0]) - min(a[2], b[2]))
    gy = max(0, max(a[1], b[1]) - min(a[3], b[3]))
    return math.hypot(gx, gy)


def _rect_loop(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _transform(rng, loops, rects, box):
    """Random flip/transpose of a shape inside its bounding box."""
    X0, Y0, X1, Y1 = box
    fx, fy, tr = rng.integers(0, 2, size=3)

    def pt(x, y):
        if fx:
            x = X0 + X1 - x
        if fy:
            y = Y0 + Y1 - y
        if tr:
            x, y = X0 + (y - Y0), Y0 + (x - X0)
        return x, y

    def rect(r):
        (ax, ay), (bx, by) = pt(r[0], r[1]), pt(r[2], r[3])
        return (min(ax, bx), min(ay, by), max(ax, bx), max(ay, by))

    new_loops = [[pt(x, y) for x, y in loop] for loop in loops]
    return new_loops, [rect(r) for r in rects]


def _make_shape(kind: str, rng, spec: LayoutSpec):
    """Loops and covering rects of one shape with its top-left at the origin."""
    w0, s0 = spec.min_width, spec.min_spacing
    room = spec.tile_size - 2 * spec.border

    def width():
        return int(rng.integers(w0, int(w0 * 1.5) + 1))

    def length(lo):
        return int(rng.integers(lo, max(lo + 1, min(room, int(room * 0.7)) + 1)))

    if kind == "bar":
        w, L = width(), length(2 * w0)
        rects = [(0, 0, w, L)]
        loops = [_rect_loop(*rects[0])]
    elif kind == "l_shape":
        w, H, Wd = width(), length(2 * w0 + 8), length(2 * w0 + 8)
        loops = [[(0, 0), (w, 0), (w, H - w), (Wd, H - w), (Wd, H), (0, H)]]
        rects = [(0, 0, w, H), (0, H - w, Wd, H)]
    elif kind == "t_shape":
        w, H, Wd = width(), length(2 * w0 + 8), length(3 * w0)
        c0 = (Wd - w) // 2
        loops = [[(0, 0), (Wd, 0), (Wd, w), (c0 + w, w), (c0 + w, H), (c0, H), (c0, w), (0, w)]]
        rects = [(0, 0, Wd, w), (c0, 0, c0 + w, H)]
    elif kind == "tip_to_tip":
        w = width()
        gap = int(rng.integers(s0, int(s0 * 1.5) + 1))
        total = length(2 * (2 * w0) + gap)
        l1 = int(rng.integers(2 * w0, total - gap - 2 * w0 + 1))
        r1 = (0, 0, w, l1)
        r2 = (0, l1 + gap, w, total)
        rects = [r1, r2]
        loops = [_rect_loop(*r1), _rect_loop(*r2)]
    elif kind == "via_array":
        v = width()
        p = v + int(rng.integers(s0, int(s0 * 1.5) + 1))
        nx = int(rng.integers(1, max(2, min(3, (room + p - v) // p) + 1)))
        ny = int(rng.integers(1, max(2, min(3, (room + p - v) // p) + 1)))
        if nx * ny == 1:
            nx = 2 if (room + p - v) // p >= 2 else 1
        rects = [(i * p, j * p, i * p + v, j * p + v) for j in range(ny) for i in range(nx)]
        loops = [_rect_loop(*r) for r in rects]
    else:
        raise ValueError(f"unknown shape {kind!r}")
    X1 = max(r[2] for r in rects)
    Y1 = max(r[3] for r in rects)
    loops, rects = _transform(rng, loops, rects, (0, 0, X1, Y1))
    X1 = max(r[2] for r in rects)
    Y1 = max(r[3] for r in rects)
    return loops, rects, (X1, Y1)


def _tile(spec: LayoutSpec, index: int) -> LayoutTile:
    rng = np.random.default_rng([spec.seed, index])
    kinds = [k for k in SHAPES if spec.shape_mix.get(k, 0) > 0]
    probs = np.array([spec.shape_mix[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    lo, hi = spec.border, spec.tile_size - spec.border
    placed_rects: list = []
    polygons: list = []
    want = int(rng.integers(1, spec.max_shapes + 1))
    attempts = 0
    while len(polygons) == 0 or (attempts < 60 and _shape_count(polygons) < want):
        attempts += 1
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        loops, rects, (sx, sy) = _make_shape(kind, rng, spec)
        if sx > hi - lo or sy > hi - lo:
            if attempts > 200:
                raise ValueError("infeasible layout spec: shapes do not fit in the tile")
            continue
        ox = int(rng.integers(lo, hi - sx + 1))
        oy = int(rng.integers(lo, hi - sy + 1))
        rects = [(a + ox, b + oy, c + ox, d + oy) for a, b, c, d in rects]
        if any(rect_gap(r, q) < spec.min_spacing for r in rects for q in placed_rects):
            continue
        placed_rects.extend(rects)
        polygons.append([[(x + ox, y + oy) for x, y in loop] for loop in loops])
    flat = [loop for shape in polygons for loop in shape]
    target = rasterize(flat, spec.tile_size)
    return LayoutTile(f"s{spec.seed}_{index:04d}", target, flat, spec.pitch)


def _shape_count(polygons) -> int:
    return len(polygons)


def generate_tiles(spec: LayoutSpec, count: int) -> list[LayoutTile]:
    """Deterministic in (spec, count): tile i depends only on (seed, i)."""
    return [_tile(spec, i) for i in range(count)]


# ---------------------------------------------------------------- labels


def pixel_ilt_reference(
    tile: LayoutTile,
    model: LithoModel,
    steps: int = 200,
    lr: float = 1.0,
    improve_ratio: float = 0.9,
) -> LabeledTile:
    """Gradient-descent pixel ILT on ``mask = sigmoid(4 * theta)``.

    Minimizes the summed squared error between the soft print and the
    target and keeps the step whose binarized mask prints best.
    """
    zt = tile.target.astype(np.float64)
    baseline = l2_error(print_mask(zt[None, None], model).printed[0, 0], zt)
    if not zt.any():
        empty = np.zeros_like(zt)
        meta = {"iterations": 0, "baseline_l2": baseline, "oracle_l2": 0, "best_step": 0, "flagged": False}
        return LabeledTile(tile, empty, empty.astype(np.uint8), meta)
    target = Tensor(zt[None, None])
    theta = Parameter((zt - 0.5)[None, None], "theta")
    best_l2, best_soft, best_step = None, None, -1
    history = []
    for step in range(steps):
        m = ops.sigmoid(ops.scale(theta, 4.0))
        soft = resist(aerial_image(m, model), model)
        loss = ops.sum(ops.square(ops.sub(soft, target)))
        l2 = l2_error(print_mask((m.data >= 0.5).astype(np.float64), model).printed[0, 0], zt)
        if best_l2 is None or l2 < best_l2:
            best_l2, best_soft, best_step = l2, m.data[0, 0].copy(), step
        history.append(best_l2)
        backward(loss)
        theta.data -= lr * theta.grad
        theta.grad = None
    flagged = not best_l2 <= improve_ratio * baseline
    if flagged:
        logger.warning("tile %s: oracle l2 %d not below %.2f x baseline %d", tile.id, best_l2, improve_ratio, baseline)
    meta = {
        "iterations": steps,
        "baseline_l2": baseline,
        "oracle_l2": int(best_l2),
        "best_step": best_step,
        "flagged": flagged,
    }
    lt = LabeledTile(tile, best_soft, (best_soft >= 0.5).astype(np.uint8), meta)
    lt.meta["history"] = history
    return lt


def split_of(tile_id: str, train_fraction: float = 0.8) -> str:
    h = int(hashlib.sha256(tile_id.encode("utf-8")).hexdigest()[:8], 16)
    return "train" if (h % 10000) < train_fraction * 10000 else "val"


# ---------------------------------------------------------------- I/O

_META_KEYS = ("id", "pitch", "iterations", "baseline_l2", "oracle_l2", "best_step", "flagged", "split")


def _write_png(path: Path, grid: np.ndarray) -> None:
    Image.fromarray((np.asarray(grid) > 0).astype(np.uint8) * 255).convert("1").save(path)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def _parse_meta(text: str) -> dict:
    meta = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"meta line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def save_tile(directory, lt: LabeledTile) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tid = lt.tile.id
    _write_png(d / f"{tid}.target.png", lt.tile.target)
    _write_png(d / f"{tid}.mask.png", lt.mask)
    lines = [" ".join(f"{x},{y}" for x, y in loop) for loop in lt.tile.polygons]
    (d / f"{tid}.poly.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    meta = {"id": tid, "pitch": lt.tile.pitch, "split": split_of(tid)}
    meta.update({k: v for k, v in lt.meta.items() if k in _META_KEYS})
    (d / f"{tid}.meta.txt").write_text("".join(f"{k}={meta[k]}\n" for k in _META_KEYS if k in meta))


def _parse_polygons(text: str) -> list:
    loops = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            pts = [tuple(int(v) for v in tok.split(",")) for tok in line.split()]
            if len(pts) < 4 or any(len(p) != 2 for p in pts):
                raise ValueError
        except ValueError:
            raise ValueError(f"malformed polygon at line {n}: {line.strip()!r}") from None
        loops.append(pts)
    return loops


def load_tile(directory, tile_id: str) -> LabeledTile:
    d = Path(directory)
    meta_path = d / f"{tile_id}.meta.txt"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sidecar {meta_path}")
    raw = _parse_meta(meta_path.read_text())
    target = _read_png(d / f"{tile_id}.target.png")
    mask = _read_png(d / f"{tile_id}.mask.png")
    polygons = _parse_polygons((d / f"{tile_id}.poly.txt").read_text())
    if not np.array_equal(rasterize(polygons, target.shape), target):
        raise ValueError(f"tile {tile_id}: polygons do not reproduce the target raster")
    meta: dict = {}
    for k, v in raw.items():
        if k in ("iterations", "baseline_l2", "oracle_l2", "best_step"):
            meta[k] = int(v)
        elif k == "flagged":
            meta[k] = v == "True"
        elif k in ("split",):
            meta[k] = v
    tile = LayoutTile(tile_id, target, polygons, float(raw.get("pitch", 4.0)))
    return LabeledTile(tile, mask.astype(np.float64), mask, meta)


MANIFEST_COLUMNS = ("id", "split", "baseline_l2", "oracle_l2")


def save_dataset(directory, tiles: list[LabeledTile]) -> Path:
    d = Path(directory)
    tdir = d / "tiles"
    tdir.mkdir(parents=True, exist_ok=True)
    for lt in tiles:
        save_tile(tdir, lt)
    manifest = d / "manifest.csv"
    with manifest.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for lt in sorted(tiles, key=lambda t: t.id):
            w.writerow([lt.id, split_of(lt.id), lt.meta.get("baseline_l2", ""), lt.meta.get("oracle_l2", "")])
    return manifest


def load_dataset(directory) -> list[LabeledTile]:
    d = Path(directory)
    manifest = d / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {d}")
    with manifest.open(newline="") as f:
        rows = list(csv.DictReader(f))
    tiles = []
    for row in rows:
        lt = load_tile(d / "tiles", row["id"])
        lt.meta["split"] = row["split"]
        tiles.append(lt)
    return tiles


def build_dataset(spec: LayoutSpec, count: int, model: LithoModel, steps: int = 200, lr: float = 1.0) -> list[LabeledTile]:
    tiles = []
    for t in generate_tiles(spec, count):
        lt = pixel_ilt_reference(t, model, steps, lr)
        lt.meta["split"] = split_of(t.id)
        tiles.append(lt)
    return tiles
