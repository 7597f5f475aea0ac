"""PNG export: signed morphology delta maps and target/mask/print triptychs.

Delta colouring: zero is mid gray (128, 128, 128). Positive deltas (the block
expands) push the green channel up, negative deltas push red up; the other
channels fade toward black. Each image is normalized by its own max |delta|,
which is recorded in a ``.txt`` sidecar so the values can be recovered.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .morphology import morph_delta_maps
from .network import Generator
from .tensor import Tensor, no_grad

GRAY = 128


def delta_to_rgb(delta: np.ndarray, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Map a 2-D signed array to uint8 RGB. Returns (image, scale)."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"delta map must be 2-D, got shape {d.shape}")
    if scale is None:
        scale = float(np.max(np.abs(d))) if d.size else 0.0
    t = np.clip(d / scale, -1.0, 1.0) if scale > 0 else np.zeros_like(d)
    a = np.abs(t)
    fade = np.rint(GRAY * (1.0 - a))
    boost = np.rint(GRAY + 127.0 * a)
    rgb = np.empty(d.shape + (3,), dtype=np.uint8)
    pos = t > 0
    neg = t < 0
    rgb[..., 0] = np.where(neg, boost, np.where(pos, fade, GRAY))
    rgb[..., 1] = np.where(pos, boost, np.where(neg, fade, GRAY))
    rgb[..., 2] = np.where(pos | neg, fade, GRAY)
    return rgb, scale


def rgb_sign(rgb: np.ndarray) -> np.ndarray:
    """Inverse of the colour convention: +1 green, -1 red, 0 gray."""
    r = rgb[..., 0].astype(int)
    g = rgb[..., 1].astype(int)
    return np.sign(g - r)


def tile_grid(images: list[np.ndarray], cols: int | None = None, pad: int = 2, fill: int = 255) -> np.ndarray:
    """Pack equally sized images into one grid with ``pad`` px gutters."""
    if not images:
        raise ValueError("no images to arrange")
    h, w = images[0].shape[:2]
    extra = images[0].shape[2:]
    cols = cols or int(np.ceil(np.sqrt(len(images))))
    rows = -(-len(images) // cols)
    grid = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad) + extra, fill, dtype=np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = im
    return grid


def save_delta_maps(delta: np.ndarray, out_dir, prefix: str) -> list[Path]:
    """One PNG per channel of a (C, H, W) delta stack, plus
    ``<prefix>.scale.txt`` with one ``channel_<k> = <max |delta|>`` line each
    and ``<prefix>_grid.png`` with all channels side by side."""
    delta = np.asarray(delta)
    if delta.ndim != 3:
        raise ValueError(f"expected (C, H, W) deltas, got shape {delta.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, imgs, lines = [], [], []
    for k, d in enumerate(delta):
        rgb, s = delta_to_rgb(d)
        p = out / f"{prefix}_ch{k:03d}.png"
        Image.fromarray(rgb, "RGB").save(p)
        paths.append(p)
        imgs.append(rgb)
        lines.append(f"channel_{k} = {s!r}")
    (out / f"{prefix}.scale.txt").write_text("\n".join(lines) + "\n")
    Image.fromarray(tile_grid(imgs), "RGB").save(out / f"{prefix}_grid.png")
    return paths


def layer_deltas(gen: Generator, target: np.ndarray, layer: int) -> np.ndarray:
    """Per-channel deltas of every MorphBasic block in encoder scale
    ``layer`` for one (H, W) target. Returns (C', h, w), C' = C (s-1)/s."""
    n = len(gen.encoders)
    if not 0 <= layer < n:
        raise IndexError(f"invalid layer {layer}; valid indices are {list(range(n))}")
    x = Tensor(np.asarray(target, dtype=gen.dtype).reshape(1, 1, *np.shape(target)[-2:]))
    was = gen.training
    gen.eval()
    try:
        with no_grad():
            f = x
            for enc in gen.encoders[: layer + 1]:
                f = enc(f)
            block = gen.morphs[layer]
            inputs, _ = block.branches(f)
            maps = [morph_delta_maps(inp, mb)[0] for inp, mb in zip(inputs, block.morphs)]
    finally:
        gen.train(was)
    return np.concatenate(maps, axis=0)


def gray(a: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(a, dtype=np.float64), 0, 1) * 255).round().astype(np.uint8)


def triptych(target, mask, printed, pad: int = 4) -> np.ndarray:
    """Target | mask | printed, side by side in gray."""
    ims = [gray(np.squeeze(a)) for a in (target, mask, printed)]
    return tile_grid(ims, cols=3, pad=pad)


def save_triptych(path, target, mask, printed) -> None:
    Image.fromarray(triptych(target, mask, printed), "L").save(path)
