"""Mask quality metrics: printed l2 error, EPE violations, PV band and shots."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .litho import LithoModel, print_band

__all__ = [
    "MetricsRecord",
    "EpeConfig",
    "Rectangle",
    "EpeSample",
    "l2_error",
    "epe_samples",
    "epe_distance",
    "epe_violations",
    "pvb",
    "shot_count",
    "evaluate",
]


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(getattr(a, "data", a))
    a = np.squeeze(a) if a.ndim > 2 else a
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D binary image, got shape {a.shape}")
    return a.astype(bool)


@dataclass(frozen=True)
class MetricsRecord:
    l2: int
    epe_violations: int
    pvb: int
    shots: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpeConfig:
    """EPE sampling in pixels. Defaults are 1 nm/px values; use
    :meth:`for_pitch` to scale them for coarser grids."""

    spacing: int = 40
    threshold: int = 15
    margin: int = 0

    def __post_init__(self):
        if self.spacing < 1 or self.threshold < 1 or self.margin < 0:
            raise ValueError(f"invalid EPE config {self}")

    @classmethod
    def for_pitch(cls, pitch_nm: float, margin: int = 8) -> "EpeConfig":
        return cls(
            spacing=max(1, int(round(40.0 / pitch_nm))),
            threshold=max(1, int(round(15.0 / pitch_nm))),
            margin=margin,
        )


class Rectangle(NamedTuple):
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


class EpeSample(NamedTuple):
    """A measurement site on a target edge.

    ``axis`` 0: horizontal edge at crack row ``crack`` (between rows crack-1
    and crack), measured along column ``pos``. ``axis`` 1: vertical edge at
    crack column ``crack``, measured along row ``pos``.
    """

    axis: int
    crack: int
    pos: int


def l2_error(z, z_target) -> int:
    """Number of pixels where the printed image differs from the target."""
    a, b = _binary(z, "Z"), _binary(z_target, "Z_t")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """[start, stop) runs of True in a 1-D bool array."""
    d = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _place(start: int, stop: int, spacing: int) -> list[int]:
    length = stop - start
    n = max(1, length // spacing)
    first = start + (length - (n - 1) * spacing) // 2
    return [first + j * spacing for j in range(n)]


def epe_samples(z_target, cfg: EpeConfig) -> list[EpeSample]:
    """Measurement sites along the target contour.

    Maximal straight edge runs of the target (split where the inside side
    flips) each get ``max(1, len // spacing)`` sites centred on the run.
    Sites closer than ``cfg.margin`` to the tile border are dropped.
    """
    t = _binary(z_target, "Z_t").astype(np.int8)
    H, W = t.shape
    padded = np.pad(t, 1)
    out: list[EpeSample] = []
    # horizontal edges: crack row y sits between pixel rows y-1 and y
    dv = padded[1:, 1:-1] - padded[:-1, 1:-1]  # (H+1, W)
    for y in range(H + 1):
        for sign in (1, -1):
            for a, b in _runs(dv[y] == sign):
                out.extend(EpeSample(0, y, x) for x in _place(a, b, cfg.spacing))
    dh = padded[1:-1, 1:] - padded[1:-1, :-1]  # (H, W+1)
    for x in range(W + 1):
        for sign in (1, -1):
            for a, b in _runs(dh[:, x] == sign):
                out.extend(EpeSample(1, x, y) for y in _place(a, b, cfg.spacing))
    m = cfg.margin
    if m:
        out = [
            s
            for s in out
            if (m <= s.pos < (W if s.axis == 0 else H) - m) and (m <= s.crack <= (H if s.axis == 0 else W) - m)
        ]
    out.sort(key=lambda s: (s.axis, s.crack, s.pos))
    return out


def epe_distance(z, sample: EpeSample, cap: int) -> int:
    """Distance from the sample's target edge to the nearest printed edge on
    the normal line, searching at most ``cap`` px each way (``cap + 1`` if
    none is found)."""
    line = z[:, sample.pos] if sample.axis == 0 else z[sample.pos, :]
    n = line.size
    c = sample.crack
    for d in range(cap + 1):
        for e in (c - d, c + d):
            if 0 <= e <= n:
                left = bool(line[e - 1]) if e >= 1 else False
                right = bool(line[e]) if e < n else False
                if left != right:
                    return d
    return cap + 1


def epe_violations(z, z_target, cfg: EpeConfig | None = None) -> int:
    """Count target-contour sites whose printed edge is more than
    ``cfg.threshold`` px away along the edge normal. An empty target has no
    sites and therefore 0 violations."""
    cfg = cfg or EpeConfig()
    zz, tt = _binary(z, "Z"), _binary(z_target, "Z_t")
    if zz.shape != tt.shape:
        raise ValueError(f"shape mismatch: {zz.shape} vs {tt.shape}")
    return sum(epe_distance(zz, s, cfg.threshold) > cfg.threshold for s in epe_samples(tt, cfg))


def pvb(z_min, z_max) -> int:
    """Pixels printed at the high corner but not at the low corner."""
    lo, hi = _binary(z_min, "Z_min"), _binary(z_max, "Z_max")
    if lo.shape != hi.shape:
        raise ValueError(f"shape mismatch: {lo.shape} vs {hi.shape}")
    if np.any(lo & ~hi):
        raise ValueError("Z_min is not contained in Z_max; the simulator is not dose-monotone")
    return int(np.count_nonzero(hi & ~lo))


def shot_count(mask) -> tuple[int, list[Rectangle]]:
    """Greedy exact cover of the on-set by disjoint rectangles.

    Scanning row-major, each rectangle starts at the first uncovered on
    pixel, takes the full run of uncovered on pixels to its right, then grows
    downward while that whole run stays on and uncovered.
    """
    on = _binary(mask, "mask")
    H, W = on.shape
    free = on.copy()
    rects: list[Rectangle] = []
    for y in range(H):
        row = free[y]
        while True:
            xs = np.flatnonzero(row)
            if xs.size == 0:
                break
            x0 = int(xs[0])
            gaps = np.flatnonzero(~row[x0:])
            x1 = x0 + int(gaps[0]) if gaps.size else W
            y1 = y + 1
            while y1 < H and free[y1, x0:x1].all():
                y1 += 1
            free[y:y1, x0:x1] = False
            rects.append(Rectangle(x0, y, x1, y1))
    return len(rects), rects


def evaluate(mask, z_target, model: LithoModel, cfg: EpeConfig | None = None) -> MetricsRecord:
    """All four metrics for a binary mask against its target."""
    cfg = cfg or EpeConfig.for_pitch(model.pitch)
    m = _binary(mask, "mask")
    t = _binary(z_target, "Z_t")
    if m.shape != t.shape:
        raise ValueError(f"shape mismatch: mask {m.shape} vs target {t.shape}")
    z_lo, z_nom, z_hi = (np.squeeze(z) for z in print_band(m[None, None].astype(np.float64), model))
    return MetricsRecord(
        l2=l2_error(z_nom, t),
        epe_violations=epe_violations(z_nom, t, cfg),
        pvb=pvb(z_lo, z_hi),
        shots=shot_count(m)[0],
    )
