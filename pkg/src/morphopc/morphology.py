"""Learnable non-flat grayscale morphology and the blocks built on it.

Dilation is a per-channel max-plus correlation and erosion the matching
min-plus one::

    dilate(x)_c(p) = max_q [x_c(p - q) + w_c(q)] + b_c
    erode(x)_c(p)  = min_q [x_c(p + q) - w_c(q)] + b_c

with q ranging over a centred k x k window. Out-of-image samples are left
out of the max/min, so outputs keep the input size. Subgradients go to the
first extremal window position in row-major order of q.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .nn import BatchNorm2d, ConvBlock, Conv2d, Module, activation
from .tensor import Parameter, ShapeError, Tensor, make_result, no_grad

__all__ = [
    "dilate",
    "erode",
    "reflect",
    "gated_fuse",
    "StructuringSurface",
    "GateVector",
    "MorphBasicBlock",
    "MultiScaleMorphBlock",
    "default_se_schedule",
    "morph_basic",
    "multiscale_morph",
    "morph_delta_maps",
]


def _check_se(x: Tensor, weight: Tensor, bias: Tensor) -> int:
    if x.ndim != 4:
        raise ShapeError(f"morphology input must be (B, C, H, W), got {x.shape}")
    C = x.shape[1]
    if weight.ndim != 3 or weight.shape[1] != weight.shape[2] or weight.shape[1] % 2 == 0:
        raise ShapeError(f"structuring surface must be (C, k, k) with odd k, got {weight.shape}")
    if weight.shape[0] != C or bias.shape != (C,):
        raise ShapeError(
            f"channel mismatch: input has C={C}, surface has {weight.shape[0]} channels and bias shape {bias.shape}"
        )
    return weight.shape[1]


def _morph(x: Tensor, weight: Tensor, bias: Tensor, dilation: bool) -> Tensor:
    k = _check_se(x, weight, bias)
    B, C, H, W = x.shape
    r = k // 2
    kk = k * k
    fill = -np.inf if dilation else np.inf
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)), constant_values=fill)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    w = weight.data[None, :, None, None, :, :]
    if dilation:
        # window position (i, j) holds x(p + (i-r, j-r)); flipping indexes it by q for x(p - q)
        vals = (win[..., ::-1, ::-1] + w).reshape(B, C, H, W, kk)
        idx = vals.argmax(axis=-1)
    else:
        vals = (win - w).reshape(B, C, H, W, kk)
        idx = vals.argmin(axis=-1)
    out = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0] + bias.data[None, :, None, None]

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = None
        if weight.requires_grad:
            chan = np.broadcast_to(np.arange(C)[None, :, None, None], idx.shape)
            gw = np.bincount((chan * kk + idx).ravel(), weights=g.ravel(), minlength=C * kk)
            gw = gw.reshape(C, k, k).astype(g.dtype, copy=False)
            if not dilation:
                gw = -gw
        gx = None
        if x.requires_grad:
            gxp = np.zeros((B, C, H + 2 * r, W + 2 * r), dtype=g.dtype)
            for n in range(kk):
                i, j = divmod(n, k)
                hit = idx == n
                if not hit.any():
                    continue
                # source pixel in padded coordinates
                oi, oj = (2 * r - i, 2 * r - j) if dilation else (i, j)
                gxp[:, :, oi : oi + H, oj : oj + W] += np.where(hit, g, 0)
            gx = gxp[:, :, r : r + H, r : r + W]
        return (gx, gw, gb)

    return make_result(out, "dilate" if dilation else "erode", (x, weight, bias), backward_fn, ctx=idx)


def dilate(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Max-plus dilation with a (C, k, k) surface and per-channel bias."""
    return _morph(x, weight, bias, dilation=True)


def erode(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Min-plus erosion with a (C, k, k) surface and per-channel bias."""
    return _morph(x, weight, bias, dilation=False)


def reflect(w: np.ndarray) -> np.ndarray:
    """w(q) -> w(-q) on a centred window."""
    return np.ascontiguousarray(np.asarray(w)[..., ::-1, ::-1])


class StructuringSurface(Module):
    """Per-channel k x k weights plus a per-channel bias."""

    def __init__(self, channels: int, size: int = 3, dtype=np.float32, init_std: float = 0.0, rng=None):
        super().__init__()
        if size < 1 or size % 2 == 0:
            raise ValueError(f"structuring element size must be odd and >= 1, got {size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, init_std, (channels, size, size)) if init_std > 0 else np.zeros((channels, size, size))
        self.weight = Parameter(w.astype(dtype), "weight")
        self.bias = Parameter(np.zeros(channels, dtype=dtype), "bias")

    @property
    def size(self) -> int:
        return self.weight.shape[1]

    def dilate(self, x: Tensor) -> Tensor:
        return dilate(x, self.weight, self.bias)

    def erode(self, x: Tensor) -> Tensor:
        return erode(x, self.weight, self.bias)


class GateVector(Module):
    """Per-channel logits; sigmoid(g) weights dilation against erosion."""

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.g = Parameter(np.zeros(channels, dtype=dtype), "g")

    def probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.g.data))


def gated_fuse(x: Tensor, se: StructuringSurface, gate: GateVector, se_erode: StructuringSurface | None = None) -> Tensor:
    """sigma(g) * dilate(x) + (1 - sigma(g)) * erode(x)."""
    if gate.g.shape != (x.shape[1],):
        raise ShapeError(f"gate has {gate.g.shape[0]} channels, input has {x.shape[1]}")
    dil = se.dilate(x)
    ero = (se_erode or se).erode(x)
    s = ops.sigmoid(gate.g)
    return ops.add(ops.mul(s, dil), ops.mul(1.0 - s, ero))


class MorphBasicBlock(Module):
    """Gated dilation/erosion with a residual, 1x1 projection, BN and activation.

    ``out = act(BN(P(gated_fuse(x) + x)))``
    """

    def __init__(
        self,
        channels: int,
        se_size: int = 3,
        act: str = "relu",
        separate_se: bool = False,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        self.channels = channels
        self.surface = StructuringSurface(channels, se_size, dtype=dtype)
        self.surface_erode = StructuringSurface(channels, se_size, dtype=dtype) if separate_se else None
        self.gate = GateVector(channels, dtype=dtype)
        self.proj = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(channels, dtype=dtype)
        self.act = act

    def fuse(self, x: Tensor) -> Tensor:
        return gated_fuse(x, self.surface, self.gate, self.surface_erode)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"MorphBasic expects {self.channels} channels, got input shape {x.shape}")
        y = ops.add(self.fuse(x), x)
        return activation(self.act)(self.norm(self.proj(y)))


def default_se_schedule(s: int) -> list[int]:
    """SE sizes for splits 2..s: channel-first half gets 3x3, second half 5x5."""
    if s < 2:
        raise ValueError(f"scale factor must be >= 2, got {s}")
    return [3 if i <= s // 2 else 5 for i in range(2, s + 1)]


class MultiScaleMorphBlock(Module):
    """Channel-split hierarchy of conv + MorphBasic branches.

    Split 1 passes through; split 2 goes through F then MorphBasic; later
    splits first add the previous branch output. Branch outputs are
    concatenated, projected by a 1x1 conv + BN, added to the input and
    passed through ``outer_activation``.
    """

    def __init__(
        self,
        channels: int,
        s: int = 8,
        conv_size: int = 3,
        se_sizes: list[int] | None = None,
        act: str = "relu",
        outer_activation: str = "relu",
        separate_se: bool = False,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        if s < 2:
            raise ValueError("scale factor s=1 leaves no operator-bearing split")
        if channels % s:
            raise ShapeError(f"channels not divisible: C={channels} by s={s}")
        se_sizes = list(se_sizes) if se_sizes is not None else default_se_schedule(s)
        if len(se_sizes) != s - 1:
            raise ValueError(f"need {s - 1} SE sizes (splits 2..{s}), got {len(se_sizes)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.s = s
        self.se_sizes = se_sizes
        width = channels // s
        self.convs = [ConvBlock(width, width, conv_size, act=act, rng=rng, dtype=dtype) for _ in range(s - 1)]
        self.morphs = [
            MorphBasicBlock(width, k, act=act, separate_se=separate_se, rng=rng, dtype=dtype) for k in se_sizes
        ]
        self.proj = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(channels, dtype=dtype)
        self.outer_activation = outer_activation

    def branches(self, x: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Return (morph inputs, split outputs y_1..y_s)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"MultiScaleMorph expects {self.channels} channels, got input shape {x.shape}")
        xs = ops.split_channels(x, self.s)
        ys = [xs[0]]
        morph_inputs = []
        for i in range(1, self.s):
            inp = xs[i] if i == 1 else ops.add(xs[i], ys[-1])
            f = self.convs[i - 1](inp)
            morph_inputs.append(f)
            ys.append(self.morphs[i - 1](f))
        return morph_inputs, ys

    def forward(self, x: Tensor) -> Tensor:
        _, ys = self.branches(x)
        z = self.norm(self.proj(ops.concat_channels(ys)))
        return activation(self.outer_activation)(ops.add(z, x))


def _set_mode(block: Module, mode: str | None) -> None:
    if mode is None:
        return
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    block.train(mode == "train")


def morph_basic(x: Tensor, block: MorphBasicBlock, mode: str | None = None) -> Tensor:
    _set_mode(block, mode)
    return block(x)


def multiscale_morph(x: Tensor, block: MultiScaleMorphBlock, mode: str | None = None) -> Tensor:
    _set_mode(block, mode)
    return block(x)


def morph_delta_maps(x, block: MorphBasicBlock) -> np.ndarray:
    """gated_fuse(x) - x per channel: positive where the block expands,
    negative where it contracts."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    with no_grad():
        return block.fuse(xt).data - xt.data
