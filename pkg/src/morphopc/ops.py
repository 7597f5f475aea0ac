"""Differentiable primitives. Each function returns a new Tensor and, when
recording, a tape node whose closure maps the output gradient to the input
gradients."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy.special import expit

from .tensor import ShapeError, Tensor, make_result

__all__ = [
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "square",
    "sigmoid",
    "relu",
    "log_sigmoid",
    "elementwise",
    "sum",
    "mean",
    "reduce",
    "spatial_mean",
    "concat_channels",
    "split_channels",
    "batchnorm",
    "pixel_shuffle",
    "fft_conv2d",
]


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a rank-4 (B, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, k, k)."""
    _check4(x, "conv2d input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, wc, k, _ = weight.shape
    if wc != Cin:
        raise ShapeError(f"conv2d: input channels C_in={Cin} but weight expects C_in={wc}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias must have shape ({Cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output height={Ho} width={Wo} < 1 for H={H}, W={W}, k={k}, padding={padding}")

    w2 = weight.data.reshape(Cout, -1)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, Cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * k * k)
    out2 = cols @ w2.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2
            if k == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(B, H, W, Cin).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(B, Ho, Wo, Cin, k, k)
                Hp, Wp = H + 2 * padding, W + 2 * padding
                gxp = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, backward_fn)


# ---------------------------------------------------------------- elementwise


def _channel_view(v: np.ndarray, ref_ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ref_ndim - 2))


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return "b_channel"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return "a_channel"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}: need equal shapes or a per-channel vector")


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same" or not kind.startswith(side):
        return g
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _operands(a: Tensor, b: Tensor):
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    if kind == "b_channel":
        bd = _channel_view(bd, a.ndim)
    elif kind == "a_channel":
        ad = _channel_view(ad, b.ndim)
    return kind, ad, bd


def add(a: Tensor, b: Tensor) -> Tensor:
    kind, ad, bd = _operands(a, b)

    def backward_fn(g):
        return (_unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b"))

    return make_result(ad + bd, "add", (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind, ad, bd = _operands(a, b)

    def backward_fn(g):
        return (_unbroadcast(g, kind, "a"), -_unbroadcast(g, kind, "b"))

    return make_result(ad - bd, "sub", (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind, ad, bd = _operands(a, b)

    def backward_fn(g):
        ga = _unbroadcast(g * bd, kind, "a") if a.requires_grad else None
        gb = _unbroadcast(g * ad, kind, "b") if b.requires_grad else None
        return (ga, gb)

    return make_result(ad * bd, "mul", (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + a.data.dtype.type(c), "add_scalar", (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make_result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * pos,))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)), finite for any finite input."""
    x = a.data
    out = -(np.logaddexp(0, -x))
    return make_result(out.astype(x.dtype), "log_sigmoid", (a,), lambda g: (g * expit(-x),))


_UNARY = {"square": square, "sigmoid": sigmoid, "relu": relu, "log_sigmoid": log_sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op name; ``scale`` takes a Python number as ``b``."""
    if kind in _BINARY:
        if not isinstance(b, Tensor):
            raise TypeError(f"{kind} needs a second tensor")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_result(np.asarray(a.data.sum(dtype=a.dtype)), "sum", (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def backward_fn(g):
        return (np.broadcast_to(g / n, shape),)

    return make_result(np.asarray(a.data.mean(dtype=a.dtype)), "mean", (a,), backward_fn)


def reduce(kind: str, a: Tensor) -> Tensor:
    if kind == "sum":
        return sum(a)
    if kind == "mean":
        return mean(a)
    raise ValueError(f"unknown reduction {kind!r}")


def spatial_mean(a: Tensor) -> Tensor:
    """Average over H and W: (B, C, H, W) -> (B, C)."""
    _check4(a, "spatial_mean")
    B, C, H, W = a.shape

    def backward_fn(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], a.shape),)

    return make_result(a.data.mean(axis=(2, 3)), "spatial_mean", (a,), backward_fn)


# ---------------------------------------------------------------- channel plumbing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    for p in parts:
        _check4(p, "concat_channels")
    B, _, H, W = parts[0].shape
    for i, p in enumerate(parts):
        if (p.shape[0], p.shape[2], p.shape[3]) != (B, H, W):
            raise ShapeError(f"concat_channels: part {i} has shape {p.shape}, expected (B={B}, *, H={H}, W={W})")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return make_result(np.concatenate([p.data for p in parts], axis=1), "concat", tuple(parts), backward_fn)


def split_channels(a: Tensor, groups: int) -> list[Tensor]:
    _check4(a, "split_channels")
    C = a.shape[1]
    if groups < 1 or C % groups:
        raise ShapeError(f"channels not divisible: C={C} into groups={groups}")
    w = C // groups
    out = []
    for i in range(groups):
        lo, hi = i * w, (i + 1) * w

        def backward_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(make_result(a.data[:, lo:hi].copy(), "split", (a,), backward_fn))
    return out


# ---------------------------------------------------------------- normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization; updates running stats in place when training."""
    _check4(x, "batchnorm")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({C},)")
    n = B * H * W
    if training:
        if n < 2:
            raise ShapeError(f"batchnorm in train mode needs B*H*W >= 2, got {n}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)

    def backward_fn(g):
        gg = gamma.data[None, :, None, None]
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            if training:
                gxhat = g * gg
                gx = (inv[None, :, None, None] / n) * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            else:
                gx = g * gg * inv[None, :, None, None]
        return (gx, ggamma, gbeta)

    return make_result(out, "batchnorm", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------- resampling


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r), channel-major sub-pixel layout."""
    _check4(a, "pixel_shuffle")
    B, C, H, W = a.shape
    if r < 1 or C % (r * r):
        raise ShapeError(f"pixel_shuffle: channels C={C} not divisible by r^2={r * r}")
    c = C // (r * r)
    out = a.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)

    def backward_fn(g):
        return (g.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C, H, W),)

    return make_result(out, "pixel_shuffle", (a,), backward_fn)


def pixel_unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    """Inverse rearrangement of :func:`pixel_shuffle` on raw arrays."""
    B, c, Hr, Wr = a.shape
    H, W = Hr // r, Wr // r
    return a.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * r * r, H, W)


# ---------------------------------------------------------------- fixed-kernel convolution


@lru_cache(maxsize=64)
def _kernel_spectrum(key: bytes, shape: tuple, fshape: tuple, dtype: str, flip: bool):
    h = np.frombuffer(key, dtype=np.float64).reshape(shape)
    if flip:
        h = h[::-1, ::-1]
    return sfft.rfft2(h.astype(dtype), s=fshape)


def _fft_same(x: np.ndarray, kernel: np.ndarray, flip: bool) -> np.ndarray:
    H, W = x.shape[-2:]
    K0, K1 = kernel.shape
    fshape = (sfft.next_fast_len(H + K0 - 1, real=True), sfft.next_fast_len(W + K1 - 1, real=True))
    kspec = _kernel_spectrum(
        np.ascontiguousarray(kernel, dtype=np.float64).tobytes(), kernel.shape, fshape, x.dtype.str, flip
    )
    full = sfft.irfft2(sfft.rfft2(x, s=fshape) * kspec, s=fshape)
    c0, c1 = K0 // 2, K1 // 2
    return np.ascontiguousarray(full[..., c0 : c0 + H, c1 : c1 + W]).astype(x.dtype, copy=False)


def fft_conv2d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """True 2-D convolution with a fixed real odd-sized kernel, zero padded,
    same-size output. Differentiable in ``x`` only."""
    kernel = np.asarray(kernel)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ShapeError(f"fft_conv2d: kernel must be 2-D with odd sides, got {kernel.shape}")
    if np.iscomplexobj(kernel):
        raise TypeError("fft_conv2d takes a real kernel; split complex kernels into re/im parts")
    out = _fft_same(x.data, kernel, flip=False)

    def backward_fn(g):
        return (_fft_same(np.ascontiguousarray(g), kernel, flip=True),)

    return make_result(out, "fft_conv2d", (x,), backward_fn)
