"""Differentiable lithography: mask -> aerial image -> soft resist -> print.

The optical model is a sum of coherent systems,
``I = dose * sum_k w_k |M * h_k|^2``, evaluated with zero-padded FFT
convolutions so it stays on the autodiff tape. The resist is a sigmoid of the
intensity around a threshold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

__all__ = [
    "LithoModel",
    "PrintedResult",
    "gaussian_kernel",
    "aerial_image",
    "resist",
    "print_mask",
    "print_band",
    "save_kernels",
    "load_kernels",
    "KernelFileError",
]

KERNEL_MAGIC = b"LKRN"
KERNEL_VERSION = 1


class KernelFileError(ValueError):
    pass


def gaussian_kernel(sigma: float = 8.0, radius: int | None = None) -> np.ndarray:
    """Isotropic Gaussian normalized to unit sum, truncated at ``radius`` (default 3 sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = int(np.ceil(3 * sigma)) if radius is None else int(radius)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g1, g1)
    return k / k.sum()


@dataclass
class LithoModel:
    kernels: list = field(default_factory=lambda: [gaussian_kernel(8.0)])
    weights: list = field(default_factory=lambda: [1.0])
    threshold: float = 0.5
    steepness: float = 50.0
    doses: tuple = (0.98, 1.0, 1.02)
    pitch: float = 4.0

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("LithoModel needs at least one kernel")
        if len(self.weights) != len(self.kernels):
            raise ValueError(f"{len(self.kernels)} kernels but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ValueError("kernel weights must be non-negative")
        if self.threshold <= 0 or self.steepness <= 0:
            raise ValueError("threshold and steepness must be positive")
        lo, nom, hi = self.doses
        if not (lo < 1.0 < hi) or nom != 1.0:
            raise ValueError(f"dose levels must satisfy d_min < 1 = nominal < d_max, got {self.doses}")

    @classmethod
    def gaussian(cls, sigma: float = 8.0, **kw) -> "LithoModel":
        return cls(kernels=[gaussian_kernel(sigma)], weights=[1.0], **kw)

    @classmethod
    def from_file(cls, path, **kw) -> "LithoModel":
        kernels, weights = load_kernels(path)
        return cls(kernels=kernels, weights=weights, **kw)

    def with_doses(self, lo: float, hi: float) -> "LithoModel":
        return LithoModel(list(self.kernels), list(self.weights), self.threshold, self.steepness, (lo, 1.0, hi), self.pitch)


@dataclass
class PrintedResult:
    aerial: Tensor
    resist_soft: Tensor
    printed: np.ndarray
    dose: float


def aerial_image(mask: Tensor, model: LithoModel, dose: float = 1.0) -> Tensor:
    if dose <= 0:
        raise ValueError(f"dose must be positive, got {dose}")
    if not model.kernels:
        raise ValueError("empty kernel list")
    total = None
    for h, w in zip(model.kernels, model.weights):
        h = np.asarray(h)
        if np.iscomplexobj(h):
            re = ops.fft_conv2d(mask, h.real)
            im = ops.fft_conv2d(mask, h.imag)
            term = ops.add(ops.square(re), ops.square(im))
        else:
            term = ops.square(ops.fft_conv2d(mask, h))
        term = ops.scale(term, w * dose)
        total = term if total is None else ops.add(total, term)
    return total


def resist(intensity: Tensor, model: LithoModel) -> Tensor:
    a = model.steepness
    return ops.sigmoid(ops.add_scalar(ops.scale(intensity, a), -a * model.threshold))


def print_mask(mask, model: LithoModel, dose: float = 1.0) -> PrintedResult:
    """Simulate the wafer pattern of ``mask`` at the given dose."""
    m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    aer = aerial_image(m, model, dose)
    soft = resist(aer, model)
    return PrintedResult(aer, soft, (soft.data >= 0.5).astype(np.uint8), dose)


def print_band(mask, model: LithoModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Printed sets at (d_min, nominal, d_max)."""
    with no_grad():
        return tuple(print_mask(mask, model, d).printed for d in model.doses)


def save_kernels(path, kernels, weights) -> None:
    """LKRN file: magic | version u32 | count u32 | K u32 | complex u32 |
    weights f64[count] | kernels f64[K, K] (or interleaved re/im f64[K, K, 2])."""
    kernels = [np.asarray(k) for k in kernels]
    K = kernels[0].shape[0]
    cplx = any(np.iscomplexobj(k) for k in kernels)
    parts = [KERNEL_MAGIC, struct.pack("<IIII", KERNEL_VERSION, len(kernels), K, int(cplx))]
    parts.append(np.asarray(weights, dtype="<f8").tobytes())
    for k in kernels:
        if k.shape != (K, K):
            raise ValueError(f"all kernels must be {K}x{K}, got {k.shape}")
        if cplx:
            parts.append(np.stack([k.real, k.imag], axis=-1).astype("<f8").tobytes())
        else:
            parts.append(k.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_kernels(path) -> tuple[list, list]:
    buf = Path(path).read_bytes()
    if len(buf) < 20:
        raise KernelFileError(f"truncated header: {len(buf)} bytes, need 20 at byte 0")
    if buf[:4] != KERNEL_MAGIC:
        raise KernelFileError("bad magic at byte 0")
    version, count, K, cplx = struct.unpack("<IIII", buf[4:20])
    if version != KERNEL_VERSION:
        raise KernelFileError(f"unsupported version {version} at byte 4")
    if count == 0:
        raise KernelFileError("kernel count is zero at byte 8")
    if K == 0 or K % 2 == 0:
        raise KernelFileError(f"kernel size {K} must be odd at byte 12")
    off = 20
    need = 8 * count
    if len(buf) < off + need:
        raise KernelFileError(f"truncated weights at byte {off}")
    weights = np.frombuffer(buf[off : off + need], dtype="<f8").tolist()
    off += need
    per = K * K * (2 if cplx else 1) * 8
    kernels = []
    for i in range(count):
        if len(buf) < off + per:
            raise KernelFileError(f"truncated kernel {i} at byte {off}")
        a = np.frombuffer(buf[off : off + per], dtype="<f8")
        if cplx:
            k = np.empty((K, K), dtype=np.complex128)
            k.real, k.imag = a.reshape(K, K, 2)[..., 0], a.reshape(K, K, 2)[..., 1]
        else:
            k = a.reshape(K, K).copy()
        kernels.append(k)
        off += per
    if off != len(buf):
        raise KernelFileError(f"trailing bytes at byte {off}")
    return kernels, weights
