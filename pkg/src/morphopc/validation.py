"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X", size: int | None = None) -> np.ndarray:
    """Coerce a stack of square single-channel images to (N, 1, H, W) float.

    Accepts (H, W), (N, H, W) or (N, 1, H, W). Values must be finite and
    lie in [0, 1].
    """
    a = np.asarray(getattr(X, "data", X))
    if a.dtype == object or not (np.issubdtype(a.dtype, np.number) or a.dtype == bool):
        raise TypeError(f"{name} must be numeric, got dtype {a.dtype}")
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    elif a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"{name} must have shape (H, W), (N, H, W) or (N, 1, H, W); got {a.shape}")
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if a.shape[2] != a.shape[3]:
        raise ValueError(f"{name} tiles must be square, got {a.shape[2]}x{a.shape[3]}")
    if size is not None and a.shape[2] != size:
        raise ValueError(f"{name} tiles must be {size}x{size}, got {a.shape[2]}x{a.shape[3]}")
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if a.min() < 0 or a.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1], got [{a.min()}, {a.max()}]")
    return a


def check_binary(X, name: str = "X", size: int | None = None) -> np.ndarray:
    a = check_images(X, name, size)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return a


def check_pair(X, y, size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    X = check_binary(X, "targets", size)
    y = check_images(y, "masks", size)
    if X.shape != y.shape:
        raise ValueError(f"targets {X.shape} and masks {y.shape} differ in shape")
    return X, y


def check_power_of_two_tile(size: int, scales: int) -> None:
    if size % (2**scales):
        raise ValueError(f"tile size {size} is not divisible by 2^{scales}")
