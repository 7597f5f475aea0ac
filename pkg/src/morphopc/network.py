"""Encoder-decoder mask generator with multi-scale morphology and a
conditional discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .morphology import MultiScaleMorphBlock, default_se_schedule
from .nn import ConvBlock, Conv2d, Module
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "GeneratorConfig",
    "Generator",
    "Discriminator",
    "generator_forward",
    "discriminator_forward",
    "binarize",
    "label_parameters",
]


@dataclass
class GeneratorConfig:
    image_size: int = 128
    widths: tuple = (32, 64, 128, 256)
    s: int = 8
    conv_size: int = 3
    se_schedule: list | None = None
    activation: str = "relu"
    outer_activation: str = "relu"
    separate_se: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("need at least one encoder scale")
        if self.s < 2:
            raise ValueError(f"scale factor s must be >= 2, got {self.s}")
        for i, w in enumerate(self.widths):
            if w % self.s:
                raise ValueError(f"width {w} at scale {i + 1} is not divisible by s={self.s}")
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{len(self.widths)}")
        if self.se_schedule is not None and len(self.se_schedule) != self.s - 1:
            raise ValueError(f"se_schedule needs {self.s - 1} entries, got {len(self.se_schedule)}")

    @property
    def scales(self) -> int:
        return len(self.widths)

    def resolved_se_schedule(self) -> list[int]:
        return list(self.se_schedule) if self.se_schedule is not None else default_se_schedule(self.s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["se_schedule"] = self.resolved_se_schedule()
        return d


def label_parameters(module: Module) -> None:
    """Give every parameter its dotted path as ``name``."""
    for name, p in module.named_parameters():
        p.name = name


class Generator(Module):
    """Target layout (B, 1, H, W) -> mask probabilities of the same shape.

    Encoder scale i applies a stride-2 conv block giving f_i at H / 2^i, and a
    MultiScaleMorph block turns f_i into the skip feature m_i. A bottleneck
    MultiScaleMorph seeds the decoder, which at every scale concatenates the
    running feature with m_j, fuses with a 3x3 conv block and upsamples by a
    1x1 conv followed by pixel shuffle.
    """

    def __init__(self, config: GeneratorConfig | None = None, dtype=np.float32):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        se = cfg.resolved_se_schedule()
        w = cfg.widths

        def msm(c):
            return MultiScaleMorphBlock(
                c,
                cfg.s,
                cfg.conv_size,
                se,
                act=cfg.activation,
                outer_activation=cfg.outer_activation,
                separate_se=cfg.separate_se,
                rng=rng,
                dtype=dtype,
            )

        cin = [1] + list(w[:-1])
        self.encoders = [ConvBlock(cin[i], w[i], 3, stride=2, act=cfg.activation, rng=rng, dtype=dtype) for i in range(len(w))]
        self.morphs = [msm(c) for c in w]
        self.bottleneck = msm(w[-1])
        out_w = [w[0]] + list(w[:-1])
        self.fuses = [ConvBlock(2 * w[j], w[j], 3, act=cfg.activation, rng=rng, dtype=dtype) for j in range(len(w))]
        self.ups = [Conv2d(w[j], 4 * out_w[j], 1, rng=rng, dtype=dtype) for j in range(len(w))]
        self.head = Conv2d(w[0], 1, 1, rng=rng, dtype=dtype)
        label_parameters(self)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def encode(self, x: Tensor) -> list[Tensor]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(f"generator expects (B, 1, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        f = x
        skips = []
        for enc, morph in zip(self.encoders, self.morphs):
            f = enc(f)
            skips.append(morph(f))
        return skips

    def forward(self, x: Tensor, drop_skips: bool = False) -> Tensor:
        skips = self.encode(x)
        u = self.bottleneck(skips[-1])
        for j in reversed(range(self.config.scales)):
            m = skips[j]
            if drop_skips:
                m = Tensor(np.zeros_like(m.data))
            u = self.fuses[j](ops.concat_channels([u, m]))
            u = ops.pixel_shuffle(self.ups[j](u), 2)
        return ops.sigmoid(self.head(u))

    def predict(self, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Eval-mode forward on a raw array, batched, without recording."""
        was = self.training
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(Tensor(np.asarray(x[i : i + batch_size], dtype=self.dtype))).data)
        self.train(was)
        return np.concatenate(out, axis=0)


class Discriminator(Module):
    """Conditional critic on the (target, mask) pair; returns logits (B, 1)."""

    def __init__(self, widths=(16, 32, 64, 128), seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed + 7919)
        chans = [2] + list(widths)
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, rng=rng, dtype=dtype) for i in range(len(widths))]
        self.out = Conv2d(chans[-1], 1, 1, rng=rng, dtype=dtype)
        label_parameters(self)

    def forward(self, target: Tensor, mask: Tensor) -> Tensor:
        if target.shape != mask.shape:
            raise ShapeError(f"discriminator inputs differ in shape: {target.shape} vs {mask.shape}")
        h = ops.concat_channels([target, mask])
        for conv in self.convs:
            h = ops.relu(conv(h))
        return ops.spatial_mean(self.out(h))


def generator_forward(target: Tensor, gen: Generator, mode: str = "eval") -> Tensor:
    gen.train(mode == "train")
    return gen(target)


def discriminator_forward(target: Tensor, mask: Tensor, disc: Discriminator) -> Tensor:
    """Probability that ``mask`` is a reference mask for ``target``."""
    return ops.sigmoid(disc(target, mask))


def binarize(m, threshold: float = 0.5):
    """Threshold to {0, 1}; values equal to the threshold map to 1."""
    if isinstance(m, Tensor):
        return Tensor((m.data >= threshold).astype(m.dtype))
    return (np.asarray(m) >= threshold).astype(np.uint8)
