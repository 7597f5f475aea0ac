"""scikit-learn style wrappers.

``MorphOPC`` learns target -> mask. ``fit`` takes binary target layouts and
reference masks, ``predict`` returns binary masks, ``predict_proba`` (alias
``transform``) the continuous ones, and ``score`` the negative mean printed
l2 so that larger is better.

``PixelILT`` is a stateless transformer running per-tile gradient descent
through the simulator; it is the reference the learned model is judged by.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .data import LabeledTile, LayoutTile, pixel_ilt_reference
from .litho import LithoModel, print_band
from .metrics import l2_error
from .network import Discriminator, Generator, GeneratorConfig, binarize
from .training import TrainConfig, train
from .validation import check_binary, check_images, check_pair


def _tiles(X, y) -> list[LabeledTile]:
    out = []
    for i, (t, m) in enumerate(zip(X, y)):
        tgt = t[0].astype(np.uint8)
        out.append(LabeledTile(LayoutTile(f"fit_{i:05d}", tgt, []), m[0], m[0], {"split": "train"}))
    return out


class MorphOPC(BaseEstimator):
    def __init__(
        self,
        widths=(32, 64, 128, 256),
        s: int = 8,
        conv_size: int = 3,
        outer_activation: str = "relu",
        separate_se: bool = False,
        pretrain_epochs: int = 10,
        finetune_epochs: int = 10,
        batch_size: int = 1,
        lr: float = 1e-4,
        lambda_mask: float = 1.0,
        lambda_print: float = 1.0,
        lambda_adv: float = 0.01,
        adversarial: bool = True,
        sigma: float = 8.0,
        threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.widths = widths
        self.s = s
        self.conv_size = conv_size
        self.outer_activation = outer_activation
        self.separate_se = separate_se
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_mask = lambda_mask
        self.lambda_print = lambda_print
        self.lambda_adv = lambda_adv
        self.adversarial = adversarial
        self.sigma = sigma
        self.threshold = threshold
        self.random_state = random_state

    def _litho(self) -> LithoModel:
        return LithoModel.gaussian(self.sigma)

    def _train_cfg(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            epochs=self.pretrain_epochs if stage == "pretrain" else self.finetune_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lambda_mask=self.lambda_mask,
            lambda_print=self.lambda_print,
            lambda_adv=self.lambda_adv,
            adversarial=self.adversarial,
            seed=self.random_state,
        )

    def fit(self, X, y):
        """Pretrain on (target, mask) pairs, then fine-tune through the
        simulator. Set ``finetune_epochs=0`` to stop after pretraining."""
        X, y = check_pair(X, y)
        cfg = GeneratorConfig(
            image_size=X.shape[-1],
            widths=tuple(self.widths),
            s=self.s,
            conv_size=self.conv_size,
            outer_activation=self.outer_activation,
            separate_se=self.separate_se,
            seed=self.random_state,
        )
        gen = Generator(cfg)
        litho = self._litho()
        tiles = _tiles(X, y)
        logs = [train(tiles, gen, None, self._train_cfg("pretrain"), litho)]
        if self.finetune_epochs > 0:
            ft = self._train_cfg("finetune")
            disc = Discriminator(seed=self.random_state) if ft.uses_discriminator else None
            logs.append(train(tiles, gen, disc, ft, litho, start_step=len(logs[0].records)))
        self.generator_ = gen
        self.litho_ = litho
        self.image_size_ = X.shape[-1]
        self.train_logs_ = logs
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Continuous masks in [0, 1], shape (N, H, W)."""
        check_is_fitted(self, "generator_")
        X = check_binary(X, "targets", self.image_size_)
        return self.generator_.predict(X)[:, 0].astype(np.float64)

    transform = predict_proba

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y=None) -> float:
        """Negative mean nominal-dose printed l2 of the predicted masks.
        ``y`` is ignored; the target layout is the reference."""
        Xc = check_binary(X, "targets")
        masks = self.predict(Xc)
        errs = [l2_error(print_band(m[None, None].astype(np.float64), self.litho_)[1], t[0]) for m, t in zip(masks, Xc)]
        return -float(np.mean(errs))

    def save(self, path) -> None:
        check_is_fitted(self, "generator_")
        checkpoint.save(path, self.generator_.state_dict())


class PixelILT(TransformerMixin, BaseEstimator):
    """Per-tile pixel ILT; ``transform`` maps targets to optimized binary masks."""

    def __init__(self, steps: int = 200, lr: float = 1.0, sigma: float = 8.0):
        self.steps = steps
        self.lr = lr
        self.sigma = sigma

    def fit(self, X, y=None):
        check_images(X, "targets")
        self.litho_ = LithoModel.gaussian(self.sigma)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "litho_")
        X = check_binary(X, "targets")
        out = []
        for i, t in enumerate(X):
            lt = pixel_ilt_reference(LayoutTile(f"ilt_{i}", t[0].astype(np.uint8), []), self.litho_, self.steps, self.lr)
            out.append(lt.mask)
        return np.stack(out).astype(np.uint8)
