"""Two-stage generator training: supervised MSE pretraining, then
lithography-aware fine-tuning with an optional conditional GAN term."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, ops
from .data import LabeledTile
from .litho import LithoModel, aerial_image, resist
from .metrics import EpeConfig, MetricsRecord, evaluate
from .network import Discriminator, Generator, GeneratorConfig, binarize
from .optim import Adam
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainRecord",
    "TrainLog",
    "NumericAbort",
    "pretrain_step",
    "finetune_step",
    "train",
    "lr_at_epoch",
    "make_batches",
    "evaluate_generator",
    "scale_factor_sweep",
    "SWEEP_COLUMNS",
]


class NumericAbort(RuntimeError):
    """A loss or gradient went non-finite; carries the offending batch ids."""

    def __init__(self, message: str, batch_ids: Sequence[str] = ()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 10
    batch_size: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.1
    lambda_mask: float = 1.0
    lambda_print: float = 1.0
    lambda_adv: float = 0.01
    adversarial: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if min(self.lambda_mask, self.lambda_print, self.lambda_adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def uses_discriminator(self) -> bool:
        return self.stage == "finetune" and self.adversarial and self.lambda_adv > 0


@dataclass
class TrainRecord:
    step: int
    epoch: int
    stage: str
    lr: float
    loss_mask: float
    loss_print: float
    loss_adv: float
    loss_d: float
    grad_norm: float
    batch: str


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    COLUMNS = tuple(TrainRecord.__dataclass_fields__)

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("train log steps must strictly increase")
        self.records.append(rec)

    def extend(self, other: "TrainLog") -> None:
        for r in other.records:
            self.append(r)
        self.checkpoints.extend(other.checkpoints)
        self.lr_trace.extend(other.lr_trace)

    def losses(self, key: str = "loss_mask") -> np.ndarray:
        return np.array([getattr(r, key) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Base rate for the first half, times ``lr_decay`` from epoch ceil(E/2) on."""
    return cfg.lr * (cfg.lr_decay if epoch >= math.ceil(cfg.epochs / 2) else 1.0)


def _grad_norm(params) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None)))


def _check_finite(values: dict, ids) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericAbort(f"non-finite loss {bad} on batch {list(ids)}", ids)


def _as_tensor(a, dtype) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype))


def pretrain_step(batch, gen: Generator, opt: Adam, cfg: TrainConfig, step: int = 0, epoch: int = 0) -> TrainRecord:
    """One Adam step on mean squared error between G(Z_t) and M*."""
    ids, targets, masks = batch
    if masks is None:
        raise ValueError("pretraining needs reference masks")
    gen.train()
    pred = gen(_as_tensor(targets, gen.dtype))
    loss = ops.mean(ops.square(ops.sub(pred, _as_tensor(masks, gen.dtype))))
    _check_finite({"loss_mask": loss.item()}, ids)
    opt.zero_grad()
    backward(loss)
    gn = _grad_norm(opt.params)
    _check_finite({"grad_norm": gn}, ids)
    opt.step()
    return TrainRecord(step, epoch, "pretrain", opt.lr, loss.item(), 0.0, 0.0, 0.0, gn, ";".join(ids))


def generator_loss(pred: Tensor, targets: Tensor, masks: Tensor | None, model: LithoModel, cfg: TrainConfig, disc=None):
    """Weighted mask + print + adversarial terms; returns (total, parts)."""
    parts = {}
    total = None

    def acc(t, w):
        nonlocal total
        t = ops.scale(t, w)
        total = t if total is None else ops.add(total, t)

    if cfg.lambda_mask > 0:
        if masks is None:
            raise ValueError("lambda_mask > 0 needs reference masks")
        lm = ops.mean(ops.square(ops.sub(pred, masks)))
        parts["loss_mask"] = lm.item()
        acc(lm, cfg.lambda_mask)
    if cfg.lambda_print > 0:
        soft = resist(aerial_image(pred, model), model)
        lp = ops.mean(ops.square(ops.sub(soft, targets)))
        parts["loss_print"] = lp.item()
        acc(lp, cfg.lambda_print)
    if disc is not None and cfg.lambda_adv > 0:
        la = ops.scale(ops.mean(ops.log_sigmoid(disc(targets, pred))), -1.0)
        parts["loss_adv"] = la.item()
        acc(la, cfg.lambda_adv)
    if total is None:
        total = ops.scale(ops.mean(pred), 0.0)
    return total, parts


def finetune_step(
    batch,
    gen: Generator,
    disc: Discriminator | None,
    model: LithoModel,
    opt_g: Adam,
    opt_d: Adam | None,
    cfg: TrainConfig,
    step: int = 0,
    epoch: int = 0,
) -> TrainRecord:
    """Generator step on the combined loss, then (if adversarial) one
    discriminator step on real M* versus the detached G(Z_t)."""
    if model is None:
        raise ValueError("fine-tuning needs a lithography model")
    ids, targets, masks = batch
    use_d = cfg.uses_discriminator
    if use_d and (disc is None or opt_d is None):
        raise ValueError("adversarial fine-tuning needs a discriminator and its optimizer")
    gen.train()
    t = _as_tensor(targets, gen.dtype)
    m = _as_tensor(masks, gen.dtype) if masks is not None else None
    pred = gen(t)
    total, parts = generator_loss(pred, t, m, model, cfg, disc if use_d else None)
    _check_finite(parts, ids)
    opt_g.zero_grad()
    backward(total)
    gn = _grad_norm(opt_g.params)
    _check_finite({"grad_norm": gn}, ids)
    opt_g.step()
    loss_d = 0.0
    if use_d:
        if m is None:
            raise ValueError("discriminator step needs reference masks")
        opt_d.zero_grad()
        fake = Tensor(pred.data)
        ld = ops.add(
            ops.scale(ops.mean(ops.log_sigmoid(disc(t, m))), -1.0),
            ops.scale(ops.mean(ops.log_sigmoid(ops.scale(disc(t, fake), -1.0))), -1.0),
        )
        loss_d = ld.item()
        _check_finite({"loss_d": loss_d}, ids)
        backward(ld)
        opt_d.step()
    return TrainRecord(
        step,
        epoch,
        "finetune",
        opt_g.lr,
        parts.get("loss_mask", 0.0),
        parts.get("loss_print", 0.0),
        parts.get("loss_adv", 0.0),
        loss_d,
        gn,
        ";".join(ids),
    )


def make_batches(tiles: Sequence[LabeledTile], batch_size: int, rng: np.random.Generator | None, dtype=np.float32):
    order = np.arange(len(tiles))
    if rng is not None:
        order = rng.permutation(len(tiles))
    for i in range(0, len(order), batch_size):
        chunk = [tiles[j] for j in order[i : i + batch_size]]
        ids = [t.id for t in chunk]
        targets = np.stack([t.tile.target for t in chunk])[:, None].astype(dtype)
        masks = np.stack([t.mask for t in chunk])[:, None].astype(dtype)
        yield ids, targets, masks


def _train_tiles(dataset: Sequence[LabeledTile]) -> list[LabeledTile]:
    tiles = [t for t in dataset if t.meta.get("split", "train") == "train"]
    return sorted(tiles, key=lambda t: t.id)


def _save_state(path: Path, module) -> None:
    checkpoint.save(path, module.state_dict())


def train(
    dataset: Sequence[LabeledTile],
    gen: Generator,
    disc: Discriminator | None,
    cfg: TrainConfig,
    model: LithoModel | None = None,
    out_dir=None,
    start_step: int = 0,
) -> TrainLog:
    """Run one stage over the training split.

    Batches are reshuffled each epoch by a generator seeded from
    ``cfg.seed`` and the epoch index, so a run is a pure function of
    (seed, config, dataset, initial weights).
    """
    tiles = _train_tiles(dataset)
    if not tiles:
        raise ValueError("no training tiles in dataset")
    if cfg.stage == "finetune" and model is None:
        raise ValueError("fine-tuning needs a lithography model")
    for p in gen.parameters():
        p.reset_state()
    opt_g = Adam(gen.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    opt_d = None
    if cfg.uses_discriminator:
        if disc is None:
            raise ValueError("adversarial fine-tuning needs a discriminator")
        for p in disc.parameters():
            p.reset_state()
        opt_d = Adam(disc.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log = TrainLog()
    step = start_step
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        opt_g.lr = lr
        if opt_d is not None:
            opt_d.lr = lr
        log.lr_trace.append(lr)
        rng = np.random.default_rng([cfg.seed, epoch, 0 if cfg.stage == "pretrain" else 1])
        for batch in make_batches(tiles, cfg.batch_size, rng, gen.dtype):
            step += 1
            if cfg.stage == "pretrain":
                rec = pretrain_step(batch, gen, opt_g, cfg, step, epoch)
            else:
                rec = finetune_step(batch, gen, disc if opt_d else None, model, opt_g, opt_d, cfg, step, epoch)
            log.append(rec)
        logger.info("%s epoch %d lr %.1e mask %.4g print %.4g", cfg.stage, epoch, lr, rec.loss_mask, rec.loss_print)
        if out is not None:
            path = out / "checkpoints" / f"{cfg.stage}_epoch{epoch:02d}.mopc"
            _save_state(path, gen)
            if opt_d is not None:
                _save_state(out / "checkpoints" / f"{cfg.stage}_epoch{epoch:02d}.disc.mopc", disc)
            log.checkpoints.append(str(path))
    if out is not None:
        log.write_csv(out / f"{cfg.stage}_log.csv")
    return log


def evaluate_generator(
    gen: Generator, tiles: Sequence[LabeledTile], model: LithoModel, epe: EpeConfig | None = None
) -> tuple[list[MetricsRecord], np.ndarray]:
    """Per-tile metrics of binarized predictions and per-tile mask MSE."""
    x = np.stack([t.tile.target for t in tiles])[:, None]
    pred = gen.predict(x)
    records, mse = [], []
    for t, p in zip(tiles, pred):
        cfg = epe or EpeConfig.for_pitch(t.tile.pitch)
        records.append(evaluate(binarize(p[0]), t.tile.target, model, cfg))
        mse.append(float(np.mean((p[0].astype(np.float64) - t.mask) ** 2)))
    return records, np.array(mse)


SWEEP_COLUMNS = ("s", "status", "mse", "l2", "epe", "pvb", "shots", "checkpoint")


def _row_from_eval(s, records, mse, path) -> dict:
    return {
        "s": s,
        "status": "ok",
        "mse": float(np.mean(mse)),
        "l2": float(np.mean([r.l2 for r in records])),
        "epe": float(np.mean([r.epe_violations for r in records])),
        "pvb": float(np.mean([r.pvb for r in records])),
        "shots": float(np.mean([r.shots for r in records])),
        "checkpoint": str(path) if path else "",
    }


def scale_factor_sweep(
    dataset: Sequence[LabeledTile],
    s_values: Sequence[int],
    gen_config: GeneratorConfig,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig | None,
    model: LithoModel,
    out_dir=None,
) -> list[dict]:
    """Train one generator per scale factor and tabulate validation metrics.

    Scale factors that do not divide every channel width produce a
    ``skipped`` row instead of a model.
    """
    val = sorted([t for t in dataset if t.meta.get("split") == "val"], key=lambda t: t.id) or list(dataset)
    rows = []
    for s in s_values:
        bad = [w for w in gen_config.widths if w % s]
        if s < 2 or bad:
            msg = f"skipped: s={s} does not divide widths {list(gen_config.widths)}" if bad else "skipped: s must be >= 2"
            logger.warning(msg)
            rows.append({"s": s, "status": msg, **{k: "" for k in SWEEP_COLUMNS[2:]}})
            continue
        cfg = GeneratorConfig(**{**gen_config.to_dict(), "s": s, "se_schedule": None})
        gen = Generator(cfg)
        run_dir = Path(out_dir) / f"s{s}" if out_dir is not None else None
        train(dataset, gen, None, pretrain_cfg, model, run_dir)
        if finetune_cfg is not None:
            disc = Discriminator(seed=finetune_cfg.seed) if finetune_cfg.uses_discriminator else None
            train(dataset, gen, disc, finetune_cfg, model, run_dir)
        path = None
        if run_dir is not None:
            path = run_dir / "final.mopc"
            checkpoint.save(path, gen.state_dict())
        records, mse = evaluate_generator(gen, val, model)
        rows.append(_row_from_eval(s, records, mse, path))
    return rows


def reevaluate_checkpoint(path, gen_config: GeneratorConfig, s: int, tiles, model: LithoModel) -> dict:
    """Rebuild a sweep row from a saved generator."""
    cfg = GeneratorConfig(**{**gen_config.to_dict(), "s": s, "se_schedule": None})
    gen = Generator(cfg)
    gen.load_state_dict(checkpoint.load(path))
    val = sorted([t for t in tiles if t.meta.get("split") == "val"], key=lambda t: t.id) or list(tiles)
    records, mse = evaluate_generator(gen, val, model)
    return _row_from_eval(s, records, mse, path)
