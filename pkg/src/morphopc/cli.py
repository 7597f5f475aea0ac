"""Command-line entry point: ``morphopc <command> [options]``.

Commands: gen-data, train, infer, eval, sweep, viz. Run ``morphopc <command>
--help`` for the flags of each.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import build_dataset, load_dataset, save_dataset
from .litho import KernelFileError, print_band
from .metrics import evaluate
from .network import Discriminator, Generator, binarize
from .training import SWEEP_COLUMNS, NumericAbort, scale_factor_sweep, train
from .viz import layer_deltas, save_delta_maps, save_triptych

logger = logging.getLogger("morphopc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_COLUMNS = ("id", "l2", "epe", "pvb", "shots", "dose_min", "dose_max", "config_hash")
SNAPSHOT = "resolved_config.ini"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def _dose_band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    if not lo < 1.0 < hi:
        raise argparse.ArgumentTypeError(f"dose band must satisfy LO < 1 < HI, got {text!r}")
    return lo, hi


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "kernels", None):
        cfg.set("litho", "kernels", str(args.kernels))
    if getattr(args, "dose_band", None):
        cfg.set("litho", "dose_min", args.dose_band[0])
        cfg.set("litho", "dose_max", args.dose_band[1])
    if getattr(args, "seed", None) is not None:
        for sec in ("generator", "train", "data"):
            cfg.set(sec, "seed", args.seed)
    return cfg


def _snapshot(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / SNAPSHOT)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory not found: {p}")
    return p


def _load_generator(cfg: RunConfig, path) -> Generator:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    gen = Generator(cfg.generator_config())
    try:
        gen.load_state_dict(checkpoint.load(p))
    except (KeyError, ValueError) as e:
        raise DataError(f"checkpoint {p} does not match the configured generator: {e}") from None
    return gen


def _read_binary_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return (a >= 128).astype(np.uint8)


def _collect(directory: Path, suffix: str) -> dict[str, Path]:
    """Map tile id -> file for ``<id><suffix>``; a dataset root is searched
    under ``tiles/``."""
    if (directory / "tiles").is_dir():
        directory = directory / "tiles"
    return {p.name[: -len(suffix)]: p for p in sorted(directory.glob(f"*{suffix}"))}


def _targets(directory: Path) -> dict[str, Path]:
    found = _collect(directory, ".target.png")
    if not found:
        found = {p.stem: p for p in sorted(directory.glob("*.png"))}
    if not found:
        raise DataError(f"no target PNGs in {directory}")
    return found


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.count is not None:
        cfg.set("data", "count", args.count)
    d = cfg.values["data"]
    out = Path(args.out)
    tiles = build_dataset(cfg.layout_spec(), d["count"], cfg.litho_model(), d["ilt_steps"], d["ilt_lr"])
    manifest = save_dataset(out, tiles)
    _snapshot(cfg, out)
    flagged = [t.id for t in tiles if t.meta.get("flagged")]
    if flagged:
        logger.warning("%d tiles where the oracle did not beat 0.9x baseline: %s", len(flagged), ", ".join(flagged))
    print(f"wrote {len(tiles)} tiles to {out} ({manifest.name})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        key = "pretrain_epochs" if args.stage == "pretrain" else "finetune_epochs"
        cfg.set("train", key, args.epochs)
    out = Path(args.out)
    dataset = load_dataset(_require_dir(args.dataset, "dataset"))
    tcfg = cfg.train_config(args.stage)
    init = args.init
    if init is None and args.stage == "finetune" and (out / "pretrain_final.mopc").exists():
        init = out / "pretrain_final.mopc"
    gen = _load_generator(cfg, init) if init else Generator(cfg.generator_config())
    disc = Discriminator(seed=tcfg.seed) if tcfg.uses_discriminator else None
    _snapshot(cfg, out)
    log = train(dataset, gen, disc, tcfg, cfg.litho_model(), out)
    final = out / f"{args.stage}_final.mopc"
    checkpoint.save(final, gen.state_dict())
    print(f"{args.stage}: {len(log.records)} steps, final checkpoint {final}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    gen = _load_generator(cfg, args.checkpoint)
    targets = _targets(_require_dir(args.input, "input"))
    out = Path(args.out)
    _snapshot(cfg, out)
    size = cfg.values["generator"]["image_size"]
    ids = list(targets)
    x = []
    for tid in ids:
        t = _read_binary_png(targets[tid])
        if t.shape != (size, size):
            raise DataError(f"{targets[tid]}: shape {t.shape} does not match generator input {size}x{size}")
        x.append(t)
    probs = gen.predict(np.stack(x)[:, None].astype(gen.dtype))[:, 0]
    for tid, p in zip(ids, probs):
        np.save(out / f"{tid}.mask.npy", p)
        Image.fromarray(binarize(p) * 255, "L").convert("1").save(out / f"{tid}.mask.png")
    print(f"wrote {len(ids)} mask pairs to {out}")
    return EXIT_OK


def eval_rows(masks: dict[str, Path], targets: dict[str, Path], cfg: RunConfig) -> list[dict]:
    model = cfg.litho_model()
    epe = cfg.epe_config()
    h = cfg.hash()
    rows = []
    for tid in sorted(set(masks) & set(targets)):
        m, t = _read_binary_png(masks[tid]), _read_binary_png(targets[tid])
        if m.shape != t.shape:
            raise DataError(f"{tid}: mask {m.shape} and target {t.shape} differ in shape")
        r = evaluate(m, t, model, epe)
        rows.append(
            {
                "id": tid,
                "l2": r.l2,
                "epe": r.epe_violations,
                "pvb": r.pvb,
                "shots": r.shots,
                "dose_min": model.doses[0],
                "dose_max": model.doses[2],
                "config_hash": h,
            }
        )
    return rows


def write_eval_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in EVAL_COLUMNS])
        if rows:
            means = [repr(float(np.mean([r[c] for r in rows]))) for c in ("l2", "epe", "pvb", "shots")]
            w.writerow(["mean", *means, rows[0]["dose_min"], rows[0]["dose_max"], rows[0]["config_hash"]])


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    mdir = _require_dir(args.masks, "mask")
    masks = _collect(mdir, ".mask.png") or {p.stem: p for p in sorted(mdir.glob("*.png"))}
    targets = _targets(_require_dir(args.targets, "target"))
    unpaired = sorted(set(masks) ^ set(targets))
    rows = eval_rows(masks, targets, cfg)
    out = Path(args.out)
    write_eval_csv(out, rows)
    _snapshot(cfg, out.parent)
    print(f"evaluated {len(rows)} tiles -> {out}")
    if unpaired:
        for tid in unpaired:
            side = "mask" if tid in masks else "target"
            print(f"unpaired {side}: {tid} (skipped)", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    s_values = args.s if args.s is not None else cfg.values["sweep"]["s_values"]
    cfg.set("sweep", "s_values", s_values)
    if args.epochs is not None:
        cfg.set("train", "pretrain_epochs", args.epochs)
        cfg.set("train", "finetune_epochs", args.epochs)
    dataset = load_dataset(_require_dir(args.dataset, "dataset"))
    out = Path(args.out)
    _snapshot(cfg, out)
    ft = None if args.no_finetune else cfg.train_config("finetune")
    rows = scale_factor_sweep(dataset, s_values, cfg.generator_config(), cfg.train_config("pretrain"), ft, cfg.litho_model(), out)
    with (out / "sweep.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"sweep over s={s_values} -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_viz(args) -> int:
    cfg = _load_config(args)
    gen = _load_generator(cfg, args.checkpoint)
    n = len(gen.encoders)
    layers = args.layers if args.layers is not None else list(range(n))
    bad = [i for i in layers if not 0 <= i < n]
    if bad:
        raise UsageError(f"invalid layer index {bad}; valid indices are {list(range(n))}")
    targets = _targets(_require_dir(args.input, "input"))
    tid = args.tile or next(iter(targets))
    if tid not in targets:
        raise DataError(f"tile {tid!r} not found in {args.input}")
    target = _read_binary_png(targets[tid])
    out = Path(args.out)
    _snapshot(cfg, out)
    for i in layers:
        save_delta_maps(layer_deltas(gen, target, i), out, f"{tid}_layer{i}")
    mask = binarize(gen.predict(target[None, None].astype(gen.dtype))[0, 0])
    printed = print_band(mask[None, None].astype(np.float64), cfg.litho_model())[1][0, 0]
    save_triptych(out / f"{tid}_triptych.png", target, mask, printed)
    print(f"wrote delta maps for layers {layers} and a triptych to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    litho = argparse.ArgumentParser(add_help=False)
    litho.add_argument("--kernels", metavar="PATH", help="LKRN optical kernel file instead of the Gaussian default")
    litho.add_argument("--dose-band", type=_dose_band, metavar="LO,HI", help="process-window doses, e.g. 0.98,1.02")

    p = _Parser(prog="morphopc", description="Learned mask optimization with morphological networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common, litho], help="generate layouts and pixel-ILT reference masks")
    g.add_argument("--out", required=True, metavar="DIR", help="dataset directory to create")
    g.add_argument("--count", type=int, help="number of tiles (overrides [data] count)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, litho], help="run one training stage")
    t.add_argument("--stage", required=True, choices=("pretrain", "finetune"))
    t.add_argument("--dataset", required=True, metavar="DIR")
    t.add_argument("--out", required=True, metavar="DIR", help="run directory for logs and checkpoints")
    t.add_argument("--init", metavar="CKPT", help="start from this generator checkpoint (finetune defaults to OUT/pretrain_final.mopc)")
    t.add_argument("--epochs", type=int, help="override the stage's epoch count")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="predict masks for target tiles")
    i.add_argument("--checkpoint", required=True, metavar="CKPT")
    i.add_argument("--input", required=True, metavar="DIR", help="dataset directory or folder of target PNGs")
    i.add_argument("--out", required=True, metavar="DIR", help="writes <id>.mask.npy (continuous) and <id>.mask.png (binary)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common, litho], help="score masks against targets")
    e.add_argument("--masks", required=True, metavar="DIR", help="folder of <id>.mask.png or <id>.png")
    e.add_argument("--targets", required=True, metavar="DIR", help="dataset directory or folder of target PNGs")
    e.add_argument("--out", required=True, metavar="CSV", help="columns: " + ",".join(EVAL_COLUMNS))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, litho], help="train and score one model per scale factor s")
    s.add_argument("--dataset", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--s", type=_int_list, metavar="S1,S2", help="scale factors (overrides [sweep] s_values)")
    s.add_argument("--epochs", type=int, help="epochs for both stages")
    s.add_argument("--no-finetune", action="store_true", help="pretrain only")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("viz", parents=[common, litho], help="export morphology delta maps and a triptych")
    v.add_argument("--checkpoint", required=True, metavar="CKPT")
    v.add_argument("--input", required=True, metavar="DIR", help="dataset directory or folder of target PNGs")
    v.add_argument("--out", required=True, metavar="DIR")
    v.add_argument("--layers", type=_int_list, metavar="I,J", help="encoder scales to export (default all)")
    v.add_argument("--tile", metavar="ID", help="tile to visualize (default first)")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"morphopc {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as e:
        print(f"morphopc {args.command}: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, KernelFileError, FileNotFoundError, ValueError, OSError) as e:
        print(f"morphopc {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
