"""Command-line entry point: ``cycreg <command> [--config FILE] [--set key=value ...]``.

Every run reads one key=value config (optional; all keys have defaults),
merges command-line settings, rejects unknown or contradictory keys, and
writes ``manifest.txt`` with the fully resolved config into its output
directory. Feeding that manifest back through ``--config`` repeats the run.

Commands and their outputs:

* ``synth``             train/ and test/ pair directories of volume files
* ``pretrain-backward`` backward.ckpt, loss_history.csv, loss.png
* ``train-forward``     forward.ckpt, loss_history.csv, loss.png
* ``register``          field.vreg and warped.vreg for one (moving, fixed) pair
* ``evaluate``          eval.csv (one row per pair and label) and eval_dice.png
* ``sweep``             sweep.csv, sweep.png, best_<kind>.ckpt
* ``render``            PGM slices, checkerboard overlay, field magnitude

Errors exit with status 1 and a single ``ErrorClass: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .evaluation import evaluate_registration
from .fileio import (
    FIELD,
    LABELS,
    SCALAR,
    Checkpoint,
    ConfigError,
    parse_config,
    read_checkpoint,
    read_volume,
    write_checkpoint,
    write_manifest,
    write_volume,
)
from .net import NetWidths
from .pipeline import (
    CLASSICAL_VARIANTS,
    TrainConfig,
    make_pretraining_pairs,
    predict_field,
    sweep,
    train,
)
from .plotting import checkerboard, field_magnitude, plot_eval, plot_loss_curve, plot_sweep, to_slice, write_pgm
from .synthdata import DeformSpec, Pair, PhantomSpec, build_dataset
from .warp import warp_image

logger = logging.getLogger("cycreg")

REG_ALIASES = {"none": "none", "l1": "l1_grad", "l2": "l2_grad", "be": "bending_energy", "cyclic": "cyclic"}
PAIR_FILES = ("moving", "fixed", "moving_labels", "fixed_labels", "true_field")


# -- config schema --------------------------------------------------------------


def _shape(text: str) -> tuple:
    try:
        shape = tuple(int(v) for v in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise ValueError(f"shape must look like 64x64, got '{text}'") from None
    return shape


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _reg(text: str) -> str:
    if text not in REG_ALIASES:
        raise ValueError(f"reg must be one of {'|'.join(REG_ALIASES)}, got '{text}'")
    return text


def _kinds(text: str) -> tuple:
    return tuple(_reg(k.strip()) for k in text.split(",") if k.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


_PH, _DF, _TC, _NW = PhantomSpec(), DeformSpec(), TrainConfig(), NetWidths()

# key -> (parser, default, description)
KEYS: Dict[str, tuple] = {
    "out": (str, "run", "output directory"),
    "seed": (int, 0, "seed for data generation and training"),
    # synthetic data
    "n_pairs": (int, 50, "number of phantom pairs"),
    "train": (int, 40, "pairs in the training split"),
    "test": (int, 10, "pairs in the test split"),
    "shape": (_shape, _PH.shape, "phantom extents, e.g. 64x64 or 48x48x32"),
    "blur_sigma": (float, _PH.blur_sigma, "phantom blur (voxels)"),
    "noise_sigma": (float, _PH.noise_sigma, "additive noise per modality"),
    "remap_strength": (float, _PH.remap_strength, "strength of modality-B intensity remap"),
    "geometry_jitter": (float, _PH.geometry_jitter, "organ placement jitter (fraction of extent)"),
    "vessels": (int, _PH.vessels, "vessel disks inside the liver"),
    "global_max": (float, _DF.global_max, "max magnitude of the global field (voxels)"),
    "local_max": (float, _DF.local_max, "max magnitude of the liver push (voxels)"),
    "global_scale": (float, _DF.global_scale, "smoothing scale of the global field (fraction of extent)"),
    "radial_gain": (float, _DF.radial_gain, "central gain of the liver push"),
    # training
    "data": (str, "", "dataset directory written by synth"),
    "reg": (_reg, "none", "forward regularizer: none|l1|l2|be|cyclic"),
    "weight": (float, 0.0, "regularizer weight (alpha when reg is cyclic)"),
    "beta": (float, _TC.beta, "smoothness weight of backward pretraining"),
    "lr": (float, 3e-3, "Adam learning rate"),
    "epochs": (int, 30, "training epochs"),
    "widths": (_ints, tuple(_NW.as_list()), "11 channel widths: 4 encoder, 4 decoder, 3 refine"),
    "backward_checkpoint": (str, "", "pretrained backward network (required for reg=cyclic)"),
    "raw_pairs": (int, 25, "training pairs registered classically for backward pretraining"),
    "variants": (int, len(CLASSICAL_VARIANTS), "classical registrar presets used (1 or 2)"),
    # register / evaluate / render
    "checkpoint": (str, "", "network checkpoint"),
    "moving": (str, "", "moving volume file"),
    "fixed": (str, "", "fixed volume file"),
    "split": (str, "test", "dataset split to evaluate"),
    "field": (str, "", "displacement field file"),
    "pair": (int, -1, "single pair index to evaluate with a field file (-1: all pairs via checkpoint)"),
    "kinds": (_kinds, ("l1", "l2", "be"), "regularizers to sweep"),
    "weights": (_floats, (0.1, 0.5, 1.0, 1.5, 2.0, 2.5), "sweep weights"),
    "volume": (str, "", "volume file to render"),
    "overlay": (str, "", "second volume for a checkerboard"),
    "slice": (int, -1, "slice index along axis 0 for 3D volumes (-1: middle)"),
}

_DATA = ("seed", "n_pairs", "train", "test", "shape", "blur_sigma", "noise_sigma", "remap_strength",
         "geometry_jitter", "vessels", "global_max", "local_max", "global_scale", "radial_gain")
_TRAIN = ("seed", "data", "lr", "epochs", "widths")
COMMAND_KEYS: Dict[str, tuple] = {
    "synth": ("out",) + _DATA,
    "pretrain-backward": ("out",) + _TRAIN + ("beta", "raw_pairs", "variants"),
    "train-forward": ("out",) + _TRAIN + ("reg", "weight", "backward_checkpoint"),
    "register": ("out", "checkpoint", "moving", "fixed"),
    "evaluate": ("out", "data", "split", "checkpoint", "field", "pair"),
    "sweep": ("out",) + _TRAIN + ("kinds", "weights", "split", "backward_checkpoint"),
    "render": ("out", "volume", "overlay", "field", "slice"),
}


def resolve_config(command: str, file_values: Dict[str, str], cli_values: Dict[str, str]) -> Dict[str, object]:
    """Merge file and command-line settings over the defaults for ``command``."""
    allowed = COMMAND_KEYS[command]
    for source in (file_values, cli_values):
        for key in source:
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' for command {command}")
    for key, value in cli_values.items():
        # the output directory may differ so a manifest can be replayed elsewhere
        if key != "out" and key in file_values and file_values[key] != value:
            raise ConfigError(f"contradictory values for '{key}': '{file_values[key]}' in config, '{value}' on command line")
    merged = {**file_values, **cli_values}
    cfg = {}
    for key in allowed:
        parser, default, _ = KEYS[key]
        if key in merged:
            try:
                cfg[key] = parser(merged[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for '{key}': {exc}") from None
        else:
            cfg[key] = default
    _check_consistency(command, cfg, merged)
    return cfg


def _check_consistency(command: str, cfg: dict, given: dict):
    if "n_pairs" in cfg and cfg["train"] + cfg["test"] != cfg["n_pairs"]:
        raise ConfigError(f"keys 'train' + 'test' ({cfg['train']}+{cfg['test']}) must equal 'n_pairs' ({cfg['n_pairs']})")
    if command == "train-forward":
        if cfg["reg"] == "none" and cfg["weight"] != 0:
            raise ConfigError("key 'weight' is set but 'reg' is none")
        if cfg["reg"] == "cyclic" and not cfg["backward_checkpoint"]:
            raise ConfigError("reg=cyclic requires key 'backward_checkpoint'")
    if command == "sweep" and "cyclic" in cfg["kinds"] and not cfg["backward_checkpoint"]:
        raise ConfigError("sweeping cyclic requires key 'backward_checkpoint'")
    if "widths" in cfg and len(cfg["widths"]) != 11:
        raise ConfigError(f"key 'widths' needs 11 values, got {len(cfg['widths'])}")
    if command == "evaluate" and not cfg["checkpoint"] and not cfg["field"]:
        raise ConfigError("evaluate needs key 'checkpoint' or 'field'")
    if command == "evaluate" and cfg["field"] and cfg["pair"] < 0:
        raise ConfigError("evaluating a field file needs key 'pair'")
    for key in {"register": ("checkpoint", "moving", "fixed"), "render": ("volume",)}.get(command, ()):
        if not cfg[key]:
            raise ConfigError(f"missing key '{key}'")
    if "data" in cfg and not cfg["data"]:
        raise ConfigError("missing key 'data'")


def config_text_lines() -> List[str]:
    """Documented defaults, one line per key, for ``--help``."""
    return [f"  {k} = {_fmt(d)}    {doc}" for k, (_, d, doc) in KEYS.items()]


# -- dataset directories --------------------------------------------------------


def save_pairs(root: Path, pairs: Sequence[Pair]):
    root.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        d = root / f"pair_{i:03d}"
        d.mkdir(exist_ok=True)
        write_volume(d / "moving.vreg", p.moving, SCALAR, p.spacing)
        write_volume(d / "fixed.vreg", p.fixed, SCALAR, p.spacing)
        write_volume(d / "moving_labels.vreg", p.moving_labels, LABELS, p.spacing)
        write_volume(d / "fixed_labels.vreg", p.fixed_labels, LABELS, p.spacing)
        write_volume(d / "true_field.vreg", p.true_field, FIELD, p.spacing)


def load_pairs(root: Path) -> List[Pair]:
    dirs = sorted(d for d in Path(root).glob("pair_*") if d.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no pair directories under {root}")
    pairs = []
    for d in dirs:
        vols = {name: read_volume(d / f"{name}.vreg") for name in PAIR_FILES if (d / f"{name}.vreg").exists()}
        for name in ("moving", "fixed"):
            if name not in vols:
                raise FileNotFoundError(f"{d / name}.vreg missing")
        get = lambda k: vols[k].data if k in vols else None  # noqa: E731
        pairs.append(
            Pair(
                moving=vols["moving"].data,
                fixed=vols["fixed"].data,
                moving_labels=get("moving_labels"),
                fixed_labels=get("fixed_labels"),
                true_field=get("true_field"),
                spacing=vols["moving"].spacing,
            )
        )
    return pairs


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


# -- commands -------------------------------------------------------------------


def _train_config(cfg: dict, **extra) -> TrainConfig:
    base = dict(lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"])
    base.update(extra)
    return TrainConfig(**base)


def _config_echo(cfg: dict) -> Dict[str, str]:
    return {k: _fmt(v) for k, v in cfg.items()}


def _save_training(out: Path, role: str, result, cfg: dict):
    write_checkpoint(out / f"{role}.ckpt", Checkpoint(role, result.params, _config_echo(cfg), cfg["seed"], result.final_loss))
    write_csv(out / "loss_history.csv", result.history, ("epoch", "step", "total", "sim_term", "reg_term"))
    plot_loss_curve(result.history, out / "loss.png", title=f"{role} network")


def cmd_synth(cfg: dict, out: Path):
    phantom = PhantomSpec(
        shape=cfg["shape"],
        blur_sigma=cfg["blur_sigma"],
        noise_sigma=cfg["noise_sigma"],
        remap_strength=cfg["remap_strength"],
        geometry_jitter=cfg["geometry_jitter"],
        vessels=cfg["vessels"],
        seed=cfg["seed"],
    )
    deform = DeformSpec(
        global_max=cfg["global_max"],
        local_max=cfg["local_max"],
        global_scale=cfg["global_scale"],
        radial_gain=cfg["radial_gain"],
        seed=cfg["seed"],
    )
    train_pairs, test_pairs = build_dataset(cfg["n_pairs"], phantom, deform, (cfg["train"], cfg["test"]))
    save_pairs(out / "train", train_pairs)
    save_pairs(out / "test", test_pairs)
    print(f"wrote {len(train_pairs)} train and {len(test_pairs)} test pairs to {out}")


def cmd_pretrain_backward(cfg: dict, out: Path):
    raw = load_pairs(Path(cfg["data"]) / "train")[: cfg["raw_pairs"]]
    if not 1 <= cfg["variants"] <= len(CLASSICAL_VARIANTS):
        raise ConfigError(f"key 'variants' must lie in 1..{len(CLASSICAL_VARIANTS)}")
    pairs = make_pretraining_pairs(raw, CLASSICAL_VARIANTS[: cfg["variants"]])
    logger.info("pretraining on %d pairs", len(pairs))
    result = train("backward", pairs, _train_config(cfg, beta=cfg["beta"]), widths=NetWidths.from_list(cfg["widths"]))
    _save_training(out, "backward", result, cfg)
    print(f"backward network: final loss {result.final_loss:.6f}")


def _load_frozen(path: str, ndim: int):
    ckpt = read_checkpoint(path)
    if ckpt.role != "backward":
        raise ConfigError(f"'{path}' holds a {ckpt.role} network, expected backward")
    if ckpt.params.ndim != ndim:
        raise ConfigError(f"backward network is {ckpt.params.ndim}D but data is {ndim}D")
    return ckpt.params.frozen()


def cmd_train_forward(cfg: dict, out: Path):
    data = load_pairs(Path(cfg["data"]) / "train")
    kind = REG_ALIASES[cfg["reg"]]
    if kind == "cyclic":
        tc = _train_config(cfg, reg_kind=kind, alpha=cfg["weight"])
        frozen = _load_frozen(cfg["backward_checkpoint"], data[0].moving.ndim)
    else:
        tc = _train_config(cfg, reg_kind=kind, reg_weight=cfg["weight"])
        frozen = None
    result = train("forward", data, tc, frozen=frozen, widths=NetWidths.from_list(cfg["widths"]))
    _save_training(out, "forward", result, cfg)
    print(f"forward network ({cfg['reg']}, weight {cfg['weight']}): final loss {result.final_loss:.6f}")


def cmd_register(cfg: dict, out: Path):
    ckpt = read_checkpoint(cfg["checkpoint"])
    moving, fixed = read_volume(cfg["moving"]), read_volume(cfg["fixed"])
    if moving.kind != SCALAR or fixed.kind != SCALAR:
        raise ConfigError("register needs scalar volumes for 'moving' and 'fixed'")
    field = predict_field(ckpt.params, moving.data, fixed.data)
    write_volume(out / "field.vreg", field, FIELD, fixed.spacing)
    write_volume(out / "warped.vreg", warp_image(moving.data[None], field).data[0], SCALAR, fixed.spacing)
    print(f"wrote field and warped volume to {out}")


EVAL_COLUMNS = ("pair_id", "label_name", "dice", "asd_mm", "nmi", "fold_fraction", "endpoint_error")


def cmd_evaluate(cfg: dict, out: Path):
    pairs = load_pairs(Path(cfg["data"]) / cfg["split"])
    if cfg["field"]:
        if cfg["pair"] >= len(pairs):
            raise ConfigError(f"key 'pair' = {cfg['pair']} but split has {len(pairs)} pairs")
        vol = read_volume(cfg["field"])
        if vol.kind != FIELD:
            raise ConfigError(f"'{cfg['field']}' is not a displacement field")
        jobs = [(cfg["pair"], vol.data)]
    else:
        params = read_checkpoint(cfg["checkpoint"]).params
        jobs = [(i, predict_field(params, p.moving, p.fixed)) for i, p in enumerate(pairs)]
    rows, per_label = [], {}
    for i, field in jobs:
        report = evaluate_registration(pairs[i], field)
        rows += report.rows(f"{cfg['split']}_{i:03d}")
        for name, d in report.dice.items():
            per_label.setdefault(name, []).append(d)
    write_csv(out / "eval.csv", rows, EVAL_COLUMNS)
    plot_eval(per_label, out / "eval_dice.png")
    summary = ", ".join(f"{n} {np.mean(v):.3f}" for n, v in per_label.items())
    print(f"mean Dice over {len(jobs)} pair(s): {summary}")


def cmd_sweep(cfg: dict, out: Path):
    train_data = load_pairs(Path(cfg["data"]) / "train")
    eval_data = load_pairs(Path(cfg["data"]) / cfg["split"])
    kinds = [REG_ALIASES[k] for k in cfg["kinds"]]
    frozen = _load_frozen(cfg["backward_checkpoint"], train_data[0].moving.ndim) if "cyclic" in kinds else None
    result = sweep(kinds, cfg["weights"], train_data, eval_data, _train_config(cfg), frozen, NetWidths.from_list(cfg["widths"]))
    write_csv(out / "sweep.csv", result.cells, ("kind", "weight", "mean_dice", "final_loss", "error"))
    plot_sweep(result.cells, out / "sweep.png")
    for kind in kinds:
        try:
            best = result.best(kind)
        except Exception as exc:  # every cell of this kind failed
            logger.warning("%s: %s", kind, exc)
            continue
        params = result.models[(kind, best["weight"])]
        write_checkpoint(out / f"best_{kind}.ckpt", Checkpoint("forward", params, _config_echo(cfg), cfg["seed"], best["final_loss"]))
        print(f"{kind}: best weight {best['weight']} mean Dice {best['mean_dice']:.4f}")


def cmd_render(cfg: dict, out: Path):
    index = None if cfg["slice"] < 0 else cfg["slice"]
    vol = read_volume(cfg["volume"])
    if vol.kind == FIELD:
        write_pgm(out / "field_magnitude.pgm", to_slice(field_magnitude(vol.data), index))
    else:
        write_pgm(out / "volume.pgm", to_slice(vol.data, index))
    if cfg["overlay"]:
        other = read_volume(cfg["overlay"])
        board = checkerboard(to_slice(vol.data, index), to_slice(other.data, index))
        write_pgm(out / "checkerboard.pgm", board, 0.0, 1.0)
    if cfg["field"]:
        fld = read_volume(cfg["field"])
        if fld.kind != FIELD:
            raise ConfigError(f"'{cfg['field']}' is not a displacement field")
        write_pgm(out / "field_magnitude.pgm", to_slice(field_magnitude(fld.data), index))
    print(f"rendered to {out}")


COMMANDS: Dict[str, Callable[[dict, Path], None]] = {
    "synth": cmd_synth,
    "pretrain-backward": cmd_pretrain_backward,
    "train-forward": cmd_train_forward,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cycreg",
        description="Deformable registration with cyclic regularization on synthetic phantoms.",
        epilog="config keys and defaults:\n" + "\n".join(config_text_lines()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"keys: {', '.join(COMMAND_KEYS[name])}")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra setting (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed")
        if name == "train-forward":
            p.add_argument("--reg", help="none|l1|l2|be|cyclic")
            p.add_argument("--weight")
            p.add_argument("--backward-checkpoint", dest="backward_checkpoint")
    return parser


def _cli_values(args) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = (s.strip() for s in item.split("=", 1))
        if key in values and values[key] != value:
            raise ConfigError(f"key '{key}' set twice with different values")
        values[key] = value
    for key in ("out", "seed", "reg", "weight", "backward_checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            if key in values and values[key] != value:
                raise ConfigError(f"contradictory values for '{key}' on the command line")
            values[key] = value
    return values


def run(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    file_values = parse_config(args.config) if args.config else {}
    cfg = resolve_config(args.command, file_values, _cli_values(args))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](cfg, out)
    write_manifest(
        out / "manifest.txt",
        args.command,
        {k: _fmt(v) for k, v in cfg.items()},
        notes={"storage": "volumes and weights are float32 on disk, computation is float64"},
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        run(argv)
    except Exception as exc:
        message = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
