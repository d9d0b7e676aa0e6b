import csv

import numpy as np
import pytest

from cycreg.cli import EVAL_COLUMNS, main
from cycreg.fileio import FIELD, parse_config, read_checkpoint, read_volume
from cycreg.plotting import read_pgm

SMALL = ["--set", "n_pairs=3", "--set", "train=2", "--set", "test=1", "--set", "shape=32x32"]
TINY = ["--set", "widths=2,2,2,2,2,2,2,2,2,2,2", "--set", "epochs=1", "--set", "lr=0.001"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--seed", "3", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def forward_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("fwd")
    args = ["train-forward", "--out", str(out), "--reg", "l2", "--weight", "1.5", "--set", f"data={data_dir}", *TINY]
    assert main(args) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.vreg"))}


def test_synth_is_byte_identical_per_seed(tmp_path, data_dir):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3", *SMALL]) == 0
    again = tree_bytes(tmp_path)
    assert len(again) == 15 and again == tree_bytes(data_dir)


def test_synth_writes_pair_layout(data_dir):
    pair = data_dir / "test" / "pair_000"
    assert sorted(p.name for p in pair.iterdir()) == sorted(
        ["moving.vreg", "fixed.vreg", "moving_labels.vreg", "fixed_labels.vreg", "true_field.vreg"]
    )
    assert read_volume(pair / "true_field.vreg").kind == FIELD
    assert parse_config(data_dir / "manifest.txt")["seed"] == "3"


def test_manifest_records_regularizer(forward_run):
    manifest = parse_config(forward_run / "manifest.txt")
    assert manifest["reg"] == "l2" and float(manifest["weight"]) == 1.5
    assert (forward_run / "manifest.txt").read_text().startswith("# command: train-forward")
    ckpt = read_checkpoint(forward_run / "forward.ckpt")
    assert ckpt.role == "forward" and ckpt.config["reg"] == "l2"
    for name in ("loss_history.csv", "loss.png"):
        assert (forward_run / name).stat().st_size > 0


def test_register_then_evaluate(tmp_path, data_dir, forward_run):
    pair = data_dir / "test" / "pair_000"
    reg_out = tmp_path / "reg"
    args = ["register", "--out", str(reg_out), "--set", f"checkpoint={forward_run / 'forward.ckpt'}",
            "--set", f"moving={pair / 'moving.vreg'}", "--set", f"fixed={pair / 'fixed.vreg'}"]
    assert main(args) == 0
    assert read_volume(reg_out / "field.vreg").data.shape == (2, 32, 32)
    ev_out = tmp_path / "eval"
    args = ["evaluate", "--out", str(ev_out), "--set", f"data={data_dir}",
            "--set", f"field={reg_out / 'field.vreg'}", "--set", "pair=0"]
    assert main(args) == 0
    with open(ev_out / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == EVAL_COLUMNS
    assert [(r["pair_id"], r["label_name"]) for r in rows] == [("test_000", n) for n in ("liver", "spleen", "kidney")]
    assert all(0 <= float(r["dice"]) <= 1 for r in rows)


def test_evaluate_replay_from_manifest_is_identical(tmp_path, data_dir, forward_run):
    first = tmp_path / "a"
    args = ["evaluate", "--out", str(first), "--set", f"data={data_dir}",
            "--set", f"checkpoint={forward_run / 'forward.ckpt'}"]
    assert main(args) == 0
    second = tmp_path / "b"
    assert main(["evaluate", "--config", str(first / "manifest.txt"), "--out", str(second)]) == 0
    assert (first / "eval.csv").read_bytes() == (second / "eval.csv").read_bytes()


def test_render_writes_pgm(tmp_path, data_dir):
    pair = data_dir / "test" / "pair_000"
    args = ["render", "--out", str(tmp_path), "--set", f"volume={pair / 'moving.vreg'}",
            "--set", f"overlay={pair / 'fixed.vreg'}", "--set", f"field={pair / 'true_field.vreg'}"]
    assert main(args) == 0
    for name in ("volume.pgm", "checkerboard.pgm", "field_magnitude.pgm"):
        img = read_pgm(tmp_path / name)
        assert img.shape == (32, 32) and img.dtype == np.uint8


@pytest.mark.parametrize(
    "argv,error",
    [
        (["synth", "--set", "bogus=1"], "ConfigError: unknown key 'bogus'"),
        (["synth", "--set", "n_pairs=5", "--set", "train=4", "--set", "test=4"], "ConfigError: keys 'train'"),
        (["train-forward", "--set", "data=x", "--reg", "cyclic"], "ConfigError: reg=cyclic requires"),
        (["train-forward", "--set", "data=x", "--weight", "2"], "ConfigError: key 'weight' is set"),
        (["synth", "--set", "shape=6by6"], "ConfigError: bad value for 'shape'"),
        (["render", "--set", "volume=/nonexistent.vreg"], "FileNotFoundError:"),
    ],
)
def test_errors_exit_nonzero_with_one_line(tmp_path, capsys, argv, error):
    assert main([*argv, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith(error)


def test_contradictory_config_and_cli(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 1\n")
    assert main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("ConfigError: contradictory values for 'seed'")
