import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from kama import __version__
from kama.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_PARSE, exit_code_for, main, worker_count
from kama.errors import BehindCamera, IoError, ParseError
from kama.io import load_fit_with_ids


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-model", "--out", str(d / "model.json")]) == EXIT_OK
    (d / "spec.json").write_text(json.dumps({"num_frames": 4, "sigma_3d": 0.005, "sigma_2d": 1.0}))
    assert main(["synth", "--model", str(d / "model.json"), "--spec", str(d / "spec.json"),
                 "--out", str(d / "data"), "--seed", "3"]) == EXIT_OK
    return d


def articulate(ws, out, *extra):
    return main(["articulate", "--model", str(ws / "model.json"), "--input", str(ws / "data" / "frames.json"),
                 "--out", str(out), *extra])


def test_synth_outputs(ws):
    for name in ("frames.json", "gt.json", "spec.json"):
        assert (ws / "data" / name).is_file()
    assert json.loads((ws / "data" / "spec.json").read_text())["seed"] == 3


def test_articulate_kama(ws, tmp_path):
    out = tmp_path / "o"
    assert articulate(ws, out, "--gt", str(ws / "data" / "gt.json"), "--obj") == EXIT_OK
    ids, states = load_fit_with_ids(out / "fits.json")
    assert ids == [0, 1, 2, 3] and len(states) == 4
    assert len(list((out / "meshes").glob("frame_*.obj"))) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 0 and summary["pa_mpjpe"] < 30
    with (out / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and "mpve" in rows[0]
    assert not (out / "loss_trace.png").exists()


def test_articulate_refine(ws, tmp_path):
    out = tmp_path / "r"
    assert articulate(ws, out, "--refine") == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 100
    for f in summary["frames"]:
        assert len(f["trace"]) == 100 and min(f["trace"]) <= f["initial_loss"]
    assert (out / "loss_trace.png").stat().st_size > 0


def test_refine_only_mode(ws, tmp_path):
    assert articulate(ws, tmp_path / "r", "--mode", "refine-only", "--iters", "10") == EXIT_OK


def test_byte_determinism(ws, tmp_path, monkeypatch):
    assert articulate(ws, tmp_path / "a", "--refine", "--iters", "20") == EXIT_OK
    monkeypatch.setenv("KAMA_THREADS", "1")
    assert articulate(ws, tmp_path / "b", "--refine", "--iters", "20") == EXIT_OK
    assert (tmp_path / "a" / "fits.json").read_bytes() == (tmp_path / "b" / "fits.json").read_bytes()


def test_missing_model_writes_nothing(ws, tmp_path, capsys):
    out = tmp_path / "never"
    code = main(["articulate", "--model", str(tmp_path / "nope.json"), "--input",
                 str(ws / "data" / "frames.json"), "--out", str(out)])
    assert code == EXIT_CONFIG and not out.exists()
    assert "config error" in capsys.readouterr().err


def test_malformed_input(ws, tmp_path):
    bad = tmp_path / "bad.json"
    doc = json.loads((ws / "data" / "frames.json").read_text())
    doc["frames"][0]["keypoints"].pop()
    bad.write_text(json.dumps(doc))
    out = tmp_path / "o"
    code = main(["articulate", "--model", str(ws / "model.json"), "--input", str(bad), "--out", str(out)])
    assert code == EXIT_PARSE and not out.exists()


def test_bad_refine_flags(ws, tmp_path):
    assert articulate(ws, tmp_path / "o", "--refine", "--iters", "0") == EXIT_CONFIG
    assert articulate(ws, tmp_path / "o", "--refine", "--step", "-1") == EXIT_CONFIG


def test_out_is_file(ws, tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    assert articulate(ws, f) == EXIT_CONFIG


def test_bad_threads(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("KAMA_THREADS", "zero")
    assert articulate(ws, tmp_path / "o") == EXIT_CONFIG
    monkeypatch.setenv("KAMA_THREADS", "3")
    assert worker_count() == 3


def test_bad_spec(ws, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"num_frames": -2}))
    code = main(["synth", "--model", str(ws / "model.json"), "--spec", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "d")])
    assert code == EXIT_CONFIG


def test_behind_camera_frames(ws, tmp_path):
    doc = json.loads((ws / "data" / "frames.json").read_text())
    for kp in doc["frames"][0]["keypoints"]:
        kp["z"] = -kp["z"]
    p = tmp_path / "behind.json"
    p.write_text(json.dumps(doc))
    code = main(["articulate", "--model", str(ws / "model.json"), "--input", str(p), "--out",
                 str(tmp_path / "o"), "--refine", "--iters", "5"])
    assert code == EXIT_NUMERIC
    assert (tmp_path / "o" / "fits.json").is_file()


def test_eval(ws, tmp_path, capsys):
    assert articulate(ws, tmp_path / "o") == EXIT_OK
    rep = tmp_path / "rep" / "eval.json"
    assert main(["eval", "--model", str(ws / "model.json"), "--fits", str(tmp_path / "o" / "fits.json"),
                 "--gt", str(ws / "data" / "gt.json"), "--out", str(rep)]) == EXIT_OK
    doc = json.loads(rep.read_text())
    assert doc["aggregate"]["num_frames"] == 4
    assert rep.with_suffix(".csv").is_file() and rep.with_suffix(".png").is_file()
    assert "PA-MPJPE" in capsys.readouterr().out


def test_experiment(ws, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"num_frames": 2, "sigma_3d": 0.01}))
    out = tmp_path / "e"
    assert main(["experiment", "--model", str(ws / "model.json"), "--spec", str(tmp_path / "s.json"),
                 "--out", str(out), "--seeds", "1", "--iters", "10"]) == EXIT_OK
    for name in ("comparison.json", "comparison.csv", "loss_traces.png", "pa_mpjpe.png"):
        assert (out / name).is_file()
    assert main(["experiment", "--model", str(ws / "model.json"), "--out", str(out), "--seeds", "0"]) == EXIT_CONFIG


def test_exit_code_mapping():
    assert exit_code_for(ParseError("x")) == EXIT_PARSE
    assert exit_code_for(BehindCamera("x")) == EXIT_NUMERIC
    assert exit_code_for(IoError("x")) == EXIT_IO
    assert exit_code_for(RuntimeError("x")) == 1


def test_version_entry_point():
    r = subprocess.run([sys.executable, "-m", "kama.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout


def test_refined_fits_improve_on_input(ws, tmp_path):
    assert articulate(ws, tmp_path / "k") == EXIT_OK
    assert articulate(ws, tmp_path / "r", "--refine") == EXIT_OK
    k = json.loads((tmp_path / "k" / "summary.json").read_text())
    r = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert np.isfinite(k["mean_loss"]) and r["mean_loss"] <= k["mean_loss"]
