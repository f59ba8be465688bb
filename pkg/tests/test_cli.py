import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from rigid_accum.cli import EXIT_EVAL, EXIT_INPUT, EXIT_PIPELINE, git_blob_hash, main, read_labels, write_labels
from rigid_accum.io import decode_ply, read_bundle, read_flow, write_flow

SMALL = "[scene]\nnum_frames = 3\npoints_per_frame = 4000\n"


def schema(name):
    return json.loads(resources.files("rigid_accum").joinpath(f"schema/{name}.schema.json").read_text())


def _files(d: Path):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text(SMALL)
    assert main(["simulate", "--spec", str(d / "small.cfg"), "--out", str(d / "bundle")]) == 0
    assert main(["run", str(d / "bundle"), "--threads", "1", "--out", str(d / "result")]) == 0
    return d


def test_simulate_layout(work):
    b = work / "bundle"
    assert sorted(p.name for p in (b / "frames").iterdir()) == ["00001.ply", "00002.ply", "00003.ply"]
    for name in ("poses.txt", "boxes.txt", "meta.json", "manifest.json"):
        assert (b / name).is_file()
    assert sorted(p.name for p in (b / "flow").iterdir()) == ["00002.flow", "00003.flow"]
    m = json.loads((b / "manifest.json").read_text())
    jsonschema.validate(m, schema("manifest"))
    assert m["command"] == "simulate" and m["config"]["num_frames"] == 3


def test_simulate_is_reproducible(work, tmp_path):
    assert main(["simulate", "--spec", str(work / "small.cfg"), "--out", str(tmp_path / "again")]) == 0
    assert _files(tmp_path / "again") == _files(work / "bundle")


def test_seed_flag_and_env(work, tmp_path, monkeypatch):
    cfg = str(work / "small.cfg")
    main(["simulate", "--spec", cfg, "--seed", "7", "--out", str(tmp_path / "s7")])
    monkeypatch.setenv("RIGID_ACCUM_SEED", "7")
    main(["simulate", "--spec", cfg, "--out", str(tmp_path / "e7")])
    assert _files(tmp_path / "s7") == _files(tmp_path / "e7")
    assert _files(tmp_path / "s7") != _files(work / "bundle")
    monkeypatch.setenv("RIGID_ACCUM_SEED", "seven")
    assert main(["simulate", "--spec", cfg, "--out", str(tmp_path / "bad")]) == EXIT_INPUT


@pytest.mark.parametrize("text", ["[scene]\nnum_frames = 0\n", "[scene]\nnoise = -1\n",
                                  "[scene]\nwibble = 3\n", "[scene]\nscene = highway\n",
                                  "[scene]\nnum_frames = many\n"])
def test_simulate_rejects_bad_specs(tmp_path, text):
    (tmp_path / "s.cfg").write_text(text)
    assert main(["simulate", "--spec", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert not (tmp_path / "o").exists()


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_INPUT
    assert main(["simulate"]) == EXIT_INPUT
    assert main(["run", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == EXIT_INPUT
    assert main(["simulate", "--spec", str(tmp_path / "nofile.cfg"), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_run_outputs(work):
    r = work / "result"
    assert sorted(p.name for p in (r / "flow").iterdir()) == ["00002.flow", "00003.flow"]
    assert (r / "ego_poses.txt").is_file() and len(list((r / "labels").iterdir())) == 3
    m = json.loads((r / "manifest.json").read_text())
    jsonschema.validate(m, schema("manifest"))
    assert m["config"]["v_max"] == 30.0 and m["config"]["threads"] == 1
    files = m["input_hash"]["files"]
    ply = work / "bundle" / "frames" / "00001.ply"
    assert files["bundle/frames/00001.ply"] == git_blob_hash(ply)
    jsonschema.validate(json.loads((r / "diagnostics.json").read_text()), schema("diagnostics"))
    b = read_bundle(work / "bundle")
    for i in (1, 2):
        assert len(read_flow(r / "flow" / f"{i + 1:05d}.flow")) == len(b.sequence.frames[i])


def test_git_blob_hash_matches_git(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"hello\n")
    # value printed by `git hash-object` for this content
    assert git_blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_profile_recorded(work, tmp_path):
    assert main(["run", str(work / "bundle"), "--profile", "nuscenes", "--threads", "1",
                 "--out", str(tmp_path / "n")]) == 0
    m = json.loads((tmp_path / "n" / "manifest.json").read_text())
    assert m["config"]["v_max"] == 10.0 and m["config"]["profile"] == "nuscenes"


def test_config_file_and_bad_config(work, tmp_path):
    (tmp_path / "p.cfg").write_text("[pipeline]\neps = 1.0 ; wider clusters\n")
    assert main(["run", str(work / "bundle"), "--config", str(tmp_path / "p.cfg"), "--threads", "1",
                 "--out", str(tmp_path / "c")]) == 0
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert m["config"]["eps"] == 1.0 and str(tmp_path / "p.cfg") in m["inputs"]
    (tmp_path / "q.cfg").write_text("[pipeline]\nsinkhorn_iters = 0\n")
    assert main(["run", str(work / "bundle"), "--config", str(tmp_path / "q.cfg"),
                 "--out", str(tmp_path / "q")]) == EXIT_INPUT


def test_run_failure_exit_code(work, tmp_path):
    # raw features on a bundle without GT is fine; oracle features on a
    # bundle without a flow directory cannot run
    import shutil
    b = tmp_path / "noflow"
    shutil.copytree(work / "bundle", b)
    shutil.rmtree(b / "flow")
    assert main(["run", str(b), "--out", str(tmp_path / "r")]) == EXIT_PIPELINE
    assert not (tmp_path / "r").exists()
    assert not list(tmp_path.glob(".r.*"))


def test_eval_perfect_prediction(work, tmp_path, capsys):
    assert main(["eval", str(work / "bundle"), str(work / "bundle"), "--json", str(tmp_path / "m.json"),
                 "--ecdf", "epe_static"]) == 0
    out = capsys.readouterr().out
    assert "[static]" in out and "epe_avg = 0\n" in out
    m = json.loads((tmp_path / "m.json").read_text())
    jsonschema.validate(m, schema("metrics"))
    assert m["static"]["epe_avg"] == 0 and m["dynamic"]["acc_s"] == 100
    table = out.split("# ecdf epe_static: x F(x)\n")[1].split()
    ys = [float(v) for v in table[1::2]]
    assert ys == sorted(ys) and ys[-1] == 1.0


def test_eval_run_output(work, capsys):
    assert main(["eval", str(work / "result"), str(work / "bundle"), "--ecdf", "epe_dynamic"]) == 0
    out = capsys.readouterr().out
    vals = dict(l.split(" = ") for l in out.split("[dynamic]")[1].split("#")[0].strip().splitlines())
    assert float(vals["epe_avg"]) < 0.01
    ys = [float(l.split()[1]) for l in out.split("# ecdf")[1].splitlines()[1:]]
    assert all(a <= b for a, b in zip(ys, ys[1:]))


def test_eval_mismatch(work, tmp_path):
    import shutil
    p = tmp_path / "pred"
    shutil.copytree(work / "result", p)
    write_flow(p / "flow" / "00003.flow", np.zeros((5, 3)))
    assert main(["eval", str(p), str(work / "bundle")]) == EXIT_EVAL
    (p / "flow" / "00003.flow").unlink()
    assert main(["eval", str(p), str(work / "bundle")]) == EXIT_EVAL
    assert main(["eval", str(work / "result"), str(work / "result")]) == EXIT_INPUT


def test_eval_per_scene(work, tmp_path, capsys):
    import shutil
    for name in ("a", "b"):
        shutil.copytree(work / "bundle", tmp_path / "gt" / name)
        shutil.copytree(work / "bundle", tmp_path / "pred" / name)
    assert main(["eval", str(tmp_path / "pred"), str(tmp_path / "gt"), "--per-scene"]) == 0
    assert "epe_avg = 0\n" in capsys.readouterr().out


def test_eval_region_and_ground(work, capsys):
    main(["eval", str(work / "result"), str(work / "bundle")])
    wide = capsys.readouterr().out
    main(["eval", str(work / "result"), str(work / "bundle"), "--region", "10", "--ground-z", "-1.7"])
    narrow = capsys.readouterr().out
    n_wide = int(wide.split("[static]")[1].split("n_points = ")[1].split()[0])
    n_narrow = int(narrow.split("[static]")[1].split("n_points = ")[1].split()[0])
    assert n_narrow < n_wide
    # sensor-frame z: nothing lies 5 m above the sensor
    assert main(["eval", str(work / "result"), str(work / "bundle"), "--ground-z", "5"]) == EXIT_EVAL


@pytest.mark.parametrize("ascii_", [False, True])
def test_export(work, tmp_path, ascii_):
    out = tmp_path / "acc.ply"
    args = ["export", str(work / "bundle"), str(work / "result"), str(out)] + (["--ascii"] if ascii_ else [])
    assert main(args) == 0
    pts, cols = decode_ply(out.read_bytes())
    b = read_bundle(work / "bundle")
    assert len(pts) == sum(len(f) for f in b.sequence.frames)
    assert sorted(set(cols["source_frame"].tolist())) == [1, 2, 3]
    n0 = len(b.sequence.frames[0])
    assert np.allclose(pts[:n0], b.sequence.frames[0].points, atol=1e-4 if ascii_ else 1e-5)


def test_labels_round_trip(tmp_path):
    write_labels(tmp_path / "x.lab", [0, 3, 1])
    assert read_labels(tmp_path / "x.lab").tolist() == [0, 3, 1]


def test_threads_give_identical_flow(work, tmp_path):
    for n in (1, 4):
        assert main(["run", str(work / "bundle"), "--threads", str(n), "--out", str(tmp_path / f"t{n}")]) == 0
    a, b = tmp_path / "t1" / "flow", tmp_path / "t4" / "flow"
    assert _files(a) == _files(b)


def test_console_entry_point(work):
    res = subprocess.run([sys.executable, "-m", "rigid_accum.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "rigid-accum" in res.stdout
