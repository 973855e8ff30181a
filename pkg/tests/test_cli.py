import subprocess
import sys

import pytest

from impression.cli import RunManifest, ValidationError, _int_list, main
from impression.synth import SceneSpec, random_scene

import numpy as np


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--iters", "5", "--clips", "2", "--frames", "12", "--l", "4", "--out", str(out)]) == 0
    return out


def test_train_outputs(checkpoint):
    names = set(files(checkpoint))
    assert {"train.cfg", "loss.csv", "checkpoint_final.bin", "summary.txt"} <= names
    assert len((checkpoint / "loss.csv").read_text().splitlines()) == 6
    assert (checkpoint / "summary.txt").read_text().startswith("iters=5 ")


def test_train_is_byte_identical(checkpoint, tmp_path):
    assert main(["train", "--iters", "5", "--clips", "2", "--frames", "12", "--l", "4", "--out", str(tmp_path)]) == 0
    assert files(tmp_path) == files(checkpoint)


def test_run_is_byte_identical(checkpoint, tmp_path, capsys):
    ck = str(checkpoint / "checkpoint_final.bin")
    for name in ("a", "b"):
        assert main(["run", "--checkpoint", ck, "--clips", "2", "--frames", "12", "--l", "4",
                     "--out", str(tmp_path / name)]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert set(files(tmp_path / "a")) == {"detections.csv", "frames.csv", "summary.txt"}
    summary = (tmp_path / "a" / "summary.txt").read_text()
    assert summary.startswith("frames=24 mAP=") and "feat=6 " in summary
    assert "mAP=" in capsys.readouterr().out


def test_run_from_manifest_and_scene_files(checkpoint, tmp_path):
    scene = random_scene(np.random.default_rng(0), frame_count=1)
    scene.save(tmp_path / "one.scene")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"checkpoint = {checkpoint / 'checkpoint_final.bin'}\nmode = perframe\n"
                   f"scenes = {tmp_path / 'one.scene'}\nout = {tmp_path / 'pf'}\n")
    assert main(["run", "--config", str(cfg)]) == 0
    assert main(["run", "--config", str(cfg), "--mode", "impression", "--out", str(tmp_path / "imp")]) == 0
    pf, imp = files(tmp_path / "pf"), files(tmp_path / "imp")
    assert pf["summary.txt"] == imp["summary.txt"]
    assert pf["detections.csv"] == imp["detections.csv"]


def test_run_wallclock_columns(checkpoint, tmp_path):
    ck = str(checkpoint / "checkpoint_final.bin")
    assert main(["run", "--checkpoint", ck, "--clips", "1", "--frames", "4", "--l", "2", "--wallclock",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "frames.csv").read_text().splitlines()[0].endswith("ms_task")


def test_run_validation_exit_codes(checkpoint, tmp_path, capsys):
    ck = str(checkpoint / "checkpoint_final.bin")
    assert main(["run", "--out", str(tmp_path)]) == 1
    assert main(["run", "--checkpoint", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 1
    assert main(["run", "--checkpoint", ck, "--l", "4", "--k", "4", "--out", str(tmp_path)]) == 1
    assert main(["run", "--checkpoint", ck, "--g", "2", "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.bin").write_bytes(b"nope")
    assert main(["run", "--checkpoint", str(tmp_path / "bad.bin"), "--out", str(tmp_path)]) == 1
    assert main(["run", "--checkpoint", ck, "--scene", str(tmp_path / "none.scene"), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mode", "turbo"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_manifest_parsing():
    m = RunManifest.from_text("# c\ncheckpoint = x.bin\nl = 5\ng=0.5\nscenes = a, b\n")
    assert (m.checkpoint, m.l, m.g, m.scenes) == ("x.bin", 5, 0.5, ("a", "b"))
    assert m.segment().keyframe_offset == 2
    with pytest.raises(ValidationError):
        RunManifest.from_text("colour = red")
    with pytest.raises(ValidationError):
        RunManifest.from_text("just words")


def test_int_list():
    assert _int_list("10") == [10]
    assert _int_list("1,2,5") == [1, 2, 5]
    assert _int_list("3-6") == [3, 4, 5, 6]


def test_train_divergence_exit_code(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("lr_schedule=0:1e8\nclip_norm=0\nchannels=8\n")
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--iters", "200", "--clips", "2", "--frames", "12", "--l", "4",
                     "--out", str(tmp_path / "out")])
    assert code == 2
    assert (tmp_path / "out" / "checkpoint_last_finite.bin").is_file()


def test_schedule_output(tmp_path, capsys):
    assert main(["schedule", "--l", "10", "--k", "0-5", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["l,k,dbar,optimal", "10,0,5.5,0", "10,1,4.7,0", "10,2,4.1,0", "10,3,3.7,0",
                     "10,4,3.5,1", "10,5,3.5,0"]
    assert (tmp_path / "schedule.csv").is_file()
    assert main(["schedule", "--l", "0"]) == 1


def test_sweep(checkpoint, tmp_path, capsys):
    ck = str(checkpoint / "checkpoint_final.bin")
    assert main(["sweep", "--checkpoint", ck, "--l", "10", "--clips", "1", "--frames", "10",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("10,1.0,4,")
    assert main(["sweep", "--checkpoint", ck, "--l", "2,4", "--g", "0,1", "--clips", "1", "--frames", "8",
                 "--out", str(tmp_path / "grid")]) == 0
    assert len((tmp_path / "grid" / "sweep.csv").read_text().splitlines()) == 5


def test_sweep_refuses_untrained(tmp_path):
    from impression.nets import desk_spec, init_params
    init_params(desk_spec()).save(tmp_path / "init.bin")
    assert main(["sweep", "--checkpoint", str(tmp_path / "init.bin"), "--l", "2", "--clips", "1",
                 "--frames", "4", "--out", str(tmp_path)]) == 1


def test_verify_smoke(capsys):
    assert main(["verify", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 9


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "impression.cli", "schedule", "--l", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines()[2] == "3,1,1.6666666666666667,1"
