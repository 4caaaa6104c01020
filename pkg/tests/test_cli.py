import json

import numpy as np
import pytest

from flowdistill.cli import main
from flowdistill.files import read_raw


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def test_sample2d_outputs_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "sample2d", "--set", "n_steps=50") == 0
    assert run(b, "sample2d", "--set", "n_steps=50") == 0
    rows = (a / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 51
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["ode_gap"] <= 1e-9
    assert read_raw(a / "clean_ode_final.f32").shape == (4, 4, 3)
    assert json.loads((a / "config.json").read_text())["config"]["n_steps"] == 50
    assert "equivalence gap" in capsys.readouterr().out


def test_sample2d_with_sde(tmp_path):
    assert run(tmp_path, "sample2d", "--set", "n_steps=40", "--set", 'beta={"kind": "constant", "b": 1.0}') == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "sde_gap" in summary and (tmp_path / "trajectory_sde.csv").exists()


def test_warp_noise_empty_scene_is_background(tmp_path):
    code = run(tmp_path, "warp-noise", "--set", "scene.empty=true", "--set", "noise_resolution=64",
               "--set", "reseedings=8")
    assert code == 0
    bg = read_raw(tmp_path / "bg.f32")
    assert np.array_equal(read_raw(tmp_path / "noise_view0.f32"), bg)
    assert np.array_equal(read_raw(tmp_path / "noise_view1.f32"), bg)


def test_warp_noise_report(tmp_path):
    assert run(tmp_path, "warp-noise", "--set", "noise_resolution=128", "--set", "reseedings=16") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["moments"]["passed"]
    assert report["correlation"][0]["pairs"] > 0
    assert (tmp_path / "reference.json").exists()


def test_distill_zero_steps_keeps_texture(tmp_path):
    code = run(tmp_path, "distill", "--set", "teacher.shape=[16,16,3]", "--set", "steps=0",
               "--set", 'modes=["consistent","sds"]')
    assert code == 0
    init = read_raw(tmp_path / "consistent" / "texture_initial.f32")
    assert np.array_equal(read_raw(tmp_path / "consistent" / "texture_final.f32"), init)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["sigma_ordering_holds"] is None


def test_distill_short_run(tmp_path):
    code = run(tmp_path, "distill", "--set", "teacher.shape=[16,16,3]", "--set", "anneal.total_steps=12",
               "--set", "snapshot_every=6", "--set", "noise_resolution=64")
    assert code == 0
    lines = (tmp_path / "consistent" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 13
    assert (tmp_path / "consistent" / "texture_step000006.png").exists()


def test_verify_subset(tmp_path):
    assert run(tmp_path, "verify", "--only", "gamma") == 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert [c["key"] for c in report["criteria"]] == ["gamma"] and report["failed"] == []


def test_verify_rejects_bad_schedule(tmp_path):
    bad = '{"kind": "table", "ts": [0, 0.5, 1], "alphas": [1, 0.5, 0.1], "sigmas": [0, 0.9, 0.05]}'
    assert run(tmp_path, "verify", "--only", "gamma", "--set", f"schedule={bad}") == 1


def test_usage_errors(tmp_path):
    assert run(tmp_path, "verify", "--only", "nope") == 2
    assert run(tmp_path, "sample2d", "--set", "novalue") == 2
    assert run(tmp_path, "sample2d", "--only", "gamma") == 2
    assert run(tmp_path, "sample2d", "--config", str(tmp_path / "missing.json")) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_domain_errors_exit_one(tmp_path):
    assert run(tmp_path, "distill", "--set", "teacher.shape=[16,16,3]", "--set", "gamma=1.0") == 1
