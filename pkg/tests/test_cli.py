import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from pairsync import io
from pairsync.cli import main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture
def tiny_yaml(tmp_path, tiny_doc):
    tiny_doc["segments"][0]["duration"] = 36
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(tiny_doc))
    return p


def test_simulate_writes_files(capsys, tmp_path, tiny_yaml):
    code, out = _run(capsys, "simulate", tiny_yaml, "--out", tmp_path / "sim")
    assert code == 0
    a, ha = io.read_timestamps(tmp_path / "sim" / "alice.pts")
    b, hb = io.read_timestamps(tmp_path / "sim" / "bob.pts")
    assert out["alice_events"] == a.size and out["bob_events"] == b.size
    assert (ha.channel, hb.channel, ha.resolution) == (0, 1, 4)
    truth = json.loads((tmp_path / "sim" / "truth.json").read_text())
    assert truth["offset_polynomial"]["bias_ps"] == 500
    assert truth["local_segment_bounds_ps"] == [[0, 36 * 10**12]]


def test_correlate_fit_track_stability(capsys, tmp_path, tiny_run):
    _, run = tiny_run
    a, b = run / "alice.pts", run / "bob.pts"
    code, out = _run(capsys, "correlate", a, b, "--fwhm", 950, "--out", tmp_path / "x.csv")
    assert code == 0
    assert abs(out["max_bin_ps"] - 51_650_500) < 300 and out["car"] > 100
    h = io.read_histogram(tmp_path / "x.csv")
    assert h.kind == "cross" and h.counts.sum() > 0

    code, out = _run(capsys, "correlate", a, "--auto", "--center", 103_300_000,
                     "--out", tmp_path / "aa.json")
    assert code == 0 and (tmp_path / "aa.bin").exists()

    code, out = _run(capsys, "fit", tmp_path / "x.csv", "--templates", run / "templates.json")
    assert code == 0
    assert abs(out["fits"][0]["position_ps"] - 51_650_500) < 20

    code, out = _run(capsys, "track", a, b, "--window-round", 30, "--template-duration", 30,
                     "--round-trip-prior", 103_000_000, "--out", tmp_path / "trk")
    assert code == 0 and out["samples"] > 0
    assert abs(out["delta_mean_ps"] - 500) < 60

    code, out = _run(capsys, "stability", run / "offsets.csv", "--noise", "white",
                     "--out", tmp_path / "st")
    assert code == 0
    assert (tmp_path / "st" / "drift.json").exists()
    assert (tmp_path / "st" / "stability.json").exists()


def test_run_and_flag_precedence(capsys, tmp_path, tiny_yaml):
    code, out = _run(capsys, "run", tiny_yaml, "--seed", 42, "--bin-width", 125,
                     "--out", tmp_path / "r")
    assert code == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["scenario"]["seed"] == 3
    assert summary["scenario"]["analysis"]["bin_width"] == 125


def test_errors_exit_nonzero(capsys, tmp_path, tiny_yaml):
    assert main(["run", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["sweep", str(tiny_yaml), "--times", "3", "--repeats", "5"]) == 2
    bad = tmp_path / "bad.pts"
    bad.write_bytes(b"junk" * 20)
    assert main(["correlate", str(bad), str(bad), "--out", str(tmp_path / "h.csv")]) == 2
    doc = yaml.safe_load(tiny_yaml.read_text())
    doc["analysis"]["round_trip_prior"] = 90_000_000
    tiny_yaml.write_text(yaml.safe_dump(doc))
    assert main(["run", str(tiny_yaml), "--out", str(tmp_path / "f")]) == 1
    err = capsys.readouterr().err
    assert "fit" in err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "pairsync", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "correlate", "fit", "track", "stability", "run", "sweep"):
        assert cmd in r.stdout
