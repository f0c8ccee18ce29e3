import csv
import json

import pytest

from dyadlab.cli import EXPERIMENTS, ConfigError, default_manifest, main, parse_manifest


def _write(tmp_path, text, name="m.txt"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_every_default_manifest_parses():
    for name in EXPERIMENTS:
        manifest = parse_manifest(default_manifest(name))
        assert manifest.experiment == name
        assert parse_manifest(manifest.canonical()).sha256 == manifest.sha256


def test_schema_errors_are_collected():
    with pytest.raises(ConfigError) as err:
        parse_manifest("experiment = haar-check\nbogus = 1\nmax_n_1d = seven\nno equals sign\n")
    assert len(err.value.problems) == 3


def test_unknown_experiment_and_mismatch(tmp_path, capsys):
    assert main(["run", "--manifest", _write(tmp_path, "experiment = nope\n")]) == 2
    assert main(["weak11", "--manifest", _write(tmp_path, "experiment = haar-check\n")]) == 2
    assert main(["run", "--manifest", str(tmp_path / "missing.txt")]) == 2
    assert "error:" in capsys.readouterr().err


def test_resource_guard_refuses(tmp_path):
    text = "experiment = haar-check\ndims = 2\nmax_n_2d = 7\n"
    assert main(["run", "--manifest", _write(tmp_path, text), "--out-dir", str(tmp_path)]) == 2


def test_empty_sweep_writes_header_and_passes(tmp_path):
    text = "experiment = a2-scaling\nalpha_count = 0\n"
    code = main(["a2-scaling", "--manifest", _write(tmp_path, text), "--out-dir", str(tmp_path / "out")])
    assert code == 0
    rows = list(csv.reader((tmp_path / "out" / "a2-scaling.csv").open()))
    assert len(rows) == 1 and rows[0][0] == "alpha" and "manifest_sha256" in rows[0]
    summary = json.loads((tmp_path / "out" / "a2-scaling.json").read_text())
    assert summary["passed"] is True and summary["trials"] == 0


def test_outputs_are_deterministic_and_tagged(tmp_path):
    text = "experiment = shift-norms\nN = 5\ncount = 6\nseed = 3\n"
    path = _write(tmp_path, text)
    assert main(["run", "--manifest", path, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["run", "--manifest", path, "--out-dir", str(tmp_path / "b"), "--threads", "3"]) == 0
    for ext in ("csv", "json"):
        assert (tmp_path / "a" / f"shift-norms.{ext}").read_bytes() == (tmp_path / "b" / f"shift-norms.{ext}").read_bytes()
    summary = json.loads((tmp_path / "a" / "shift-norms.json").read_text())
    rows = list(csv.DictReader((tmp_path / "a" / "shift-norms.csv").open()))
    assert len(rows) == 6
    assert all(r["manifest_sha256"] == summary["manifest_sha256"] for r in rows)
    assert all(r["dyadlab_version"] == summary["versions"]["dyadlab"] for r in rows)


def test_seed_override_changes_hash(tmp_path):
    path = _write(tmp_path, "experiment = weak11\nN = 5\ncount = 3\ninputs_per_shift = 2\n")
    assert main(["run", "--manifest", path, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["run", "--manifest", path, "--out-dir", str(tmp_path / "b"), "--seed-override", "9"]) == 0
    a = json.loads((tmp_path / "a" / "weak11.json").read_text())
    b = json.loads((tmp_path / "b" / "weak11.json").read_text())
    assert a["manifest_sha256"] != b["manifest_sha256"]
    assert b["parameters"]["seed"] == "9"


def test_failing_criterion_exit_code(tmp_path):
    # a slope ceiling below any attainable slope must be reported as a failure
    text = "experiment = a2-scaling\nN = 5\nalpha_count = 4\nalpha_max = 1.0\nslope_max = 0.01\n"
    assert main(["run", "--manifest", _write(tmp_path, text), "--out-dir", str(tmp_path)]) == 1


def test_defaults_subcommand(capsys):
    assert main(["defaults", "badness-mc"]) == 0
    out = capsys.readouterr().out
    assert "experiment = badness-mc" in out and "phi = power:0.5" in out


def test_badness_example_manifest(tmp_path):
    text = "experiment = badness-mc\ndims = 1\nr_values = 10\nsamples = 100000\nindependence_seeds = 3\n"
    assert main(["run", "--manifest", _write(tmp_path, text), "--out-dir", str(tmp_path)]) == 0
    row = next(csv.DictReader((tmp_path / "badness-mc.csv").open()))
    assert float(row["estimate"]) <= 0.5 + 3 * float(row["stderr"])
