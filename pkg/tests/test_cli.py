import csv
import hashlib
import json
import subprocess
import sys

import pytest
import yaml

from morphsim.cli import RUN_COLUMNS, SUMMARY_COLUMNS, cmd_compare, cmd_connectivity, cmd_run, main
from morphsim.engine import METRIC_COLUMNS

TINY = dict(n=6, rounds=12, view_size=2, d_r=1, eval_every=4, num_classes=3, examples_per_class=20, feature_dim=4)


def write_cfg(path, **fields):
    path.write_text(yaml.safe_dump(fields))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_run_writes_artifacts(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", **TINY)
    assert cmd_run(cfg, tmp_path / "out") == 0
    metrics = rows(tmp_path / "out" / "metrics.csv")
    assert [int(r["round"]) for r in metrics] == [4, 8, 12]
    nodes = rows(tmp_path / "out" / "per_node_final.csv")
    assert len(nodes) == 6
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["config"]["beta"] == 500.0  # defaults expanded


def test_golden_headers(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", record_topology=True, **TINY)
    assert cmd_run(cfg, tmp_path / "out") == 0
    head = lambda name: (tmp_path / "out" / name).read_text().splitlines()[0]
    assert head("metrics.csv") == (
        "round,mean_accuracy,mean_loss,inter_node_variance,isolated_count,messages,bytes_estimate,connected"
    )
    assert head("metrics.csv") == ",".join(METRIC_COLUMNS)
    assert head("per_node_final.csv") == "node,accuracy,loss"
    assert head("topology.csv") == "round,src,dst"
    assert len(rows(tmp_path / "out" / "topology.csv")) == 12 * 6 * 2


def test_missing_rounds_exit_2(tmp_path, capsys):
    fields = {k: v for k, v in TINY.items() if k != "rounds"}
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", **fields)
    assert cmd_run(cfg, tmp_path / "out") == 2
    assert "rounds" in capsys.readouterr().err


def test_unknown_field_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", betta=3.0, **TINY)
    assert cmd_run(cfg, tmp_path / "out") == 2
    assert "betta" in capsys.readouterr().err


def test_unreadable_config_exit_2(tmp_path):
    assert cmd_run(tmp_path / "nope.yaml", tmp_path / "out") == 2


def test_checksum_determinism(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", **TINY)
    assert cmd_run(cfg, tmp_path / "a") == 0
    assert cmd_run(cfg, tmp_path / "b") == 0
    assert sha(tmp_path / "a" / "metrics.csv") == sha(tmp_path / "b" / "metrics.csv")
    assert cmd_run(cfg, tmp_path / "c", seed=9) == 0
    assert sha(tmp_path / "a" / "metrics.csv") != sha(tmp_path / "c" / "metrics.csv")


def test_manifest_reproduces_run(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="epidemic", **TINY)
    assert cmd_run(cfg, tmp_path / "a", seed=4) == 0
    assert cmd_run(tmp_path / "a" / "manifest.json", tmp_path / "b") == 0
    assert sha(tmp_path / "a" / "metrics.csv") == sha(tmp_path / "b" / "metrics.csv")


def test_manifest_incomplete_until_finished(tmp_path, monkeypatch):
    import morphsim.cli as cli

    def boom(*a, **k):
        raise RuntimeError("interrupted")

    monkeypatch.setattr(cli, "run_experiment", boom)
    cfg = write_cfg(tmp_path / "m.yaml", protocol="morph", **TINY)
    assert cmd_run(cfg, tmp_path / "out") == 1
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "incomplete"
    assert not (tmp_path / "out" / "metrics.csv").exists()


def test_compare_four_protocols(tmp_path):
    cdir = tmp_path / "cfgs"
    cdir.mkdir()
    for p in ("morph", "epidemic", "static_mh", "fully_connected"):
        write_cfg(cdir / f"{p}.yaml", protocol=p, **TINY)
    assert cmd_compare(cdir, [1, 2, 3, 4, 5], tmp_path / "out") == 0
    summary = rows(tmp_path / "out" / "summary.csv")
    assert len(summary) == 4
    assert list(summary[0]) == list(SUMMARY_COLUMNS)
    fc = next(r for r in summary if r["protocol"] == "fully_connected")
    assert abs(float(fc["final_variance_mean"])) <= 1e-12
    assert all(int(r["runs"]) == 5 and int(r["failed"]) == 0 for r in summary)
    runs = rows(tmp_path / "out" / "runs.csv")
    assert len(runs) == 20 and list(runs[0]) == list(RUN_COLUMNS)
    assert (tmp_path / "out" / "morph" / "seed_3" / "metrics.csv").exists()


def test_compare_parallel_matches_serial(tmp_path):
    cdir = tmp_path / "cfgs"
    cdir.mkdir()
    for p in ("morph", "epidemic"):
        write_cfg(cdir / f"{p}.yaml", protocol=p, **TINY)
    assert cmd_compare(cdir, [1, 2], tmp_path / "s") == 0
    assert cmd_compare(cdir, [1, 2], tmp_path / "p", threads=2) == 0
    assert sha(tmp_path / "s" / "runs.csv") == sha(tmp_path / "p" / "runs.csv")


def test_compare_records_failures(tmp_path):
    cdir = tmp_path / "cfgs"
    cdir.mkdir()
    write_cfg(cdir / "ok.yaml", protocol="epidemic", **TINY)
    # valid config, but too many nodes for the data: fails at run time
    write_cfg(cdir / "bad.yaml", protocol="epidemic", **{**TINY, "n": 200})
    assert cmd_compare(cdir, [1], tmp_path / "out") == 1
    summary = {r["config"]: r for r in rows(tmp_path / "out" / "summary.csv")}
    assert summary["bad"]["failed"] == "1" and summary["ok"]["failed"] == "0"


def test_connectivity_one_point(tmp_path):
    grid = write_cfg(tmp_path / "g.yaml", n=20, d_s=1, d_r=2, trials=50)
    assert cmd_connectivity(grid, tmp_path / "out") == 0
    out = rows(tmp_path / "out" / "connectivity.csv")
    assert len(out) == 1
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["status"] == "complete"


def test_connectivity_edgeless_point(tmp_path):
    grid = write_cfg(tmp_path / "g.yaml", n=20, d_s=[0], d_r=[0], trials=50)
    assert cmd_connectivity(grid, tmp_path / "out") == 0
    assert float(rows(tmp_path / "out" / "connectivity.csv")[0]["probability"]) == 0.0


def test_connectivity_bad_grid(tmp_path):
    assert cmd_connectivity(write_cfg(tmp_path / "g.yaml", n=5, d_s=3, d_r=3), tmp_path / "o") == 2
    assert cmd_connectivity(write_cfg(tmp_path / "h.yaml", n=5, d_s=1, d_r=1, colour=1), tmp_path / "o") == 2


@pytest.mark.slow
def test_default_connectivity_grid_runtime(tmp_path):
    import time
    from pathlib import Path

    grid = Path(__file__).resolve().parents[1] / "configs" / "connectivity.yaml"
    start = time.perf_counter()
    assert cmd_connectivity(grid, tmp_path / "out") == 0
    assert time.perf_counter() - start < 300
    assert len(rows(tmp_path / "out" / "connectivity.csv")) == 36


def test_main_entry_points(tmp_path):
    cfg = write_cfg(tmp_path / "m.yaml", protocol="fully_connected", **TINY)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "2"]) == 0
    with pytest.raises(SystemExit):
        main(["bogus"])
    proc = subprocess.run([sys.executable, "-m", "morphsim", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "morphsim" in proc.stdout
