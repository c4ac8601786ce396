"""Command-line front end.

    morphsim run --config exp.yaml --out results/run1 [--seed 3] [--threads 4]
    morphsim compare --config configs/ --out results/cmp [--seeds 1 2 3 4 5]
    morphsim connectivity --config grid.yaml --out results/fig2

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
Log level comes from the MORPHSIM_LOG_LEVEL environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .config import ConfigError, ExperimentConfig, config_from_mapping
from .connectivity import ConnectivityGrid, sweep_grid, write_grid_csv
from .engine import (
    ExperimentResult,
    communication_cost,
    fmt,
    run_experiment,
    write_metrics_csv,
    write_per_node_csv,
    write_topology_csv,
)

log = logging.getLogger("morphsim")

CONFIG_SUFFIXES = (".yaml", ".yml", ".json")
SUMMARY_COLUMNS = (
    "config", "protocol", "runs", "failed",
    "final_accuracy_mean", "final_accuracy_std",
    "final_variance_mean", "final_variance_std",
    "rounds_to_target_mean", "reached_target", "total_messages_mean", "total_bytes_mean",
)
RUN_COLUMNS = (
    "config", "protocol", "seed", "final_accuracy", "final_variance", "best_accuracy",
    "rounds_to_target", "total_messages", "total_bytes", "mean_isolated",
)


class ManifestWriter:
    """Writes manifest.json up front (status "incomplete") and finalises it at the end."""

    def __init__(self, out_dir: Path, command: str, payload: dict[str, Any]):
        self.path = out_dir / "manifest.json"
        self.data = {
            "tool": "morphsim",
            "version": __version__,
            "command": command,
            "started": datetime.now(timezone.utc).isoformat(),
            "status": "incomplete",
            "artifacts": [],
            **payload,
        }
        self._flush()

    def _flush(self) -> None:
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def finish(self, artifacts: Sequence[str], status: str = "complete", **extra) -> None:
        self.data.update(artifacts=list(artifacts), status=status,
                         finished=datetime.now(timezone.utc).isoformat(), **extra)
        self._flush()


def read_mapping(path: str | Path) -> Any:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    # a run manifest is accepted wherever a config is
    if isinstance(data, dict) and data.get("tool") == "morphsim" and "config" in data:
        return data["config"]
    return data if data is not None else {}


def load_experiment(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    data = read_mapping(path)
    if seed is not None and isinstance(data, dict):
        data = {**data, "seed": seed}
    return config_from_mapping(data)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _write_run(out: Path, cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    out.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(out, "run", {"config": cfg.to_dict(), "seed": cfg.seed})
    result = run_experiment(cfg, threads=threads)
    artifacts = ["metrics.csv", "per_node_final.csv"]
    write_metrics_csv(out / "metrics.csv", result.metrics)
    write_per_node_csv(out / "per_node_final.csv", result)
    if cfg.record_topology:
        write_topology_csv(out / "topology.csv", result)
        artifacts.append("topology.csv")
    msgs, nbytes = communication_cost(result.metrics)
    manifest.finish(artifacts, total_messages=msgs, total_bytes=nbytes,
                    dropped_messages=result.dropped_messages)
    return result


def cmd_run(config_path: str | Path, output_dir: str | Path, seed: int | None = None, threads: int = 1) -> int:
    try:
        cfg = load_experiment(config_path, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(f"cannot read config {config_path}: {exc}", file=sys.stderr)
        return 2
    try:
        result = _write_run(Path(output_dir), cfg, threads)
    except Exception:
        traceback.print_exc()
        return 1
    f = result.final
    print(f"{cfg.protocol}: round {f.round} accuracy {f.mean_accuracy:.2f}% variance {f.inter_node_variance:.4f}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

@dataclass
class RunSummary:
    config: str
    protocol: str
    seed: int
    final_accuracy: float
    final_variance: float
    best_accuracy: float
    series: list[tuple[int, float]]
    total_messages: int
    total_bytes: int
    mean_isolated: float
    rounds_to_target: int | None = None


def _compare_job(args: tuple[str, dict, int, str]) -> RunSummary | str:
    name, data, seed, out = args
    try:
        cfg = config_from_mapping({**data, "seed": seed})
        result = _write_run(Path(out) / name / f"seed_{seed}", cfg, threads=1)
    except Exception as exc:  # recorded, not raised: one bad run must not sink the sweep
        return f"{name} seed {seed}: {type(exc).__name__}: {exc}"
    msgs, nbytes = communication_cost(result.metrics)
    iso = result.isolated_per_round
    return RunSummary(
        name, cfg.protocol, seed,
        result.final.mean_accuracy, result.final.inter_node_variance,
        max(m.mean_accuracy for m in result.metrics),
        [(m.round, m.mean_accuracy) for m in result.metrics],
        msgs, nbytes, sum(iso) / len(iso),
    )


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    if not xs:
        return float("nan"), float("nan")
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def config_files(config_dir: str | Path) -> list[Path]:
    p = Path(config_dir)
    if p.is_file():
        return [p]
    return sorted(f for f in p.iterdir() if f.suffix in CONFIG_SUFFIXES)


def cmd_compare(
    config_dir: str | Path,
    seeds: Sequence[int],
    output_dir: str | Path,
    threads: int = 1,
    target: float | None = None,
) -> int:
    """Run every config across every seed and write runs.csv plus summary.csv.

    The rounds-to-target column uses ``target`` when given, otherwise the
    best mean accuracy reached by the epidemic run with the same seed.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = config_files(config_dir)
    if not files or not seeds:
        print("compare needs at least one config and one seed", file=sys.stderr)
        return 2
    configs: dict[str, dict] = {}
    for f in files:
        try:
            data = read_mapping(f)
            config_from_mapping(data)
        except ConfigError as exc:
            print(f"config error in {f.name}: {exc}", file=sys.stderr)
            return 2
        configs[f.stem] = data

    manifest = ManifestWriter(out, "compare", {"configs": configs, "seeds": list(seeds), "target": target})
    jobs = [(name, data, seed, str(out)) for name, data in configs.items() for seed in seeds]
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            results = list(ex.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]

    failures = [r for r in results if isinstance(r, str)]
    runs = [r for r in results if isinstance(r, RunSummary)]
    for msg in failures:
        print(f"run failed: {msg}", file=sys.stderr)

    el_best = {r.seed: r.best_accuracy for r in runs if r.protocol == "epidemic"}
    for r in runs:
        goal = target if target is not None else el_best.get(r.seed)
        if goal is not None:
            r.rounds_to_target = next((t for t, a in r.series if a >= goal - 1e-9), None)

    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in runs:
            w.writerow([r.config, r.protocol, r.seed, fmt(r.final_accuracy), fmt(r.final_variance),
                        fmt(r.best_accuracy), "" if r.rounds_to_target is None else r.rounds_to_target,
                        r.total_messages, r.total_bytes, fmt(r.mean_isolated)])

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for name, data in configs.items():
            mine = [r for r in runs if r.config == name]
            acc = _mean_std([r.final_accuracy for r in mine])
            var = _mean_std([r.final_variance for r in mine])
            reached = [r.rounds_to_target for r in mine if r.rounds_to_target is not None]
            w.writerow([
                name, data.get("protocol"), len(mine), sum(1 for f in failures if f.startswith(f"{name} ")),
                fmt(acc[0]), fmt(acc[1]), fmt(var[0]), fmt(var[1]),
                fmt(statistics.fmean(reached)) if reached else "", len(reached),
                fmt(statistics.fmean(r.total_messages for r in mine)) if mine else "",
                fmt(statistics.fmean(r.total_bytes for r in mine)) if mine else "",
            ])
    manifest.finish(["runs.csv", "summary.csv"], status="complete" if not failures else "failed",
                    failures=failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# connectivity
# ---------------------------------------------------------------------------

GRID_FIELDS = {"n", "d_s", "d_r", "trials", "clusters", "seed", "beta", "dim", "spread"}


def _int_list(name: str, value: Any) -> tuple[int, ...]:
    if isinstance(value, int) and not isinstance(value, bool):
        return (value,)
    if isinstance(value, dict) and set(value) <= {"start", "stop"}:
        return tuple(range(int(value.get("start", 0)), int(value["stop"]) + 1))
    if isinstance(value, list) and value and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return tuple(value)
    raise ConfigError(name, "expected an int, a list of ints or {start, stop}")


def grids_from_mapping(data: Any) -> list[ConnectivityGrid]:
    """One grid per system size; ``n`` may be a single int or a list."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "grid config must be a mapping")
    unknown = sorted(set(data) - GRID_FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    for name in ("n", "d_s", "d_r"):
        if name not in data:
            raise ConfigError(name, "missing required field")
    extra = {k: data[k] for k in ("trials", "clusters", "seed", "beta", "dim", "spread") if k in data}
    grids = []
    for n in _int_list("n", data["n"]):
        try:
            grids.append(ConnectivityGrid(n, _int_list("d_s", data["d_s"]), _int_list("d_r", data["d_r"]), **extra))
        except (TypeError, ValueError) as exc:
            raise ConfigError("grid", str(exc)) from None
    return grids


def cmd_connectivity(grid_config: str | Path, output_dir: str | Path) -> int:
    try:
        data = read_mapping(grid_config)
        grids = grids_from_mapping(data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(f"cannot read grid config {grid_config}: {exc}", file=sys.stderr)
        return 2
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = ManifestWriter(out, "connectivity", {"grid": data})
    try:
        rows = [row for g in grids for row in sweep_grid(g)]
        write_grid_csv(out / "connectivity.csv", rows)
    except Exception:
        traceback.print_exc()
        manifest.finish([], status="failed")
        return 1
    manifest.finish(["connectivity.csv"])
    print(f"wrote {len(rows)} grid points to {out / 'connectivity.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphsim", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"morphsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True, help="YAML/JSON experiment config or a run manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for node-local phases")

    p = sub.add_parser("compare", help="run several configs over several seeds")
    p.add_argument("--config", required=True, help="directory of configs (or a single config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--seed", type=int, default=None, help="run a single seed instead of --seeds")
    p.add_argument("--threads", type=int, default=1, help="parallel runs (processes)")
    p.add_argument("--target", type=float, default=None,
                   help="accuracy (percent) for rounds-to-target; default: best epidemic accuracy")

    p = sub.add_parser("connectivity", help="connectivity Monte-Carlo sweep")
    p.add_argument("--config", required=True, help="YAML/JSON grid config")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MORPHSIM_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed, args.threads)
    if args.command == "compare":
        seeds = [args.seed] if args.seed is not None else args.seeds
        return cmd_compare(args.config, seeds, args.out, args.threads, args.target)
    return cmd_connectivity(args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
