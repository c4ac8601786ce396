"""Synchronous-round executor and metrics.

Every round runs as phases separated by barriers: local training, request
resolution (Morph only), message delivery, aggregation, metrics. Node-local
phases can run on a thread pool; results do not depend on the thread count
because each node owns its rng streams and messages are collected in node-id
order before delivery.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import protocols as P
from .config import ExperimentConfig
from .model import (
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    evaluate,
    generate_synthetic_dataset,
    init_model,
    train_test_split,
)
from .negotiation import Topology, is_connected_undirected, isolated_nodes, negotiate, write_edge_list

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
BYTES_PER_GOSSIP_ENTRY = 12


@dataclass(frozen=True)
class RoundMetrics:
    """One evaluated round.

    Accuracies are percentages and the variance is in percent squared.
    ``messages`` and ``bytes_estimate`` cover every round since the previous
    evaluation, so summing a run's rows gives its total traffic.
    """

    round: int
    mean_accuracy: float
    mean_loss: float
    inter_node_variance: float
    isolated_count: int
    messages: int
    bytes_estimate: int
    connected: bool


METRIC_COLUMNS = tuple(f.name for f in fields(RoundMetrics))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    final_accuracies: list[float]  # percent, per node
    final_losses: list[float]
    isolated_per_round: list[int] = field(default_factory=list)
    in_degrees: list[list[int]] = field(default_factory=list)
    negotiation_iterations: list[int] = field(default_factory=list)
    topologies: list[tuple[int, Topology]] = field(default_factory=list)
    dropped_messages: int = 0

    @property
    def final(self) -> RoundMetrics:
        return self.metrics[-1]


def inter_node_variance(accuracies: Sequence[float]) -> float:
    """Population variance (divide by n)."""
    if len(accuracies) == 0:
        raise ValueError("need at least one accuracy")
    a = np.asarray(accuracies, dtype=np.float64)
    return float(np.mean((a - a.mean()) ** 2))


def communication_cost(metrics: Iterable[RoundMetrics]) -> tuple[int, int]:
    msgs = total = 0
    for m in metrics:
        msgs += m.messages
        total += m.bytes_estimate
    return msgs, total


def _eval_all(models, testset: Dataset) -> tuple[list[float], list[float]]:
    accs, losses = [], []
    for m in models:
        a, l = evaluate(m, testset)
        accs.append(100.0 * a)
        losses.append(l)
    return accs, losses


class _Pool:
    """Ordered map over nodes, serial or on threads."""

    def __init__(self, threads: int):
        self.ex = ThreadPoolExecutor(threads) if threads > 1 else None

    def map(self, fn: Callable, items: Sequence):
        if self.ex is None:
            return [fn(x) for x in items]
        return list(self.ex.map(fn, items))

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


def build_data(cfg: ExperimentConfig) -> tuple[list[Dataset], Dataset]:
    full = generate_synthetic_dataset(
        cfg.num_classes, cfg.examples_per_class, cfg.feature_dim, cfg.cluster_spread, seed=cfg.seed
    )
    train, test = train_test_split(full, cfg.test_fraction, seed=cfg.seed + 1)
    if cfg.n == 1:
        return [train], test
    shards = dirichlet_partition(train, PartitionSpec(cfg.n, cfg.alpha, cfg.seed + 2))
    return shards, test


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run ``cfg.rounds`` synchronous rounds and evaluate on the configured schedule."""
    cfg.validate()
    n = cfg.n
    shards, testset = build_data(cfg)
    x0 = init_model(
        cfg.feature_dim, cfg.num_classes, seed=cfg.seed + 3,
        hidden=cfg.hidden if cfg.model == "mlp" else 0, scale=cfg.init_scale,
    )
    nodes = [P.make_node(i, x0, shards[i], cfg) for i in range(n)]
    coord = P.node_rng(cfg.seed, P.COORDINATOR, "coordinator")
    param_bytes = x0.num_params * BYTES_PER_PARAM

    static_weights = None
    static_topo = None
    if cfg.protocol == "morph":
        out = P.random_regular_digraph(n, cfg.view_size, coord)
        for node in nodes:
            P.init_morph(node, out[node.id])
    elif cfg.protocol == "static_mh":
        graph = P.random_regular_graph(n, cfg.view_size, cfg.seed)
        static_weights = P.metropolis_hastings_weights(graph)
        static_topo = Topology({i: set(graph.neighbors(i)) for i in range(n)})

    result = ExperimentResult(cfg, [], [], [])
    pool = _Pool(threads)
    msgs_since = bytes_since = 0
    try:
        for t in range(1, cfg.rounds + 1):
            pool.map(lambda s: P.local_step(s, cfg.gamma), nodes)

            if cfg.protocol == "morph":
                reqs = pool.map(lambda s: P.morph_requests(s, t, cfg), nodes)
                topo = negotiate({s.id: r for s, r in zip(nodes, reqs)}, cfg.capacity, coord, in_slots=cfg.view_size)
                result.negotiation_iterations.append(topo.iterations)
                receivers = topo.receivers_of()
                outgoing = pool.map(lambda s: P.morph_serve(s, t, receivers[s.id], cfg), nodes)
                inbox: dict[int, list] = {i: [] for i in range(n)}
                for batch in outgoing:
                    for dst, msg in batch:
                        inbox[dst].append(msg)
                        msgs_since += 1
                        bytes_since += param_bytes + BYTES_PER_GOSSIP_ENTRY * msg.gossip_entries()
                pool.map(lambda s: P.morph_receive(s, t, inbox[s.id]), nodes)

            elif cfg.protocol == "epidemic":
                if cfg.el_variant == "oracle":
                    topo = P.epidemic_oracle_topology(n, cfg.view_size, coord)
                else:
                    targets = pool.map(lambda s: P.epidemic_targets(s, n, cfg.view_size), nodes)
                    topo = Topology.from_edges(range(n), ((s.id, j) for s, ts in zip(nodes, targets) for j in ts))
                half = {s.id: s.model for s in nodes}
                msgs_since += topo.num_edges
                bytes_since += topo.num_edges * param_bytes
                pool.map(lambda s: P.epidemic_aggregate(s, {j: half[j] for j in topo.senders_of[s.id]}), nodes)

            elif cfg.protocol == "static_mh":
                topo = static_topo
                half = {s.id: s.model for s in nodes}
                msgs_since += topo.num_edges
                bytes_since += topo.num_edges * param_bytes
                pool.map(
                    lambda s: P.static_mh_aggregate(s, {j: half[j] for j in topo.senders_of[s.id]}, static_weights),
                    nodes,
                )

            else:  # fully_connected
                avg = P.fully_connected_average(nodes)
                for s in nodes:
                    s.model = avg
                topo = None
                msgs_since += n * (n - 1)
                bytes_since += n * (n - 1) * param_bytes

            if topo is not None:
                iso = len(isolated_nodes(topo))
                result.in_degrees.append([topo.in_degree(i) for i in range(n)])
                if cfg.record_topology:
                    result.topologies.append((t, topo))
            else:
                iso = 0
            result.isolated_per_round.append(iso)

            if cfg.is_eval_round(t):
                accs, losses = _eval_all([s.model for s in nodes], testset)
                connected = True if topo is None else is_connected_undirected(topo)
                result.metrics.append(RoundMetrics(
                    round=t,
                    mean_accuracy=float(np.mean(accs)),
                    mean_loss=float(np.mean(losses)),
                    inter_node_variance=inter_node_variance(accs),
                    isolated_count=iso,
                    messages=msgs_since,
                    bytes_estimate=bytes_since,
                    connected=connected,
                ))
                msgs_since = bytes_since = 0
                result.final_accuracies, result.final_losses = accs, losses
                log.debug("round %d acc=%.2f var=%.4f", t, result.metrics[-1].mean_accuracy,
                          result.metrics[-1].inter_node_variance)
    finally:
        pool.close()
    result.dropped_messages = sum(s.dropped for s in nodes)
    return result


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def fmt(value) -> str:
    """Fixed 9-significant-digit formatting for reproducible CSVs."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def write_metrics_csv(path: str | Path, metrics: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([fmt(v) for v in asdict(m).values()])


def read_metrics_csv(path: str | Path) -> list[RoundMetrics]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RoundMetrics(
                round=int(row["round"]),
                mean_accuracy=float(row["mean_accuracy"]),
                mean_loss=float(row["mean_loss"]),
                inter_node_variance=float(row["inter_node_variance"]),
                isolated_count=int(row["isolated_count"]),
                messages=int(row["messages"]),
                bytes_estimate=int(row["bytes_estimate"]),
                connected=row["connected"] == "1",
            ))
    return out


def write_per_node_csv(path: str | Path, result: ExperimentResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "accuracy", "loss"])
        for i, (a, l) in enumerate(zip(result.final_accuracies, result.final_losses)):
            w.writerow([i, fmt(a), fmt(l)])


def write_topology_csv(path: str | Path, result: ExperimentResult) -> None:
    write_edge_list(path, result.topologies)
