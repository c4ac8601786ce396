"""Per-node round logic for Morph and the three baselines.

The engine drives each round in phases separated by barriers. Morph nodes
train, build a preference list, get matched by ``negotiate``, serve the
requesters they were matched with, then ingest what they received. The
baselines only train, exchange and average.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .config import ExperimentConfig
from .model import BatchSampler, Dataset, ModelParams, average_models, local_sgd_step, weighted_average
from .negotiation import ConnectionRequest, Topology, is_connected_undirected
from .selection import CandidateScores, SelectionParams, update_wanted_senders
from .similarity import (
    DegenerateLayer,
    SimilarityHistory,
    SimilarityReport,
    cosine_similarity,
    estimate_similarity,
    record_report,
)

COORDINATOR = -1


def node_rng(seed: int, node: int, label: str) -> np.random.Generator:
    """Independent stream keyed by (experiment seed, node id, label)."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, node + 1, zlib.crc32(label.encode())]))


@dataclass(frozen=True)
class CachedSimilarity:
    value: float
    round: int
    source: str  # "direct" | "estimated"


@dataclass(frozen=True)
class ModelMessage:
    sender: int
    round: int
    model: ModelParams
    similarity_gossip: tuple[tuple[int, float, int], ...] = ()  # (peer, value, round)
    peer_gossip: tuple[int, ...] = ()

    def gossip_entries(self) -> int:
        return len(self.similarity_gossip) + len(self.peer_gossip)


@dataclass
class NodeState:
    id: int
    model: ModelParams
    shard: Dataset
    sampler: BatchSampler
    known_peers: set[int] = field(default_factory=set)
    wanted_senders: list[int] = field(default_factory=list)
    similarity_cache: dict[int, CachedSimilarity] = field(default_factory=dict)
    estimates: dict[int, float] = field(default_factory=dict)
    history: SimilarityHistory = field(default_factory=SimilarityHistory)
    peer_models: dict[int, ModelParams] = field(default_factory=dict)
    select_rng: np.random.Generator | None = None
    gossip_rng: np.random.Generator | None = None
    push_rng: np.random.Generator | None = None
    dropped: int = 0
    last_selection: int = 0


def make_node(node_id: int, model: ModelParams, shard: Dataset, cfg: ExperimentConfig) -> NodeState:
    return NodeState(
        id=node_id,
        model=model,
        shard=shard,
        sampler=BatchSampler(len(shard), cfg.batch_size, node_rng(cfg.seed, node_id, "sgd")),
        select_rng=node_rng(cfg.seed, node_id, "select"),
        gossip_rng=node_rng(cfg.seed, node_id, "gossip"),
        push_rng=node_rng(cfg.seed, node_id, "push"),
    )


def local_step(state: NodeState, gamma: float) -> NodeState:
    """Replace the node's model with its half-step ``x - gamma * grad`` on the next batch."""
    batch = state.shard.subset(state.sampler.next())
    state.model = local_sgd_step(state.model, batch, gamma)
    return state


def aggregate_uniform(models_by_id: dict[int, ModelParams]) -> ModelParams:
    """Uniform mean, summed in node-id order so every node computing it gets the same bits."""
    ordered = [models_by_id[i] for i in sorted(models_by_id)]
    return average_models(ordered[0], ordered[1:])


# ---------------------------------------------------------------------------
# Initial graphs
# ---------------------------------------------------------------------------

def random_regular_digraph(n: int, degree: int, rng: np.random.Generator, connected: bool = True) -> dict[int, list[int]]:
    """Directed graph with in- and out-degree ``degree`` everywhere, as out-neighbour lists.

    Built as a circulant graph over a random relabelling with random distinct
    offsets; retried until undirected-connected when ``connected`` is set.
    """
    if degree > n - 1:
        raise ValueError("degree must be <= n - 1")
    for _ in range(1000):
        perm = rng.permutation(n)
        offsets = rng.choice(np.arange(1, n), size=degree, replace=False) if degree else np.array([], dtype=int)
        out = {int(perm[p]): [int(perm[(p + o) % n]) for o in offsets] for p in range(n)}
        if not connected or degree == 0:
            return out
        topo = Topology.from_edges(range(n), ((i, j) for i, js in out.items() for j in js))
        if is_connected_undirected(topo):
            return out
    raise RuntimeError("could not draw a connected regular digraph")


def random_regular_graph(n: int, degree: int, seed: int) -> nx.Graph:
    """Connected undirected ``degree``-regular graph (retries on disconnected draws)."""
    for attempt in range(1000):
        g = nx.random_regular_graph(degree, n, seed=seed * 1009 + attempt)
        if n <= 1 or nx.is_connected(g):
            return g
    raise RuntimeError("could not draw a connected regular graph")


def metropolis_hastings_weights(graph: nx.Graph) -> np.ndarray:
    """W_ij = 1 / (1 + max(d_i, d_j)) on edges, W_ii = 1 - sum_j W_ij."""
    n = graph.number_of_nodes()
    nodes = sorted(graph.nodes)
    index = {v: k for k, v in enumerate(nodes)}
    deg = dict(graph.degree)
    w = np.zeros((n, n))
    for u, v in graph.edges:
        if u == v:
            continue
        wij = 1.0 / (1.0 + max(deg[u], deg[v]))
        w[index[u], index[v]] = w[index[v], index[u]] = wij
    w[np.arange(n), np.arange(n)] = 1.0 - w.sum(axis=1)
    return w


# ---------------------------------------------------------------------------
# Morph
# ---------------------------------------------------------------------------

def init_morph(state: NodeState, initial_senders: Sequence[int]) -> None:
    state.wanted_senders = list(initial_senders)
    state.known_peers = set(initial_senders) - {state.id}


def _similarity_to(state: NodeState, peer: int) -> float | None:
    cached = state.similarity_cache.get(peer)
    if cached is not None:
        return cached.value
    return state.estimates.get(peer)


def reselect_wanted_senders(state: NodeState, rnd: int, cfg: ExperimentConfig) -> list[int]:
    """Refresh transitive estimates and redraw the wanted-sender view."""
    max_age = cfg.staleness_factor * cfg.delta_r
    state.estimates = {}
    for peer in sorted(state.known_peers):
        if peer in state.similarity_cache:
            continue
        est = estimate_similarity(state.model, state.peer_models, state.history, peer, rnd, max_age)
        if est is not None:
            state.estimates[peer] = est
    sims = {p: _similarity_to(state, p) for p in state.known_peers}
    scores = CandidateScores.from_mapping({p: v for p, v in sims.items() if v is not None})
    known = state.known_peers
    if len(known) < cfg.view_size:
        # not enough peers yet: keep the current view, topped up with what we know
        view = list(dict.fromkeys(list(state.wanted_senders) + sorted(known)))
    else:
        params = SelectionParams(cfg.view_size, cfg.biased_count, cfg.beta)
        view = update_wanted_senders(state.model, scores, known, params, state.select_rng, self_id=state.id)
    state.wanted_senders = view
    state.last_selection = rnd
    return view


def morph_requests(state: NodeState, rnd: int, cfg: ExperimentConfig) -> list[ConnectionRequest]:
    """Preference list: wanted senders first, then other known peers by falling dissimilarity.

    Dissimilarity is 1 - similarity, or 1.0 for peers with no estimate.
    """
    if rnd % cfg.delta_r == 0:
        reselect_wanted_senders(state, rnd, cfg)

    def dis(peer: int) -> float:
        sim = _similarity_to(state, peer)
        return 1.0 if sim is None else 1.0 - sim

    head = [p for p in state.wanted_senders if p != state.id]
    tail = sorted(state.known_peers - set(head), key=lambda p: (-dis(p), p))
    return [ConnectionRequest(state.id, p, dis(p)) for p in head + tail]


def morph_serve(state: NodeState, rnd: int, receivers: Iterable[int], cfg: ExperimentConfig) -> list[tuple[int, ModelMessage]]:
    """Messages for every accepted requester, each carrying fresh gossip."""
    direct = [(p, c.value, c.round) for p, c in state.similarity_cache.items() if c.source == "direct"]
    direct.sort(key=lambda e: (-e[2], e[0]))
    sim_gossip = tuple(direct[: cfg.gossip_similarities])
    peers = sorted(state.known_peers)
    out = []
    for r in sorted(receivers):
        if len(peers) <= cfg.gossip_peers:
            peer_gossip = tuple(peers)
        else:
            idx = state.gossip_rng.choice(len(peers), size=cfg.gossip_peers, replace=False)
            peer_gossip = tuple(peers[i] for i in sorted(idx))
        out.append((r, ModelMessage(state.id, rnd, state.model, sim_gossip, peer_gossip)))
    return out


def _valid(msg: ModelMessage, state: NodeState, rnd: int) -> bool:
    if msg.round != rnd or msg.sender == state.id or not msg.model.same_shape(state.model):
        return False
    return all(np.all(np.isfinite(v)) for _, v in msg.model.layers)


def morph_receive(state: NodeState, rnd: int, messages: Sequence[ModelMessage]) -> NodeState:
    """Update similarity cache, history and known peers, then average."""
    good = []
    for msg in messages:
        if _valid(msg, state, rnd):
            good.append(msg)
        else:
            state.dropped += 1
    own = state.model
    for msg in good:
        j = msg.sender
        state.peer_models[j] = msg.model
        state.known_peers.add(j)
        try:
            state.similarity_cache[j] = CachedSimilarity(cosine_similarity(own, msg.model), rnd, "direct")
        except DegenerateLayer:
            pass
        for z, value, t in msg.similarity_gossip:
            if z == state.id or not -1.0 <= value <= 1.0:
                continue
            record_report(state.history, z, SimilarityReport(t, j, value))
            state.known_peers.add(z)
        state.known_peers.update(p for p in msg.peer_gossip if p != state.id)
    state.known_peers.discard(state.id)
    models = {state.id: own}
    models.update((m.sender, m.model) for m in good)
    state.model = aggregate_uniform(models)
    return state


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def epidemic_targets(state: NodeState, n: int, k: int) -> list[int]:
    """EL-Local: ``k`` distinct uniform peers from everyone but self."""
    if k <= 0 or n <= 1:
        return []
    picks = state.push_rng.choice(n - 1, size=min(k, n - 1), replace=False)
    return sorted(int(p) + (p >= state.id) for p in picks)


def epidemic_oracle_topology(n: int, k: int, rng: np.random.Generator) -> Topology:
    """EL-Oracle: one random k-regular digraph for the whole round."""
    out = random_regular_digraph(n, k, rng, connected=False)
    return Topology.from_edges(range(n), ((i, j) for i, js in out.items() for j in js))


def epidemic_aggregate(state: NodeState, received: dict[int, ModelParams]) -> NodeState:
    models = {state.id: state.model}
    models.update(received)
    state.model = aggregate_uniform(models)
    return state


def static_mh_aggregate(state: NodeState, neighbor_models: dict[int, ModelParams], weights: np.ndarray) -> NodeState:
    """x_i <- W_ii x_i + sum_j W_ij x_j over the fixed neighbours."""
    models = dict(neighbor_models)
    models[state.id] = state.model
    ids = sorted(models)
    state.model = weighted_average([models[j] for j in ids], [weights[state.id, j] for j in ids])
    return state


def fully_connected_average(states: Sequence[NodeState]) -> ModelParams:
    return aggregate_uniform({s.id: s.model for s in states})
