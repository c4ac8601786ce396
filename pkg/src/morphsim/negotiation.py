"""Turn per-node wanted-sender requests into a round topology under an out-degree cap.

The matching is many-to-many deferred acceptance: requesters propose to the
next peers on their preference lists, senders keep the ``capacity`` requests
with the highest dissimilarity (ties to the lower requester id) and reject the
rest; rejected requesters move on to the next peer on their list. Proposal
iterations are capped at ceil((n-1)/capacity). In-slots still empty after the
cap (or after every list is exhausted) are filled by a random repair pass.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ConnectionRequest:
    requester: int
    sender: int
    dissimilarity: float

    def __post_init__(self):
        if self.requester == self.sender:
            raise ValueError("a node cannot request its own model")


@dataclass
class Topology:
    """Directed round graph; ``senders_of[i]`` holds the nodes sending to ``i``."""

    senders_of: dict[int, set[int]]
    iterations: int = 0
    repaired_edges: list[tuple[int, int]] = field(default_factory=list)  # (src, dst)
    over_capacity: int = 0
    converged: bool = True
    proposers: dict[int, set[int]] = field(default_factory=dict)  # sender -> everyone who proposed to it

    def __post_init__(self):
        for i, senders in self.senders_of.items():
            if i in senders:
                raise ValueError(f"self-edge at node {i}")

    @property
    def repaired(self) -> int:
        return len(self.repaired_edges)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.senders_of)

    def in_degree(self, i: int) -> int:
        return len(self.senders_of[i])

    def out_degree(self, j: int) -> int:
        return sum(1 for s in self.senders_of.values() if j in s)

    def receivers_of(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {i: set() for i in self.senders_of}
        for i, senders in self.senders_of.items():
            for j in senders:
                out.setdefault(j, set()).add(i)
        return out

    def edges(self) -> list[tuple[int, int]]:
        """(src, dst) pairs, sorted."""
        return sorted((j, i) for i, s in self.senders_of.items() for j in s)

    @property
    def num_edges(self) -> int:
        return sum(len(s) for s in self.senders_of.values())

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> "Topology":
        senders: dict[int, set[int]] = {i: set() for i in nodes}
        for src, dst in edges:
            senders.setdefault(dst, set()).add(src)
            senders.setdefault(src, set())
        return cls(senders)


class UnionFind:
    def __init__(self, items: Iterable[int]):
        self.parent = {x: x for x in items}
        self.size = {x: 1 for x in self.parent}
        self.components = len(self.parent)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.components -= 1
        return True


def is_connected_undirected(topology: Topology) -> bool:
    uf = UnionFind(topology.senders_of)
    for src, dst in topology.edges():
        uf.union(src, dst)
    return uf.components <= 1


def isolated_nodes(topology: Topology) -> set[int]:
    return {i for i, s in topology.senders_of.items() if not s}


def proposal_bound(n: int, capacity: int) -> int:
    return max(1, math.ceil((n - 1) / capacity))


@dataclass
class _Sender:
    accepted: list[tuple[float, int]] = field(default_factory=list)  # (dissimilarity, requester)


def _rank_key(entry: tuple[float, int]) -> tuple[float, int]:
    # higher dissimilarity first, then lower requester id
    return (-entry[0], entry[1])


def negotiate(
    requests: Mapping[int, Sequence[ConnectionRequest] | Sequence[tuple[int, float]]],
    capacity: int,
    rng: np.random.Generator,
    in_slots: int | None = None,
    max_iterations: int | None = None,
) -> Topology:
    """Resolve preference lists into a topology where every node has ``in_slots`` senders.

    ``requests[i]`` is node i's preference list, most wanted first, as
    ConnectionRequest objects or (sender, dissimilarity) pairs. ``in_slots``
    defaults to ``capacity``. ``max_iterations`` defaults to
    ceil((n-1)/capacity). The returned Topology records how many proposal
    iterations ran, whether proposals had settled by then, how many edges the
    repair pass added and how many of those exceeded the sender's capacity.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    nodes = sorted(requests)
    n = len(nodes)
    slots = capacity if in_slots is None else in_slots
    slots = min(slots, n - 1) if n > 1 else 0
    bound = proposal_bound(n, capacity) if max_iterations is None else max_iterations

    prefs: dict[int, list[tuple[int, float]]] = {}
    for i in nodes:
        plist = []
        seen = set()
        for item in requests[i]:
            if isinstance(item, ConnectionRequest):
                j, d = item.sender, item.dissimilarity
            else:
                j, d = item
            if j == i or j in seen or j not in requests:
                continue
            seen.add(j)
            plist.append((j, float(d)))
        prefs[i] = plist

    pointer = {i: 0 for i in nodes}
    matched: dict[int, set[int]] = {i: set() for i in nodes}
    senders = {j: _Sender() for j in nodes}

    proposers: dict[int, set[int]] = {j: set() for j in nodes}
    iterations = 0
    while iterations < bound:
        proposals: dict[int, list[tuple[float, int]]] = {}
        for i in nodes:
            want = slots - len(matched[i])
            plist = prefs[i]
            while want > 0 and pointer[i] < len(plist):
                j, d = plist[pointer[i]]
                pointer[i] += 1
                proposals.setdefault(j, []).append((d, i))
                want -= 1
        if not proposals:
            break
        iterations += 1
        for j in sorted(proposals):
            proposers[j].update(i for _, i in proposals[j])
            pool = senders[j].accepted + proposals[j]
            pool.sort(key=_rank_key)
            keep, drop = pool[:capacity], pool[capacity:]
            senders[j].accepted = keep
            for _, i in keep:
                matched[i].add(j)
            for _, i in drop:
                matched[i].discard(j)

    converged = all(len(matched[i]) >= slots or pointer[i] >= len(prefs[i]) for i in nodes)

    # repair: fill empty in-slots, preferring senders with spare capacity
    out_deg = {j: len(senders[j].accepted) for j in nodes}
    repaired: list[tuple[int, int]] = []
    over = 0
    for i in nodes:
        while len(matched[i]) < slots:
            taken = matched[i] | {i}
            spare = [j for j in nodes if j not in taken and out_deg[j] < capacity]
            if spare:
                j = spare[int(rng.integers(len(spare)))]
            else:
                pool = [j for j in nodes if j not in taken]
                j = pool[int(rng.integers(len(pool)))]
                over += 1
            matched[i].add(j)
            out_deg[j] += 1
            repaired.append((j, i))

    return Topology(
        matched, iterations=iterations, repaired_edges=repaired, over_capacity=over, converged=converged,
        proposers=proposers,
    )


def write_edge_list(path: str | Path, rows: Iterable[tuple[int, Topology]]) -> None:
    """CSV with columns round,src,dst."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "src", "dst"])
        for rnd, topo in rows:
            for src, dst in topo.edges():
                writer.writerow([rnd, src, dst])


def read_edge_list(path: str | Path) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["round"]), []).append((int(row["src"]), int(row["dst"])))
    return out
