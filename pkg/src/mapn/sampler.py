"""Random walks with restart, typed top-k neighbor sets, meta-path walks,
shortest-path hop rings and negative-sampling triples.

Randomness is always drawn from per-walker streams keyed by
``(seed, start node, walk index[, salt])`` so that results do not depend on
scheduling or worker count.
"""

from __future__ import annotations

from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .graph import HeteroGraph, MetaPath


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for one walker."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; ``workers <= 1`` runs inline."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class WalkConfig:
    restart_p: float = 0.5
    walk_length: int = 100
    walks_per_node: int = 10
    k_per_type: dict[int, int] | int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.restart_p < 1.0:
            raise ValueError(f"restart_p must lie in (0, 1), got {self.restart_p}")
        if self.walk_length < 1:
            raise ValueError("walk_length must be >= 1")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        ks = self.k_per_type.values() if isinstance(self.k_per_type, dict) else [self.k_per_type]
        if any(k < 1 for k in ks):
            raise ValueError("every k_per_type entry must be >= 1")

    def k_for(self, t: int) -> int:
        if isinstance(self.k_per_type, dict):
            return self.k_per_type.get(t, 10)
        return self.k_per_type


@dataclass
class TypedNeighborSet:
    owner: int
    neighbors: dict[int, list[tuple[int, int]]]
    padded: dict[int, bool] = field(default_factory=dict)
    empty: dict[int, bool] = field(default_factory=dict)

    def ids(self, t: int) -> list[int]:
        return [v for v, _ in self.neighbors.get(t, [])]


@dataclass
class HopRings:
    center: int
    rings: list[frozenset]


@dataclass
class TripleSet:
    triples: np.ndarray          # (m, 3) int array of (a, b, b')
    meta_path: MetaPath

    def __len__(self) -> int:
        return len(self.triples)


# -- random walk with restart ------------------------------------------------------

def rwr_walk(graph: HeteroGraph, start: int, cfg: WalkConfig, rng: np.random.Generator,
             relations: Sequence[int] | None = None, length: int | None = None) -> list[int]:
    """One walk of ``cfg.walk_length`` nodes beginning at ``start``.

    Each step returns to ``start`` with probability ``restart_p`` and otherwise
    moves to a uniformly chosen neighbor (relations pooled; restricted to
    ``relations`` when given). Isolated nodes restart.
    """
    length = cfg.walk_length if length is None else length
    nbrs = graph.pooled_neighbors(relations)
    p = cfg.restart_p
    walk = [start]
    cur = start
    block = 1024
    coins = rng.random(block)
    picks = rng.random(block)
    j = 0
    for _ in range(length - 1):
        if j == block:
            coins = rng.random(block)
            picks = rng.random(block)
            j = 0
        options = nbrs[cur]
        if coins[j] < p or not options:
            cur = start
        else:
            cur = options[int(picks[j] * len(options))]
        j += 1
        walk.append(cur)
    return walk


def rwr_transition_matrix(graph: HeteroGraph, start: int, restart_p: float) -> np.ndarray:
    n = graph.num_nodes
    t = np.zeros((n, n))
    for v in range(n):
        nb = graph.neighbors(v)
        if nb:
            t[v, list(nb)] += (1 - restart_p) / len(nb)
            t[v, start] += restart_p
        else:
            t[v, start] = 1.0
    return t


def typed_top_k(walks: Iterable[Sequence[int]], owner: int, graph: HeteroGraph,
                cfg: WalkConfig, types: Iterable[int] | None = None) -> TypedNeighborSet:
    """Most-visited neighbors per node type (count desc, id asc), owner excluded.

    Short lists are padded by cycling through the found entries.
    """
    counts = Counter()
    for w in walks:
        counts.update(v for v in w if v != owner)
    out, padded, empty = {}, {}, {}
    for t in (range(graph.num_types) if types is None else types):
        k = cfg.k_for(t)
        ranked = sorted(((v, c) for v, c in counts.items() if graph.node_type[v] == t),
                        key=lambda vc: (-vc[1], vc[0]))
        top = ranked[:k]
        empty[t] = not top
        padded[t] = 0 < len(top) < k
        if padded[t]:
            top = [top[i % len(top)] for i in range(k)]
        out[t] = top
    return TypedNeighborSet(owner, out, padded, empty)


def sample_neighbor_sets(graph: HeteroGraph, cfg: WalkConfig, nodes: Sequence[int] | None = None,
                         relations: Sequence[int] | None = None, salt: int = 0,
                         workers: int = 1) -> dict[int, TypedNeighborSet]:
    nodes = list(range(graph.num_nodes)) if nodes is None else [int(v) for v in nodes]

    def one(v):
        walks = [rwr_walk(graph, v, cfg, stream(cfg.seed, v, i, salt), relations)
                 for i in range(cfg.walks_per_node)]
        return typed_top_k(walks, v, graph, cfg)

    return dict(zip(nodes, parallel_map(one, nodes, workers)))


def dump_neighbor_sets(sets: Mapping[int, TypedNeighborSet], graph: HeteroGraph, path) -> None:
    ids = graph.original_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for owner in sorted(sets):
            ns = sets[owner]
            for t in sorted(ns.neighbors):
                for v, c in ns.neighbors[t]:
                    fh.write(f"{ids[owner]}\t{graph.type_names[t]}\t{ids[v]}\t{c}\n")


# -- meta-path walks ---------------------------------------------------------------

def meta_path_walk(graph: HeteroGraph, start: int, path: MetaPath, limit: int,
                   rng: np.random.Generator) -> list[list[int]]:
    """Up to ``limit`` instances of ``path`` starting at ``start``.

    Successors are chosen uniformly among neighbors of the required type via
    the required relation; an instance that hits a dead end is dropped.
    """
    types = [graph.type_id(t) for t in path.node_types]
    rels = [graph.relation_id(r) for r in path.relations]
    if graph.node_type[start] != types[0]:
        raise ValueError(f"start node {start} has type {graph.type_names[graph.node_type[start]]!r}, "
                         f"meta-path {path.name!r} starts at {path.anchor!r}")
    out = []
    for _ in range(limit):
        seq = [start]
        cur = start
        for r, t in zip(rels, types[1:]):
            options = [u for u in graph.neighbors(cur, r) if graph.node_type[u] == t]
            if not options:
                seq = None
                break
            cur = options[int(rng.integers(len(options)))]
            seq.append(cur)
        if seq is not None:
            out.append(seq)
    return out


def sample_triples(graph: HeteroGraph, path: MetaPath, window: int, negatives_per_positive: int,
                   cfg: WalkConfig, salt: int = 0, nodes: Sequence[int] | None = None,
                   workers: int = 1) -> TripleSet:
    """Skip-gram triples ``(a, b, b')`` from meta-path walks.

    Every ordered pair of walk positions at distance ``1..window`` whose first
    node has the anchor type and second has the terminal type (and differs
    from the first) yields ``negatives_per_positive`` triples, each with a
    negative drawn uniformly from the other nodes of b's type.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    anchor = graph.type_id(path.anchor)
    terminal = graph.type_id(path.terminal)
    pool = graph.nodes_of_type(terminal)
    if len(pool) < 2:
        raise ValueError(f"type {path.terminal!r} has a single node; negative sampling impossible")
    if window == 0 or negatives_per_positive < 1:
        return TripleSet(np.zeros((0, 3), dtype=np.int64), path)
    starts = graph.nodes_of_type(anchor) if nodes is None else np.asarray(nodes)
    pos_in_pool = {int(v): i for i, v in enumerate(pool)}

    def one(v):
        rng = stream(cfg.seed, int(v), 0x7A1, salt)
        rows = []
        for walk in meta_path_walk(graph, int(v), path, cfg.walks_per_node, rng):
            for i, a in enumerate(walk):
                if graph.node_type[a] != anchor:
                    continue
                lo, hi = max(0, i - window), min(len(walk), i + window + 1)
                for j in range(lo, hi):
                    b = walk[j]
                    if j == i or b == a or graph.node_type[b] != terminal:
                        continue
                    for _ in range(negatives_per_positive):
                        k = int(rng.integers(len(pool) - 1))
                        if k >= pos_in_pool[b]:
                            k += 1
                        rows.append((a, b, int(pool[k])))
        return rows

    rows = [r for chunk in parallel_map(one, list(starts), workers) for r in chunk]
    return TripleSet(np.asarray(rows, dtype=np.int64).reshape(-1, 3), path)


def dump_triples(triples: TripleSet, graph: HeteroGraph, path) -> None:
    ids = graph.original_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, c in triples.triples:
            fh.write(f"{ids[a]}\t{ids[b]}\t{ids[c]}\n")


# -- hop rings -------------------------------------------------------------------

def bfs_distances(graph: HeteroGraph, center: int, max_depth: int | None = None) -> dict[int, int]:
    dist = {center: 0}
    queue = deque([center])
    while queue:
        v = queue.popleft()
        if max_depth is not None and dist[v] >= max_depth:
            continue
        for u in graph.skeleton_neighbors(v):
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def hop_rings(graph: HeteroGraph, center: int, K: int) -> HopRings:
    """Nodes at exact shortest-path distance 1..K on the undirected skeleton."""
    if K < 1:
        raise ValueError("K must be >= 1")
    dist = bfs_distances(graph, center, K)
    rings = [set() for _ in range(K)]
    for v, d in dist.items():
        if 1 <= d <= K:
            rings[d - 1].add(v)
    return HopRings(center, [frozenset(r) for r in rings])


def all_hop_rings(graph: HeteroGraph, K: int) -> list[HopRings]:
    return [hop_rings(graph, v, K) for v in range(graph.num_nodes)]


def ring_operators(graph: HeteroGraph, K: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Row-normalized ring-mean matrices ``M_k`` (|V| x |V|) and presence mask (|V| x K)."""
    n = graph.num_nodes
    mats = [np.zeros((n, n)) for _ in range(K)]
    mask = np.zeros((n, K))
    for hr in all_hop_rings(graph, K):
        for k, ring in enumerate(hr.rings):
            if ring:
                mats[k][hr.center, sorted(ring)] = 1.0 / len(ring)
                mask[hr.center, k] = 1.0
    return mats, mask
