"""Heterogeneous graph storage, file ingestion, synthetic generators and LapPE."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Malformed or inconsistent graph input."""


@dataclass(frozen=True)
class MetaPath:
    node_types: tuple[str, ...]
    relations: tuple[str, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "relations", tuple(self.relations))
        if len(self.node_types) != len(self.relations) + 1:
            raise ValueError(f"meta-path {self.name!r}: need len(node_types) == len(relations) + 1")
        if not self.name:
            object.__setattr__(self, "name", "-".join(self.node_types))

    @property
    def anchor(self) -> str:
        return self.node_types[0]

    @property
    def terminal(self) -> str:
        return self.node_types[-1]

    def __len__(self) -> int:
        return len(self.relations)

    def to_dict(self) -> dict:
        return {"name": self.name, "node_types": list(self.node_types),
                "relations": list(self.relations)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetaPath":
        return cls(tuple(d["node_types"]), tuple(d["relations"]), d.get("name", ""))


class HeteroGraph:
    """Immutable typed graph.

    Nodes are dense integers ``0..n-1``. ``node_type[v]`` and ``edges[e, 2]``
    index into ``type_names`` / ``relation_names``. ``features[t]`` holds one
    row per node of type ``t`` in ascending node-id order (see ``type_index``).
    """

    def __init__(self, node_type: Sequence[int], edges: Iterable[tuple[int, int, int]],
                 type_names: Sequence[str], relation_names: Sequence[str],
                 features: Mapping[int, np.ndarray] | None = None,
                 directed: Mapping[int, bool] | None = None,
                 labels: Mapping[int, int] | None = None,
                 graph_label: int | None = None,
                 original_ids: Sequence[str] | None = None):
        self.node_type = np.asarray(node_type, dtype=np.int64)
        self.node_type.setflags(write=False)
        n = len(self.node_type)
        self.type_names = tuple(type_names)
        self.relation_names = tuple(relation_names)
        if not self.type_names or not self.relation_names:
            raise GraphFormatError("graph needs at least one node type and one relation type")
        if n and (self.node_type.min() < 0 or self.node_type.max() >= len(self.type_names)):
            raise GraphFormatError("node type id out of range")
        self.directed = {r: bool((directed or {}).get(r, False)) for r in range(len(self.relation_names))}

        edge_arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 3)
        if edge_arr.size:
            if edge_arr[:, :2].min() < 0 or edge_arr[:, :2].max() >= n:
                bad = edge_arr[(edge_arr[:, :2] < 0).any(1) | (edge_arr[:, :2] >= n).any(1)][0]
                raise GraphFormatError(f"unknown node in edge {tuple(bad[:2])}")
            if edge_arr[:, 2].min() < 0 or edge_arr[:, 2].max() >= len(self.relation_names):
                raise GraphFormatError("relation id out of range")
        self.edges = edge_arr
        self.edges.setflags(write=False)

        # per-relation forward/reverse adjacency as sorted neighbor tuples
        fwd = [[set() for _ in range(n)] for _ in self.relation_names]
        rev = [[set() for _ in range(n)] for _ in self.relation_names]
        for s, d, r in edge_arr:
            fwd[r][s].add(int(d))
            rev[r][d].add(int(s))
            if not self.directed[r]:
                fwd[r][d].add(int(s))
                rev[r][s].add(int(d))
        self._out = tuple(tuple(tuple(sorted(x)) for x in rel) for rel in fwd)
        self._in = tuple(tuple(tuple(sorted(x)) for x in rel) for rel in rev)
        pooled = [set() for _ in range(n)]
        for rel in self._out:
            for v, nb in enumerate(rel):
                pooled[v].update(nb)
        self._pooled = tuple(tuple(sorted(s)) for s in pooled)
        und = [set() for _ in range(n)]
        for s, d, _ in edge_arr:
            if s != d:
                und[s].add(int(d))
                und[d].add(int(s))
        self._skeleton = tuple(tuple(sorted(s)) for s in und)

        self.type_index = {t: np.flatnonzero(self.node_type == t) for t in range(len(self.type_names))}
        self._row_of = np.empty(n, dtype=np.int64)
        for t, idx in self.type_index.items():
            self._row_of[idx] = np.arange(len(idx))

        feats = {}
        for t in range(len(self.type_names)):
            count = len(self.type_index[t])
            m = np.zeros((count, 0)) if features is None or t not in features else np.asarray(features[t], dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != count:
                raise GraphFormatError(
                    f"feature rows for type {self.type_names[t]!r}: got {m.shape[0] if m.ndim else 0}, expected {count}")
            m = m.copy()
            m.setflags(write=False)
            feats[t] = m
        self.features = feats
        self.labels = dict(labels) if labels else None
        self.graph_label = graph_label
        self.original_ids = tuple(str(x) for x in original_ids) if original_ids is not None else tuple(str(i) for i in range(n))
        if len(self.original_ids) != n:
            raise GraphFormatError("original id list length differs from node count")

    # -- sizes -----------------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_types(self) -> int:
        return len(self.type_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def type_id(self, name: str) -> int:
        try:
            return self.type_names.index(name)
        except ValueError:
            raise KeyError(f"unknown node type {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_names.index(name)
        except ValueError:
            raise KeyError(f"unknown relation {name!r}") from None

    def nodes_of_type(self, t: int | str) -> np.ndarray:
        if isinstance(t, str):
            t = self.type_id(t)
        return self.type_index[t]

    # -- adjacency -------------------------------------------------------------
    def neighbors(self, v: int, relation: int | None = None) -> tuple[int, ...]:
        """Out-neighbors of ``v``; all relations pooled (as a set) when ``relation`` is None."""
        if relation is None:
            return self._pooled[v]
        return self._out[relation][v]

    def pooled_neighbors(self, relations: Sequence[int] | None = None) -> tuple[tuple[int, ...], ...]:
        """Per-node neighbor tuples pooled over ``relations`` (all when None); cached."""
        if relations is None:
            return self._pooled
        key = tuple(sorted(set(relations)))
        cache = self.__dict__.setdefault("_pool_cache", {})
        if key not in cache:
            cache[key] = tuple(tuple(sorted(set().union(*(self._out[r][v] for r in key))))
                               for v in range(self.num_nodes))
        return cache[key]

    def in_neighbors(self, v: int, relation: int) -> tuple[int, ...]:
        return self._in[relation][v]

    def skeleton_neighbors(self, v: int) -> tuple[int, ...]:
        """Neighbors in the type-erased, undirected, loop-free skeleton."""
        return self._skeleton[v]

    def adjacency(self, relation: int | None = None) -> np.ndarray:
        n = self.num_nodes
        a = np.zeros((n, n))
        rows = self._pooled if relation is None else self._out[relation]
        for v, nb in enumerate(rows):
            a[v, list(nb)] = 1.0
        return a

    def skeleton_adjacency(self) -> np.ndarray:
        n = self.num_nodes
        a = np.zeros((n, n))
        for v, nb in enumerate(self._skeleton):
            a[v, list(nb)] = 1.0
        return a

    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self._skeleton])

    def feature_row(self, v: int) -> np.ndarray:
        return self.features[int(self.node_type[v])][self._row_of[v]]

    def row_of(self, v: int) -> int:
        return int(self._row_of[v])

    def edge_key(self) -> list[tuple[str, str, str]]:
        ids = self.original_ids
        return sorted((ids[s], ids[d], self.relation_names[r]) for s, d, r in self.edges)

    def node_key(self) -> list[tuple[str, str]]:
        return sorted((i, self.type_names[t]) for i, t in zip(self.original_ids, self.node_type))

    def relabel(self, perm: Sequence[int]) -> "HeteroGraph":
        """Return the graph with node ``v`` renamed ``perm[v]``."""
        perm = np.asarray(perm)
        n = self.num_nodes
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        node_type = self.node_type[inv]
        feats = {}
        for t, idx in self.type_index.items():
            new_idx = np.flatnonzero(node_type == t)
            rows = [self._row_of[inv[u]] for u in new_idx]
            feats[t] = self.features[t][rows] if len(rows) else self.features[t]
        edges = [(int(perm[s]), int(perm[d]), int(r)) for s, d, r in self.edges]
        labels = {int(perm[v]): c for v, c in self.labels.items()} if self.labels else None
        ids = [self.original_ids[inv[u]] for u in range(n)]
        return HeteroGraph(node_type, edges, self.type_names, self.relation_names, feats,
                           self.directed, labels, self.graph_label, ids)


# -- file formats ------------------------------------------------------------------

def _tsv_rows(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_graph(nodes_path, edges_path, features_dir=None, labels_path=None) -> HeteroGraph:
    """Read the TSV/CSV bundle described in the README into a validated graph."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    ids: list[str] = []
    types: list[str] = []
    index: dict[str, int] = {}
    for lineno, cols in _tsv_rows(nodes_path):
        if len(cols) != 2 or not cols[0] or not cols[1]:
            raise GraphFormatError(f"{nodes_path}:{lineno}: malformed line, expected node_id<TAB>type_name")
        nid, tname = cols
        if nid in index:
            raise GraphFormatError(f"{nodes_path}:{lineno}: duplicate node id {nid!r}")
        index[nid] = len(ids)
        ids.append(nid)
        types.append(tname)
    type_names = sorted(set(types))
    node_type = [type_names.index(t) for t in types]

    raw_edges = []
    rel_dir: dict[str, bool] = {}
    for lineno, cols in _tsv_rows(edges_path):
        if len(cols) not in (3, 4) or not all(cols[:3]):
            raise GraphFormatError(f"{edges_path}:{lineno}: malformed line, expected src<TAB>dst<TAB>relation[<TAB>directed|undirected]")
        s, d, rel = cols[:3]
        mode = cols[3] if len(cols) == 4 else "undirected"
        if mode not in ("directed", "undirected"):
            raise GraphFormatError(f"{edges_path}:{lineno}: direction must be 'directed' or 'undirected', got {mode!r}")
        for x in (s, d):
            if x not in index:
                raise GraphFormatError(f"{edges_path}:{lineno}: unknown node {x!r}")
        is_dir = mode == "directed"
        if rel_dir.setdefault(rel, is_dir) != is_dir:
            raise GraphFormatError(f"{edges_path}:{lineno}: relation {rel!r} declared both directed and undirected")
        raw_edges.append((index[s], index[d], rel))
    relation_names = sorted(rel_dir) or ["link"]
    edges = [(s, d, relation_names.index(r)) for s, d, r in raw_edges]
    directed = {relation_names.index(r): v for r, v in rel_dir.items()}

    features = {}
    if features_dir is not None:
        features_dir = Path(features_dir)
        for t, tname in enumerate(type_names):
            members = [i for i, nt in enumerate(node_type) if nt == t]
            fpath = features_dir / f"{tname}.csv"
            if not fpath.exists():
                raise FileNotFoundError(f"missing features file {fpath}")
            rows: dict[int, list[float]] = {}
            width = None
            with open(fpath, encoding="utf-8", newline="") as fh:
                for lineno, rec in enumerate(csv.reader(fh), 1):
                    if not rec or rec[0].startswith("#"):
                        continue
                    if rec[0] == "node_id":
                        continue
                    nid = rec[0]
                    if nid not in index:
                        raise GraphFormatError(f"{fpath}:{lineno}: unknown node {nid!r}")
                    if node_type[index[nid]] != t:
                        raise GraphFormatError(f"{fpath}:{lineno}: node {nid!r} is not of type {tname!r}")
                    try:
                        vals = [float(x) for x in rec[1:]]
                    except ValueError:
                        raise GraphFormatError(f"{fpath}:{lineno}: malformed line, non-numeric feature") from None
                    if width is None:
                        width = len(vals)
                    elif len(vals) != width:
                        raise GraphFormatError(f"{fpath}:{lineno}: feature dimension {len(vals)} != {width}")
                    if index[nid] in rows:
                        raise GraphFormatError(f"{fpath}:{lineno}: duplicate node id {nid!r}")
                    rows[index[nid]] = vals
            missing = [ids[m] for m in members if m not in rows]
            if missing:
                raise GraphFormatError(f"{fpath}: no features for node {missing[0]!r}")
            features[t] = np.array([rows[m] for m in members], dtype=np.float64).reshape(len(members), width or 0)

    labels = None
    if labels_path is not None:
        labels = {}
        for lineno, cols in _tsv_rows(Path(labels_path)):
            if len(cols) != 2:
                raise GraphFormatError(f"{labels_path}:{lineno}: malformed line, expected node_id<TAB>class_index")
            if cols[0] not in index:
                raise GraphFormatError(f"{labels_path}:{lineno}: unknown node {cols[0]!r}")
            try:
                labels[index[cols[0]]] = int(cols[1])
            except ValueError:
                raise GraphFormatError(f"{labels_path}:{lineno}: malformed line, class index must be an integer") from None

    return HeteroGraph(node_type, edges, type_names, relation_names, features,
                       directed, labels, None, ids)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(graph: HeteroGraph, directory) -> dict[str, Path]:
    """Write ``nodes.tsv``, ``edges.tsv``, ``features/<type>.csv`` and ``labels.tsv``."""
    d = Path(directory)
    (d / "features").mkdir(parents=True, exist_ok=True)
    ids = graph.original_ids
    paths = {"nodes": d / "nodes.tsv", "edges": d / "edges.tsv"}
    with open(paths["nodes"], "w", encoding="utf-8", newline="\n") as fh:
        for v in range(graph.num_nodes):
            fh.write(f"{ids[v]}\t{graph.type_names[graph.node_type[v]]}\n")
    with open(paths["edges"], "w", encoding="utf-8", newline="\n") as fh:
        for s, t, r in graph.edges:
            mode = "directed" if graph.directed[int(r)] else "undirected"
            fh.write(f"{ids[s]}\t{ids[t]}\t{graph.relation_names[r]}\t{mode}\n")
    for t, tname in enumerate(graph.type_names):
        p = d / "features" / f"{tname}.csv"
        paths[f"features/{tname}"] = p
        m = graph.features[t]
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("node_id" + "".join(f",f{j}" for j in range(m.shape[1])) + "\n")
            for row, v in enumerate(graph.type_index[t]):
                fh.write(ids[v] + "".join("," + _fmt(x) for x in m[row]) + "\n")
    if graph.labels:
        paths["labels"] = d / "labels.tsv"
        with open(paths["labels"], "w", encoding="utf-8", newline="\n") as fh:
            for v in sorted(graph.labels):
                fh.write(f"{ids[v]}\t{graph.labels[v]}\n")
    return paths


def load_bundle(directory) -> HeteroGraph:
    d = Path(directory)
    labels = d / "labels.tsv"
    return load_graph(d / "nodes.tsv", d / "edges.tsv", d / "features",
                      labels if labels.exists() else None)


def load_corpus(manifest_path) -> list[HeteroGraph]:
    """Graph-classification corpus: JSON ``{"graphs": [{"nodes", "edges", "features", "graph_label"}]}``.

    Paths are relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    out = []
    for i, entry in enumerate(spec["graphs"]):
        for key in ("nodes", "edges", "graph_label"):
            if key not in entry:
                raise GraphFormatError(f"{manifest_path}: graph {i} lacks {key!r}")
        g = load_graph(base / entry["nodes"], base / entry["edges"],
                       base / entry["features"] if entry.get("features") else None)
        g.graph_label = int(entry["graph_label"])
        out.append(g)
    return out


def save_corpus(graphs: Sequence[HeteroGraph], directory) -> Path:
    d = Path(directory)
    entries = []
    for i, g in enumerate(graphs):
        sub = d / f"g{i:04d}"
        save_graph(g, sub)
        entries.append({"nodes": f"g{i:04d}/nodes.tsv", "edges": f"g{i:04d}/edges.tsv",
                        "features": f"g{i:04d}/features", "graph_label": int(g.graph_label)})
    path = d / "manifest.json"
    path.write_text(json.dumps({"graphs": entries}, indent=1) + "\n", encoding="utf-8")
    return path


# -- synthetic generators ------------------------------------------------------------

SYNTHETIC_KINDS = ("homophilous-sbm", "heterophilous-sbm", "hetero-academic")


def generate_synthetic(kind: str, n_nodes: int = 90, n_classes: int = 3, p_in: float = 0.3,
                       p_out: float = 0.02, feature_dim: int = 8, seed: int = 0,
                       feature_noise: float = 1.0) -> HeteroGraph:
    """Planted-partition graphs with class-correlated Gaussian features.

    Features are ``class_mean + feature_noise * N(0, I)`` where class means are
    drawn once per graph from N(0, I). ``hetero-academic`` splits nodes into
    authors (50%), papers (40%) and venues (10%, at least one per class).
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name}={p} outside [0, 1]")
    if n_classes < 2 or n_nodes < n_classes:
        raise ValueError("need n_nodes >= n_classes >= 2")
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    if kind == "homophilous-sbm" and not p_in > p_out:
        raise ValueError("homophilous-sbm needs p_in > p_out")
    if kind == "heterophilous-sbm" and not p_in < p_out:
        raise ValueError("heterophilous-sbm needs p_in < p_out")
    rng = np.random.default_rng(seed)
    if kind == "hetero-academic":
        return _academic(n_nodes, n_classes, p_in, p_out, feature_dim, feature_noise, rng)

    classes = np.arange(n_nodes) % n_classes
    upper = np.triu(rng.random((n_nodes, n_nodes)), 1)
    same = classes[:, None] == classes[None, :]
    prob = np.where(same, p_in, p_out)
    hit = (upper > 0) & (upper < prob)
    src, dst = np.nonzero(hit)
    edges = [(int(s), int(d), 0) for s, d in zip(src, dst)]
    means = rng.normal(size=(n_classes, feature_dim))
    x = means[classes] + feature_noise * rng.normal(size=(n_nodes, feature_dim))
    labels = {v: int(c) for v, c in enumerate(classes)}
    return HeteroGraph(np.zeros(n_nodes, dtype=np.int64), edges, ("node",), ("link",),
                       {0: x}, None, labels)


def _academic(n_nodes, n_classes, p_in, p_out, dim, noise, rng) -> HeteroGraph:
    n_venue = max(n_classes, n_nodes // 10)
    n_author = max(n_classes, (n_nodes - n_venue) * 5 // 9)
    n_paper = n_nodes - n_venue - n_author
    if n_paper < n_classes:
        raise ValueError("hetero-academic needs more nodes")
    ntype = np.array([0] * n_author + [1] * n_paper + [2] * n_venue)
    authors = np.arange(n_author)
    papers = n_author + np.arange(n_paper)
    venues = n_author + n_paper + np.arange(n_venue)
    ca = authors % n_classes
    cp = np.arange(n_paper) % n_classes
    cv = np.arange(n_venue) % n_classes
    edges = []
    draw = rng.random((n_author, n_paper))
    same = ca[:, None] == cp[None, :]
    hit = draw < np.where(same, p_in, p_out)
    for j in range(n_paper):
        if not hit[:, j].any():
            pool = np.flatnonzero(ca == cp[j])
            hit[rng.choice(pool), j] = True
    for i in range(n_author):
        if not hit[i].any():
            pool = np.flatnonzero(cp == ca[i])
            hit[i, rng.choice(pool)] = True
    for i, j in zip(*np.nonzero(hit)):
        edges.append((int(authors[i]), int(papers[j]), 1))
    stay = p_in / (p_in + p_out) if p_in + p_out > 0 else 1.0
    for j in range(n_paper):
        own = rng.random() < stay
        pool = np.flatnonzero((cv == cp[j]) if own else (cv != cp[j]))
        edges.append((int(papers[j]), int(venues[rng.choice(pool)]), 0))
    means = {t: rng.normal(size=(n_classes, d)) for t, d in ((0, dim), (1, dim + 2), (2, max(1, dim // 2)))}
    feats = {
        0: means[0][ca] + noise * rng.normal(size=(n_author, dim)),
        1: means[1][cp] + noise * rng.normal(size=(n_paper, dim + 2)),
        2: means[2][cv] + noise * rng.normal(size=(n_venue, max(1, dim // 2))),
    }
    labels = {int(a): int(c) for a, c in zip(authors, ca)}
    labels.update({int(p): int(c) for p, c in zip(papers, cp)})
    return HeteroGraph(ntype, edges, ("author", "paper", "venue"), ("published_in", "writes"),
                       feats, None, labels)


def default_meta_paths(graph: HeteroGraph) -> list[MetaPath]:
    """Two symmetric meta-paths anchored on the first labeled type."""
    if graph.type_names == ("author", "paper", "venue"):
        return [MetaPath(("author", "paper", "author"), ("writes", "writes"), "APA"),
                MetaPath(("author", "paper", "venue", "paper", "author"),
                         ("writes", "published_in", "published_in", "writes"), "APVPA")]
    t = graph.type_names[0]
    r = graph.relation_names[0]
    return [MetaPath((t, t), (r,), "1hop"), MetaPath((t, t, t), (r, r), "2hop")]


def from_edge_list(n: int, edges: Iterable[tuple[int, int]], features: np.ndarray | None = None,
                   labels: Mapping[int, int] | None = None, graph_label: int | None = None) -> HeteroGraph:
    """Homogeneous undirected graph (single type ``node``, relation ``link``)."""
    feats = {0: np.asarray(features, dtype=np.float64)} if features is not None else None
    return HeteroGraph(np.zeros(n, dtype=np.int64), [(int(a), int(b), 0) for a, b in edges],
                       ("node",), ("link",), feats, None, labels, graph_label)


def cycle_graph(n: int, features=None) -> HeteroGraph:
    return from_edge_list(n, [(i, (i + 1) % n) for i in range(n)], features)


def complete_graph(n: int, features=None) -> HeteroGraph:
    return from_edge_list(n, [(i, j) for i in range(n) for j in range(i + 1, n)], features)


def star_graph(leaves: int, features=None) -> HeteroGraph:
    return from_edge_list(leaves + 1, [(0, i) for i in range(1, leaves + 1)], features)


def circulant_graph(n: int, offsets: Sequence[int], features=None) -> HeteroGraph:
    pairs = set()
    for i in range(n):
        for s in offsets:
            j = (i + s) % n
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    return from_edge_list(n, sorted(pairs), features)


def regular_circulant(n: int, K: int, features=None) -> HeteroGraph:
    """K-regular circulant on n nodes: offsets 1..K//2, plus n/2 when K is odd."""
    if not 1 <= K < n:
        raise ValueError(f"need 1 <= K < n, got K={K}, n={n}")
    if K % 2 and n % 2:
        raise ValueError("odd K needs an even number of nodes")
    offsets = list(range(1, K // 2 + 1)) + ([n // 2] if K % 2 else [])
    return circulant_graph(n, offsets, features)


# -- positional encoding ----------------------------------------------------------

def lap_pe(graph: HeteroGraph, k: int) -> np.ndarray:
    """Eigenvectors of the symmetric-normalized Laplacian for the ``k`` smallest
    nonzero eigenvalues, one column each, sign-fixed so the largest-magnitude
    entry is positive. Computed on the type-erased undirected skeleton."""
    n = graph.num_nodes
    if k < 1 or k >= n:
        raise ValueError(f"lap_pe: need 1 <= k < |V| = {n}, got k={k}")
    a = graph.skeleton_adjacency()
    deg = a.sum(1)
    inv_sqrt = np.zeros(n)
    inv_sqrt[deg > 0] = deg[deg > 0] ** -0.5
    lap = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    vals, vecs = np.linalg.eigh(lap)
    ncomp, _ = connected_components(csr_matrix(a), directed=False)
    keep = np.flatnonzero(vals > 1e-8)
    if ncomp > 1:
        log.warning("lap_pe: graph has %d connected components", ncomp)
    if len(keep) < k:
        raise ValueError(f"lap_pe: only {len(keep)} nonzero eigenvalues ({ncomp} components), k={k}")
    out = vecs[:, keep[:k]].copy()
    for j in range(k):
        col = out[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            out[:, j] = -col
    return out


def num_components(graph: HeteroGraph) -> int:
    return int(connected_components(csr_matrix(graph.skeleton_adjacency()), directed=False)[0])
