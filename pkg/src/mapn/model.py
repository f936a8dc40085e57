"""MAPN forward pass.

Pipeline per graph (all stages batched over nodes):

1. ``type_transform``: one affine map per node type projects raw features to
   dimension ``d`` (plus an optional LapPE content item).
2. ``content_aggregate``: bidirectional LSTM over a node's content items,
   mean of the concatenated directions. This is layer 0.
3. ``async_aggregate`` x L: ring means at hop distance 1..K are scanned
   nearest-first by a selective SSM; hop-level and initial skips are added.
4. Per meta-path: ``intra_path_encode`` (Ĥ over the node's layer stack, then Q
   over its sampled neighbors) and ``inter_path_node_aggregate`` (attention
   over neighbors, SSM filter, Zi).
5. ``meta_path_fuse``: attention over meta-paths, SSM filter, sum fusion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import HeteroGraph, MetaPath, lap_pe
from .sampler import TypedNeighborSet, WalkConfig, ring_operators, sample_neighbor_sets
from .ssm import LearnedSsm, SsmParams, init_ssm, scan_filter_set, selective_scan


@dataclass
class ModelConfig:
    d: int = 16
    K: int = 2
    L: int = 2
    state_dim: int = 16
    k_neighbors: int = 10
    use_lap_pe: bool = False
    lap_pe_k: int = 4
    ssm_input: str = "weighted"      # or "raw"
    hop_skip: bool = True
    layer_skip: bool = True
    init_scale: float = 1.0

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be an even number >= 2")
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be >= 1")
        if self.ssm_input not in ("weighted", "raw"):
            raise ValueError("ssm_input must be 'weighted' or 'raw'")


# -- building blocks --------------------------------------------------------------

LSTM_INIT = 2.0


class LSTM:
    """Single-direction LSTM whose weights live in a ParamStore."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, hidden: int,
                 rng: np.random.Generator):
        self.store, self.prefix, self.hidden = store, prefix, hidden
        if f"{prefix}.W" not in store:
            bias = np.zeros(4 * hidden)
            bias[hidden:2 * hidden] = 1.0
            r = LSTM_INIT / np.sqrt(hidden)
            store.add(f"{prefix}.W", rng.uniform(-r, r, (d_in, 4 * hidden)), "U(-1/sqrt(h),1/sqrt(h))")
            store.add(f"{prefix}.U", rng.uniform(-r, r, (hidden, 4 * hidden)), "U(-1/sqrt(h),1/sqrt(h))")
            store.add(f"{prefix}.b", bias, "zeros, forget gate 1")

    def run(self, xs: Sequence[Tensor]) -> list[Tensor]:
        W, U, b = (self.store[f"{self.prefix}.{k}"] for k in "WUb")
        hd = self.hidden
        h = c = None
        out = []
        for x in xs:
            z = ad.matmul(x, W) + b
            if h is not None:
                z = z + ad.matmul(h, U)
            i = ad.sigmoid(z[:, :hd])
            f = ad.sigmoid(z[:, hd:2 * hd])
            g = ad.tanh(z[:, 2 * hd:3 * hd])
            o = ad.sigmoid(z[:, 3 * hd:])
            c = i * g if c is None else f * c + i * g
            h = o * ad.tanh(c)
            out.append(h)
        return out


class BiLSTMMean:
    """mean_t [fwd(x)_t ⊕ bwd(x)_t] over a (batch, T, d_in) sequence."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, hidden: int,
                 rng: np.random.Generator):
        self.fwd = LSTM(store, f"{prefix}.fwd", d_in, hidden, rng)
        self.bwd = LSTM(store, f"{prefix}.bwd", d_in, hidden, rng)

    def __call__(self, seq: Tensor) -> Tensor:
        if seq.shape[1] == 0:
            raise ValueError("empty content sequence")
        xs = [seq[:, t] for t in range(seq.shape[1])]
        f = self.fwd.run(xs)
        b = self.bwd.run(xs[::-1])[::-1]
        both = [ad.concat([fi, bi], axis=-1) for fi, bi in zip(f, b)]
        return ad.mean(ad.stack(both, axis=1), axis=1)


def type_transform(graph: HeteroGraph, store: ParamStore, d: int, extra: np.ndarray | None = None) -> Tensor:
    """Content latents (|V|, items, d): the typed feature projection, plus an
    optional second item projecting the rows of ``extra`` (e.g. LapPE)."""
    n = graph.num_nodes
    items = []
    parts = []
    for t, name in enumerate(graph.type_names):
        idx = graph.type_index[t]
        if not len(idx):
            continue
        if f"f.{name}.W" not in store:
            raise KeyError(f"no type transform registered for node type {name!r}")
        W, b = store[f"f.{name}.W"], store[f"f.{name}.b"]
        if W.shape[0] != graph.features[t].shape[1]:
            raise ad.ShapeError(f"type {name!r}: features have {graph.features[t].shape[1]} columns, "
                                f"transform expects {W.shape[0]}")
        sel = np.zeros((n, len(idx)))
        sel[idx, np.arange(len(idx))] = 1.0
        parts.append(ad.matmul(sel, ad.matmul(graph.features[t], W) + b))
    h = parts[0]
    for p in parts[1:]:
        h = h + p
    items.append(h)
    if extra is not None:
        items.append(ad.matmul(extra, store["f.pe.W"]) + store["f.pe.b"])
    return ad.stack(items, axis=1)


def content_aggregate(latents: Tensor, encoder: BiLSTMMean) -> Tensor:
    """Ĥ_a = mean_n [→enc(H_an) ⊕ ←enc(H_an)]; (B, items, d) -> (B, 2*hidden)."""
    return encoder(latents)


def async_aggregate(h_prev: Tensor, h0: Tensor, ring_mats: Sequence[np.ndarray], mask: np.ndarray,
                    ssm: SsmParams, hop_skip: bool = True, layer_skip: bool = True,
                    return_gates: bool = False):
    """One asynchronous layer.

    The hop sequence for node a is ``[ring_mean_1(a) ⊕ m_1, ..., ring_mean_K(a) ⊕ m_K]``
    where ``m_k`` is 1 when ring k is non-empty; empty rings contribute zeros.
    The update is the last scan output, plus ``h_prev`` (hop skip) and ``h0``
    (initial skip) when enabled.
    """
    n, K = mask.shape
    steps = [ad.concat([ad.matmul(m, h_prev), mask[:, k:k + 1]], axis=1) for k, m in enumerate(ring_mats)]
    seq = ad.stack(steps, axis=1)                              # (n, K, d+1)
    res = selective_scan(ssm, seq)
    out = res.outputs[:, K - 1]
    if hop_skip:
        out = out + h_prev
    if layer_skip:
        out = out + h0
    return (out, res.gates) if return_gates else out


def attention_logits(q_center: Tensor, q_nbrs: Tensor, u: Tensor) -> Tensor:
    """LeakyReLU(u . [Q(a) ⊕ Q(b)]) for (N, d) centers and (N, k, d) neighbors -> (N, k)."""
    d = q_center.shape[-1]
    left = ad.matmul(q_center, u[:d])                          # (N,)
    right = ad.matmul(q_nbrs, u[d:])                           # (N, k)
    return ad.leaky_relu(ad.reshape(left, (-1, 1)) + right)


def inter_path_node_aggregate(q_center: Tensor, q_nbrs: Tensor, nbr_ids: np.ndarray, u: Tensor,
                              ssm: SsmParams, ssm_input: str = "weighted") -> tuple[Tensor, Tensor]:
    """Batched node-level attention + SSM filter.

    Returns ``Zi`` (N, d) and attention ``alpha`` (N, k). The SSM reads the
    neighbors' alpha-scaled Q (or raw Q) in descending-alpha order, ties by
    ascending node id; ``Zi(a) = y(a) ⊙ sum_b Q(b)``.
    """
    N, k, d = q_nbrs.shape
    if k == 0:
        raise ValueError("empty neighbor list")
    alpha = ad.softmax(attention_logits(q_center, q_nbrs, u), axis=1)
    items = ad.reshape(alpha, (N, k, 1)) * q_nbrs if ssm_input == "weighted" else q_nbrs
    order = np.stack([np.lexsort((nbr_ids[i], -alpha.data[i])) for i in range(N)])
    flat = ad.reshape(items, (N * k, d))
    seq = ad.reshape(ad.take(flat, (np.arange(N)[:, None] * k + order).reshape(-1)), (N, k, d))
    y = scan_filter_set(ssm, seq)                              # (N, d)
    zi = y * ad.sum_(q_nbrs, axis=1)
    return zi, alpha


def meta_path_fuse(per_path: Sequence[Tensor], q: Tensor, ssm: SsmParams) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Semantic attention over meta-paths.

    ``w(a) = sum(LeakyReLU(q ⊙ Zi(a)))``, ``beta = softmax`` over paths, the
    beta-weighted Zi sequence (configuration order) is scanned, and
    ``Z = sum_psi y(a) ⊙ Zi_psi(a)``. Returns ``(Z, beta, Zw)``.
    """
    if not per_path:
        raise ValueError("need at least one meta-path")
    N, d = per_path[0].shape
    P = len(per_path)
    w = ad.stack([ad.sum_(ad.leaky_relu(q * zi), axis=1) for zi in per_path], axis=1)   # (N, P)
    beta = ad.softmax(w, axis=1)
    seq = ad.stack([ad.reshape(beta[:, i], (N, 1)) * zi for i, zi in enumerate(per_path)], axis=1)
    y = scan_filter_set(ssm, seq)
    zw = [y * zi for zi in per_path]
    z = zw[0]
    for t in zw[1:]:
        z = z + t
    return z, beta, zw


# -- the model --------------------------------------------------------------------

@dataclass
class PathSamples:
    anchor_nodes: np.ndarray          # node ids of the anchor type, ascending
    nbr_ids: np.ndarray               # (N, k) node ids
    nbr_rows: np.ndarray              # (N, k) rows into anchor_nodes
    sets: dict[int, TypedNeighborSet] = field(repr=False, default_factory=dict)


@dataclass
class ForwardOutput:
    z: Tensor                         # (N, d) final embeddings of anchor nodes
    layers: list[Tensor]              # H^(0..L), each (|V|, d)
    h_hat: list[Tensor]               # per path Ĥ^φ of anchor nodes
    q: list[Tensor]                   # per path Q^φ
    zi: list[Tensor]
    alpha: list[Tensor]
    beta: Tensor
    zw: list[Tensor]


class MAPN:
    """Parameters plus per-graph cached structure for one training run."""

    def __init__(self, graph: HeteroGraph, paths: Sequence[MetaPath], cfg: ModelConfig,
                 seed: int = 0, store: ParamStore | None = None):
        if not paths:
            raise ValueError("need at least one meta-path")
        anchors = {p.anchor for p in paths} | {p.terminal for p in paths}
        if len(anchors) != 1:
            raise ValueError("all meta-paths must start and end at the same node type")
        self.graph = graph
        self.paths = list(paths)
        self.cfg = cfg
        self.anchor_type = graph.type_id(paths[0].anchor)
        self.anchor_nodes = graph.nodes_of_type(self.anchor_type)
        self.row_of = {int(v): i for i, v in enumerate(self.anchor_nodes)}
        self.ring_mats, self.mask = ring_operators(graph, cfg.K)
        self.pe = lap_pe(graph, cfg.lap_pe_k) if cfg.use_lap_pe else None
        fresh = store is None
        self.store = ParamStore() if fresh else store
        self._build(np.random.default_rng(seed), fresh)
        self.samples: list[PathSamples] | None = None

    def _build(self, rng, fresh: bool):
        cfg, s, d = self.cfg, self.store, self.cfg.d
        sc, hid = cfg.init_scale, cfg.d // 2
        if fresh:
            for t, name in enumerate(self.graph.type_names):
                din = self.graph.features[t].shape[1]
                s.add(f"f.{name}.W", rng.standard_normal((din, d)) / np.sqrt(max(din, 1)), "N(0,1/d_in)")
                s.add(f"f.{name}.b", np.zeros(d), "zeros")
            if self.pe is not None:
                s.add("f.pe.W", rng.standard_normal((cfg.lap_pe_k, d)) / np.sqrt(cfg.lap_pe_k), "N(0,1/k)")
                s.add("f.pe.b", np.zeros(d), "zeros")
        self.content = BiLSTMMean(s, "content", d, hid, rng)
        self.async_ssm = []
        for l in range(cfg.L):
            if fresh:
                init_ssm(s, f"async{l}", d, cfg.state_dim, d + 1, rng, sc)
            self.async_ssm.append(LearnedSsm(s, f"async{l}"))
        self.path_self, self.path_nbr, self.path_ssm = [], [], []
        for i, p in enumerate(self.paths):
            self.path_self.append(BiLSTMMean(s, f"path{i}.self", d, hid, rng))
            self.path_nbr.append(BiLSTMMean(s, f"path{i}.nbr", d, hid, rng))
            if fresh:
                s.add(f"path{i}.u", sc * rng.standard_normal(2 * d), f"N(0,{sc}^2)")
                init_ssm(s, f"path{i}.ssm", d, cfg.state_dim, d, rng, sc, feedthrough=False)
            self.path_ssm.append(LearnedSsm(s, f"path{i}.ssm"))
        if fresh:
            s.add("fuse.q", sc * rng.standard_normal(d), f"N(0,{sc}^2)")
            init_ssm(s, "fuse.ssm", d, cfg.state_dim, d, rng, sc, feedthrough=False)
        self.fuse_ssm = LearnedSsm(s, "fuse.ssm")

    # -- sampling ---------------------------------------------------------------
    def sample(self, walk: WalkConfig, salt: int = 0, workers: int = 1) -> list[PathSamples]:
        """RWR neighbor sets for each meta-path, restricted to the path's relations."""
        out = []
        g = self.graph
        k = self.cfg.k_neighbors
        wc = WalkConfig(walk.restart_p, walk.walk_length, walk.walks_per_node, k, walk.seed)
        for i, p in enumerate(self.paths):
            rels = [g.relation_id(r) for r in p.relations]
            sets = sample_neighbor_sets(g, wc, self.anchor_nodes, rels, salt=1000 * salt + i, workers=workers)
            ids = []
            for v in self.anchor_nodes:
                lst = sets[int(v)].ids(self.anchor_type)
                # an anchor node that reaches no same-type node falls back to itself
                ids.append(lst if lst else [int(v)] * k)
            ids = np.array(ids, dtype=np.int64).reshape(len(self.anchor_nodes), k)
            rows = np.vectorize(self.row_of.__getitem__, otypes=[np.int64])(ids) if ids.size else ids
            out.append(PathSamples(self.anchor_nodes, ids, rows, sets))
        self.samples = out
        return out

    # -- forward ----------------------------------------------------------------
    def layers(self, force_gate: float | None = None) -> list[Tensor]:
        cfg = self.cfg
        lat = type_transform(self.graph, self.store, cfg.d, self.pe)
        h0 = content_aggregate(lat, self.content)
        hs = [h0]
        for l in range(cfg.L):
            hs.append(async_aggregate(hs[-1], h0, self.ring_mats, self.mask,
                                      self.async_ssm[l].params(force_gate), cfg.hop_skip, cfg.layer_skip))
        return hs

    def forward(self) -> ForwardOutput:
        if self.samples is None:
            raise RuntimeError("call sample() before forward()")
        hs = self.layers()
        stack = ad.take(ad.stack(hs, axis=1), self.anchor_nodes, axis=0)     # (N, L+1, d)
        h_hats, qs, zis, alphas = [], [], [], []
        for i, ps in enumerate(self.samples):
            h_hat, q = intra_path_encode(stack, ps.nbr_rows, self.path_self[i], self.path_nbr[i])
            q_nbrs = ad.take(q, ps.nbr_rows, axis=0)                         # (N, k, d)
            zi, alpha = inter_path_node_aggregate(q, q_nbrs, ps.nbr_ids, self.store[f"path{i}.u"],
                                                  self.path_ssm[i].params(), self.cfg.ssm_input)
            h_hats.append(h_hat)
            qs.append(q)
            zis.append(zi)
            alphas.append(alpha)
        z, beta, zw = meta_path_fuse(zis, self.store["fuse.q"], self.fuse_ssm.params())
        return ForwardOutput(z, hs, h_hats, qs, zis, alphas, beta, zw)

    def embed(self) -> np.ndarray:
        return self.forward().z.data.copy()


def intra_path_encode(layer_stack: Tensor, nbr_rows: np.ndarray, self_enc: BiLSTMMean,
                      nbr_enc: BiLSTMMean) -> tuple[Tensor, Tensor]:
    """Ĥ^φ over each node's own layer sequence, then Q^φ over its sampled
    neighbors' Ĥ^φ in neighbor-set order. ``nbr_rows`` indexes rows of ``layer_stack``."""
    h_hat = self_enc(layer_stack)                               # (N, d)
    if nbr_rows.ndim != 2 or nbr_rows.shape[1] == 0:
        raise ValueError("missing neighbor samples")
    q = nbr_enc(ad.take(h_hat, nbr_rows, axis=0))               # (N, d)
    return h_hat, q
