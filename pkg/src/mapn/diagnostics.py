"""Ollivier-Ricci curvature, Jacobian sensitivity of a reference mean network,
instance checks of the two gradient-decay bounds, and an over-smoothing metric."""

from __future__ import annotations

import csv
import itertools
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from . import autodiff as ad
from .autodiff import Tensor
from .graph import HeteroGraph, complete_graph, regular_circulant
from .sampler import bfs_distances, parallel_map, ring_operators

ACTIVATIONS = {
    "identity": (lambda x: x, 1.0),
    "tanh": (ad.tanh, 1.0),
    "sigmoid": (ad.sigmoid, 0.25),
    "leaky_relu": (ad.leaky_relu, 1.0),
}


class NonRegularError(ValueError):
    def __init__(self, histogram: dict[int, int]):
        self.histogram = histogram
        super().__init__(f"graph is not regular; degree histogram {dict(sorted(histogram.items()))}")


# -- optimal transport and curvature -------------------------------------------

def neighborhood_measure(graph: HeteroGraph, v: int, laziness: float = 0.0) -> tuple[list[int], np.ndarray]:
    nbrs = sorted(graph.skeleton_neighbors(v))
    if not nbrs:
        raise ValueError(f"node {v} has an empty neighborhood")
    if laziness:
        return [v] + nbrs, np.array([laziness] + [(1 - laziness) / len(nbrs)] * len(nbrs))
    return nbrs, np.full(len(nbrs), 1.0 / len(nbrs))


def _cost(graph: HeteroGraph, xs: Sequence[int], ys: Sequence[int]) -> np.ndarray:
    cost = np.empty((len(xs), len(ys)))
    for i, x in enumerate(xs):
        dist = bfs_distances(graph, x, 3)
        for j, y in enumerate(ys):
            cost[i, j] = dist.get(y, np.inf)
    return cost


@dataclass
class TransportSolution:
    cost: float
    plan: np.ndarray
    residual: float
    method: str


def _uniform_counts(mu: np.ndarray) -> int | None:
    m = len(mu)
    return m if np.allclose(mu, 1.0 / m, rtol=0, atol=1e-15) else None


def wasserstein1(mu: np.ndarray, nu: np.ndarray, cost: np.ndarray) -> TransportSolution:
    """Exact W1 between discrete measures.

    Two uniform measures are solved as an ``m*n`` square assignment problem
    (each source atom split into n copies, each target atom into m), which has
    an integral optimum with the same value. Other measures go to the HiGHS LP.
    """
    m, n = cost.shape
    if _uniform_counts(mu) and _uniform_counts(nu):
        big = np.repeat(np.repeat(cost, n, axis=0), m, axis=1)
        r, c = linear_sum_assignment(big)
        plan = np.zeros((m, n))
        np.add.at(plan, (r // n, c // m), 1.0 / (m * n))
        value = float(big[r, c].sum()) / (m * n)
        method = "assignment"
    else:
        a_eq = np.zeros((m + n, m * n))
        for i in range(m):
            a_eq[i, i * n:(i + 1) * n] = 1
        for j in range(n):
            a_eq[m + j, j::n] = 1
        res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=np.concatenate([mu, nu]), bounds=(0, None),
                      method="highs")
        if not res.success:
            raise RuntimeError(f"transport LP failed: {res.message}")
        plan = res.x.reshape(m, n)
        value = float(res.fun)
        method = "highs"
    residual = float(max(np.abs(plan.sum(1) - mu).max(), np.abs(plan.sum(0) - nu).max(),
                         max(0.0, -plan.min())))
    return TransportSolution(value, plan, residual, method)


def w1_dual_enumeration(mu: np.ndarray, nu: np.ndarray, cost: np.ndarray, span: int = 3) -> float:
    """Oracle: exhaustive search over integral Kantorovich potentials.

    For integer costs the dual LP has an integral optimum of the form
    ``(f, f^c)`` with ``f^c(y) = max_x f(x) - c(x, y)``. For a graph metric the
    c-concave ``f`` is 1-Lipschitz, so on a neighborhood support (diameter <= 2)
    it takes values in ``{0..span}`` after shifting its minimum to 0.
    """
    if not np.all(np.isfinite(cost)) or np.any(cost != np.round(cost)):
        raise ValueError("dual enumeration needs finite integer costs")
    f = np.array(list(itertools.product(range(span + 1), repeat=len(mu))), dtype=np.float64)
    g = (f[:, :, None] - cost[None]).max(axis=1)
    return float((f @ mu - g @ nu).max())


def w1_vertex_enumeration(mu: np.ndarray, nu: np.ndarray, cost: np.ndarray) -> float:
    """Oracle: minimum over all vertices of the transportation polytope.

    Every vertex is the unique solution supported on a spanning forest of
    ``K_{m,n}`` with ``m + n - 1`` cells, so enumerating those cell subsets,
    solving the marginal equations and keeping the non-negative solutions
    lists every vertex.
    """
    m, n = cost.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.concatenate([mu, nu])
    best = np.inf
    for subset in itertools.combinations(range(len(cells)), m + n - 1):
        a = np.zeros((m + n, m + n - 1))
        for k, idx in enumerate(subset):
            i, j = cells[idx]
            a[i, k] = 1
            a[m + j, k] = 1
        sol, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
        if rank < m + n - 1 or np.abs(a @ sol - rhs).max() > 1e-12 or sol.min() < -1e-12:
            continue
        best = min(best, float(sum(cost[cells[idx]] * x for idx, x in zip(subset, sol))))
    return best


def ollivier_ricci(graph: HeteroGraph, edge: tuple[int, int], laziness: float = 0.0,
                   return_solution: bool = False):
    """``κ(a,b) = 1 - W1(μ_a, μ_b) / d(a,b)`` with μ uniform on the skeleton
    neighborhood (mass ``laziness`` kept at the node itself when positive)."""
    a, b = int(edge[0]), int(edge[1])
    if b not in graph.skeleton_neighbors(a):
        raise ValueError(f"({a}, {b}) is not an edge")
    xa, ma = neighborhood_measure(graph, a, laziness)
    xb, mb = neighborhood_measure(graph, b, laziness)
    sol = wasserstein1(ma, mb, _cost(graph, xa, xb))
    kappa = 1.0 - sol.cost
    return (kappa, sol) if return_solution else kappa


def ollivier_ricci_oracle(graph: HeteroGraph, edge: tuple[int, int], laziness: float = 0.0,
                          method: str = "dual") -> float:
    a, b = int(edge[0]), int(edge[1])
    xa, ma = neighborhood_measure(graph, a, laziness)
    xb, mb = neighborhood_measure(graph, b, laziness)
    cost = _cost(graph, xa, xb)
    w = w1_dual_enumeration(ma, mb, cost) if method == "dual" else w1_vertex_enumeration(ma, mb, cost)
    return 1.0 - w


@dataclass
class CurvatureReport:
    edges: list[tuple[int, int]]
    kappa: list[float]
    minimum: float
    mean: float
    max_residual: float
    methods: dict[str, int]
    laziness: float
    in_range: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        return [{"src": a, "dst": b, "kappa": k} for (a, b), k in zip(self.edges, self.kappa)]


def skeleton_edges(graph: HeteroGraph) -> list[tuple[int, int]]:
    return [(a, b) for a in range(graph.num_nodes) for b in graph.skeleton_neighbors(a) if a < b]


def curvature_report(graph: HeteroGraph, laziness: float = 0.0, workers: int = 1) -> CurvatureReport:
    edges = skeleton_edges(graph)
    sols = parallel_map(lambda e: ollivier_ricci(graph, e, laziness, True), edges, workers)
    kappa = [k for k, _ in sols]
    if not kappa:
        raise ValueError("graph has no edges")
    return CurvatureReport(edges, kappa, float(min(kappa)), float(np.mean(kappa)),
                           float(max(s.residual for _, s in sols)),
                           dict(Counter(s.method for _, s in sols)), laziness,
                           bool(all(-1 < k < 2 for k in kappa)))


# -- reference mean network and Jacobians --------------------------------------

def regular_degree(graph: HeteroGraph) -> int:
    deg = np.array([len(graph.skeleton_neighbors(v)) for v in range(graph.num_nodes)])
    hist = Counter(int(x) for x in deg)
    if len(hist) != 1:
        raise NonRegularError(dict(hist))
    return int(deg[0])


@dataclass
class MeanNetwork:
    """``H^l = σ(P H^{l-1} W_l)`` with ``P`` the row-normalized adjacency of
    ``{v} ∪ (nodes within `hops` of v)``. ``weights=None`` means ``W_l = I``."""
    graph: HeteroGraph
    layers: int
    weights: list[np.ndarray] | None = None
    activation: str = "identity"
    hops: int = 1
    initial_skip: bool = False
    P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        mats, _ = ring_operators(self.graph, self.hops)
        ball = np.eye(self.graph.num_nodes)
        for m in mats:
            ball += m > 0
        self.P = ball / ball.sum(1, keepdims=True)
        if self.weights is not None and len(self.weights) < self.layers:
            raise ValueError("need one weight matrix per layer")

    @property
    def alpha(self) -> float:
        return ACTIVATIONS[self.activation][1]

    def weight_norm(self, p: float = 2.0) -> float:
        """Largest entrywise p-norm over the layer weights."""
        if self.weights is None:
            return float("nan")
        return max(float(np.linalg.norm(w.reshape(-1), ord=p)) for w in self.weights[: self.layers])

    def step(self, h: Tensor, layer: int, h0: Tensor | None = None) -> Tensor:
        z = ad.matmul(self.P, h)
        if self.weights is not None:
            z = ad.matmul(z, self.weights[layer])
        out = ACTIVATIONS[self.activation][0](z)
        if self.initial_skip and h0 is not None:
            out = out + h0
        return out

    def run(self, h0: np.ndarray | Tensor, start: int = 0, stop: int | None = None) -> list[Tensor]:
        """Layers ``start..stop`` given ``H^(start)``."""
        stop = self.layers if stop is None else stop
        h = ad._wrap(h0)
        out = [h]
        for l in range(start, stop):
            out.append(self.step(out[-1], l, h))
        return out


def full_jacobian(net: MeanNetwork, h_start: np.ndarray, l_prime: int, l: int) -> np.ndarray:
    """``J[a, i, b, j] = ∂H^l_{a,i} / ∂H^{l'}_{b,j}`` by one reverse pass per output coordinate."""
    if not 0 <= l_prime < l <= net.layers:
        raise ValueError("need 0 <= l' < l <= L")
    leaf = Tensor(np.array(h_start, dtype=np.float64), requires_grad=True)
    out = net.run(leaf, l_prime, l)[-1]
    n, d = out.shape
    jac = np.zeros((n, d, n, leaf.shape[1]))
    for a in range(n):
        for i in range(d):
            leaf.grad = None
            ad.backward(out[a, i])
            if leaf.grad is not None:
                jac[a, i] = leaf.grad
    return jac


def _pnorm(block: np.ndarray, p: float) -> float:
    return float(np.linalg.norm(block.reshape(-1), ord=p))


def jacobian_norms(net: MeanNetwork, h_start: np.ndarray, l: int, l_prime: int, b: int,
                   p: float = 2.0) -> np.ndarray:
    """Column ``s[a] = ‖∂H^l_a / ∂H^{l'}_b‖_p`` (entrywise p-norm) for every node a."""
    jac = full_jacobian(net, h_start, l_prime, l)
    return np.array([_pnorm(jac[a, :, b, :], p) for a in range(jac.shape[0])])


# -- bound checks -------------------------------------------------------------

def theorem1_constant(alpha: float, c: float, K: int) -> float:
    return alpha ** 2 * c ** 2 * K ** 2 / (K + 1) ** 2


@dataclass
class Theorem1Report:
    K: int
    l: int
    l_prime: int
    b: int
    p: float
    alpha: float
    c: float
    C: float
    lhs: float
    rhs: float
    holds: bool


def theorem1_check(net: MeanNetwork, h_start: np.ndarray, l: int, l_prime: int, b: int,
                   p: float = 2.0, c: float | None = None) -> Theorem1Report:
    """Compare ``Σ_a ‖∂H^l_a/∂H^{l'}_b‖²_p`` with ``C · Σ_a ‖∂H^{l-1}_a/∂H^{l'}_b‖²_p``.

    ``c`` defaults to the measured largest entrywise p-norm of the weights
    (``‖I‖_p`` for the parameter-free network).
    """
    K = regular_degree(net.graph)
    if net.hops != 1:
        raise ValueError("the bound concerns one-hop mean aggregation")
    d = np.asarray(h_start).shape[1]
    if c is None:
        c = _pnorm(np.eye(d), p) if net.weights is None else net.weight_norm(p)
    lhs = float(np.sum(jacobian_norms(net, h_start, l, l_prime, b, p) ** 2))
    if l - 1 == l_prime:
        rhs = _pnorm(np.eye(d), p) ** 2
    else:
        rhs = float(np.sum(jacobian_norms(net, h_start, l - 1, l_prime, b, p) ** 2))
    C = theorem1_constant(net.alpha, c, K)
    return Theorem1Report(K, l, l_prime, b, p, net.alpha, float(c), C, lhs, rhs,
                          bool(lhs <= C * rhs * (1 + 1e-12)))


@dataclass
class Theorem2Report:
    K: int
    v: int
    l: int
    p: float
    eta: float
    threshold: float
    precondition: bool
    one_hop_sum: float
    two_hop_sum: float
    holds: bool | None
    note: str


def theorem2_check(graph: HeteroGraph, v: int, l: int = 0, p: float = 2.0, d: int = 2,
                   eta: float | None = None, seed: int = 0) -> Theorem2Report:
    """Two identity-activation mean layers (W = I) from layer l to l+2; sums of
    ``‖∂H^{l+2}_a/∂H^l_v‖_p`` over the exact 1-hop and 2-hop rings of v."""
    K = regular_degree(graph)
    if eta is None:
        eta = curvature_report(graph).minimum
    threshold = 0.5 - 1.5 / K
    net = MeanNetwork(graph, l + 2, None, "identity")
    h = np.random.default_rng(seed).standard_normal((graph.num_nodes, d))
    start = net.run(h, 0, l)[-1].data if l else h
    col = jacobian_norms(net, start, l + 2, l, v, p)
    dist = bfs_distances(graph, v, 2)
    one = float(sum(col[a] for a, k in dist.items() if k == 1))
    two = float(sum(col[a] for a, k in dist.items() if k == 2))
    pre = eta >= threshold - 1e-12
    holds = bool(one >= two - 1e-12) if pre else None
    note = "" if pre else "precondition unmet"
    return Theorem2Report(K, v, l, p, float(eta), threshold, bool(pre), one, two, holds, note)


def theorem1_suite(Ks: Sequence[int] = (2, 3, 4), instances: int = 100, layers: int = 3, d: int = 16,
                   activation: str = "tanh", c: float = 1.0, p: float = 2.0, seed: int = 0) -> list[Theorem1Report]:
    """Random circulant K-regular graphs with Gaussian layer weights rescaled to
    entrywise p-norm ``c``; every ``(l, 0)`` pair with ``l = 1..layers`` is checked
    for one random source node per instance."""
    if layers < 1 or instances < 1:
        raise ValueError("need layers >= 1 and instances >= 1")
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(instances):
        K = int(Ks[i % len(Ks)])
        n = int(rng.integers(max(K + 2, 6), 13))
        if K % 2 and n % 2:
            n += 1
        graph = regular_circulant(n, K)
        ws = [rng.standard_normal((d, d)) for _ in range(layers)]
        ws = [c * w / np.linalg.norm(w.reshape(-1), ord=p) for w in ws]
        net = MeanNetwork(graph, layers, ws, activation)
        h = rng.standard_normal((n, d))
        b = int(rng.integers(n))
        reports.extend(theorem1_check(net, h, l, 0, b, p, c) for l in range(1, layers + 1))
    return reports


def theorem2_graphs(max_nodes: int = 14) -> list[tuple[str, HeteroGraph]]:
    """Vertex-transitive instances: long cycles, circulants of degree 2..6 and complete graphs."""
    out = []
    for n in range(5, max_nodes + 1):
        for K in range(2, min(7, n)):
            if K % 2 and n % 2:
                continue
            out.append((f"circulant-n{n}-K{K}", regular_circulant(n, K)))
    out += [(f"complete-{n}", complete_graph(n)) for n in range(3, 8)]
    return out


def theorem2_suite(max_nodes: int = 14, p: float = 2.0, d: int = 2, seed: int = 0) -> list[tuple[str, Theorem2Report]]:
    return [(name, theorem2_check(g, 0, 0, p, d, seed=seed)) for name, g in theorem2_graphs(max_nodes)]


# -- over-smoothing ------------------------------------------------------------

def mean_pairwise_distance(h: np.ndarray) -> float:
    h = np.asarray(h, dtype=np.float64)
    n = len(h)
    if n < 2:
        raise ValueError("need at least two nodes")
    sq = np.sum(h * h, 1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * h @ h.T, 0.0)
    iu = np.triu_indices(n, 1)
    return float(np.sqrt(d2[iu]).mean())


def oversmoothing_metric(layers: Sequence[np.ndarray | Tensor]) -> list[float]:
    """Mean pairwise Euclidean distance per layer divided by the layer-0 value
    (all zeros when layer 0 is already collapsed)."""
    raw = [mean_pairwise_distance(h.data if isinstance(h, Tensor) else h) for h in layers]
    if raw[0] == 0:
        return [0.0 if r == 0 else float("inf") for r in raw]
    return [r / raw[0] for r in raw]


def smoothing_contrast(graph: HeteroGraph, depth: int = 10, K: int = 2, d: int = 16, state_dim: int = 16,
                       seed: int = 0, features: np.ndarray | None = None) -> dict:
    """Per-layer metric for (a) parameter-free mean aggregation, (b) the async
    layer with hop and initial skips and (c) the same layer without skips. Both
    async variants share one set of randomly initialised SSM weights."""
    from .ssm import LearnedSsm, init_ssm
    from .model import async_aggregate

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((graph.num_nodes, d)) if features is None else np.asarray(features, dtype=np.float64)
    mean_net = MeanNetwork(graph, depth, None, "identity")
    plain = oversmoothing_metric(mean_net.run(x))
    store = ad.ParamStore()
    ssms = [init_ssm(store, f"s{l}", x.shape[1], state_dim, x.shape[1] + 1, rng, 1.0).params()
            for l in range(depth)]
    mats, mask = ring_operators(graph, K)
    out = {"mean": plain}
    for name, skip in (("async_skip", True), ("async_noskip", False)):
        h0 = Tensor(x)
        hs = [h0]
        for l in range(depth):
            hs.append(async_aggregate(hs[-1], h0, mats, mask, ssms[l], skip, skip))
        out[name] = oversmoothing_metric(hs)
    out["ratio_at_depth"] = out["async_skip"][-1] / max(out["async_noskip"][-1], 1e-300)
    return out


# -- report output -------------------------------------------------------------

def write_report(out_dir, name: str, payload, rows: list[dict] | None = None) -> list[Path]:
    """``<name>.json`` always; ``<name>.csv`` when tabular rows are given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{name}.json"]
    body = payload if isinstance(payload, (dict, list)) else asdict(payload)
    paths[0].write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n",
                        encoding="utf-8")
    if rows:
        paths.append(out / f"{name}.csv")
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return paths


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
