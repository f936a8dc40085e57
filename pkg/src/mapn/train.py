"""Negative-sampling objective, AdamW, schedulers, the training loop and
downstream probes (node and graph classification)."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import HeteroGraph, MetaPath
from .model import MAPN, ModelConfig
from .sampler import WalkConfig, ring_operators, sample_triples

SCHEDULERS = ("none", "cosine-warm-restarts", "reduce-on-plateau")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    adam_eps: float = 1e-8
    max_epochs: int = 500
    scheduler: str = "none"
    K: int = 2
    L: int = 2
    d: int = 16
    seed: int = 0
    negatives_per_positive: int = 1
    window: int = 2
    use_lap_pe: bool = False
    lap_pe_k: int = 4
    state_dim: int = 16
    k_neighbors: int = 10
    restart_p: float = 0.5
    walk_length: int = 100
    walks_per_node: int = 10
    resample_every: int = 0
    ssm_input: str = "weighted"
    hop_skip: bool = True
    layer_skip: bool = True
    init_scale: float = 1.0
    supervised: bool = False
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    t0: int = 50
    t_mult: int = 2
    lr_min: float = 0.0
    plateau_factor: float = 0.5
    plateau_patience: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not (0 < self.train_fraction and 0 <= self.val_fraction
                and self.train_fraction + self.val_fraction <= 1):
            raise ValueError("need train_fraction > 0, val_fraction >= 0 and their sum <= 1")
        if self.resample_every < 0:
            raise ValueError("resample_every must be >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, K=self.K, L=self.L, state_dim=self.state_dim,
                           k_neighbors=self.k_neighbors, use_lap_pe=self.use_lap_pe,
                           lap_pe_k=self.lap_pe_k, ssm_input=self.ssm_input, hop_skip=self.hop_skip,
                           layer_skip=self.layer_skip, init_scale=self.init_scale)

    def walk_config(self) -> WalkConfig:
        return WalkConfig(self.restart_p, self.walk_length, self.walks_per_node, self.k_neighbors, self.seed)


@dataclass
class Metrics:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    best_loss: float = math.inf
    best_epoch: int = -1
    stopped_early: bool = False
    config: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)


# -- loss ----------------------------------------------------------------------

def nce_loss(z: Tensor, triples: np.ndarray, rows: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """Mean over triples of ``-log σ(Z(a)·Z(b)) - log σ(-Z(a)·Z(b'))``.

    ``z`` holds one embedding per row; ``rows`` maps node ids to rows (identity
    when omitted).
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if not len(triples):
        raise ValueError("nce_loss: empty triple set")
    idx = triples if rows is None else rows(triples)
    za = ad.take(z, idx[:, 0])
    pos = ad.sum_(za * ad.take(z, idx[:, 1]), axis=1)
    neg = ad.sum_(za * ad.take(z, idx[:, 2]), axis=1)
    return ad.mean(ad.softplus(-pos) + ad.softplus(neg))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy with integer labels."""
    logits = ad._wrap(logits)
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    lse = ad.log(ad.sum_(ad.exp(z), axis=1))
    picked = ad.take(ad.reshape(z, (-1,)), np.arange(len(labels)) * z.shape[1] + labels)
    return ad.mean(lse - picked)


# -- optimizer and schedulers ---------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: θ ← θ(1 − lr·wd), then the adaptive step."""

    def __init__(self, store: ParamStore, lr: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store, self.lr, self.betas, self.eps, self.weight_decay = store, lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self) -> None:
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.store.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {k!r}")
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.store.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(store: ParamStore, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Functional form: ``state`` is an empty dict on the first call and is updated in place."""
    opt = state.get("opt")
    if opt is None:
        opt = state["opt"] = AdamW(store, lr, betas, eps, weight_decay)
    opt.lr, opt.betas, opt.eps, opt.weight_decay = lr, betas, eps, weight_decay
    opt.step()


class CosineWarmRestarts:
    def __init__(self, lr0: float, t0: int = 50, t_mult: int = 2, lr_min: float = 0.0):
        if t0 < 1 or t_mult < 1:
            raise ValueError("t0 and t_mult must be >= 1")
        self.lr0, self.t0, self.t_mult, self.lr_min = lr0, t0, t_mult, lr_min
        self.t_cur, self.t_i = 0, t0

    def lr_at(self, t_cur: float, t_i: float) -> float:
        return self.lr_min + (self.lr0 - self.lr_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2

    @property
    def lr(self) -> float:
        return self.lr_at(self.t_cur, self.t_i)

    def step(self, loss: float | None = None) -> float:
        self.t_cur += 1
        if self.t_cur >= self.t_i:
            self.t_cur = 0
            self.t_i *= self.t_mult
        return self.lr


class ReduceOnPlateau:
    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 10, threshold: float = 0.0):
        if not 0 < factor < 1 or patience < 0:
            raise ValueError("need 0 < factor < 1 and patience >= 0")
        self.lr, self.factor, self.patience, self.threshold = lr0, factor, patience, threshold
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


class ConstantLr:
    def __init__(self, lr0: float):
        self.lr = lr0

    def step(self, loss: float | None = None) -> float:
        return self.lr


def make_scheduler(cfg: TrainConfig):
    if cfg.scheduler == "cosine-warm-restarts":
        return CosineWarmRestarts(cfg.learning_rate, cfg.t0, cfg.t_mult, cfg.lr_min)
    if cfg.scheduler == "reduce-on-plateau":
        return ReduceOnPlateau(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience)
    return ConstantLr(cfg.learning_rate)


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    store: ParamStore
    metrics: Metrics
    model: MAPN
    triples: np.ndarray


def collect_triples(model: MAPN, cfg: TrainConfig, salt: int, workers: int = 1) -> np.ndarray:
    wc = cfg.walk_config()
    parts = [sample_triples(model.graph, p, cfg.window, cfg.negatives_per_positive, wc,
                            salt=1000 * salt + i, workers=workers).triples
             for i, p in enumerate(model.paths)]
    return np.concatenate(parts, axis=0)


def train(graph: HeteroGraph, paths: Sequence[MetaPath], cfg: TrainConfig, workers: int = 1,
          on_epoch: Callable[[int, float, float, float], None] | None = None) -> TrainResult:
    """Full-batch AdamW on the negative-sampling objective.

    With ``cfg.supervised`` the objective is instead the cross-entropy of an
    affine head on the training split, the checkpoint is chosen by validation
    loss and ``metrics.results`` holds the head's test accuracy. Otherwise the
    checkpoint with the lowest training loss is restored.
    """
    model = MAPN(graph, paths, cfg.model_config(), seed=cfg.seed)
    store = model.store
    sup = _supervised_setup(model, cfg) if cfg.supervised else None
    opt = AdamW(store, cfg.learning_rate, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    sched = make_scheduler(cfg)
    metrics = Metrics(config=asdict(cfg))

    def refresh(salt):
        model.sample(cfg.walk_config(), salt=salt, workers=workers)
        if sup is not None:
            return np.zeros((0, 3), dtype=np.int64)
        tr = collect_triples(model, cfg, salt, workers)
        if not len(tr):
            raise ValueError("walk sampling produced no training triples")
        return tr

    triples = refresh(0)
    lookup = np.full(graph.num_nodes, -1, dtype=np.int64)
    lookup[model.anchor_nodes] = np.arange(len(model.anchor_nodes))
    best_state = store.state()
    for epoch in range(cfg.max_epochs):
        if cfg.resample_every and epoch and epoch % cfg.resample_every == 0:
            triples = refresh(epoch // cfg.resample_every)
        t0 = time.perf_counter()
        store.zero_grad()
        out = model.forward()
        if sup is None:
            loss = nce_loss(out.z, triples, lambda t: lookup[t])
            select = float(loss.data)
        else:
            logits = _head(store, out.z)
            loss = cross_entropy(ad.take(logits, sup.train[0]), sup.train[1])
            select = float(cross_entropy(logits.data[sup.val[0]], sup.val[1]).data) if len(sup.val[0]) else float(loss.data)
        value = float(loss.data)
        if not math.isfinite(value):
            metrics.stopped_early = True
            break
        if select < metrics.best_loss:
            metrics.best_loss, metrics.best_epoch = select, epoch
            best_state = store.state()
        ad.backward(loss)
        opt.lr = sched.lr
        try:
            opt.step()
        except NonFiniteError:
            metrics.stopped_early = True
            break
        lr_used = opt.lr
        sched.step(select)
        ms = (time.perf_counter() - t0) * 1000
        metrics.losses.append(value)
        metrics.lrs.append(lr_used)
        metrics.wall_ms.append(ms)
        if on_epoch:
            on_epoch(epoch, value, lr_used, ms)
    store.load_state(best_state)
    if sup is not None:
        pred = np.argmax(_head(store, model.forward().z).data, axis=1)
        for name, (rows, y) in (("train", sup.train), ("val", sup.val), ("test", sup.test)):
            if len(rows):
                metrics.results[f"{name}_accuracy"] = float(np.mean(pred[rows] == y))
    return TrainResult(store, metrics, model, triples)


@dataclass
class SupervisedSplit:
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]


def _head(store: ParamStore, z: Tensor) -> Tensor:
    return ad.matmul(z, store["head.W"]) + store["head.b"]


def _supervised_setup(model: MAPN, cfg: TrainConfig) -> SupervisedSplit:
    rows, y = anchor_labels(model)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    frac = (cfg.train_fraction, cfg.val_fraction, 1.0 - cfg.train_fraction - cfg.val_fraction)
    tr, va, te = _split(len(rows), frac, rng, y)
    n_cls = int(y.max()) + 1
    model.store.add("head.W", rng.standard_normal((cfg.d, n_cls)) / np.sqrt(cfg.d), "N(0,1/d)")
    model.store.add("head.b", np.zeros(n_cls), "zeros")
    pick = lambda idx: (rows[np.sort(idx)], y[np.sort(idx)])
    return SupervisedSplit(pick(tr), pick(va), pick(te))


# -- probes --------------------------------------------------------------------

def _split(n: int, fractions, rng, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    classes = np.unique(labels)
    for _ in range(10):
        perm = rng.permutation(n)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        tr, va, te = perm[:a], perm[a:b], perm[b:]
        if set(labels[tr]) == set(classes):
            return tr, va, te
    raise ValueError("could not draw a split containing every class in the training part (10 tries)")


def fit_affine_probe(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 300, lr: float = 0.05,
                     weight_decay: float = 1e-3, x_val=None, y_val=None, seed: int = 0):
    """Softmax regression trained with the diff engine. Returns (W, b); when a
    validation set is given, the checkpoint with the best validation accuracy wins."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    W = store.add("W", 0.01 * rng.standard_normal((x.shape[1], n_classes)))
    b = store.add("b", np.zeros(n_classes))
    opt = AdamW(store, lr, weight_decay=weight_decay)
    best = (-1.0, W.data.copy(), b.data.copy())
    for s in range(steps):
        store.zero_grad()
        loss = cross_entropy(ad.matmul(x, W) + b, y)
        ad.backward(loss)
        opt.step()
        if x_val is not None and len(x_val) and (s % 10 == 9 or s == steps - 1):
            acc = float(np.mean(np.argmax(x_val @ W.data + b.data, 1) == y_val))
            if acc > best[0]:
                best = (acc, W.data.copy(), b.data.copy())
    if x_val is not None and len(x_val):
        return best[1], best[2]
    return W.data.copy(), b.data.copy()


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(0)
    sd = train.std(0)
    sd[sd < 1e-12] = 1.0
    return [(a - mu) / sd for a in (train,) + others]


def eval_node_classification(embeddings: np.ndarray, labels: np.ndarray, split=(0.6, 0.2, 0.2),
                             seed: int = 0, n_splits: int = 10) -> dict:
    """Affine probe on frozen embeddings over ``n_splits`` random splits;
    returns ``{"mean", "std", "accuracies"}`` of test accuracy."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError("split fractions must be non-negative and sum to 1")
    n_cls = int(labels.max()) + 1
    accs = []
    for s in range(n_splits):
        rng = np.random.default_rng([seed, s])
        tr, va, te = _split(len(labels), split, rng, labels)
        xtr, xva, xte = _standardize(embeddings[tr], embeddings[va], embeddings[te])
        W, b = fit_affine_probe(xtr, labels[tr], n_cls, x_val=xva, y_val=labels[va], seed=s)
        accs.append(float(np.mean(np.argmax(xte @ W + b, 1) == labels[te])))
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "accuracies": accs}


def anchor_labels(model: MAPN) -> tuple[np.ndarray, np.ndarray]:
    """Rows of anchor nodes that carry a label, and the labels."""
    labels = model.graph.labels or {}
    rows = np.array([i for i, v in enumerate(model.anchor_nodes) if int(v) in labels], dtype=np.int64)
    if not len(rows):
        raise ValueError("no labeled nodes of the anchor type")
    return rows, np.array([labels[int(model.anchor_nodes[r])] for r in rows], dtype=np.int64)


# -- graph classification ------------------------------------------------------

@dataclass
class GraphClsConfig:
    K: int = 2
    L: int = 2
    folds: int = 10
    seed: int = 0


def mean_backbone(graph: HeteroGraph, K: int, L: int) -> np.ndarray:
    """Parameter-free backbone: ``h^l(v) = mean{h^{l-1}(u) : u in B(v)}`` with
    ``B(v)`` the K-hop ball including v. Node inputs are the raw features
    (type blocks zero-padded side by side) plus the ring sizes ``|N_k(v)|``.
    Returns the concatenation of all L+1 layers per node."""
    mats, mask = ring_operators(graph, K)
    n = graph.num_nodes
    sizes = np.stack([(m > 0).sum(1) for m in mats], axis=1).astype(np.float64)
    blocks = []
    for t in range(graph.num_types):
        f = np.zeros((n, graph.features[t].shape[1]))
        f[graph.type_index[t]] = graph.features[t]
        blocks.append(f)
    h = np.concatenate(blocks + [sizes], axis=1)
    ball = np.eye(n)
    for m in mats:
        ball = ball + (m > 0)
    ball = ball / ball.sum(1, keepdims=True)
    layers = [h]
    for _ in range(L):
        layers.append(ball @ layers[-1])
    return np.concatenate(layers, axis=1)


def eval_graph_classification(corpus: Sequence[HeteroGraph], cfg: GraphClsConfig | None = None) -> dict:
    """Mean readout of the mean backbone, affine probe, k-fold cross-validation."""
    cfg = cfg or GraphClsConfig()
    if not corpus:
        raise ValueError("empty corpus")
    for i, g in enumerate(corpus):
        if g.num_nodes == 0:
            raise ValueError(f"graph {i} is empty")
        if g.graph_label is None:
            raise ValueError(f"graph {i} has no graph_label")
    y = np.array([g.graph_label for g in corpus], dtype=np.int64)
    if len(np.unique(y)) == 1:
        return {"mean": 1.0, "std": 0.0, "accuracies": [1.0], "degenerate": True}
    x = np.stack([mean_backbone(g, cfg.K, cfg.L).mean(0) for g in corpus])
    rng = np.random.default_rng(cfg.seed)
    folds = np.array_split(rng.permutation(len(y)), min(cfg.folds, len(y)))
    n_cls = int(y.max()) + 1
    accs = []
    for f, te in enumerate(folds):
        tr = np.setdiff1d(np.arange(len(y)), te)
        xtr, xte = _standardize(x[tr], x[te])
        W, b = fit_affine_probe(xtr, y[tr], n_cls, seed=f)
        accs.append(float(np.mean(np.argmax(xte @ W + b, 1) == y[te])))
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "accuracies": accs, "degenerate": False}


# -- regression / multilabel metrics ------------------------------------------

def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean over columns of the area under the precision-recall step curve;
    columns without positives are skipped."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64).T).T
    targets = np.atleast_2d(np.asarray(targets).T).T
    aps = []
    for j in range(scores.shape[1]):
        t = targets[:, j].astype(bool)
        if not t.any():
            continue
        order = np.argsort(-scores[:, j], kind="stable")
        hits = t[order]
        precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        aps.append(float(precision[hits].mean()))
    if not aps:
        raise ValueError("no positive targets")
    return float(np.mean(aps))


def mean_absolute_error(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))
