"""Discretized selective state-space scan.

Each of ``d`` channels carries an ``n``-dimensional diagonal state. A scalar
gate ``g_t = sigmoid(w . x_t + b)`` computed from the full input row scales
the step size, so ``g_t -> 0`` freezes the state and ignores the input.
Input rows may be wider than ``d``: extra columns only feed the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def _phi1_np(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(exp(z) - 1) / z and its derivative, with series near zero."""
    small = np.abs(z) < 1e-2
    zs = np.where(small, z, 0.0)
    val_s = 1 + zs / 2 + zs**2 / 6 + zs**3 / 24 + zs**4 / 120 + zs**5 / 720
    der_s = 0.5 + zs / 3 + zs**2 / 8 + zs**3 / 30 + zs**4 / 144 + zs**5 / 840
    zl = np.where(small, 1.0, z)
    em1 = np.expm1(zl)
    val_l = em1 / zl
    der_l = (zl * (em1 + 1) - em1) / zl**2
    return np.where(small, val_s, val_l), np.where(small, der_s, der_l)


def phi1(z) -> Tensor:
    z = ad._wrap(z)
    val, der = _phi1_np(z.data)
    return ad._make(val, "phi1", (z,), lambda g: (g * der,))


def discretize(A, B, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for a diagonal system, given the diagonal ``A``.

    ``Abar = exp(delta*A)``, ``Bbar = (exp(delta*A) - 1) / A * B``; entries with
    ``A == 0`` take the limit ``delta * B``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        if np.any(A - np.diag(np.diag(A))):
            raise ValueError("discretize: A must be diagonal")
        A = np.diag(A)
    B = np.asarray(B, dtype=np.float64)
    if B.size == A.size:
        B = B.reshape(A.shape)
    z = delta * A
    return np.exp(z), delta * _phi1_np(z)[0] * B


@dataclass
class SsmParams:
    """Tensors of one selective SSM.

    A, B, C: (d, n); D: (d,); delta_base: scalar or (d,); gate_w: (f,), f >= d;
    gate_b: scalar. ``force_gate`` pins every g_t to a constant (tests, ablations).
    """
    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor
    delta_base: Tensor
    gate_w: Tensor
    gate_b: Tensor
    force_gate: float | None = None

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def input_dim(self) -> int:
        return self.gate_w.shape[0]

    def validate(self) -> None:
        if np.any(self.A.data >= 0):
            raise ValueError("A must have strictly negative diagonal entries")
        if np.any(self.delta_base.data <= 0):
            raise ValueError("delta_base must be positive")
        if self.input_dim < self.channels:
            raise ValueError("gate input must cover the state channels")

    @classmethod
    def from_arrays(cls, A, B, C, D, delta_base, gate_w=None, gate_b=0.0,
                    force_gate=None, requires_grad=False) -> "SsmParams":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        d = A.shape[0]
        gate_w = np.zeros(d) if gate_w is None else gate_w
        mk = lambda x: Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)
        return cls(mk(A), mk(np.reshape(B, A.shape)), mk(np.reshape(C, A.shape)),
                   mk(np.reshape(D, (d,))), mk(delta_base), mk(gate_w), mk(gate_b), force_gate)

    def tensors(self) -> list[Tensor]:
        return [self.A, self.B, self.C, self.D, self.delta_base, self.gate_w, self.gate_b]


def init_ssm(store: ParamStore, prefix: str, channels: int, state_dim: int = 16,
             input_dim: int | None = None, rng: np.random.Generator | None = None,
             scale: float = 0.1, delta_base: float = 0.1, feedthrough: bool = True) -> "LearnedSsm":
    """Register a stable SSM in ``store``: A = -(1..n) per channel (held as
    log-magnitudes), delta_base = 0.1 (held as a log), random B and C, D = 0.
    With ``feedthrough=False`` D is not a parameter and stays zero."""
    rng = np.random.default_rng(0) if rng is None else rng
    input_dim = channels if input_dim is None else input_dim
    base = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))
    store.add(f"{prefix}.A_log", np.log(base), "log(1..n)")
    store.add(f"{prefix}.B", scale * rng.standard_normal((channels, state_dim)), f"N(0,{scale}^2)")
    store.add(f"{prefix}.C", scale * rng.standard_normal((channels, state_dim)), f"N(0,{scale}^2)")
    if feedthrough:
        store.add(f"{prefix}.D", np.zeros(channels), "zeros")
    store.add(f"{prefix}.delta_log", np.array(np.log(delta_base)), f"log({delta_base})")
    store.add(f"{prefix}.gate_w", scale * rng.standard_normal(input_dim), f"N(0,{scale}^2)")
    store.add(f"{prefix}.gate_b", np.array(0.0), "zero")
    return LearnedSsm(store, prefix)


class LearnedSsm:
    """View over parameters in a store; :meth:`params` re-derives the constrained tensors."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def params(self, force_gate: float | None = None) -> SsmParams:
        s, p = self.store, self.prefix
        D = s[f"{p}.D"] if f"{p}.D" in s else Tensor(np.zeros(s[f"{p}.B"].shape[0]))
        return SsmParams(A=-ad.exp(s[f"{p}.A_log"]), B=s[f"{p}.B"], C=s[f"{p}.C"], D=D,
                         delta_base=ad.exp(s[f"{p}.delta_log"]), gate_w=s[f"{p}.gate_w"],
                         gate_b=s[f"{p}.gate_b"], force_gate=force_gate)


@dataclass
class ScanResult:
    outputs: Tensor        # (batch, T, d)
    final_state: Tensor    # (batch, d, n)
    gates: np.ndarray      # (batch, T)


def _prepare(params: SsmParams, inputs) -> Tensor:
    x = ad._wrap(inputs)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError(f"selective_scan: need non-empty (batch, T, features) input, got {x.shape}")
    if x.shape[2] != params.input_dim:
        raise ad.ShapeError(f"selective_scan: input width {x.shape[2]} != gate input {params.input_dim}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("selective_scan: non-finite input")
    return x


def _gates(params: SsmParams, x: Tensor) -> Tensor:
    """(batch, T) gate values."""
    if params.force_gate is not None:
        return Tensor(np.full(x.shape[:2], float(params.force_gate)))
    # the clamp keeps float64 sigmoid strictly inside (0, 1)
    return ad.sigmoid(ad.clip(ad.matmul(x, params.gate_w) + params.gate_b, -700.0, 36.0))


def _steps(params: SsmParams, g: Tensor) -> Tensor:
    """(batch, T, d) effective step sizes."""
    shape = g.shape + (1,)
    base = params.delta_base
    if base.ndim == 0:
        base = ad.reshape(base, (1, 1, 1)) * np.ones(params.channels)
    return ad.reshape(g, shape) * base


def selective_scan(params: SsmParams, inputs, chunk: int | None = None) -> ScanResult:
    """Run the gated recurrence ``h_t = Abar_t h_{t-1} + Bbar_t x_t``, ``y_t = C h_t + D x_t``.

    ``inputs`` is (T, f) or (batch, T, f). ``chunk=None`` evaluates step by step;
    an integer evaluates blocks of that length in closed form (cumulative
    log-decays within a block, state carried between blocks).
    """
    x = _prepare(params, inputs)
    d, n = params.channels, params.state_dim
    batch, T = x.shape[0], x.shape[1]
    u = x[:, :, :d] if x.shape[2] != d else x
    g = _gates(params, x)
    delta = _steps(params, g)                                 # (b, T, d)
    A = ad.reshape(params.A, (1, 1, d, n))
    z = ad.reshape(delta, (batch, T, d, 1)) * A               # (b, T, d, n)
    bu = ad.reshape(delta * u, (batch, T, d, 1)) * phi1(z) * ad.reshape(params.B, (1, 1, d, n))
    if chunk is None:
        abar = ad.exp(z)
        h = None
        states = []
        for t in range(T):
            h = bu[:, t] if h is None else abar[:, t] * h + bu[:, t]
            states.append(h)
        hs = ad.stack(states, axis=1)                         # (b, T, d, n)
    else:
        if chunk < 1:
            raise ValueError("chunk must be >= 1")
        hs_parts = []
        h = None
        for t0 in range(0, T, chunk):
            t1 = min(T, t0 + chunk)
            c = t1 - t0
            local = ad.cumsum(delta[:, t0:t1], axis=1)        # (b, c, d)
            diff = ad.reshape(local, (batch, c, 1, d)) - ad.reshape(local, (batch, 1, c, d))
            mask = np.tril(np.ones((c, c)))[None, :, :, None]
            decay = ad.exp(ad.reshape(diff * mask, (batch, c, c, d, 1)) * ad.reshape(params.A, (1, 1, 1, d, n)))
            decay = decay * mask[..., None]                   # (b, c, c, d, n)
            part = ad.sum_(decay * ad.reshape(bu[:, t0:t1], (batch, 1, c, d, n)), axis=2)
            if h is not None:
                carry = ad.exp(ad.reshape(local, (batch, c, d, 1)) * A)
                part = part + carry * ad.reshape(h, (batch, 1, d, n))
            hs_parts.append(part)
            h = part[:, c - 1]
        hs = ad.concat(hs_parts, axis=1)
    y = ad.sum_(hs * ad.reshape(params.C, (1, 1, d, n)), axis=-1) + u * params.D
    return ScanResult(y, hs[:, T - 1], g.data.copy())


def scan_filter_set(params: SsmParams, items) -> Tensor:
    """Last scan output for each ordered item sequence: (T, f) -> (d,), (b, T, f) -> (b, d)."""
    x = ad._wrap(items)
    if x.shape[-2] == 0:
        raise ValueError("scan_filter_set: empty item list")
    res = selective_scan(params, x)
    last = res.outputs[:, x.shape[-2] - 1]
    return last[0] if x.ndim == 2 else last


def reference_scan(A, B, C, D, delta_base, gate_w, gate_b, xs, force_gate=None) -> np.ndarray:
    """Plain-numpy step-by-step recurrence on one (T, f) sequence; returns (T, d)."""
    A, B, C = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, C))
    d, n = A.shape
    xs = np.asarray(xs, dtype=np.float64)
    h = np.zeros((d, n))
    out = []
    for x in xs:
        g = force_gate if force_gate is not None else 1.0 / (1.0 + np.exp(-np.clip(x @ gate_w + gate_b, -700, 36)))
        step = g * np.broadcast_to(delta_base, (d,))
        abar = np.exp(step[:, None] * A)
        bbar = np.empty_like(A)
        for i in range(d):
            for j in range(n):
                a = A[i, j]
                bbar[i, j] = step[i] * B[i, j] if a == 0 else (abar[i, j] - 1.0) / a * B[i, j]
        h = abar * h + bbar * x[:d, None]
        out.append((C * h).sum(1) + np.asarray(D) * x[:d])
    return np.array(out)


def state_bound(params: SsmParams, input_bound: float = 1.0) -> float:
    """Upper bound on |h| for gate-open constant step and |x| <= input_bound."""
    A = params.A.data
    step = np.broadcast_to(params.delta_base.data, (params.channels,))[:, None]
    abar = np.exp(step * A)
    bbar = np.abs(step * _phi1_np(step * A)[0] * params.B.data)
    return float(input_bound * bbar.max() / (1.0 - abar.max()))
