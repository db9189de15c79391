"""Halting-score branch and adaptive-depth inference.

Each layer t < L emits a score h_t in (0, 1) computed from the residual
r_t = y - A x_t; inference stops at the first layer whose score is <= epsilon.
The last layer's score is a fixed constant so every sample exits by layer L.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .nets import LayerTrace, UnfoldedNet, _as_batch, forward, layer_step
from .problems import DimensionError, ParameterError

HALTING_DESIGNS = ("learned_q", "no_q", "mlp2")
PHI_FLOOR = 1e-6


@dataclass
class HaltingParams:
    design: str
    depth: int
    n: int
    phi: np.ndarray
    psi: np.ndarray
    Q: Optional[np.ndarray] = None
    mlp_W1: list = field(default_factory=list)
    mlp_b1: list = field(default_factory=list)
    mlp_w2: list = field(default_factory=list)
    mlp_b2: Optional[np.ndarray] = None
    h_last: float = 0.01

    def __post_init__(self):
        if self.design not in HALTING_DESIGNS:
            raise ParameterError(f"unknown halting design {self.design!r}")
        if not 0 < self.h_last < 1:
            raise ParameterError("h_last must lie in (0, 1)")
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if self.design == "learned_q" and (self.Q is None or self.Q.shape != (self.n, self.n)):
            raise DimensionError("learned_q needs an n x n mapping Q")
        if self.design == "mlp2" and len(self.mlp_W1) != self.depth:
            raise DimensionError("mlp2 needs one hidden layer per network layer")

    def params(self) -> dict:
        """Trainable arrays by name (views).  h_last is not trainable."""
        if self.design == "mlp2":
            p = {}
            for t in range(self.depth):
                p[f"W1_{t}"] = self.mlp_W1[t]
                p[f"b1_{t}"] = self.mlp_b1[t]
                p[f"w2_{t}"] = self.mlp_w2[t]
            p["b2"] = self.mlp_b2
            return p
        p = {"phi": self.phi, "psi": self.psi}
        if self.design == "learned_q":
            p["Q"] = self.Q
        return p

    def clamp(self) -> None:
        np.maximum(self.phi, PHI_FLOOR, out=self.phi)

    def copy(self) -> "HaltingParams":
        return HaltingParams(
            self.design, self.depth, self.n, self.phi.copy(), self.psi.copy(),
            None if self.Q is None else self.Q.copy(),
            [w.copy() for w in self.mlp_W1], [b.copy() for b in self.mlp_b1],
            [w.copy() for w in self.mlp_w2],
            None if self.mlp_b2 is None else self.mlp_b2.copy(), self.h_last,
        )


def init_halting(design: str, n: int, L: int, seed: int = 0, h_last: float = 0.01,
                 phi: float = 1.0, psi: float = 0.0) -> HaltingParams:
    """Q = I, phi_t = 1, psi_t = 0; mlp2 hidden layers of width 2n with He-scaled weights."""
    phis = np.full(L, float(phi))
    psis = np.full(L, float(psi))
    if design == "learned_q":
        return HaltingParams(design, L, n, phis, psis, Q=np.eye(n), h_last=h_last)
    if design == "no_q":
        return HaltingParams(design, L, n, phis, psis, h_last=h_last)
    if design == "mlp2":
        rng = np.random.default_rng(seed)
        W1 = [rng.standard_normal((2 * n, n)) * np.sqrt(2.0 / n) for _ in range(L)]
        b1 = [np.zeros(2 * n) for _ in range(L)]
        w2 = [rng.standard_normal(2 * n) * np.sqrt(1.0 / (2 * n)) for _ in range(L)]
        return HaltingParams(design, L, n, phis, psis, mlp_W1=W1, mlp_b1=b1, mlp_w2=w2,
                             mlp_b2=np.full(L, float(psi)), h_last=h_last)
    raise ParameterError(f"unknown halting design {design!r}")


def score_logit(hp: HaltingParams, t: int, R: np.ndarray):
    """Pre-sigmoid score u_t for residual rows ``R``; also returns what backprop needs."""
    if hp.design == "mlp2":
        Z1 = R @ hp.mlp_W1[t - 1].T + hp.mlp_b1[t - 1]
        H = np.maximum(Z1, 0.0)
        return H @ hp.mlp_w2[t - 1] + hp.mlp_b2[t - 1], (Z1, H)
    QR = R @ hp.Q.T if hp.design == "learned_q" else R
    energy = np.sum(QR**2, axis=-1)
    return hp.phi[t - 1] * energy + hp.psi[t - 1], (QR, energy)


def halting_score(hp: HaltingParams, t: int, r) -> float | np.ndarray:
    """h_t for residual ``r`` (a vector or rows of residuals)."""
    if not 1 <= t <= hp.depth:
        raise ParameterError(f"layer index {t} outside [1, {hp.depth}]")
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != hp.n:
        raise DimensionError(f"residual length {r.shape[-1]} does not match n={hp.n}")
    if t == hp.depth:
        return hp.h_last if r.ndim == 1 else np.full(r.shape[0], hp.h_last)
    u, _ = score_logit(hp, t, np.atleast_2d(r))
    h = expit(u)
    return float(h[0]) if r.ndim == 1 else h


def score_trace(net: UnfoldedNet, hp: HaltingParams, y, cache: Optional[dict] = None):
    """Full L-layer forward pass plus the score of every layer.

    Returns ``(trace, scores)``; scores has shape (L,) for one sample or (batch, L).
    """
    if hp.depth != net.depth or hp.n != net.n:
        raise DimensionError("halting parameters do not match the network")
    trace = forward(net, y, cache)
    Y2, single = _as_batch(y, net.n)
    outs = [np.atleast_2d(x) for x in trace.layer_outputs]
    scores = np.column_stack([halting_score(hp, t, Y2 - X @ net.A.T) for t, X in enumerate(outs, 1)])
    return trace, scores[0] if single else scores


@dataclass
class AdaptiveOutput:
    estimate: np.ndarray
    exit_layer: int
    scores: list
    halted_early: bool


def infer_adaptive(net: UnfoldedNet, hp: HaltingParams, y, epsilon: float,
                   probe: Optional[list] = None) -> AdaptiveOutput:
    """Execute layers one at a time and stop at T = min{t : h_t <= epsilon}.

    Layers after T are never computed; ``probe`` (if given) records each executed layer.
    """
    if not 0 < epsilon < 1:
        raise ParameterError("epsilon must lie in (0, 1)")
    Y2, _ = _as_batch(y, net.n)
    if Y2.shape[0] != 1:
        raise DimensionError("infer_adaptive takes one measurement; see infer_adaptive_batch")
    X = np.zeros((1, net.m))
    scores = []
    for t in range(1, net.depth + 1):
        X = layer_step(net, t, X, Y2)[0]
        if probe is not None:
            probe.append(t)
        h = halting_score(hp, t, (Y2 - X @ net.A.T)[0])
        scores.append(h)
        if h <= epsilon:
            return AdaptiveOutput(X[0], t, scores, t < net.depth)
    return AdaptiveOutput(X[0], net.depth, scores, False)


@dataclass
class BatchAdaptiveOutput:
    estimates: np.ndarray
    exit_layers: np.ndarray
    scores: np.ndarray  # (batch, L); nan for layers that were never executed
    layers_executed: int  # total sample-layers computed


def infer_adaptive_batch(net: UnfoldedNet, hp: Optional[HaltingParams], Y, epsilon: float,
                         max_layers: Optional[int] = None) -> BatchAdaptiveOutput:
    """Per-sample early exit over a batch; only still-running rows are advanced.

    With ``hp=None`` every sample runs ``max_layers`` (default L) layers.
    """
    Y2, _ = _as_batch(Y, net.n)
    L = net.depth if max_layers is None else max_layers
    N = Y2.shape[0]
    X = np.zeros((N, net.m))
    exits = np.full(N, L)
    scores = np.full((N, net.depth), np.nan)
    running = np.arange(N)
    executed = 0
    for t in range(1, L + 1):
        Xr = layer_step(net, t, X[running], Y2[running])[0]
        X[running] = Xr
        executed += running.size
        if hp is None:
            continue
        h = halting_score(hp, t, Y2[running] - Xr @ net.A.T)
        scores[running, t - 1] = h
        stop = h <= epsilon
        exits[running[stop]] = t
        running = running[~stop]
        if running.size == 0:
            break
    return BatchAdaptiveOutput(X, exits, scores, executed)
