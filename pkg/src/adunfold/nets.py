"""LISTA and LISTA-CPSS unfolded networks.

Samples are rows: a batch of measurements ``Y`` is ``(batch, n)`` and each layer
output is ``(batch, m)``.  Single vectors are accepted and promoted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problems import DimensionError, ParameterError

NET_KINDS = ("lista", "lista_cpss")


@dataclass
class UnfoldedNet:
    kind: str
    depth: int
    A: np.ndarray
    weights_B: list
    thresholds: np.ndarray
    weights_W: list = field(default_factory=list)  # empty for lista_cpss (W_t = I - B_t A)
    shared: bool = True
    cpss_support_fractions: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in NET_KINDS:
            raise ParameterError(f"unknown network kind {self.kind!r}")
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        if self.thresholds.shape != (self.depth,):
            raise DimensionError("need one threshold per layer")
        if np.any(self.thresholds <= 0):
            raise ParameterError("thresholds must be positive")
        n_blocks = 1 if self.shared else self.depth
        if len(self.weights_B) != n_blocks:
            raise DimensionError(f"expected {n_blocks} B matrices, got {len(self.weights_B)}")
        if self.kind == "lista" and len(self.weights_W) != n_blocks:
            raise DimensionError(f"expected {n_blocks} W matrices, got {len(self.weights_W)}")
        if self.kind == "lista_cpss":
            if self.weights_W:
                raise ParameterError("lista_cpss stores B only; W is coupled to B")
            if self.cpss_support_fractions is None:
                self.cpss_support_fractions = np.zeros(self.depth)
            self.cpss_support_fractions = np.asarray(self.cpss_support_fractions, dtype=float)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def W(self, t: int) -> np.ndarray:
        """Recurrent matrix of layer ``t`` (1-based)."""
        if self.kind == "lista_cpss":
            return np.eye(self.m) - self.B(t) @ self.A
        return self.weights_W[0 if self.shared else t - 1]

    def B(self, t: int) -> np.ndarray:
        return self.weights_B[0 if self.shared else t - 1]

    def support_size(self, t: int) -> int:
        if self.kind != "lista_cpss":
            return 0
        return min(self.m, int(np.ceil(self.cpss_support_fractions[t - 1] * self.m - 1e-9)))

    def params(self) -> dict:
        """Trainable arrays by name (views, not copies)."""
        p = {f"B{i}": B for i, B in enumerate(self.weights_B)}
        p.update({f"W{i}": W for i, W in enumerate(self.weights_W)})
        p["lam"] = self.thresholds
        return p

    def copy(self) -> "UnfoldedNet":
        return UnfoldedNet(
            self.kind, self.depth, self.A.copy(), [B.copy() for B in self.weights_B],
            self.thresholds.copy(), [W.copy() for W in self.weights_W], self.shared,
            None if self.cpss_support_fractions is None else self.cpss_support_fractions.copy(),
        )


@dataclass
class LayerTrace:
    layer_outputs: list
    input: np.ndarray

    def __len__(self) -> int:
        return len(self.layer_outputs)


def init_network(kind: str, A: np.ndarray, L: int, shared: bool = True, seed: int = 0,
                 threshold: float = 0.1, p_max: Optional[float] = None) -> UnfoldedNet:
    """ISTA-equivalent start: B = A^T / ||A||_2^2, W = I - B A, lambda_t = ``threshold``.

    ``p_max`` is the final support-selection fraction for ``lista_cpss``; the
    schedule ramps linearly p_t = p_max * t / L.  ``seed`` is accepted for API
    symmetry; this initialization has no random part.
    """
    A = np.asarray(A, dtype=float)
    n, m = A.shape
    beta = 1.0 / np.linalg.norm(A, 2) ** 2
    count = 1 if shared else L
    Bs = [beta * A.T.copy() for _ in range(count)]
    lam = np.full(L, float(threshold))
    if kind == "lista":
        Ws = [np.eye(m) - beta * A.T @ A for _ in range(count)]
        return UnfoldedNet(kind, L, A, Bs, lam, Ws, shared)
    if kind == "lista_cpss":
        p_max = 0.0 if p_max is None else p_max
        fractions = p_max * np.arange(1, L + 1) / L
        return UnfoldedNet(kind, L, A, Bs, lam, [], shared, fractions)
    raise ParameterError(f"unknown network kind {kind!r}")


def _as_batch(Y, n):
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    if Y.shape[1] != n:
        raise DimensionError(f"measurement length {Y.shape[1]} does not match n={n}")
    return Y, single


def _support_mask(Z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest |Z| per row (ties to the lowest index)."""
    mask = np.zeros(Z.shape, dtype=bool)
    if k <= 0:
        return mask
    idx = np.argsort(-np.abs(Z), axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def layer_step(net: UnfoldedNet, t: int, X_prev: np.ndarray, Y: np.ndarray):
    """One layer; returns (X_t, Z_t, active, bypass) where ``active`` marks
    coordinates with nonzero derivative and ``bypass`` the support-selected ones."""
    B = net.B(t)
    if net.kind == "lista":
        Z = X_prev @ net.W(t).T + Y @ B.T
    else:
        Z = X_prev + (Y - X_prev @ net.A.T) @ B.T
    lam = net.thresholds[t - 1]
    bypass = _support_mask(Z, net.support_size(t))
    shrunk = np.sign(Z) * np.maximum(np.abs(Z) - lam, 0.0)
    X = np.where(bypass, Z, shrunk)
    active = bypass | (np.abs(Z) > lam)
    return X, Z, active, bypass


def forward(net: UnfoldedNet, Y, cache: Optional[dict] = None) -> LayerTrace:
    """Run all L layers from x_0 = 0.  ``cache`` (if given) is filled for backprop."""
    Y2, single = _as_batch(Y, net.n)
    X = np.zeros((Y2.shape[0], net.m))
    outs = []
    if cache is not None:
        cache.update(Z=[], active=[], bypass=[], X=[X])
    for t in range(1, net.depth + 1):
        X, Z, active, bypass = layer_step(net, t, X, Y2)
        outs.append(X)
        if cache is not None:
            cache["Z"].append(Z)
            cache["active"].append(active)
            cache["bypass"].append(bypass)
            cache["X"].append(X)
    if single:
        outs = [o[0] for o in outs]
    return LayerTrace(outs, np.asarray(Y, dtype=float))
