"""Cost, hand-written backpropagation, Adam, plateau learning-rate schedule and
two-stage training of unfolded networks with a halting branch.

Per-sample cost over the L layers of a trace::

    sum_t ||x - x_t||^2 / h_t + tau * h_t

A mini-batch loss is the mean of per-sample costs.  Gradients are exact: every
path through every score h_t is included.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .halting import HaltingParams, score_logit
from .nets import UnfoldedNet, layer_step, _as_batch
from .problems import Batch, BatchConfig, DimensionError, ParameterError, make_batch


class NumericDomainError(ArithmeticError):
    """A quantity left its mathematical domain (e.g. a non-positive score)."""


def cost(trace, scores, x_true, tau: float) -> float:
    """Cost of one sample (vectors) or mean cost of a batch (row-stacked)."""
    scores = np.asarray(scores, dtype=float)
    if np.any(scores <= 0):
        raise NumericDomainError("halting scores must be positive")
    outs = trace.layer_outputs if hasattr(trace, "layer_outputs") else trace
    if len(outs) != scores.shape[-1]:
        raise DimensionError("need one score per layer")
    X = np.asarray(x_true, dtype=float)
    err = np.stack([np.sum((np.asarray(o) - X) ** 2, axis=-1) for o in outs], axis=-1)
    per_sample = np.sum(err / scores + tau * scores, axis=-1)
    return float(np.mean(per_sample))


def optimal_score(err_sq, tau: float):
    """Minimizer of e/h + tau*h over h > 0: sqrt(e / tau)."""
    return np.sqrt(np.asarray(err_sq) / tau)


def dcost_dscore(err_sq, h, tau: float):
    return tau - np.asarray(err_sq) / np.asarray(h) ** 2


# -- forward with cache ------------------------------------------------------

def _forward_cached(net: UnfoldedNet, hp: Optional[HaltingParams], Y: np.ndarray, fixed_scores=None):
    N = Y.shape[0]
    X = np.zeros((N, net.m))
    c = {"X": [X], "active": [], "bypass": [], "R": [], "logit": [], "aux": []}
    H = np.empty((N, net.depth))
    for t in range(1, net.depth + 1):
        X, _, active, bypass = layer_step(net, t, X, Y)
        c["X"].append(X)
        c["active"].append(active)
        c["bypass"].append(bypass)
        R = Y - X @ net.A.T
        c["R"].append(R)
        if fixed_scores is not None:
            H[:, t - 1] = np.broadcast_to(np.asarray(fixed_scores, dtype=float), (N, net.depth))[:, t - 1]
        elif t == net.depth:
            H[:, t - 1] = hp.h_last
        else:
            u, aux = score_logit(hp, t, R)
            c["logit"].append(u)
            c["aux"].append(aux)
            H[:, t - 1] = expit(u)
    c["H"] = H
    return c


def _network_backward(net: UnfoldedNet, c: dict, Y: np.ndarray, g_direct: Sequence[np.ndarray]):
    """Backpropagate direct per-layer gradients dL/dx_t through the layers.

    Returns (parameter gradients, total dL/dx_t for t = 1..L).
    """
    grads = {k: np.zeros_like(v) for k, v in net.params().items()}
    G_total = [None] * net.depth
    carry = np.zeros_like(c["X"][0])
    for t in range(net.depth, 0, -1):
        G = g_direct[t - 1] + carry
        G_total[t - 1] = G
        active, bypass = c["active"][t - 1], c["bypass"][t - 1]
        X_prev, X_t = c["X"][t - 1], c["X"][t]
        dZ = G * active
        grads["lam"][t - 1] = -np.sum(np.sign(X_t) * G * (active & ~bypass))
        i = 0 if net.shared else t - 1
        B = net.B(t)
        if net.kind == "lista":
            grads[f"W{i}"] += dZ.T @ X_prev
            grads[f"B{i}"] += dZ.T @ Y
            carry = dZ @ net.W(t)
        else:
            V = Y - X_prev @ net.A.T
            grads[f"B{i}"] += dZ.T @ V
            carry = dZ - (dZ @ B) @ net.A
    return grads, G_total


def _direct_terms(net, hp, c, X_true, tau, scale, hgrads=None, halting_path=True):
    """Per-layer gradients dL/dx_t that do not pass through later layers.

    Each is the error term 2(x_t - x)/h_t plus, for t < L, the path through
    h_t's dependence on the residual y - A x_t.  Halting parameter gradients are
    accumulated into ``hgrads`` when it is given.
    """
    H = c["H"]
    E = np.stack([np.sum((X - X_true) ** 2, axis=1) for X in c["X"][1:]], axis=1)
    dH = (tau - E / H**2) * scale
    g_direct = []
    for t in range(1, net.depth + 1):
        g = 2.0 * scale * (c["X"][t] - X_true) / H[:, t - 1:t]
        if halting_path and t < net.depth:
            h = H[:, t - 1]
            du = dH[:, t - 1] * h * (1.0 - h)
            R = c["R"][t - 1]
            if hp.design == "mlp2":
                Z1, Hid = c["aux"][t - 1]
                dZ1 = du[:, None] * hp.mlp_w2[t - 1] * (Z1 > 0)
                dR = dZ1 @ hp.mlp_W1[t - 1]
                if hgrads is not None:
                    hgrads[f"w2_{t - 1}"] += Hid.T @ du
                    hgrads["b2"][t - 1] += du.sum()
                    hgrads[f"W1_{t - 1}"] += dZ1.T @ R
                    hgrads[f"b1_{t - 1}"] += dZ1.sum(axis=0)
            else:
                QR, energy = c["aux"][t - 1]
                phi = hp.phi[t - 1]
                dR = 2.0 * phi * du[:, None] * (QR @ hp.Q if hp.design == "learned_q" else R)
                if hgrads is not None:
                    hgrads["phi"][t - 1] += du @ energy
                    hgrads["psi"][t - 1] += du.sum()
                    if hp.design == "learned_q":
                        hgrads["Q"] += 2.0 * phi * (du[:, None] * QR).T @ R
            g = g - dR @ net.A
        g_direct.append(g)
    return g_direct, E


def loss_and_gradients(net: UnfoldedNet, hp: Optional[HaltingParams], X_true, Y, tau: float,
                       fixed_scores=None, with_network: bool = True):
    """Mean batch cost and exact gradients ``(loss, net_grads, halting_grads)``.

    ``fixed_scores`` replaces every h_t by a constant (no halting branch); with
    h_t = 1 and tau = 0 the cost is the plain per-layer squared error.
    """
    Y, _ = _as_batch(Y, net.n)
    X_true = np.atleast_2d(np.asarray(X_true, dtype=float))
    c = _forward_cached(net, hp, Y, fixed_scores)
    H = c["H"]
    if np.any(H <= 0):
        raise NumericDomainError("a halting score underflowed to zero")
    hgrads = {k: np.zeros_like(v) for k, v in hp.params().items()} if hp is not None else {}
    g_direct, E = _direct_terms(net, hp, c, X_true, tau, 1.0 / Y.shape[0], hgrads,
                                halting_path=fixed_scores is None)
    loss = float(np.mean(np.sum(E / H + tau * H, axis=1)))
    ngrads = _network_backward(net, c, Y, g_direct)[0] if with_network else {}
    return loss, ngrads, hgrads


def halting_gradients(net, hp, batch, tau: float) -> dict:
    X, Y = _xy(batch)
    return loss_and_gradients(net, hp, X, Y, tau, with_network=False)[2]


def network_gradients(net, hp, batch, tau: float, fixed_scores=None) -> dict:
    X, Y = _xy(batch)
    return loss_and_gradients(net, hp, X, Y, tau, fixed_scores=fixed_scores)[1]


def input_gradients(net, hp, batch, tau: float, last_layer_only: bool = False):
    """Total dL/dx_t for every layer (rows = samples, unscaled by batch size).

    ``last_layer_only`` keeps only the path from the final layer's error term,
    the approximation that treats 1/h_L as the dominating weight.
    """
    X_true, Y = _xy(batch)
    Y, _ = _as_batch(Y, net.n)
    X_true = np.atleast_2d(np.asarray(X_true, dtype=float))
    c = _forward_cached(net, hp, Y)
    g_direct, _ = _direct_terms(net, hp, c, X_true, tau, 1.0)
    if last_layer_only:
        g_direct = [np.zeros_like(g) for g in g_direct[:-1]] + [g_direct[-1]]
    return _network_backward(net, c, Y, g_direct)[1]


def _xy(batch):
    if isinstance(batch, Batch):
        return batch.X, batch.Y
    if hasattr(batch, "signal"):
        return batch.x, batch.y
    return batch


# -- optimizer and schedule --------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place to the arrays in ``params``."""
    state.step += 1
    b1c = 1.0 - beta1**state.step
    b2c = 1.0 - beta2**state.step
    for k, g in grads.items():
        p = params[k]
        if p.shape != g.shape:
            raise DimensionError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
    return params, state


@dataclass
class PlateauSchedule:
    """Multiply lr0 by the next ratio once the best loss has not improved for
    ``patience`` batches; finished after the last ratio has plateaued."""

    lr0: float
    ratios: Sequence[float] = (0.1, 0.01, 0.001)
    patience: int = 200
    best: float = np.inf
    since_best: int = 0
    index: int = -1
    finished: bool = False

    def __post_init__(self):
        r = list(self.ratios)
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")
        if any(not 0 < x < 1 for x in r) or any(a <= b for a, b in zip(r, r[1:])):
            raise ParameterError("ratios must be strictly decreasing in (0, 1)")

    @property
    def lr(self) -> float:
        return self.lr0 if self.index < 0 else self.lr0 * self.ratios[self.index]

    def update(self, batch_loss: float) -> "PlateauSchedule":
        if self.finished:
            return self
        if batch_loss < self.best:
            self.best = batch_loss
            self.since_best = 0
            return self
        self.since_best += 1
        if self.since_best >= self.patience:
            if self.index + 1 < len(self.ratios):
                self.index += 1
                self.best = np.inf
                self.since_best = 0
            else:
                self.finished = True
        return self


# -- training loops ----------------------------------------------------------

@dataclass
class TrainConfig:
    batch: BatchConfig
    tau: float = 10.0
    lr0: float = 1e-3
    stage1_lr0: Optional[float] = None
    plateau_patience: int = 200
    lr_ratios: tuple = (0.1, 0.01, 0.001)
    stage1_batches: int = 1000
    stage2_batches: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ParameterError("tau must be non-negative")
        PlateauSchedule(self.lr0, self.lr_ratios, self.plateau_patience)


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, batch: int, loss: float, lr: float, stage: str) -> None:
        self.rows.append((batch, loss, lr, stage))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", "loss", "lr", "stage"])
            for b, loss, lr, stage in self.rows:
                w.writerow([b, repr(loss), repr(lr), stage])


def _run_stage(net, hp, data: Callable[[int], Batch], start: int, n_batches: int, lr0: float,
               cfg: TrainConfig, stage: str, history: History, tau: float, fixed_scores=None):
    sched = PlateauSchedule(lr0, cfg.lr_ratios, cfg.plateau_patience)
    state = AdamState()
    params = {}
    if stage in ("fine_tune_all", "fixed_depth"):
        params.update({f"net.{k}": v for k, v in net.params().items()})
    if hp is not None and stage in ("halting_only", "fine_tune_all"):
        params.update({f"hp.{k}": v for k, v in hp.params().items()})
    want_net = any(k.startswith("net.") for k in params)
    for i in range(start, start + n_batches):
        batch = data(i)
        loss, ng, hg = loss_and_gradients(net, hp, batch.X, batch.Y, tau,
                                          fixed_scores=fixed_scores, with_network=want_net)
        if not np.isfinite(loss):
            raise NumericDomainError(f"non-finite training loss at batch {i}")
        grads = {f"net.{k}": v for k, v in ng.items() if f"net.{k}" in params}
        grads.update({f"hp.{k}": v for k, v in hg.items() if f"hp.{k}" in params})
        lr = sched.lr
        adam_step(state, params, grads, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if hp is not None:
            hp.clamp()
        np.maximum(net.thresholds, 1e-8, out=net.thresholds)
        history.append(i, loss, lr, stage)
        sched.update(loss)
        if sched.finished:
            return i + 1
    return start + n_batches


def _data_source(cfg: TrainConfig, data):
    if data is None:
        matrix = cfg.batch.matrix()
        return lambda i: make_batch(cfg.batch, i, matrix)
    if callable(data):
        return data
    items = list(data)
    return lambda i: items[i % len(items)]


def train_fixed_depth(cfg: TrainConfig, net: UnfoldedNet, data=None, n_batches: Optional[int] = None,
                      history: Optional[History] = None):
    """Train a plain unfolded network on the per-layer squared error sum_t ||x - x_t||^2."""
    history = History() if history is None else history
    n_batches = cfg.stage2_batches if n_batches is None else n_batches
    _run_stage(net, None, _data_source(cfg, data), 0, n_batches, cfg.lr0, cfg, "fixed_depth",
               history, 0.0, fixed_scores=1.0)
    return net, history


def train_two_stage(cfg: TrainConfig, net: UnfoldedNet, hp: HaltingParams, data=None):
    """Stage 1 trains only the halting parameters with the network frozen
    (thresholds included); stage 2 fine-tunes everything."""
    history = History()
    source = _data_source(cfg, data)
    lr1 = cfg.lr0 if cfg.stage1_lr0 is None else cfg.stage1_lr0
    nxt = _run_stage(net, hp, source, 0, cfg.stage1_batches, lr1, cfg, "halting_only", history, cfg.tau)
    _run_stage(net, hp, source, nxt, cfg.stage2_batches, cfg.lr0, cfg, "fine_tune_all", history, cfg.tau)
    return net, hp, history


# -- finite-difference check -------------------------------------------------

def _pattern(net, hp, Y, fixed_scores=None) -> np.ndarray:
    c = _forward_cached(net, hp, Y, fixed_scores)
    parts = c["active"] + c["bypass"]
    if hp is not None and hp.design == "mlp2" and fixed_scores is None:
        parts += [aux[0] > 0 for aux in c["aux"]]
    return np.concatenate([np.ravel(p) for p in parts])


def gradient_check(net: UnfoldedNet, hp: Optional[HaltingParams], X_true, Y, tau: float,
                   step: float = 1e-6, fixed_scores=None) -> dict:
    """Largest relative error between analytic and central-difference gradients, per block.

    A coordinate is skipped when either perturbation flips a shrinkage, support or
    ReLU decision (the loss is not differentiable there).  The error of a block is
    max |fd - g| / max(max |fd|, 1e-12) over kept coordinates.  Returns
    ``{"net.<k>" | "hp.<k>": (rel_err, kept, skipped)}``.
    """
    Y, _ = _as_batch(Y, net.n)
    _, ng, hg = loss_and_gradients(net, hp, X_true, Y, tau, fixed_scores)
    base = _pattern(net, hp, Y, fixed_scores)
    blocks = [("net", ng, net.params())]
    if hp is not None and fixed_scores is None:
        blocks.append(("hp", hg, hp.params()))
    out = {}
    for prefix, grads, params in blocks:
        for k, g in grads.items():
            p = params[k]
            diff, scale, kept, skipped = 0.0, 0.0, 0, 0
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                vals = []
                smooth = True
                for delta in (step, -step):
                    p[idx] = orig + delta
                    smooth &= bool(np.array_equal(_pattern(net, hp, Y, fixed_scores), base))
                    vals.append(loss_and_gradients(net, hp, X_true, Y, tau, fixed_scores,
                                                   with_network=False)[0])
                p[idx] = orig
                if not smooth:
                    skipped += 1
                    continue
                fd = (vals[0] - vals[1]) / (2 * step)
                diff = max(diff, abs(fd - g[idx]))
                scale = max(scale, abs(fd))
                kept += 1
            out[f"{prefix}.{k}"] = (float(diff / max(scale, 1e-12)), kept, skipped)
    return out


def gradient_check_suite(n_configs: int = 20, n: int = 8, m: int = 16, L: int = 3,
                         seed: int = 0, tau: float = 10.0, batch_size: int = 3):
    """Run :func:`gradient_check` on randomized configurations that cycle through
    both network kinds, all halting designs and shared / per-layer weights.

    Returns one row per (config, block): dicts with keys config, kind, design,
    shared, block, rel_err, kept, skipped.
    """
    from .halting import HALTING_DESIGNS, init_halting
    from .nets import NET_KINDS, init_network

    combos = [(k, d, s) for k in NET_KINDS for d in HALTING_DESIGNS for s in (True, False)]
    rows = []
    for i in range(n_configs):
        kind, design, shared = combos[i % len(combos)]
        rng = np.random.default_rng([seed, i])
        batch = make_batch(BatchConfig(n, m, 1, max(1, m // 4), batch_size=batch_size,
                                       master_seed=seed, matrix_seed=seed + i), i)
        net = init_network(kind, batch.A, L, shared=shared, threshold=0.05,
                           p_max=0.3 if kind == "lista_cpss" else None)
        for p in net.params().values():
            p += 0.05 * rng.standard_normal(p.shape)
        net.thresholds[:] = np.abs(net.thresholds) + 0.01
        hp = init_halting(design, n, L, seed=int(rng.integers(2**31)), psi=-1.0)
        for p in hp.params().values():
            p += 0.3 * rng.standard_normal(p.shape)
        hp.clamp()
        for block, (err, kept, skipped) in gradient_check(net, hp, batch.X, batch.Y, tau).items():
            rows.append(dict(config=i, kind=kind, design=design, shared=shared, block=block,
                             rel_err=err, kept=kept, skipped=skipped))
    return rows
