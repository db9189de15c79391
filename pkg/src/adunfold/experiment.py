"""Experiment configuration, scenario presets and the generate / train / sweep / report
pipeline shared by the command line and the acceptance harness.

A config is a nested mapping (YAML on disk).  Every tunable of the library is a
field here, and all randomness derives from the single top-level ``seed``.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .analysis import (calibrate_epsilons, depth_curve, evaluate, matched_depth_comparison,
                       nmse_ratio, sweep_epsilon, to_db)
from .checkpoint import load_checkpoint, save_checkpoint
from .halting import HALTING_DESIGNS, infer_adaptive_batch, init_halting, score_trace
from .nets import NET_KINDS, UnfoldedNet, forward, init_network
from .problems import MATRIX_KINDS, Batch, BatchConfig, make_batch
from .training import History, TrainConfig, train_fixed_depth, train_two_stage

SCENARIOS = ("synthetic", "rademacher", "mtc_access", "mixed_sparsity_fig1", "clustered_sparse")

# batch indices far beyond any training run, reserved for held-out sets
VALIDATION_INDEX = 2**40
TEST_INDEX = 2**40 + 1


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violated field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass
class DataSection:
    n: int = 64
    m: int = 128
    s_min: int = 2
    s_max: int = 12
    batch_size: int = 256
    snr_db: Optional[float] = None
    matrix_kind: str = "gaussian"
    signal_kind: str = "uniform"
    cluster_width: Optional[int] = None


@dataclass
class NetworkSection:
    kind: str = "lista"
    fixed_depth: int = 6
    max_depth: int = 8
    shared: bool = True
    init_threshold: float = 0.1
    p_max: Optional[float] = None


@dataclass
class HaltingSection:
    design: str = "learned_q"
    h_last: float = 0.01
    phi0: float = 1.0
    psi0: float = 0.0


@dataclass
class TrainSection:
    tau: float = 10.0
    lr0: float = 1e-3
    stage1_lr0: Optional[float] = 1e-2
    plateau_patience: int = 200
    lr_ratios: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    fixed_batches: int = 2500
    stage1_batches: int = 1000
    stage2_batches: int = 1500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class EvalSection:
    samples: int = 4000
    val_samples: int = 2000
    epsilons: list = field(default_factory=list)  # empty: calibrate to depth_targets
    depth_targets: list = field(default_factory=lambda: [1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5, 5.5, 6])
    cohort_epsilon: float = 0.05
    cohorts: list = field(default_factory=lambda: [2, 12])
    success_threshold_db: float = -10.0
    guarantee_rate: float = 0.99
    anchor_depth: int = 4


@dataclass
class Fig1Section:
    levels: list = field(default_factory=lambda: [2, 4])
    depths: list = field(default_factory=lambda: [3, 4, 5])


@dataclass
class ExperimentConfig:
    scenario: str = "synthetic"
    seed: int = 0
    out_dir: str = "runs/experiment"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    halting: HaltingSection = field(default_factory=HaltingSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fig1: Fig1Section = field(default_factory=Fig1Section)

    # -- derived library configs ------------------------------------------

    def batch_config(self, **overrides) -> BatchConfig:
        d = self.data
        kw = dict(n=d.n, m=d.m, s_min=d.s_min, s_max=d.s_max, batch_size=d.batch_size,
                  snr_db=d.snr_db, matrix_kind=d.matrix_kind, master_seed=self.seed,
                  matrix_seed=self.seed, signal_kind=d.signal_kind, cluster_width=d.cluster_width)
        kw.update(overrides)
        return BatchConfig(**kw)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(self.batch_config(), tau=t.tau, lr0=t.lr0, stage1_lr0=t.stage1_lr0,
                           plateau_patience=t.plateau_patience, lr_ratios=tuple(t.lr_ratios),
                           stage1_batches=t.stage1_batches, stage2_batches=t.stage2_batches,
                           adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2,
                           adam_eps=t.adam_eps, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"data": DataSection, "network": NetworkSection, "halting": HaltingSection,
             "train": TrainSection, "eval": EvalSection, "fig1": Fig1Section}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; unknown keys and bad values are all reported at once."""
    problems = []
    raw = dict(raw or {})
    top = {f.name for f in fields(ExperimentConfig)}
    for k in raw:
        if k not in top:
            problems.append(f"{k}: unknown key")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.get(name) or {}
        if not isinstance(sub, dict):
            problems.append(f"{name}: expected a mapping")
            sub = {}
        known = {f.name for f in fields(cls)}
        defaults = cls()
        for k, v in sub.items():
            if k not in known:
                problems.append(f"{name}.{k}: unknown key")
            elif not _type_ok(getattr(defaults, k), v, k):
                problems.append(f"{name}.{k}: wrong type {type(v).__name__}")
        sections[name] = cls(**{k: v for k, v in sub.items() if k in known})
    for k in ("scenario", "seed", "out_dir"):
        if k in raw and not _type_ok(getattr(ExperimentConfig(), k), raw[k], k):
            problems.append(f"{k}: wrong type {type(raw[k]).__name__}")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**{k: v for k, v in raw.items() if k in top and k not in _SECTIONS},
                           **sections)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


_OPTIONAL_FLOAT = {"snr_db", "p_max", "stage1_lr0"}
_OPTIONAL_INT = {"cluster_width"}


def _type_ok(default, v, name) -> bool:
    if v is None:
        return name in _OPTIONAL_FLOAT or name in _OPTIONAL_INT
    if name in _OPTIONAL_FLOAT or isinstance(default, float):
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if name in _OPTIONAL_INT or isinstance(default, int) and not isinstance(default, bool):
        return isinstance(v, int) and not isinstance(v, bool)
    if isinstance(default, bool):
        return isinstance(v, bool)
    if isinstance(default, str):
        return isinstance(v, str)
    if isinstance(default, list):
        return isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                           for x in v)
    return True


def validate(cfg: ExperimentConfig) -> list:
    p = []

    def need(ok, msg):
        if not ok:
            p.append(msg)

    d, net, h, t, e = cfg.data, cfg.network, cfg.halting, cfg.train, cfg.eval
    need(cfg.scenario in SCENARIOS, f"scenario: must be one of {SCENARIOS}")
    need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed: must be a non-negative integer")
    need(d.n >= 1 and d.m >= 1, "data.n, data.m: must be positive")
    need(1 <= d.s_min <= d.s_max <= d.m, "data.s_min, data.s_max: need 1 <= s_min <= s_max <= m")
    need(d.batch_size >= 1, "data.batch_size: must be >= 1")
    need(d.matrix_kind in MATRIX_KINDS, f"data.matrix_kind: must be one of {MATRIX_KINDS}")
    need(d.signal_kind in ("uniform", "clustered"), "data.signal_kind: uniform or clustered")
    need(net.kind in NET_KINDS, f"network.kind: must be one of {NET_KINDS}")
    need(1 <= net.fixed_depth <= net.max_depth, "network.fixed_depth: need 1 <= fixed_depth <= max_depth")
    need(net.init_threshold > 0, "network.init_threshold: must be positive")
    need(net.p_max is None or 0 <= net.p_max <= 1, "network.p_max: must lie in [0, 1]")
    need(h.design in HALTING_DESIGNS, f"halting.design: must be one of {HALTING_DESIGNS}")
    need(0 < h.h_last < 1, "halting.h_last: must lie in (0, 1)")
    need(t.tau >= 0, "train.tau: must be non-negative")
    need(t.lr0 > 0 and (t.stage1_lr0 is None or t.stage1_lr0 > 0), "train.lr0: must be positive")
    need(len(t.lr_ratios) > 0 and all(0 < r < 1 for r in t.lr_ratios), "train.lr_ratios: each in (0, 1)")
    need(t.plateau_patience >= 1, "train.plateau_patience: must be >= 1")
    for k in ("fixed_batches", "stage1_batches", "stage2_batches"):
        need(getattr(t, k) >= 0, f"train.{k}: must be >= 0")
    need(e.samples >= 1 and e.val_samples >= 1, "eval.samples, eval.val_samples: must be >= 1")
    need(all(0 < x < 1 for x in e.epsilons), "eval.epsilons: each in (0, 1)")
    need(len(e.epsilons) > 0 or len(e.depth_targets) > 0, "eval.depth_targets: needed when epsilons is empty")
    need(0 < e.cohort_epsilon < 1, "eval.cohort_epsilon: must lie in (0, 1)")
    if cfg.scenario == "mtc_access":
        need(d.matrix_kind == "qpsk_stacked", "data.matrix_kind: mtc_access requires qpsk_stacked")
    if cfg.scenario == "clustered_sparse":
        need(d.signal_kind == "clustered", "data.signal_kind: clustered_sparse requires clustered")
    if cfg.scenario == "mixed_sparsity_fig1":
        f = cfg.fig1
        need(len(f.levels) == 2 and f.levels[0] < f.levels[1], "fig1.levels: two increasing sparsity levels")
        need(len(f.depths) > 0 and min(f.depths) >= 3, "fig1.depths: each depth must be >= 3")
    return p


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# -- presets -------------------------------------------------------------------

_FULL_TRAIN = dict(lr0=1e-4, stage1_lr0=None, plateau_patience=5000, fixed_batches=300_000,
                    stage1_batches=300_000, stage2_batches=300_000)

_PRESETS = {
    "synthetic": {
        "full": dict(data=dict(n=250, m=500, s_min=10, s_max=100, batch_size=1000),
                      network=dict(fixed_depth=14, max_depth=16), train=_FULL_TRAIN,
                      eval=dict(samples=10_000, cohorts=[10, 100],
                                depth_targets=list(range(4, 15)))),
        "desk": {},
    },
    "rademacher": {
        "full": dict(data=dict(n=250, m=500, s_min=10, s_max=100, batch_size=1000,
                                matrix_kind="rademacher"),
                      network=dict(fixed_depth=14, max_depth=16), train=_FULL_TRAIN,
                      eval=dict(samples=10_000, cohorts=[10, 100],
                                depth_targets=list(range(4, 15)))),
        "desk": dict(data=dict(matrix_kind="rademacher")),
    },
    "mtc_access": {
        "full": dict(data=dict(n=64, m=256, s_min=1, s_max=20, batch_size=1024, snr_db=20.0,
                                matrix_kind="qpsk_stacked"),
                      network=dict(fixed_depth=18, max_depth=20), train=dict(_FULL_TRAIN, tau=100.0),
                      eval=dict(samples=10_000, cohorts=[1, 20],
                                depth_targets=list(range(4, 19)))),
        "desk": dict(data=dict(n=32, m=64, s_min=1, s_max=8, snr_db=20.0, matrix_kind="qpsk_stacked"),
                     train=dict(tau=100.0), eval=dict(cohorts=[1, 8])),
    },
    "mixed_sparsity_fig1": {
        "full": dict(data=dict(n=40, m=200, s_min=2, s_max=4, batch_size=1000),
                      train=_FULL_TRAIN, fig1=dict(depths=list(range(3, 11)))),
        "desk": dict(data=dict(n=40, m=200, s_min=2, s_max=4), train=dict(fixed_batches=1500)),
    },
    "clustered_sparse": {
        "full": dict(data=dict(n=64, m=256, s_min=1, s_max=20, batch_size=1000, snr_db=20.0,
                                signal_kind="clustered"),
                      network=dict(fixed_depth=4, max_depth=6), train=_FULL_TRAIN,
                      eval=dict(samples=10_000, cohorts=[1, 20], depth_targets=[1.5, 2, 2.5, 3, 3.5, 4])),
        "desk": dict(data=dict(n=64, m=128, s_min=1, s_max=4, snr_db=20.0, signal_kind="clustered"),
                     network=dict(fixed_depth=4, max_depth=6),
                     eval=dict(cohorts=[1, 4], depth_targets=[1.5, 2, 2.5, 3, 3.5, 4],
                               anchor_depth=2)),
    },
}


def preset(scenario: str, scale: str = "desk", **top) -> ExperimentConfig:
    """Scenario defaults at full scale or at desk scale (minutes on a laptop)."""
    if scenario not in _PRESETS:
        raise ConfigError([f"scenario: must be one of {SCENARIOS}"])
    if scale not in ("desk", "full"):
        raise ConfigError(["scale: desk or full"])
    raw = _merge(ExperimentConfig(scenario=scenario).to_dict(), _PRESETS[scenario][scale])
    raw.update(top)
    return config_from_dict(raw)


# -- output helpers --------------------------------------------------------------

def provenance(cfg: ExperimentConfig) -> dict:
    """The resolved config minus ``out_dir``, which never affects results."""
    d = cfg.to_dict()
    d.pop("out_dir")
    return d


def provenance_lines(cfg: ExperimentConfig) -> list:
    return [f"# seed: {cfg.seed}",
            "# config: " + json.dumps(provenance(cfg), sort_keys=True, separators=(",", ":"))]


def write_csv(path, header, rows, cfg: Optional[ExperimentConfig] = None) -> Path:
    """CSV with optional ``#`` provenance lines (read with ``comment='#'``)."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            if cfg is not None:
                fh.write("\n".join(provenance_lines(cfg)) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def write_json(path, obj, cfg: Optional[ExperimentConfig] = None) -> Path:
    path = Path(path)
    payload = dict(obj)
    if cfg is not None:
        payload = {"seed": cfg.seed, "config": provenance(cfg), **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


@contextmanager
def output_lock(out_dir):
    """At most one writer per output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{lock}: output directory is locked by another run") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


# -- pipeline pieces -------------------------------------------------------------

def held_out(cfg: ExperimentConfig, which: str) -> Batch:
    size = cfg.eval.samples if which == "test" else cfg.eval.val_samples
    index = TEST_INDEX if which == "test" else VALIDATION_INDEX
    return make_batch(cfg.batch_config(batch_size=size), index)


def support_fraction(cfg: ExperimentConfig) -> float:
    """Final CPSS support fraction: configured, or s_max / m."""
    if cfg.network.p_max is not None:
        return cfg.network.p_max
    return min(1.0, cfg.data.s_max / cfg.data.m)


def build_fixed(cfg: ExperimentConfig, A: np.ndarray) -> UnfoldedNet:
    n = cfg.network
    return init_network(n.kind, A, n.fixed_depth, shared=n.shared, seed=cfg.seed,
                        threshold=n.init_threshold, p_max=support_fraction(cfg))


def extend_network(fixed: UnfoldedNet, depth: int, p_max: Optional[float] = None) -> UnfoldedNet:
    """Deeper copy of a trained network; new layers repeat the last trained layer."""
    extra = depth - fixed.depth
    if extra < 0:
        raise ValueError("target depth is shallower than the trained network")
    W = [w.copy() for w in fixed.weights_W]
    B = [b.copy() for b in fixed.weights_B]
    if not fixed.shared:
        W += [W[-1].copy() for _ in range(extra)] if W else []
        B += [B[-1].copy() for _ in range(extra)]
    lam = np.concatenate([fixed.thresholds, np.repeat(fixed.thresholds[-1], extra)])
    fractions = None
    if fixed.kind == "lista_cpss":
        p_max = 0.0 if p_max is None else p_max
        fractions = p_max * np.arange(1, depth + 1) / depth
    return UnfoldedNet(fixed.kind, depth, fixed.A.copy(), B, lam, W, fixed.shared, fractions)


def train_pair(cfg: ExperimentConfig, log=None):
    """Fixed-depth baseline, then the deeper adaptive network initialized from it.

    Returns ``(fixed, adaptive, hp, fixed_history, adaptive_history)``.
    """
    tc = cfg.train_config()
    A = tc.batch.matrix().entries
    fixed = build_fixed(cfg, A)
    _say(log, f"training fixed-depth {cfg.network.kind} (L={cfg.network.fixed_depth})")
    fixed, fh = train_fixed_depth(tc, fixed, n_batches=cfg.train.fixed_batches)
    adaptive = extend_network(fixed, cfg.network.max_depth, support_fraction(cfg))
    h = cfg.halting
    hp = init_halting(h.design, adaptive.n, adaptive.depth, seed=cfg.seed, h_last=h.h_last,
                      phi=h.phi0, psi=h.psi0)
    _say(log, f"two-stage training of the adaptive network (L_max={cfg.network.max_depth})")
    adaptive, hp, ah = train_two_stage(tc, adaptive, hp)
    return fixed, adaptive, hp, fh, ah


def _say(log, msg):
    if log is not None:
        log(msg)


@dataclass
class Comparison:
    depth_rows: list
    sweep_rows: list
    matched_rows: list
    epsilons: list

    @property
    def win_fraction(self) -> float:
        comp = [r for r in self.matched_rows if r.comparable]
        return float(np.mean([r.adaptive_wins for r in comp])) if comp else float("nan")


def compare_fixed_vs_adaptive(cfg: ExperimentConfig, fixed: UnfoldedNet, adaptive: UnfoldedNet, hp,
                              test: Optional[Batch] = None, val: Optional[Batch] = None) -> Comparison:
    """Fixed network truncated at every depth against the adaptive network's epsilon sweep.

    Without an explicit epsilon list, epsilons are calibrated on the validation set so
    the average executed depth hits each of ``eval.depth_targets``.
    """
    test = held_out(cfg, "test") if test is None else test
    eps = list(cfg.eval.epsilons)
    if not eps:
        val = held_out(cfg, "val") if val is None else val
        eps = calibrate_epsilons(adaptive, hp, val, cfg.eval.depth_targets, iters=30)
    depth_rows = depth_curve(fixed, test, cfg.eval.success_threshold_db)
    sweep = sweep_epsilon(adaptive, hp, test, eps, cfg.eval.success_threshold_db)
    return Comparison(depth_rows, sweep, matched_depth_comparison(depth_rows, sweep), eps)


def write_comparison(cmp: Comparison, path, cfg: ExperimentConfig) -> Path:
    rows = [(r.epsilon, r.avg_layers_adaptive, r.nmse_adaptive, r.nmse_fixed, r.comparable,
             r.adaptive_wins) for r in cmp.matched_rows]
    return write_csv(path, ["epsilon", "avg_layers_adaptive", "nmse_db_adaptive",
                            "nmse_db_fixed_interp", "comparable", "adaptive_wins"], rows, cfg)


@dataclass
class BehaviorReport:
    mean_scores: list  # mean h_t per layer on the test set
    cohort_exit: dict  # sparsity -> average exit layer at cohort_epsilon
    epsilon_zero_exact: bool


def cohort_levels(cfg: ExperimentConfig, test: Batch):
    """The configured easy / hard sparsity levels, or the extremes present in the test
    set when a configured level never occurs (e.g. clustered signals)."""
    present = set(int(s) for s in np.unique(test.sparsity))
    lo, hi = int(min(cfg.eval.cohorts)), int(max(cfg.eval.cohorts))
    if lo not in present:
        lo = min(present)
    if hi not in present:
        hi = max(present)
    return lo, hi


def behavior_report(cfg: ExperimentConfig, adaptive, hp, test: Batch) -> BehaviorReport:
    _, scores = score_trace(adaptive, hp, test.Y)
    rep = evaluate(adaptive, hp, test, cfg.eval.cohort_epsilon)
    cohorts = {s: rep.per_sparsity[s][1] for s in cohort_levels(cfg, test)}
    full = forward(adaptive, test.Y).layer_outputs[-1]
    tiny = infer_adaptive_batch(adaptive, hp, test.Y, 1e-300)
    exact = np.array_equal(tiny.estimates, full) and np.all(tiny.exit_layers == adaptive.depth)
    return BehaviorReport([float(v) for v in scores.mean(axis=0)], cohorts, bool(exact))


def _first_depth(depths, rates, target):
    for d, r in zip(depths, rates):
        if r >= target:
            return float(d)
    return None


def anchor_table(cfg: ExperimentConfig, fixed, adaptive, hp, cmp: Comparison, test: Batch):
    """Desk-scale analogues of the reference numbers (not pass/fail).

    Rows: (quantity, reference, desk_value, note).
    """
    e = cfg.eval
    lo, hi = cohort_levels(cfg, test)
    k = min(e.anchor_depth, fixed.depth)
    Xk = forward(fixed, test.Y).layer_outputs[k - 1]
    ratio = nmse_ratio(Xk, test.X)

    def cohort_db(r, s):
        sel = test.sparsity == s
        return float(to_db(np.mean(r[sel]))) if np.any(sel) else float("nan")

    gap_fixed = cohort_db(ratio, hi) - cohort_db(ratio, lo)
    # adaptive sweep point whose average depth is closest to k
    best = min(cmp.sweep_rows, key=lambda r: abs(r.avg_layers - k))
    rep = evaluate(adaptive, hp, test, best.epsilon)
    ps = rep.per_sparsity
    gap_adapt = (ps[hi][0] - ps[lo][0]) if lo in ps and hi in ps else float("nan")
    cond = "noiseless" if cfg.data.snr_db is None else f"SNR {cfg.data.snr_db:g} dB"
    fixed_need = _first_depth([r.layers for r in cmp.depth_rows],
                              [r.success_rate for r in cmp.depth_rows], e.guarantee_rate)
    rows_sorted = sorted(cmp.sweep_rows, key=lambda r: r.avg_layers)
    adapt_need = _first_depth([r.avg_layers for r in rows_sorted],
                              [r.success_rate for r in rows_sorted], e.guarantee_rate)
    ref_layers = ("5 (adaptive) vs 9 (fixed)" if cfg.data.snr_db is None
                    else "7 (adaptive) vs 12 (fixed)")
    na = "not reached"
    return [
        ("nmse_gap_db_fixed", "14.2", gap_fixed,
         f"NMSE(s={hi}) - NMSE(s={lo}), fixed network at {k} layers"),
        ("nmse_gap_db_adaptive", "3.4", gap_adapt,
         f"same gap, adaptive network at average depth {best.avg_layers:.2f}"),
        ("layers_for_success_fixed", ref_layers, na if fixed_need is None else fixed_need,
         f"{cond}; first depth with success rate >= {e.guarantee_rate}"),
        ("layers_for_success_adaptive", ref_layers, na if adapt_need is None else adapt_need,
         f"{cond}; first average depth with success rate >= {e.guarantee_rate}"),
    ]


# -- orchestration ---------------------------------------------------------------

def plan(cfg: ExperimentConfig) -> list:
    """Human-readable execution plan (what a dry run prints)."""
    d, n, t = cfg.data, cfg.network, cfg.train
    if cfg.scenario == "mixed_sparsity_fig1":
        lo, hi = cfg.fig1.levels
        return [f"scenario {cfg.scenario}, seed {cfg.seed}, output {cfg.out_dir}",
                f"data: A {d.n}x{d.m} ({d.matrix_kind}), sparsity levels {lo} and {hi}, batches of {d.batch_size}",
                f"for each L in {cfg.fig1.depths}: train one {n.kind} of depth L on mixed data, "
                f"depth L-2 on s={lo}, depth L+2 on s={hi} ({t.fixed_batches} batches each)",
                f"evaluate {cfg.eval.samples} held-out samples; write fig1.csv"]
    shape = (f"A {d.n}x{d.m} complex, stacked {2 * d.n}x{2 * d.m}" if d.matrix_kind == "qpsk_stacked"
             else f"A {d.n}x{d.m}")
    eps = (f"epsilons {cfg.eval.epsilons}" if cfg.eval.epsilons
           else f"epsilons calibrated on {cfg.eval.val_samples} validation samples to depths {cfg.eval.depth_targets}")
    return [f"scenario {cfg.scenario}, seed {cfg.seed}, output {cfg.out_dir}",
            f"data: {shape} ({d.matrix_kind}), sparsity [{d.s_min}, {d.s_max}] ({d.signal_kind}), "
            f"SNR {'none' if d.snr_db is None else d.snr_db}, batches of {d.batch_size}",
            f"train fixed {n.kind} depth {n.fixed_depth}: {t.fixed_batches} batches",
            f"train adaptive depth {n.max_depth} ({cfg.halting.design}), tau={t.tau}: "
            f"{t.stage1_batches} halting-only + {t.stage2_batches} fine-tune batches",
            f"sweep: {eps}; evaluate on {cfg.eval.samples} test samples",
            "write: resolved_config.yaml, fixed.ckpt, adaptive.ckpt, *_history.csv, depth.csv, "
            "sweep.csv, comparison.csv, scores.csv, anchors.csv, summary.json"]


def run_experiment(cfg: ExperimentConfig, dry_run: bool = False, log=None) -> dict:
    """generate -> train -> sweep -> report.  Returns a dict of output paths
    (or ``{"plan": [...]}`` for a dry run)."""
    if dry_run:
        return {"plan": plan(cfg)}
    if cfg.scenario == "mixed_sparsity_fig1":
        return run_fig1(cfg, log)
    out = {}
    with output_lock(cfg.out_dir) as od:
        dump_config(cfg, od / "resolved_config.yaml")
        out["config"] = od / "resolved_config.yaml"
        fixed, adaptive, hp, fh, ah = train_pair(cfg, log)
        save_checkpoint(od / "fixed.ckpt", fixed)
        save_checkpoint(od / "adaptive.ckpt", adaptive, hp)
        out["fixed_history"] = write_history(od / "fixed_history.csv", fh, cfg)
        out["adaptive_history"] = write_history(od / "adaptive_history.csv", ah, cfg)
        _say(log, "evaluating")
        out.update(report(cfg, fixed, adaptive, hp, od))
    return out


def write_history(path, history: History, cfg) -> Path:
    return write_csv(path, ["batch", "loss", "lr", "stage"],
                     history.rows, cfg)


def report(cfg: ExperimentConfig, fixed, adaptive, hp, od: Path) -> dict:
    test, val = held_out(cfg, "test"), held_out(cfg, "val")
    cmp = compare_fixed_vs_adaptive(cfg, fixed, adaptive, hp, test, val)
    beh = behavior_report(cfg, adaptive, hp, test)
    anchors = anchor_table(cfg, fixed, adaptive, hp, cmp, test)
    out = {
        "depth": write_csv(od / "depth.csv", ["layers", "nmse_db", "error_std", "success_rate"],
                           [(r.layers, r.nmse_db, r.error_std, r.success_rate) for r in cmp.depth_rows], cfg),
        "sweep": write_csv(od / "sweep.csv", ["epsilon", "avg_layers", "nmse_db", "error_std", "success_rate"],
                           [(r.epsilon, r.avg_layers, r.nmse_db, r.error_std, r.success_rate)
                            for r in cmp.sweep_rows], cfg),
        "comparison": write_comparison(cmp, od / "comparison.csv", cfg),
        "scores": write_csv(od / "scores.csv", ["layer", "mean_score"],
                            enumerate(beh.mean_scores, 1), cfg),
        "anchors": write_csv(od / "anchors.csv", ["quantity", "reference", "desk_value", "note"],
                             anchors, cfg),
    }
    summary = {
        "win_fraction": cmp.win_fraction,
        "mean_scores": beh.mean_scores,
        "cohort_epsilon": cfg.eval.cohort_epsilon,
        "cohort_avg_exit": {str(k): v for k, v in beh.cohort_exit.items()},
        "epsilon_zero_matches_full_depth": beh.epsilon_zero_exact,
        "calibrated_epsilons": cmp.epsilons,
    }
    out["summary"] = write_json(od / "summary.json", summary, cfg)
    return out


# -- two specialized networks versus one shared network -----------------------

def _level_config(cfg: ExperimentConfig, s: int, batch_size: int, seed_offset: int) -> BatchConfig:
    return cfg.batch_config(s_min=s, s_max=s, batch_size=batch_size,
                            master_seed=cfg.seed + seed_offset)


def run_fig1(cfg: ExperimentConfig, log=None) -> dict:
    """For each depth L: one network of depth L trained on a 50/50 mix of the two
    sparsity levels, against a depth L-2 network for the easy level and a depth L+2
    network for the hard one.  Both arms execute L layers on average."""
    lo, hi = cfg.fig1.levels
    half = max(1, cfg.data.batch_size // 2)
    lo_cfg, hi_cfg = _level_config(cfg, lo, half, 1), _level_config(cfg, hi, half, 2)
    A_mat = cfg.batch_config().matrix()

    def mixed(i):
        a, b = make_batch(lo_cfg, i, A_mat), make_batch(hi_cfg, i, A_mat)
        return Batch(A_mat, np.vstack([a.X, b.X]), np.vstack([a.Y, b.Y]),
                     np.concatenate([a.sparsity, b.sparsity]), a.snr_db)

    test_n = max(1, cfg.eval.samples // 2)
    t_lo = make_batch(replace(lo_cfg, batch_size=test_n), TEST_INDEX, A_mat)
    t_hi = make_batch(replace(hi_cfg, batch_size=test_n), TEST_INDEX, A_mat)
    tc = cfg.train_config()
    rows = []
    with output_lock(cfg.out_dir) as od:
        dump_config(cfg, od / "resolved_config.yaml")
        for L in cfg.fig1.depths:
            _say(log, f"fig1: depth {L}")
            nets = {}
            for name, depth, source in (("one", L, mixed),
                                        ("short", L - 2, lambda i: make_batch(lo_cfg, i, A_mat)),
                                        ("long", L + 2, lambda i: make_batch(hi_cfg, i, A_mat))):
                net = build_fixed(replace(cfg, network=replace(cfg.network, fixed_depth=depth)), A_mat.entries)
                nets[name] = train_fixed_depth(tc, net, data=source, n_batches=cfg.train.fixed_batches)[0]
            est_one = [forward(nets["one"], b.Y).layer_outputs[-1] for b in (t_lo, t_hi)]
            est_two = [forward(nets["short"], t_lo.Y).layer_outputs[-1],
                       forward(nets["long"], t_hi.Y).layer_outputs[-1]]
            truth = np.vstack([t_lo.X, t_hi.X])
            for arm, est in (("one_network", est_one), ("two_networks", est_two)):
                E = np.vstack(est)
                sq = np.sum((E - truth) ** 2, axis=1)
                rows.append((L, arm, float(to_db(np.mean(nmse_ratio(E, truth)))), float(np.std(sq))))
        path = write_csv(od / "fig1.csv", ["avg_layers", "arm", "nmse_db", "error_std"], rows, cfg)
    return {"config": od / "resolved_config.yaml", "fig1": path}


def load_pair(fixed_path, adaptive_path):
    try:
        fixed, _ = load_checkpoint(fixed_path)
        adaptive, hp = load_checkpoint(adaptive_path)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{exc.filename}: checkpoint not found") from exc
    if hp is None:
        raise ValueError(f"{adaptive_path}: checkpoint has no halting parameters")
    return fixed, adaptive, hp
