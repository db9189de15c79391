"""Metrics, epsilon sweeps and empirical checks of the PGD convergence results."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .halting import HaltingParams, infer_adaptive_batch
from .nets import UnfoldedNet, forward
from .problems import (Batch, MeasurementMatrix, ParameterError, ProblemInstance, SparseSignal, gen_matrix,
                       gen_measurement, rng_for, _sparse_rows)
from .solvers import (Constraint, oracle_adaptive_pgd, pgd_solve, project_l1, sparsity_measure,
                      theoretical_step_size)

NMSE_FLOOR_DB = -160.0


def nmse_ratio(estimate, truth) -> np.ndarray:
    truth = np.asarray(truth, dtype=float)
    power = np.sum(truth**2, axis=-1)
    if np.any(power == 0):
        raise ParameterError("NMSE is undefined for a zero reference signal")
    return np.sum((np.asarray(estimate) - truth) ** 2, axis=-1) / power


def to_db(ratio) -> np.ndarray | float:
    with np.errstate(divide="ignore"):
        return np.maximum(10 * np.log10(ratio), NMSE_FLOOR_DB)


def nmse_db(estimate, truth) -> float:
    """10 log10 of the mean of ||x - x_hat||^2 / ||x||^2, floored at -160 dB."""
    return float(to_db(np.mean(nmse_ratio(estimate, truth))))


def kappa(kind: str) -> int:
    """1 for the convex l1 norm, 2 for the non-convex l0 count."""
    return {"l1_ball": 1, "l0_ball": 2}[kind]


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    nmse_db_mean: float
    error_std: float
    success_rate: float
    avg_exit_layer: float
    exit_histogram: list
    per_sparsity: dict = field(default_factory=dict)
    epsilon: Optional[float] = None
    samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sparsity"] = {str(k): v for k, v in self.per_sparsity.items()}
        return d


def evaluate(net: UnfoldedNet, hp: Optional[HaltingParams], dataset: Batch, epsilon: float,
             success_threshold_db: float = -10.0, max_layers: Optional[int] = None) -> EvalReport:
    """Adaptive inference on every sample of ``dataset`` and aggregate metrics.

    ``hp=None`` evaluates the plain network truncated at ``max_layers`` (default L).
    """
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    out = infer_adaptive_batch(net, hp, dataset.Y, epsilon, max_layers)
    ratio = nmse_ratio(out.estimates, dataset.X)
    sq_err = np.sum((out.estimates - dataset.X) ** 2, axis=1)
    success = to_db(ratio) < success_threshold_db
    hist = np.bincount(out.exit_layers, minlength=net.depth + 1)[1:]
    per_s = {}
    for s in np.unique(dataset.sparsity):
        sel = dataset.sparsity == s
        per_s[int(s)] = (float(to_db(np.mean(ratio[sel]))), float(np.mean(out.exit_layers[sel])))
    return EvalReport(
        nmse_db_mean=float(to_db(np.mean(ratio))),
        error_std=float(np.std(sq_err)),
        success_rate=float(np.mean(success)),
        avg_exit_layer=float(np.mean(out.exit_layers)),
        exit_histogram=[int(c) for c in hist],
        per_sparsity=per_s,
        epsilon=epsilon,
        samples=len(dataset),
    )


@dataclass
class SweepRow:
    epsilon: float
    avg_layers: float
    nmse_db: float
    error_std: float
    success_rate: float


def sweep_epsilon(net, hp, dataset, epsilons: Sequence[float], success_threshold_db: float = -10.0):
    """One evaluation per epsilon; rows come back sorted by epsilon descending."""
    if len(epsilons) == 0:
        raise ParameterError("need at least one epsilon")
    rows = []
    for eps in sorted(epsilons, reverse=True):
        if not 0 < eps < 1:
            raise ParameterError(f"epsilon {eps} outside (0, 1)")
        r = evaluate(net, hp, dataset, eps, success_threshold_db)
        rows.append(SweepRow(eps, r.avg_exit_layer, r.nmse_db_mean, r.error_std, r.success_rate))
    return rows


def calibrate_epsilons(net, hp, dataset, target_layers: Sequence[float], lo=1e-6, hi=0.999,
                       iters: int = 40) -> list:
    """For each target average depth, the epsilon whose average exit layer on
    ``dataset`` is closest to it (bisection in log-epsilon; depth is non-increasing
    in epsilon).  Intended for a validation batch, not the test batch."""
    def avg(eps):
        return float(np.mean(infer_adaptive_batch(net, hp, dataset.Y, eps).exit_layers))

    out = []
    for target in target_layers:
        a, b = np.log(lo), np.log(hi)
        for _ in range(iters):
            mid = 0.5 * (a + b)
            if avg(np.exp(mid)) > target:
                a = mid
            else:
                b = mid
        out.append(float(np.exp(b)))
    return out


@dataclass
class DepthRow:
    layers: int
    nmse_db: float
    error_std: float
    success_rate: float


def depth_curve(net: UnfoldedNet, dataset: Batch, success_threshold_db: float = -10.0):
    """Metrics of a fixed-depth network truncated at every layer 1..L."""
    trace = forward(net, dataset.Y)
    rows = []
    for t, Xt in enumerate(trace.layer_outputs, 1):
        ratio = nmse_ratio(Xt, dataset.X)
        sq = np.sum((Xt - dataset.X) ** 2, axis=1)
        rows.append(DepthRow(t, float(to_db(np.mean(ratio))), float(np.std(sq)),
                             float(np.mean(to_db(ratio) < success_threshold_db))))
    return rows


@dataclass
class MatchedRow:
    epsilon: float
    avg_layers_adaptive: float
    nmse_adaptive: float
    nmse_fixed: Optional[float]
    comparable: bool

    @property
    def adaptive_wins(self) -> bool:
        return self.comparable and self.nmse_adaptive <= self.nmse_fixed


def matched_depth_comparison(fixed: Sequence[DepthRow], sweep: Sequence[SweepRow]):
    """Pair each sweep point with the fixed network's NMSE interpolated at the same
    average depth.  Points deeper than the fixed network are marked not comparable."""
    depths = np.array([r.layers for r in fixed], dtype=float)
    nmse = np.array([r.nmse_db for r in fixed])
    out = []
    for row in sweep:
        ok = bool(depths[0] <= row.avg_layers <= depths[-1] + 1e-12)
        ref = float(np.interp(row.avg_layers, depths, nmse)) if ok else None
        out.append(MatchedRow(row.epsilon, row.avg_layers, row.nmse_db, ref, ok))
    return out


# -- descent cones and the learned-PGD bound ---------------------------------

@dataclass
class ConeSampleSet:
    anchor: np.ndarray
    kind: str
    directions: np.ndarray  # rows are unit vectors
    steps: np.ndarray  # for row d: f(x + step * d) <= f(x)

    def __len__(self) -> int:
        return self.directions.shape[0]

    def extended(self, extra: np.ndarray, steps: np.ndarray) -> "ConeSampleSet":
        return ConeSampleSet(self.anchor, self.kind, np.vstack([self.directions, extra]),
                             np.concatenate([self.steps, steps]))


def sample_descent_cone(x, f_kind: str, n_samples: int, seed: int) -> ConeSampleSet:
    """Unit directions (z - x)/||z - x|| with f(z) <= f(x), all members of the descent cone.

    l1: z is the projection of a Gaussian perturbation of x (scale log-uniform)
    onto the l1 ball of radius ||x||_1, or the origin.  l0: z keeps the support size,
    moving values on supp(x) and swapping up to s coordinates off the support.
    """
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        raise ParameterError("descent cone needs a nonzero anchor")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    rng = rng_for(seed, 0x434E)
    m = x.size
    scale = np.linalg.norm(x)
    dirs, steps = [], []
    if f_kind == "l1_ball":
        radius = np.sum(np.abs(x))
        dirs.append(-x / scale)
        steps.append(scale)
        while len(dirs) < n_samples:
            sigma = scale * 10 ** rng.uniform(-3, 0.5)
            z = project_l1(x + sigma * rng.standard_normal(m), radius)
            d = z - x
            nd = np.linalg.norm(d)
            if nd > 1e-9 * scale:
                dirs.append(d / nd)
                steps.append(nd)
    elif f_kind == "l0_ball":
        supp = np.flatnonzero(x)
        off = np.setdiff1d(np.arange(m), supp)
        s = supp.size
        while len(dirs) < n_samples:
            z = x.copy()
            z[supp] += scale * 10 ** rng.uniform(-3, 0) * rng.standard_normal(s)
            k = int(rng.integers(0, min(s, off.size) + 1))
            if k:
                gone = rng.choice(supp, k, replace=False)
                new = rng.choice(off, k, replace=False)
                z[gone] = 0.0
                z[new] = scale * rng.standard_normal(k)
            d = z - x
            nd = np.linalg.norm(d)
            if nd > 0 and np.count_nonzero(z) <= s:
                dirs.append(d / nd)
                steps.append(nd)
    else:
        raise ParameterError(f"unknown function kind {f_kind!r}")
    return ConeSampleSet(x, f_kind, np.array(dirs), np.array(steps))


def estimate_rho(B, A, cones: ConeSampleSet) -> float:
    """max over all sampled pairs (u, v), u = v included, of u^T (I - B A) v.

    A lower bound of the supremum over the cone intersected with the unit ball.
    """
    if len(cones) == 0:
        raise ParameterError("no cone samples")
    U = cones.directions
    M = np.asarray(B) @ np.asarray(A)
    vals = U @ U.T - (U @ M) @ U.T
    return float(np.max(vals))


def estimate_xi(B, noise_direction, cones: ConeSampleSet) -> float:
    """max over sampled u of u^T B w/||w||; a lower bound of the supremum."""
    w = np.asarray(noise_direction, dtype=float)
    nw = np.linalg.norm(w)
    if nw == 0:
        raise ParameterError("noise direction must be nonzero")
    if len(cones) == 0:
        raise ParameterError("no cone samples")
    return float(np.max(cones.directions @ (np.asarray(B) @ (w / nw))))


@dataclass
class BoundReport:
    observed: np.ndarray
    bound: Optional[np.ndarray]
    applicable: bool
    violations: int
    status: str  # "satisfied", "inconclusive (sampling)" or "inapplicable"
    rho_hat: float = float("nan")
    xi_hat: float = float("nan")


def learned_pgd_bound(t, rho, xi, kappa_f, noise_norm, x_norm):
    q = kappa_f * rho
    t = np.asarray(t, dtype=float)
    return q**t * x_norm + kappa_f * (1 - q**t) / (1 - q) * xi * noise_norm


def verify_learned_pgd_bound(errors, rho_hat, xi_hat, kappa_f, noise_norm, x_norm,
                             rtol: float = 1e-9, atol: float = 1e-12) -> BoundReport:
    """Compare observed ||x_t - x|| against the learned-PGD error bound evaluated with
    sampled (lower-bound) rho and xi.  A violation cannot refute the bound because
    the sampled constants underestimate the suprema, so it is reported as inconclusive."""
    errors = np.asarray(errors, dtype=float)
    if kappa_f * rho_hat >= 1:
        return BoundReport(errors, None, False, 0, "inapplicable", rho_hat, xi_hat)
    bound = learned_pgd_bound(np.arange(errors.size), rho_hat, xi_hat, kappa_f, noise_norm, x_norm)
    viol = int(np.sum(errors > bound * (1 + rtol) + atol * x_norm))
    status = "satisfied" if viol == 0 else "inconclusive (sampling)"
    return BoundReport(errors, bound, True, viol, status, rho_hat, xi_hat)


def learned_pgd_run(A, x, B, noise=None, iters: int = 50, kind: str = "l1_ball",
                    n_cone: int = 300, seed: int = 0):
    """Learned-gradient PGD with the perfect radius f(x), plus the bound check.

    The cone sample set is the random samples plus the run's own normalized error
    directions x_t - x, which lie in the descent set because every iterate is feasible.
    """
    A = np.asarray(A, dtype=float)
    w = np.zeros(A.shape[0]) if noise is None else np.asarray(noise, dtype=float)
    inst = ProblemInstance(MeasurementMatrix(A, "custom", -1),
                           SparseSignal(x, int(np.count_nonzero(x))), A @ x + w)
    radius = sparsity_measure(x, kind)
    con = Constraint(kind, radius if kind == "l1_ball" else int(radius))
    trace = pgd_solve(inst, con, 0.0, iters, B=B)
    errs = np.array(trace.errors_vs_truth)
    E = np.array(trace.iterates) - x
    keep = np.linalg.norm(E, axis=1) > 1e-14
    cones = sample_descent_cone(x, kind, n_cone, seed)
    cones = cones.extended(E[keep] / np.linalg.norm(E[keep], axis=1, keepdims=True),
                           np.linalg.norm(E[keep], axis=1))
    rho_hat = estimate_rho(B, A, cones)
    nw = np.linalg.norm(w)
    xi_hat = estimate_xi(B, w, cones) if nw > 0 else 0.0
    report = verify_learned_pgd_bound(errs, rho_hat, xi_hat, kappa(kind), nw, np.linalg.norm(x))
    return report, cones


# -- PGD convergence experiments ---------------------------------------------

def random_instance(n: int, m: int, s: int, seed: int, snr_db=None, normalize_matrix=False):
    """Gaussian problem with exactly ``s`` nonzeros and ||x||_2 = 1."""
    matrix = gen_matrix("gaussian", n, m, seed, normalize=normalize_matrix)
    X, _ = _sparse_rows(rng_for(seed, 0x5349), 1, m, s, s)
    return gen_measurement(matrix, SparseSignal(X[0], s), snr_db, seed)


@dataclass
class Theorem1Result:
    perfect_final: np.ndarray
    mismatch_final: np.ndarray
    reached: np.ndarray  # perfect-R run below target within the budget
    iterations_to_target: np.ndarray


def theorem1_trials(n=100, m=200, s=5, seeds=range(100), iters=200, target=1e-6,
                    mismatch=0.5, kind="l1_ball", beta_scale=0.5) -> Theorem1Result:
    """Perfect-radius versus under-estimated-radius PGD on Gaussian problems.

    The step is ``beta_scale`` times the Gamma-function step; the full step is only
    reliable once n is well above the l1 phase transition (roughly n >= 300 for
    s = 5, m = 2n), so a damped step is the default at n = 100.
    """
    beta = beta_scale * theoretical_step_size(n)
    perf, mis, reached, when = [], [], [], []
    for seed in seeds:
        inst = random_instance(n, m, s, seed)
        f = sparsity_measure(inst.x, kind)
        con = Constraint(kind, f if kind == "l1_ball" else int(f))
        tr = pgd_solve(inst, con, beta, iters)
        errs = np.array(tr.errors_vs_truth)
        perf.append(errs[-1])
        hit = np.flatnonzero(errs < target)
        reached.append(hit.size > 0)
        when.append(hit[0] if hit.size else -1)
        low = mismatch * f if kind == "l1_ball" else max(1, int(mismatch * f))
        mis.append(pgd_solve(inst, Constraint(kind, low), beta, iters).errors_vs_truth[-1])
    return Theorem1Result(np.array(perf), np.array(mis), np.array(reached), np.array(when))


@dataclass
class Theorem3Report:
    sparsities: list
    f_values: list
    oracle_errors: list
    fixed_errors: list
    oracle_total: float
    fixed_total: float
    fixed_radius: float


def theorem3_experiment(K=3, n=100, m=200, sparsities=(3, 6, 10), schedule=None, seed=0,
                        kind="l1_ball", beta_scale=0.5) -> Theorem3Report:
    """Oracle adaptive-depth PGD versus one fixed radius (median f(x_i)) on the same signals.

    The fixed-radius arm gives each signal the same total iteration count the
    oracle spends on it.
    """
    sparsities = list(sparsities)[:K]
    schedule = [200] * K if schedule is None else list(schedule)
    matrix = gen_matrix("gaussian", n, m, seed, normalize=False)
    instances = []
    for i, s in enumerate(sparsities):
        X, _ = _sparse_rows(rng_for(seed, 0x5433, i), 1, m, s, s)
        instances.append(gen_measurement(matrix, SparseSignal(X[0], s)))
    f = np.array([sparsity_measure(inst.x, kind) for inst in instances])
    if len(np.unique(f)) != K:
        raise ParameterError("signals need distinct f(x_i)")
    beta = beta_scale * theoretical_step_size(n)
    res = oracle_adaptive_pgd(instances, schedule, kind, beta=beta)
    radius = float(np.median(f))
    con = Constraint(kind, radius if kind == "l1_ball" else int(radius))
    fixed = []
    for idx, inst in enumerate(instances):
        iters = len(res.traces[idx].iterates) - 1
        fixed.append(pgd_solve(inst, con, beta, iters).errors_vs_truth[-1])
    oracle = [t.errors_vs_truth[-1] for t in res.traces]
    return Theorem3Report(sparsities, f.tolist(), oracle, fixed, res.total_error,
                          float(sum(fixed)), radius)


@dataclass
class Theorem2Row:
    seed: int
    snr_db: Optional[float]
    pairs: int
    rho_hat: float
    xi_hat: float
    violations: int
    status: str
    max_ratio: float  # max over t of observed / bound


def theorem2_harness(seeds=range(5), n=200, m=400, s=5, iters=50, n_pairs=100_000,
                     snr_db=None, kind="l1_ball"):
    """Learned-PGD runs with B = A^T / n on raw Gaussian A, each checked against the
    error bound with rho and xi estimated from at least ``n_pairs`` cone pairs."""
    n_cone = int(np.ceil(np.sqrt(n_pairs)))
    rows, reports = [], []
    for seed in seeds:
        inst = random_instance(n, m, s, seed, snr_db=snr_db)
        A = inst.A
        B = A.T / n
        noise = inst.y - A @ inst.x
        rep, cones = learned_pgd_run(A, inst.x, B, noise if snr_db is not None else None,
                                     iters, kind, n_cone, seed)
        ratio = float(np.max(rep.observed / np.maximum(rep.bound, 1e-300))) if rep.applicable else float("nan")
        rows.append(Theorem2Row(int(seed), snr_db, len(cones) ** 2, rep.rho_hat, rep.xi_hat,
                                rep.violations, rep.status, ratio))
        reports.append(rep)
    return rows, reports
