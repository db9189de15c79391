"""Classical iterative solvers: ISTA, projected gradient descent and the oracle
adaptive-depth PGD that switches the ball radius per signal."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .problems import DimensionError, ParameterError, ProblemInstance


@dataclass(frozen=True)
class Constraint:
    kind: str  # "l1_ball" or "l0_ball"
    radius: float

    def __post_init__(self):
        if self.kind == "l1_ball":
            if not self.radius > 0:
                raise ParameterError("l1 radius must be positive")
        elif self.kind == "l0_ball":
            if int(self.radius) != self.radius or self.radius < 1:
                raise ParameterError("l0 radius must be a positive integer")
        else:
            raise ParameterError(f"unknown constraint kind {self.kind!r}")

    @property
    def kappa(self) -> int:
        """1 for the convex l1 ball, 2 for the non-convex l0 ball."""
        return 1 if self.kind == "l1_ball" else 2

    def project(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "l1_ball":
            return project_l1(z, self.radius)
        return project_l0(z, int(self.radius))


def sparsity_measure(x: np.ndarray, kind: str) -> float:
    """f(x): l1 norm for ``l1_ball``, nonzero count for ``l0_ball``."""
    if kind == "l1_ball":
        return float(np.sum(np.abs(x)))
    if kind == "l0_ball":
        return float(np.count_nonzero(x))
    raise ParameterError(f"unknown constraint kind {kind!r}")


@dataclass
class SolverTrace:
    iterates: list = field(default_factory=list)
    objective_values: list = field(default_factory=list)
    errors_vs_truth: Optional[list] = None

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "error_vs_truth"])
            errs = self.errors_vs_truth or [""] * len(self.iterates)
            for i, (obj, err) in enumerate(zip(self.objective_values, errs)):
                w.writerow([i, repr(float(obj)), "" if err == "" else repr(float(err))])


def soft_threshold(z, lam):
    if lam < 0:
        raise ParameterError("threshold must be non-negative")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def project_l0(z, s: int) -> np.ndarray:
    """Keep the ``s`` largest-magnitude entries; ties go to the lowest index."""
    z = np.asarray(z, dtype=float)
    if not 1 <= s <= z.size:
        raise ParameterError(f"need 1 <= s <= {z.size}, got {s}")
    keep = np.argsort(-np.abs(z), kind="stable")[:s]
    out = np.zeros_like(z)
    out[keep] = z[keep]
    return out


def project_l1(z, radius: float) -> np.ndarray:
    """Euclidean projection onto {v : ||v||_1 <= radius} by sort-then-threshold."""
    if not radius > 0:
        raise ParameterError("l1 radius must be positive")
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    if a.sum() <= radius:
        return z.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u) - radius
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.sign(z) * np.maximum(a - theta, 0.0)


def lasso_objective(A, y, x, lam) -> float:
    r = y - A @ x
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(x)))


def theoretical_step_size(n: int) -> float:
    """beta = (Gamma(n/2) / Gamma((n+1)/2))**2 / 2, roughly 1/n."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    return 0.5 * float(np.exp(2 * (gammaln(n / 2) - gammaln((n + 1) / 2))))


def _check(instance: ProblemInstance):
    A, y = instance.A, instance.y
    if A.shape[0] != y.shape[0]:
        raise DimensionError(f"matrix {A.shape} does not match measurement length {y.shape[0]}")
    return A, y


def ista_solve(instance: ProblemInstance, lam: float, beta: float, max_iters: int,
               tol: float = 1e-10, x0=None) -> SolverTrace:
    """Proximal-gradient iterations for 0.5||y - Ax||^2 + lam ||x||_1.

    The shrinkage per step is beta * lam, the exact proximal step for this
    objective, so the objective never increases when beta <= 1/||A||_2^2.
    """
    A, y = _check(instance)
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    truth = instance.x
    trace = SolverTrace(errors_vs_truth=[] if truth is not None else None)

    def record(v):
        trace.iterates.append(v)
        trace.objective_values.append(lasso_objective(A, y, v, lam))
        if truth is not None:
            trace.errors_vs_truth.append(float(np.linalg.norm(v - truth)))

    record(x)
    Aty = beta * (A.T @ y)
    for _ in range(max_iters):
        x_new = soft_threshold(x - beta * (A.T @ (A @ x)) + Aty, beta * lam)
        record(x_new)
        done = np.linalg.norm(x_new - x) < tol
        x = x_new
        if done:
            break
    return trace


def pgd_solve(instance: ProblemInstance, constraint: Constraint, beta: float, max_iters: int,
              x0=None, B=None) -> SolverTrace:
    """x <- P_K((I - B A) x + B y) from x0 = 0, with B = beta * A^T unless given."""
    A, y = _check(instance)
    B = beta * A.T if B is None else np.asarray(B)
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    truth = instance.x
    trace = SolverTrace(errors_vs_truth=[] if truth is not None else None)
    By = B @ y
    for t in range(max_iters + 1):
        if t:
            x = constraint.project(x - B @ (A @ x) + By)
        r = y - A @ x
        trace.iterates.append(x)
        trace.objective_values.append(0.5 * float(r @ r))
        if truth is not None:
            trace.errors_vs_truth.append(float(np.linalg.norm(x - truth)))
    return trace


@dataclass
class OracleResult:
    traces: list  # per signal, in the caller's order
    order: np.ndarray  # indices sorted by f(x_i) ascending
    total_error: float


def oracle_adaptive_pgd(instances: Sequence[ProblemInstance], schedule: Sequence[int],
                        kind: str = "l1_ball", beta: Optional[float] = None) -> OracleResult:
    """Oracle PGD with adaptive depth.

    Signals are ordered by f(x_i) ascending.  Iteration t of the shared run uses the
    radius f(x_i) of the phase i it falls in (the phase lengths are ``schedule``);
    signal i leaves the run right after its own phase, so it sees radii
    f(x_1), ..., f(x_i) in turn.
    """
    if not instances:
        raise ParameterError("need at least one instance")
    if len(schedule) != len(instances) or min(schedule) < 1:
        raise ParameterError("schedule needs one positive budget per instance")
    f = np.array([sparsity_measure(inst.x, kind) for inst in instances])
    order = np.argsort(f, kind="stable")
    budgets = np.asarray(schedule)[order]
    traces = [None] * len(instances)
    for pos, idx in enumerate(order):
        inst = instances[idx]
        A, y = _check(inst)
        step = theoretical_step_size(A.shape[0]) if beta is None else beta
        x = np.zeros(A.shape[1])
        trace = SolverTrace(errors_vs_truth=[])
        trace.iterates.append(x)
        trace.objective_values.append(0.5 * float(y @ y))
        trace.errors_vs_truth.append(float(np.linalg.norm(x - inst.x)))
        for phase in range(pos + 1):
            radius = f[order[phase]]
            con = Constraint(kind, radius if kind == "l1_ball" else int(radius))
            for _ in range(int(budgets[phase])):
                x = con.project(x - step * (A.T @ (A @ x - y)))
                r = y - A @ x
                trace.iterates.append(x)
                trace.objective_values.append(0.5 * float(r @ r))
                trace.errors_vs_truth.append(float(np.linalg.norm(x - inst.x)))
        traces[idx] = trace
    total = float(sum(t.errors_vs_truth[-1] for t in traces))
    return OracleResult(traces, order, total)
