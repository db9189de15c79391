"""Command line entry point: ``adunfold <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric-domain failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, experiment as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .halting import infer_adaptive_batch
from .halting import init_halting
from .problems import (Batch, DimensionError, FormatError, ParameterError, make_batch, read_batch,
                       write_batch)
from .solvers import Constraint, ista_solve, pgd_solve, sparsity_measure, theoretical_step_size
from .training import NumericDomainError, gradient_check_suite, train_fixed_depth, train_two_stage

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ex.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ex.load_config(args.config)
    else:
        cfg = ex.preset(getattr(args, "scenario", None) or "synthetic", getattr(args, "scale", "desk"))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _read_dataset(path) -> Batch:
    """One ADUN file, or every ``*.adun`` file of a directory concatenated (same A)."""
    path = Path(path)
    files = sorted(path.glob("*.adun")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"{path}: no .adun files")
    batches = [read_batch(f) for f in files]
    A = batches[0].A
    for f, b in zip(files, batches):
        if not np.array_equal(b.A, A):
            raise FormatError(f"{f}: measurement matrix differs from {files[0]}")
    return Batch(batches[0].matrix, np.vstack([b.X for b in batches]), np.vstack([b.Y for b in batches]),
                 np.concatenate([b.sparsity for b in batches]), batches[0].snr_db)


def _seed(args) -> int:
    return getattr(args, "seed", 0)


def _log(msg):
    print(msg, file=sys.stderr)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_config(args)
    d = cfg.data
    overrides = {k: getattr(args, k) for k in ("n", "m", "s_min", "s_max", "batch_size", "snr_db",
                                               "matrix_kind", "signal_kind")
                 if getattr(args, k) is not None}
    cfg = replace(cfg, data=replace(d, **overrides))
    problems = ex.validate(cfg)
    if problems:
        raise ex.ConfigError(problems)
    out = Path(args.dataset_out)
    out.mkdir(parents=True, exist_ok=True)
    bc = cfg.batch_config()
    matrix = bc.matrix()
    start = {"train": 0, "val": ex.VALIDATION_INDEX, "test": ex.TEST_INDEX}[args.split]
    for i in range(args.n_batches):
        write_batch(out / f"{args.split}_{i:05d}.adun", make_batch(bc, start + i, matrix))
    ex.dump_config(cfg, out / "resolved_config.yaml")
    print(f"wrote {args.n_batches} {args.split} batch file(s) to {out}")


def cmd_train(args):
    cfg = _load_config(args)
    out = _out(args, cfg.out_dir)
    tc = cfg.train_config()
    rows = []
    with ex.output_lock(out):
        ex.dump_config(cfg, out / "resolved_config.yaml")
        if args.resume:
            fixed, _ = load_checkpoint(args.resume)
        else:
            fixed = ex.build_fixed(cfg, tc.batch.matrix().entries)
            _log(f"training fixed-depth network ({cfg.train.fixed_batches} batches)")
            fixed, h = train_fixed_depth(tc, fixed, n_batches=cfg.train.fixed_batches)
            rows += h.rows
            save_checkpoint(out / "fixed.ckpt", fixed)
        if args.stage in ("adaptive", "both"):
            adaptive = ex.extend_network(fixed, cfg.network.max_depth, ex.support_fraction(cfg))
            hc = cfg.halting
            hp = init_halting(hc.design, adaptive.n, adaptive.depth, seed=cfg.seed, h_last=hc.h_last,
                              phi=hc.phi0, psi=hc.psi0)
            _log("two-stage training of the adaptive network")
            adaptive, hp, h = train_two_stage(tc, adaptive, hp)
            rows += h.rows
            save_checkpoint(out / "adaptive.ckpt", adaptive, hp)
        ex.write_csv(out / "history.csv", ["batch", "loss", "lr", "stage"], rows, cfg)
    print(f"checkpoints and history.csv written to {out}")


def cmd_infer(args):
    net, hp = load_checkpoint(args.checkpoint)
    data = _read_dataset(args.dataset)
    out = _out(args, "runs/infer")
    res = infer_adaptive_batch(net, hp, data.Y, args.epsilon, args.max_layers)
    db = analysis.to_db(analysis.nmse_ratio(res.estimates, data.X))
    header = ["sample_id", "sparsity", "exit_layer", "nmse_db"] + [f"h{t}" for t in range(1, net.depth + 1)]
    ex.write_csv(out / "infer.csv", header,
                 [[i, data.sparsity[i], res.exit_layers[i], db[i], *res.scores[i]] for i in range(len(data))])
    hist = np.bincount(res.exit_layers, minlength=net.depth + 1)[1:]
    ex.write_csv(out / "exit_histogram.csv", ["layer", "count"], zip(range(1, net.depth + 1), hist))
    if args.estimates:
        np.savetxt(out / "estimates.csv", res.estimates, delimiter=",", fmt="%.17g")
    print(f"{len(data)} samples, average exit layer {res.exit_layers.mean():.3f}")


def cmd_eval(args):
    net, hp = load_checkpoint(args.checkpoint)
    data = _read_dataset(args.dataset)
    out = _out(args, "runs/eval")
    rep = analysis.evaluate(net, hp, data, args.epsilon, args.success_db, args.max_layers)
    ex.write_csv(out / "eval.csv", ["sparsity", "nmse_db", "avg_layers"],
                 [(s, v[0], v[1]) for s, v in sorted(rep.per_sparsity.items())])
    ex.write_json(out / "eval.json", rep.to_dict())
    print(f"NMSE {rep.nmse_db_mean:.2f} dB, success {rep.success_rate:.3f}, "
          f"average exit layer {rep.avg_exit_layer:.3f}")


def cmd_sweep(args):
    net, hp = load_checkpoint(args.checkpoint)
    if hp is None:
        raise ParameterError(f"{args.checkpoint}: sweeping epsilon needs a halting branch")
    data = _read_dataset(args.dataset)
    out = _out(args, "runs/sweep")
    eps = args.epsilons
    if not eps:
        if not args.depth_targets:
            raise ParameterError("give --epsilons or --depth-targets")
        val = _read_dataset(args.val_dataset) if args.val_dataset else data
        eps = analysis.calibrate_epsilons(net, hp, val, args.depth_targets, iters=30)
    rows = analysis.sweep_epsilon(net, hp, data, eps, args.success_db)
    header = ["epsilon", "avg_layers", "nmse_db", "error_std", "success_rate"]
    ex.write_csv(out / "sweep.csv", header,
                 [(r.epsilon, r.avg_layers, r.nmse_db, r.error_std, r.success_rate) for r in rows])
    ex.write_json(out / "sweep.json", {"rows": [dict(zip(header, (r.epsilon, r.avg_layers, r.nmse_db,
                                                                   r.error_std, r.success_rate)))
                                                 for r in rows]})
    for r in rows:
        print(f"eps={r.epsilon:.4g}  layers={r.avg_layers:.3f}  nmse={r.nmse_db:.2f} dB")


_ALGOS = {"ista": None, "pgd-l1": "l1_ball", "pgd-l0": "l0_ball", "oracle-pgd": "l1_ball"}


def cmd_solve(args):
    out = _out(args, "runs/solve")
    kind = _ALGOS[args.algo]
    if args.algo == "oracle-pgd":
        rep = analysis.theorem3_experiment(len(args.sparsities), args.n, args.m, args.sparsities,
                                           args.budgets, _seed(args), kind, args.beta_scale)
        ex.write_csv(out / "oracle.csv", ["sparsity", "f_value", "oracle_error", "fixed_error"],
                     zip(rep.sparsities, rep.f_values, rep.oracle_errors, rep.fixed_errors))
        print(f"oracle total {rep.oracle_total:.3e}, fixed-radius total {rep.fixed_total:.3e}")
        return
    if args.dataset:
        inst = _read_dataset(args.dataset).instance(args.index)
    else:
        inst = analysis.random_instance(args.n, args.m, args.s, _seed(args), args.snr_db)
    A = inst.A
    if args.algo == "ista":
        beta = args.beta if args.beta is not None else 1.0 / np.linalg.norm(A, 2) ** 2
        trace = ista_solve(inst, args.lam, beta, args.iters)
    else:
        beta = args.beta if args.beta is not None else args.beta_scale * theoretical_step_size(A.shape[0])
        radius = args.radius if args.radius is not None else sparsity_measure(inst.x, kind)
        con = Constraint(kind, radius if kind == "l1_ball" else int(radius))
        trace = pgd_solve(inst, con, beta, args.iters)
    trace.to_csv(out / "solve.csv")
    print(f"{args.algo}: final error {trace.errors_vs_truth[-1]:.3e} after {len(trace.iterates) - 1} iterations")


def cmd_verify_theory(args):
    out = _out(args, "runs/verify")
    which = {"1", "2", "3"} if args.which == "all" else set(args.which.split(","))
    summary = {}
    if "1" in which:
        r = analysis.theorem1_trials(seeds=range(args.trials), beta_scale=args.beta_scale)
        ex.write_csv(out / "theorem1.csv", ["seed", "perfect_final", "mismatch_final", "reached",
                                            "iterations_to_target"],
                     zip(range(args.trials), r.perfect_final, r.mismatch_final, r.reached,
                         r.iterations_to_target))
        summary["theorem1"] = {"reached": int(r.reached.sum()), "trials": args.trials,
                               "mismatch_ratio_min": float(np.min(r.mismatch_final / np.maximum(r.perfect_final, 1e-300)))}
    if "2" in which:
        rows, reps = analysis.theorem2_harness(seeds=range(args.seeds), n_pairs=args.pairs)
        ex.write_csv(out / "theorem2.csv", ["seed", "iteration", "observed", "bound"],
                     [(row.seed, t, o, b) for row, rep in zip(rows, reps)
                      for t, (o, b) in enumerate(zip(rep.observed, rep.bound if rep.bound is not None
                                                     else [float("nan")] * len(rep.observed)))])
        summary["theorem2"] = [dict(seed=r.seed, pairs=r.pairs, rho_hat=r.rho_hat, xi_hat=r.xi_hat,
                                    violations=r.violations, status=r.status) for r in rows]
    if "3" in which:
        r = analysis.theorem3_experiment(seed=_seed(args), beta_scale=args.beta_scale)
        r2 = analysis.theorem3_experiment(seed=_seed(args), beta_scale=args.beta_scale,
                                          schedule=[400] * 3)
        ex.write_csv(out / "theorem3.csv", ["sparsity", "f_value", "oracle_error", "fixed_error",
                                            "oracle_error_doubled_budget"],
                     zip(r.sparsities, r.f_values, r.oracle_errors, r.fixed_errors, r2.oracle_errors))
        summary["theorem3"] = {"oracle_total": r.oracle_total, "fixed_total": r.fixed_total,
                               "fixed_radius": r.fixed_radius}
    ex.write_json(out / "verify.json", summary)
    print(f"wrote {', '.join(sorted(summary))} results to {out}")


def cmd_grad_check(args):
    out = _out(args, "runs/grad-check")
    rows = gradient_check_suite(args.configs, args.n, args.m, args.layers, _seed(args))
    keys = ["config", "kind", "design", "shared", "block", "rel_err", "kept", "skipped"]
    ex.write_csv(out / "grad_check.csv", keys, [[r[k] for k in keys] for r in rows])
    worst = max(r["rel_err"] for r in rows)
    print(f"{args.configs} configs, worst relative error {worst:.3e} (tolerance {args.tol:g})")
    if worst > args.tol:
        raise NumericDomainError(f"gradient check failed: {worst:.3e} > {args.tol:g}")


def cmd_experiment(args):
    cfg = _load_config(args)
    if args.dump_config:
        ex.dump_config(cfg, args.dump_config)
        print(f"config written to {args.dump_config}")
        return
    res = ex.run_experiment(cfg, dry_run=args.dry_run, log=_log)
    if args.dry_run:
        print("\n".join(res["plan"]))
        return
    for k, p in res.items():
        print(f"{k}: {p}")


def cmd_compare(args):
    cfg = _load_config(args)
    fixed, adaptive, hp = ex.load_pair(args.fixed, args.adaptive)
    out = _out(args, cfg.out_dir)
    test = _read_dataset(args.dataset) if args.dataset else None
    cmp = ex.compare_fixed_vs_adaptive(cfg, fixed, adaptive, hp, test)
    path = ex.write_comparison(cmp, out / "comparison.csv", cfg)
    print(f"adaptive wins at {cmp.win_fraction:.0%} of comparable points; wrote {path}")


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="BLAS thread limit")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="adunfold", parents=[common],
                description="Unfolded sparse-recovery networks with adaptive depth.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="experiment YAML (default: desk preset of --scenario)")
        sp.add_argument("--scenario", choices=ex.SCENARIOS)
        sp.add_argument("--scale", choices=("desk", "full"), default="desk")

    g = add("gen-data", cmd_gen_data, "write seeded dataset batches as .adun files")
    with_config(g)
    g.add_argument("--dataset-out", required=True)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--n-batches", type=int, default=1)
    for flag, typ in (("--n", int), ("--m", int), ("--s-min", int), ("--s-max", int),
                      ("--batch-size", int), ("--snr-db", float)):
        g.add_argument(flag, type=typ)
    g.add_argument("--matrix-kind", choices=("gaussian", "rademacher", "qpsk_stacked"))
    g.add_argument("--signal-kind", choices=("uniform", "clustered"))

    t = add("train", cmd_train, "train the fixed-depth and adaptive networks")
    with_config(t)
    t.add_argument("--resume", help="fixed-depth checkpoint to start from (skips its training)")
    t.add_argument("--stage", choices=("fixed", "adaptive", "both"), default="both")

    def model_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", required=True, help=".adun file or directory of them")
        sp.add_argument("--success-db", type=float, default=-10.0)

    i = add("infer", cmd_infer, "adaptive inference; per-sample CSV and exit histogram")
    model_args(i)
    i.add_argument("--epsilon", type=float, default=0.05)
    i.add_argument("--max-layers", type=int)
    i.add_argument("--estimates", action="store_true", help="also write the estimates")

    e = add("eval", cmd_eval, "aggregate metrics at one epsilon")
    model_args(e)
    e.add_argument("--epsilon", type=float, default=0.05)
    e.add_argument("--max-layers", type=int)

    s = add("sweep", cmd_sweep, "depth/accuracy curve over epsilon")
    model_args(s)
    s.add_argument("--epsilons", type=_floats)
    s.add_argument("--depth-targets", type=_floats, help="calibrate epsilons to these average depths")
    s.add_argument("--val-dataset", help="dataset used for calibration (default: --dataset)")

    so = add("solve", cmd_solve, "classic solvers: ISTA, PGD, oracle adaptive PGD")
    so.add_argument("--algo", choices=tuple(_ALGOS), required=True)
    so.add_argument("--beta", type=float, help="step size (default: 1/||A||^2 for ISTA, "
                                               "beta-scale times the Gamma-function step for PGD)")
    so.add_argument("--beta-scale", type=float, default=0.5)
    so.add_argument("--lambda", dest="lam", type=float, default=0.05)
    so.add_argument("--radius", type=float, help="constraint radius (default: f(x) of the truth)")
    so.add_argument("--iters", type=int, default=200)
    so.add_argument("--n", type=int, default=100)
    so.add_argument("--m", type=int, default=200)
    so.add_argument("--s", type=int, default=5)
    so.add_argument("--snr-db", type=float)
    so.add_argument("--dataset")
    so.add_argument("--index", type=int, default=0)
    so.add_argument("--sparsities", type=_ints, default=[3, 6, 10])
    so.add_argument("--budgets", type=_ints, default=None)

    v = add("verify-theory", cmd_verify_theory, "empirical checks of the convergence theorems")
    v.add_argument("--which", default="all", help="all, or a comma list of 1, 2, 3")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seeds", type=int, default=5)
    v.add_argument("--pairs", type=int, default=100_000)
    v.add_argument("--beta-scale", type=float, default=0.5)

    gc = add("grad-check", cmd_grad_check, "analytic vs finite-difference gradients")
    gc.add_argument("--configs", type=int, default=20)
    gc.add_argument("--n", type=int, default=8)
    gc.add_argument("--m", type=int, default=16)
    gc.add_argument("--layers", type=int, default=3)
    gc.add_argument("--tol", type=float, default=1e-4)

    x = add("experiment", cmd_experiment, "generate, train, sweep and report one scenario")
    with_config(x)
    x.add_argument("--dry-run", action="store_true")
    x.add_argument("--dump-config", help="write the resolved config and exit")

    c = add("compare", cmd_compare, "matched-depth comparison of two checkpoints")
    with_config(c)
    c.add_argument("--fixed", required=True)
    c.add_argument("--adaptive", required=True)
    c.add_argument("--dataset", help="test set (default: the config's held-out set)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "threads", None):
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                args.fn(args)
        else:
            args.fn(args)
    except (ex.ConfigError, ParameterError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericDomainError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
