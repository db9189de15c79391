"""Unfolded sparse-recovery networks (LISTA, LISTA-CPSS) with learned adaptive depth,
classic iterative baselines, and empirical checks of their convergence guarantees."""

from .analysis import evaluate, nmse_db, sweep_epsilon
from .checkpoint import load_checkpoint, save_checkpoint
from .halting import infer_adaptive, infer_adaptive_batch, init_halting
from .nets import forward, init_network
from .problems import BatchConfig, gen_matrix, make_batch
from .solvers import ista_solve, oracle_adaptive_pgd, pgd_solve
from .training import TrainConfig, train_fixed_depth, train_two_stage

__version__ = "0.1.0"
