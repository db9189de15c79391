import itertools

import numpy as np
import pytest
from scipy.special import expit, logit

from adunfold.halting import (HaltingParams, halting_score, infer_adaptive, infer_adaptive_batch,
                              init_halting, score_trace)
from adunfold.nets import forward, init_network
from adunfold.problems import DimensionError, ParameterError, gen_matrix
from adunfold.training import optimal_score

N, M = 4, 8


def _controlled(levels, h_last=0.01):
    """Network plus halting branch whose scores at y = 0 are exactly sigma(psi_t)."""
    L = len(levels) + 1
    A = gen_matrix("gaussian", N, M, 0).entries
    net = init_network("lista", A, L)
    hp = init_halting("no_q", N, L, psi=0.0, h_last=h_last)
    hp.psi[:-1] = logit(np.asarray(levels, dtype=float))
    return net, hp, expit(hp.psi[:-1]).tolist() + [h_last]


def _expected_exit(scores, eps):
    hits = [t for t, h in enumerate(scores, 1) if h <= eps]
    return hits[0] if hits else len(scores)


def test_exit_layer_is_first_score_at_or_below_epsilon_exhaustive():
    grid = [0.02, 0.1, 0.4, 0.8]
    for levels in itertools.product(grid, repeat=3):
        net, hp, scores = _controlled(levels, h_last=0.05)
        for eps in sorted(set(scores) | {0.01, 0.03, 0.2, 0.5, 0.99}):
            probe = []
            out = infer_adaptive(net, hp, np.zeros(N), eps, probe=probe)
            T = _expected_exit(scores, eps)
            assert out.exit_layer == T
            # the layer-execution counter: exactly layers 1..T ran
            assert probe == list(range(1, T + 1))
            assert out.halted_early == (T < net.depth)
            assert len(out.scores) == T
            if out.halted_early:
                assert all(h > eps for h in out.scores[:-1])
            batch = infer_adaptive_batch(net, hp, np.zeros((3, N)), eps)
            assert np.all(batch.exit_layers == T) and batch.layers_executed == 3 * T


def test_all_scores_above_epsilon_falls_back_to_last_layer():
    net, hp, _ = _controlled([0.9, 0.9, 0.9], h_last=0.5)
    probe = []
    out = infer_adaptive(net, hp, np.zeros(N), 0.1, probe=probe)
    assert out.exit_layer == 4 and not out.halted_early and probe == [1, 2, 3, 4]


def test_quoted_score_sequence_exits_at_three():
    net, hp, _ = _controlled([0.8, 0.4, 0.09, 0.5])
    assert infer_adaptive(net, hp, np.zeros(N), 0.1).exit_layer == 3


def test_epsilon_guidance_from_optimal_score():
    assert abs(optimal_score(1e-4, 1.0) - 0.01) < 1e-15


def test_score_examples():
    hp = init_halting("learned_q", 2, 3)
    assert halting_score(hp, 1, np.zeros(2)) == 0.5
    hp.psi[0] = -4.0
    assert halting_score(hp, 1, np.array([2.0, 0.0])) == 0.5
    hp = init_halting("no_q", 2, 3)
    hp.psi[1] = -4.0
    assert halting_score(hp, 2, np.array([0.0, 2.0])) == 0.5
    assert halting_score(hp, 3, np.array([5.0, 5.0])) == hp.h_last


def test_mlp2_score_matches_direct_formula(rng):
    hp = init_halting("mlp2", 3, 2, seed=4)
    r = rng.standard_normal(3)
    direct = expit(hp.mlp_w2[0] @ np.maximum(hp.mlp_W1[0] @ r + hp.mlp_b1[0], 0) + hp.mlp_b2[0])
    assert abs(halting_score(hp, 1, r) - direct) < 1e-15


def test_score_increases_with_residual_energy(rng):
    hp = init_halting("learned_q", 4, 3)
    hp.Q = rng.standard_normal((4, 4))
    hp.psi[:] = -3
    r = rng.standard_normal(4)
    r /= np.linalg.norm(hp.Q @ r)  # keep the logit away from saturation
    vals = [halting_score(hp, 1, c * r) for c in (0.0, 0.3, 0.6, 1.0, 1.5)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_single_layer_score_is_h_last():
    A = gen_matrix("gaussian", N, M, 0).entries
    net = init_network("lista", A, 1)
    hp = init_halting("learned_q", N, 1, h_last=0.02)
    _, scores = score_trace(net, hp, np.ones(N))
    assert scores.tolist() == [0.02]


def test_tiny_epsilon_matches_full_forward(rng):
    A = gen_matrix("gaussian", N, M, 0).entries
    net = init_network("lista_cpss", A, 5, p_max=0.25)
    hp = init_halting("mlp2", N, 5, seed=1)
    Y = rng.standard_normal((6, N))
    out = infer_adaptive_batch(net, hp, Y, 1e-300)
    assert np.array_equal(out.estimates, forward(net, Y).layer_outputs[-1])
    assert np.all(out.exit_layers == 5)


def test_batch_and_single_inference_agree(rng):
    A = gen_matrix("gaussian", N, M, 0).entries
    net = init_network("lista", A, 6)
    hp = init_halting("learned_q", N, 6)
    hp.psi[:] = -2
    Y = rng.standard_normal((20, N))
    batch = infer_adaptive_batch(net, hp, Y, 0.3)
    for i in range(20):
        single = infer_adaptive(net, hp, Y[i], 0.3)
        assert single.exit_layer == batch.exit_layers[i]
        assert np.allclose(single.estimate, batch.estimates[i], atol=1e-14)
    assert batch.layers_executed == int(batch.exit_layers.sum())


def test_validation():
    hp = init_halting("learned_q", 2, 3)
    with pytest.raises(ParameterError):
        halting_score(hp, 0, np.zeros(2))
    with pytest.raises(ParameterError):
        halting_score(hp, 4, np.zeros(2))
    with pytest.raises(DimensionError):
        halting_score(hp, 1, np.zeros(3))
    with pytest.raises(ParameterError):
        init_halting("lstm", 2, 3)
    with pytest.raises(ParameterError):
        HaltingParams("no_q", 3, 2, np.ones(3), np.zeros(3), h_last=1.0)
    A = gen_matrix("gaussian", 2, 4, 0).entries
    with pytest.raises(ParameterError):
        infer_adaptive(init_network("lista", A, 3), hp, np.zeros(2), 0.0)
