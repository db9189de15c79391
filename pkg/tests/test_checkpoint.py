import itertools

import numpy as np
import pytest

from adunfold.checkpoint import load_checkpoint, save_checkpoint
from adunfold.halting import infer_adaptive_batch, init_halting
from adunfold.nets import init_network
from adunfold.problems import FormatError, gen_matrix


@pytest.mark.parametrize("kind,design,shared", list(itertools.product(
    ["lista", "lista_cpss"], ["learned_q", "no_q", "mlp2", None], [True, False])))
def test_round_trip(tmp_path, kind, design, shared):
    A = gen_matrix("gaussian", 4, 7, 1).entries
    net = init_network(kind, A, 3, shared=shared, p_max=0.3)
    rng = np.random.default_rng(0)
    for p in net.params().values():
        p += 0.01 * rng.standard_normal(p.shape)
    hp = None if design is None else init_halting(design, 4, 3, seed=2, h_last=0.03)
    save_checkpoint(tmp_path / "c.ckpt", net, hp)
    net2, hp2 = load_checkpoint(tmp_path / "c.ckpt")
    assert net2.kind == kind and net2.shared == shared and np.array_equal(net2.A, A)
    assert all(np.array_equal(net.params()[k], net2.params()[k]) for k in net.params())
    if design is None:
        assert hp2 is None
    else:
        assert hp2.design == design and hp2.h_last == 0.03
        assert all(np.array_equal(hp.params()[k], hp2.params()[k]) for k in hp.params())
        Y = rng.standard_normal((5, 4))
        a = infer_adaptive_batch(net, hp, Y, 0.2)
        b = infer_adaptive_batch(net2, hp2, Y, 0.2)
        assert np.array_equal(a.estimates, b.estimates)


def test_corrupt_checkpoints(tmp_path):
    A = gen_matrix("gaussian", 3, 5, 1).entries
    save_checkpoint(tmp_path / "c.ckpt", init_network("lista", A, 2), init_halting("no_q", 3, 2))
    raw = (tmp_path / "c.ckpt").read_bytes()
    for bad in (raw[:10], raw[:-3], raw + b"\0", b"XXXX" + raw[4:], raw[:8] + b"\x09" + raw[9:]):
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad.ckpt")
