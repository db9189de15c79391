from pathlib import Path

import pytest

from adunfold.cli import main

TINY = """scenario: synthetic
seed: 3
data: {n: 16, m: 32, s_min: 1, s_max: 4, batch_size: 32}
network: {fixed_depth: 3, max_depth: 4}
train: {fixed_batches: 30, stage1_batches: 15, stage2_batches: 15, plateau_patience: 10}
eval: {samples: 150, val_samples: 80, depth_targets: [1.5, 2.5], cohorts: [1, 4], anchor_depth: 2}
"""


def _csvs(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_experiment_rerun_from_resolved_config_is_bit_identical(tmp_path):
    (tmp_path / "tiny.yaml").write_text(TINY)
    assert main(["experiment", "--config", str(tmp_path / "tiny.yaml"), "--out", str(tmp_path / "a")]) == 0
    resolved = tmp_path / "a" / "resolved_config.yaml"
    assert main(["experiment", "--config", str(resolved), "--out", str(tmp_path / "b")]) == 0
    first, second = _csvs(tmp_path / "a"), _csvs(tmp_path / "b")
    assert len(first) >= 6 and first == second
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_data_train_infer_chain(tmp_path):
    (tmp_path / "tiny.yaml").write_text(TINY)
    cfg = str(tmp_path / "tiny.yaml")
    assert main(["gen-data", "--config", cfg, "--dataset-out", str(tmp_path / "data"), "--split", "test"]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    for name in ("fixed.ckpt", "adaptive.ckpt", "history.csv"):
        assert (tmp_path / "m" / name).exists()
    for cmd in ("infer", "eval"):
        assert main([cmd, "--checkpoint", str(tmp_path / "m" / "adaptive.ckpt"),
                     "--dataset", str(tmp_path / "data"), "--out", str(tmp_path / cmd)]) == 0
    lines = [l for l in (tmp_path / "infer" / "infer.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "sample_id,sparsity,exit_layer,nmse_db,h1,h2,h3,h4" and len(lines) == 33
    assert main(["sweep", "--checkpoint", str(tmp_path / "m" / "adaptive.ckpt"),
                 "--dataset", str(tmp_path / "data"), "--epsilons", "0.5,0.1",
                 "--out", str(tmp_path / "sweep")]) == 0
    assert main(["compare", "--config", cfg, "--fixed", str(tmp_path / "m" / "fixed.ckpt"),
                 "--adaptive", str(tmp_path / "m" / "adaptive.ckpt"), "--out", str(tmp_path / "cmp")]) == 0


@pytest.mark.parametrize("algo", ["ista", "pgd-l1", "pgd-l0", "oracle-pgd"])
def test_solve(tmp_path, algo):
    args = ["solve", "--algo", algo, "--n", "30", "--m", "60", "--s", "3", "--iters", "50",
            "--sparsities", "2,4,6", "--budgets", "30,30,30", "--out", str(tmp_path)]
    assert main(args) == 0
    assert any(tmp_path.glob("*.csv"))


def test_solve_and_grad_check_rerun_identically(tmp_path):
    for d in ("a", "b"):
        assert main(["--seed", "5", "solve", "--algo", "pgd-l1", "--n", "30", "--m", "60",
                     "--out", str(tmp_path / d)]) == 0
        assert main(["grad-check", "--configs", "2", "--out", str(tmp_path / d)]) == 0
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")


def test_exit_codes(tmp_path):
    (tmp_path / "bad.yaml").write_text("scenario: nowhere\ndata: {n: -1}\n")
    assert main(["experiment", "--config", str(tmp_path / "bad.yaml"), "--dry-run"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--dataset", str(tmp_path)]) == 4
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    (tmp_path / "d.adun").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--dataset", str(tmp_path / "d.adun")]) == 4
    assert main(["grad-check", "--configs", "1", "--tol", "1e-300", "--out", str(tmp_path / "g")]) == 3
    with pytest.raises(SystemExit) as err:
        main(["solve", "--algo", "newton"])
    assert err.value.code == 2


def test_dry_run_prints_plan(tmp_path, capsys):
    assert main(["experiment", "--scenario", "mtc_access", "--dry-run", "--out", str(tmp_path / "x")]) == 0
    assert "qpsk_stacked" in capsys.readouterr().out
    assert not (tmp_path / "x").exists()
