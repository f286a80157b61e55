import numpy as np
import pytest

from green_surrogate.grid import RectDomain, build_grid
from green_surrogate.model import GreenUNet, UNetConfig
from green_surrogate.operator import build_stencil, get_coefficients
from green_surrogate.source import SourceConfig, build_dataset
from green_surrogate.trainer import (
    TrainConfig,
    TrainingDiverged,
    history_to_csv,
    train,
)


def make_problem(n=16, n_train=12, n_val=4, with_train_refs=False, seed=0):
    g = build_grid(RectDomain(-1, -1, 2, 2), n, n)
    c = get_coefficients("laplace")
    cfg = SourceConfig(seed=seed)
    tr = build_dataset(g, c, n_train, cfg, variant=1,
                       with_references=with_train_refs, ref_solver="direct")
    va = build_dataset(g, c, n_val, SourceConfig(seed=seed + 1),
                       variant=1, with_references=True, ref_solver="direct")
    s = build_stencil(g, c)
    net = GreenUNet(UNetConfig(1, 4, 2, n, n), seed=3)
    return g, s, tr, va, net


class TestValidation:
    def test_val_refs_required(self):
        g, s, tr, va, net = make_problem()
        va_norefs = build_dataset(g, get_coefficients("laplace"), 2, SourceConfig(seed=9))
        with pytest.raises(ValueError, match="reference"):
            train(net, s, tr, va_norefs, TrainConfig(epochs=1))

    def test_data_loss_needs_train_refs(self):
        g, s, tr, va, net = make_problem(with_train_refs=False)
        with pytest.raises(ValueError, match="reference"):
            train(net, s, tr, va, TrainConfig(loss="data", epochs=1))

    def test_grid_mismatch(self):
        g, s, tr, va, net = make_problem()
        other = build_stencil(build_grid(RectDomain(-1, -1, 2, 2), 8, 8),
                              get_coefficients("laplace"))
        with pytest.raises(ValueError, match="grid"):
            train(net, other, tr, va, TrainConfig(epochs=1))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(loss="nope")
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestTrainingRuns:
    def test_history_shape_and_schedule(self, tmp_path):
        g, s, tr, va, net = make_problem()
        cfg = TrainConfig(loss="jacobi", k_strategy="adaptive", epochs=3,
                          batch_size=4, seed=1)
        res = train(net, s, tr, va, cfg, out_dir=tmp_path)
        assert [r.epoch for r in res.history] == [1, 2, 3]
        assert res.history[0].k == 40          # adaptive starts at 40
        assert res.history[1].k <= 20          # clamped afterwards
        sweeps = [r.sweeps for r in res.history]
        assert sweeps == sorted(sweeps) and sweeps[0] == 40 * len(tr)
        assert all(np.isfinite(r.val_loss) for r in res.history)
        assert (tmp_path / "history.csv").exists()
        assert (tmp_path / "final.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert res.best_val_loss == min(r.val_loss for r in res.history)

    def test_non_jacobi_losses_report_zero_k(self, tmp_path):
        g, s, tr, va, net = make_problem(with_train_refs=True)
        res = train(net, s, tr, va, TrainConfig(loss="data", epochs=2, seed=2))
        assert all(r.k == 0 and r.sweeps == 0 for r in res.history)

    def test_loss_actually_decreases(self):
        g, s, tr, va, net = make_problem(n=16, n_train=24, n_val=6)
        cfg = TrainConfig(loss="jacobi", k_strategy="constant", k=10,
                          epochs=12, batch_size=6, seed=4)
        res = train(net, s, tr, va, cfg)
        assert res.history[-1].val_loss < res.history[0].val_loss

    def test_divergence_detected(self):
        g, s, tr, va, net = make_problem()
        cfg = TrainConfig(loss="residual", epochs=5, lr=1e40, seed=0)
        with pytest.raises(TrainingDiverged):
            train(net, s, tr, va, cfg)


class TestDeterminism:
    def test_bitwise_repeatable(self, tmp_path):
        outs = []
        for run in ("a", "b"):
            g, s, tr, va, _ = make_problem()
            net = GreenUNet(UNetConfig(1, 4, 2, 16, 16), seed=7)
            cfg = TrainConfig(loss="jacobi", k_strategy="dynamic", epochs=2,
                              batch_size=4, seed=5, deterministic=True)
            train(net, s, tr, va, cfg, out_dir=tmp_path / run)
            outs.append(tmp_path / run)
        a, b = outs
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()

    def test_history_seconds_zeroed_when_deterministic(self, tmp_path):
        g, s, tr, va, net = make_problem()
        res = train(net, s, tr, va, TrainConfig(epochs=1, deterministic=True))
        assert res.history[0].seconds == 0.0
        csv = history_to_csv(res.history)
        assert csv.splitlines()[0] == "epoch,train_loss,val_loss,k,seconds,sweeps"
