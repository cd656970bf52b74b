import numpy as np
import pytest

from orthonet.data import synth_blobs
from orthonet.errors import BatchSizeError, TrainingDiverged
from orthonet.linalg import svd
from orthonet.network import Dense, Norm, ReLU, SoftmaxCE, build_network
from orthonet.optim import OrthoConfig, manifold_residual
from orthonet.train import (
    TrainConfig, Trainer, error_percent, evaluate, evaluate_loss, lr_schedule, steps_per_epoch,
    strip_timing, train_loop,
)
from oracles import naive_error_percent


class TestSchedule:
    def test_constant_when_equal(self):
        cfg = TrainConfig(epochs=7, lr_start=0.05, lr_end=0.05)
        assert {lr_schedule(cfg, e) for e in range(7)} == {0.05}

    def test_four_epochs(self):
        cfg = TrainConfig(epochs=4, lr_start=0.1, lr_end=0.001)
        assert [lr_schedule(cfg, e) for e in range(4)] == [0.1, 0.1, 0.001, 0.001]

    def test_long_run_monotone_with_exact_end(self):
        cfg = TrainConfig(epochs=160, lr_start=0.1, lr_end=0.001)
        lrs = [lr_schedule(cfg, e) for e in range(160)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert lrs[0] == 0.1 and lrs[-1] == 0.001

    def test_steps_every_two_epochs(self):
        cfg = TrainConfig(epochs=9, lr_start=1.0, lr_end=1e-4)
        lrs = [lr_schedule(cfg, e) for e in range(9)]
        assert lrs[0] == lrs[1] and lrs[2] == lrs[3] and lrs[1] > lrs[2]
        assert lrs[2] == pytest.approx(0.1) and lrs[-1] == 1e-4

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(TrainConfig(epochs=3), 3)


class TestEvaluate:
    def test_perfect(self):
        labels = np.arange(10)
        assert error_percent(np.eye(10), labels) == 0.0

    def test_constant_logits_tie_to_class_zero(self):
        labels = np.repeat(np.arange(10), 3)
        assert error_percent(np.zeros((30, 10)), labels) == pytest.approx(90.0)

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((200, 7)).round(1)  # rounding forces some ties
        labels = rng.integers(0, 7, 200)
        assert error_percent(logits, labels) == pytest.approx(naive_error_percent(logits, labels))

    def test_loss_and_error(self):
        data = synth_blobs(3, 4, 20, 2.0)
        net, params = build_network([Dense(3), SoftmaxCE()], (4,))
        loss, err = evaluate_loss(net, params, data)
        assert loss > 0 and err == evaluate(net, params, data)


def blob_setup(mode="none", epochs=2, variant="bn", seed=0, **extra):
    train = synth_blobs(3, 8, 40, 3.0, seed=seed)
    test = synth_blobs(3, 8, 40, 3.0, seed=seed, split="test")
    layers = [Dense(16), Norm(variant), ReLU(), Dense(12), ReLU(), Dense(3), SoftmaxCE()]
    net, params = build_network(layers, (8,), seed=seed)
    ortho = OrthoConfig(mode=mode, **extra)
    cfg = TrainConfig(epochs=epochs, batch_size=16, lr_start=0.05, lr_end=0.01, ortho=ortho,
                      seed=seed)
    return net, params, train, test, cfg


class TestTrainer:
    def test_zero_epochs(self):
        net, params, train, test, _ = blob_setup()
        before = params.copy()
        cfg = TrainConfig(epochs=0)
        _, metrics = train_loop(net, params, train, cfg, test)
        assert len(metrics) == 1 and metrics[0]["step"] == 0
        assert all(np.array_equal(before.weights[i], params.weights[i]) for i in params.weights)

    def test_record_schema(self):
        net, params, train, test, cfg = blob_setup(epochs=1)
        _, metrics = train_loop(net, params, train, cfg, test)
        assert set(metrics[-1]) == {"step", "epoch", "lr", "batch_loss", "train_loss",
                                    "train_error", "test_error", "wall_time"}
        assert metrics[-1]["step"] == steps_per_epoch(len(train), 16)

    def test_stiefel_stays_on_manifold(self):
        net, params, train, test, cfg = blob_setup("stiefel", variant="dbn")
        train_loop(net, params, train, cfg, test)
        assert max(manifold_residual(w) for w in params.weights.values()) <= 1e-6

    def test_svb_in_band_after_final_bound(self):
        net, params, train, test, cfg = blob_setup("svb", variant="bbn", epsilon=0.05)
        train_loop(net, params, train, cfg, test)  # default period: one epoch
        for w in params.weights.values():
            s = svd(w).S
            assert s.max() <= 1.05 + 1e-8 and s.min() >= 1 / 1.05 - 1e-8

    @pytest.mark.parametrize("mode", ["none", "svb", "stiefel", "soft", "srip"])
    def test_loss_decreases(self, mode):
        net, params, train, test, cfg = blob_setup(mode, epochs=4)
        _, metrics = train_loop(net, params, train, cfg, test)
        assert metrics[-1]["train_loss"] < metrics[0]["train_loss"]

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            net, params, train, test, cfg = blob_setup("srip", epochs=2)
            runs.append(strip_timing(train_loop(net, params, train, cfg, test)[1]))
        assert runs[0] == runs[1]

    def test_linear_net_separates_easy_blobs(self):
        train = synth_blobs(2, 2, 100, 10.0, seed=3)
        net, params = build_network([Dense(2), SoftmaxCE()], (2,), seed=3)
        cfg = TrainConfig(epochs=20, batch_size=16, lr_start=0.05, lr_end=0.005)
        train_loop(net, params, train, cfg)
        assert evaluate(net, params, train) < 2.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        net, params, train, test, cfg = blob_setup(epochs=3)
        cfg = TrainConfig(epochs=3, batch_size=16, lr_start=1e12, lr_end=1e11, weight_decay=0)
        with pytest.raises(TrainingDiverged):
            train_loop(net, params, train, cfg)

    def test_single_example_batches_rejected_with_norm(self):
        net, params, train, _, _ = blob_setup()
        with pytest.raises(BatchSizeError):
            Trainer(net, params, train, None, TrainConfig(batch_size=1))

    def test_stop_and_continue_matches_full_run(self):
        net, params, train, test, cfg = blob_setup("svb", epochs=4, variant="bbn")
        full = strip_timing(train_loop(net, params, train, cfg, test)[1])
        net, params, train, test, cfg = blob_setup("svb", epochs=4, variant="bbn")
        trainer = Trainer(net, params, train, test, cfg)
        trainer.run(stop_after=2)
        trainer.run()
        assert strip_timing(trainer.metrics) == full


def test_steps_per_epoch_drops_single_tail():
    assert steps_per_epoch(33, 16) == 2 and steps_per_epoch(34, 16) == 3
