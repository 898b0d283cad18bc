import numpy as np
import pytest

from linsplit.data import Dataset, SyntheticSpec, generate_synthetic_3d
from linsplit.errors import NumericError, UsageError
from linsplit.models import ModelConfig, build, default_config
from linsplit.tensor import Tensor
from linsplit.train import (Adam, ProportionTrace, SGDMomentum, TrainConfig, evaluate_top1,
                            export_mask_states, export_trace, read_log, read_trace,
                            trace_from_mask_states, train)

from oracles import force_masks


def scalar(value, grad=None):
    t = Tensor(np.array([value]), requires_grad=True)
    if grad is not None:
        t.grad = np.array([grad])
    return t


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic_3d(SyntheticSpec(200, 0.1, 0, 2.0))


class TestOptimizers:
    def test_zero_gradient_no_change(self):
        p, q = scalar(1.5, 0.0), scalar(-2.0, 0.0)
        SGDMomentum([p], 0.1, 0.9, 0.0).step()
        Adam([q], 0.01).step()
        assert p.data[0] == 1.5 and q.data[0] == -2.0

    def test_sgd_plain(self):
        p = scalar(1.0, 1.0)
        SGDMomentum([p], 0.1, momentum=0.0).step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_sgd_momentum_two_steps(self):
        p = scalar(0.0, 1.0)
        opt = SGDMomentum([p], 0.1, momentum=0.9, weight_decay=0.0)
        opt.step()
        opt.step()
        # buf1 = 1, buf2 = 0.9 + 1
        assert p.data[0] == pytest.approx(-0.1 - 0.19, abs=1e-15)

    def test_sgd_weight_decay(self):
        p = scalar(2.0, 0.0)
        SGDMomentum([p], 0.5, momentum=0.0, weight_decay=0.1).step()
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2, abs=1e-15)

    @pytest.mark.parametrize("g", [3.0, -0.02, 50.0])
    def test_adam_first_step(self, g):
        p = scalar(1.0, g)
        Adam([p], lr=0.001).step()
        # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
        assert p.data[0] == pytest.approx(1.0 - 0.001 * np.sign(g), abs=1e-8)

    def test_adam_two_steps_by_hand(self):
        p = scalar(0.5, 2.0)
        opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
        w, m, v = 0.5, 0.0, 0.0
        for t, g in ((1, 2.0), (2, -1.0)):
            p.grad = np.array([g])
            opt.step()
            g = g + 0.01 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(w, abs=1e-14)

    def test_missing_gradient(self):
        with pytest.raises(UsageError):
            SGDMomentum([scalar(1.0)], 0.1).step()
        with pytest.raises(UsageError):
            Adam([scalar(1.0)]).step()


class TestConfig:
    def test_mask_defaults(self):
        cfg = TrainConfig()
        assert cfg.mask_lr == 0.001 and cfg.mask_weight_decay == 0.0001
        assert (cfg.mask_beta1, cfg.mask_beta2, cfg.mask_eps) == (0.9, 0.999, 1e-8)

    def test_default_schedule(self):
        cfg = TrainConfig(epochs=20)
        assert [cfg.multiplier(e) for e in (0, 9, 10, 14, 15, 19)] == \
            pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


class TestTrain:
    def test_zero_epochs(self, synth):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        before = [p.data.copy() for p in net.parameters()]
        res = train(net, synth, TrainConfig(epochs=0))
        assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))
        assert res.trace.epochs == [0] and res.trace.rows == [[1.0]]

    def test_learns_synthetic(self, synth):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        res = train(net, synth, TrainConfig(epochs=50, seed=0))
        assert evaluate_top1(net, synth) >= 0.99
        assert len(res.trace.rows) == 51
        assert all(0.0 <= v <= 1.0 for row in res.trace.rows for v in row)
        assert np.all(np.isfinite(res.step_losses))

    def test_deterministic(self, synth):
        runs = []
        for _ in range(2):
            net = build(default_config("mlp-m", 3, 2), seed=3)
            runs.append(train(net, synth, TrainConfig(epochs=5, batch_size=8, seed=3)).step_losses)
        assert runs[0] == runs[1]

    def test_nan_aborts(self, synth):
        bad = Dataset(np.where(np.arange(400)[:, None] == 7, np.nan, synth.inputs),
                      synth.labels.copy(), "bad", 2)
        net = build(default_config("mlp-m", 3, 2), seed=0)
        with pytest.raises(NumericError, match="epoch 1, batch"):
            train(net, bad, TrainConfig(epochs=1))

    def test_masks_move(self, synth):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        z0 = net.mask_modules[0].gate_logits().data.copy()
        train(net, synth, TrainConfig(epochs=3, batch_size=8, seed=0))
        assert not np.array_equal(z0, net.mask_modules[0].gate_logits().data)

    def test_frozen_masks_do_not_move(self, synth):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        z0 = net.mask_modules[0].gate_logits().data.copy()
        train(net, synth, TrainConfig(epochs=2, batch_size=16, seed=0, freeze_masks=True))
        assert np.array_equal(z0, net.mask_modules[0].gate_logits().data)

    @pytest.mark.parametrize("kind", ["mlp-m", "convnet-m"])
    def test_zero_mask_lr_matches_baseline(self, kind):
        if kind == "mlp-m":
            data = generate_synthetic_3d(SyntheticSpec(60, 0.2, 1, 2.0))
            cfg = lambda p: default_config("mlp-m", 3, 2, mask_placement=p)
        else:
            rng = np.random.default_rng(0)
            data = Dataset(rng.random((40, 1, 8, 8)), rng.integers(0, 3, 40), "img", 3)
            cfg = lambda p: default_config("convnet-m", 1, 3, widths=(1, 4, 6, 5), mask_placement=p)
        tc = lambda: TrainConfig(epochs=4, batch_size=8, seed=2, mask_lr=0.0, freeze_branches=True)
        masked = train(build(cfg((1,)), seed=2), data, tc())
        base = train(build(cfg(()), seed=2), data, tc())
        diffs = np.abs(np.array(masked.step_losses) - np.array(base.step_losses))
        assert diffs.max() < 1e-12
        assert all(row == [1.0] for row in masked.trace.rows)

    def test_holdout_log(self, synth, tmp_path):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        train(net, synth, TrainConfig(epochs=3), holdout=synth, log_path=tmp_path / "t.log")
        recs = read_log(tmp_path / "t.log")
        assert [(r.epoch, r.split) for r in recs] == [
            (1, "train"), (1, "holdout"), (2, "train"), (2, "holdout"), (3, "train"), (3, "holdout")]
        assert (tmp_path / "t.log").read_text().startswith("epoch,split,loss,top1,lr\n")


class TestEvaluate:
    def test_perfect(self):
        net = build(ModelConfig("mlp-m", (2, 2, 2), (), 2), seed=0)
        for s in net.stages:
            s.block.fc.weight.data = np.eye(2)
        net.classifier.weight.data = np.eye(2)
        x = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
        assert evaluate_top1(net, Dataset(x, np.array([0, 1, 0]), "p", 2)) == 1.0

    def test_ties_go_to_class_zero(self):
        net = build(ModelConfig("mlp-m", (3, 4, 4), (1,), 10), seed=0)
        net.classifier.weight.data[...] = 0
        labels = np.array([0, 0, 3, 9, 5, 0, 1, 2])
        d = Dataset(np.random.default_rng(0).random((8, 3)), labels, "u", 10)
        assert evaluate_top1(net, d) == pytest.approx(3 / 8)

    def test_against_brute_force(self, rng):
        net = build(ModelConfig("mlp-m", (3, 5, 5), (1,), 4), seed=1)
        force_masks(net, rng=rng)
        d = Dataset(rng.standard_normal((37, 3)), rng.integers(0, 4, 37), "r", 4)
        logits = net(d.inputs).data
        hits = 0
        for row, y in zip(logits, d.labels):
            best = 0
            for k in range(1, len(row)):
                if row[k] > row[best]:
                    best = k
            hits += best == y
        assert evaluate_top1(net, d, batch_size=5) == hits / 37


class TestTraceExport:
    def _trace(self):
        t = ProportionTrace(epochs=[0, 1, 2, 3],
                            rows=[[1.0, 1.0], [0.9375, 1.0], [0.875, 0.96875], [0.875, 0.9375]])
        return t

    def test_lines(self, tmp_path):
        export_trace(self._trace(), tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "epoch,module_0,module_1"
        assert len(lines) == 5
        assert lines[1] == "0,1.000000,1.000000"

    def test_round_trip(self, tmp_path):
        t = self._trace()
        export_trace(t, tmp_path / "t.csv")
        back = read_trace(tmp_path / "t.csv")
        assert back.epochs == t.epochs and back.rows == t.rows

    def test_empty(self, tmp_path):
        with pytest.raises(UsageError):
            export_trace(ProportionTrace(), tmp_path / "t.csv")

    def test_two_modules_three_epoch_rows(self, tmp_path, synth):
        # two training epochs plus the pre-training row: three epochs in the trace
        net = build(default_config("mlp-m", 3, 2, widths=(3, 8, 8, 8), mask_placement=(1, 2)), 0)
        res = train(net, synth, TrainConfig(epochs=2))
        export_trace(res.trace, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert res.trace.epochs == [0, 1, 2]
        assert len(lines) == 4 and lines[1] == "0,1.000000,1.000000"

    def test_mask_states_rebuild_trace(self, tmp_path, synth):
        net = build(default_config("mlp-m", 3, 2), seed=0)
        res = train(net, synth, TrainConfig(epochs=4, batch_size=8))
        export_trace(res.trace, tmp_path / "a.csv")
        export_mask_states(res.trace, tmp_path / "m.txt")
        export_trace(trace_from_mask_states(tmp_path / "m.txt"), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        first = (tmp_path / "m.txt").read_text().splitlines()[0].split(" ")
        assert first[:3] == ["0", "0", "16"] and first[4] == "1" * 16
